//! Finite-difference checks of every training objective.
//!
//! Contrastive and distillation terms are checked with the embeddings as
//! leaves. The recognition loss and the full combined objective are checked
//! against every parameter of a small model. Teacher inputs always enter as
//! constants and must come out of `backward` without a gradient.

use coconut_autodiff::gradcheck::relative_error;
use coconut_autodiff::{grad_check, par, GradCheckReport, Graph, Tensor, Var};
use serde::Serialize;

use crate::embedding::{encode_audio, AudioBatch, Model, ModelDims};
use crate::error::{Error, Result};
use crate::harness::{batch_loss, split_tasks, MiniBatch, PseudoTable, Strategy, StrategyConfig};
use crate::losses::{
    feature_kd_loss, mm_loss, nspt_loss, scl_loss, BatchIndexSets, LossConfig, NsptInputs, NsptVariant, Temperature,
};
use crate::rng::{self, Rng};
use crate::seq2seq::{asr_cross_entropy, TokenSequence, BOS};
use crate::synth::{generate_corpus, CorpusSpec, FeatureSequence};

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SuiteConfig {
    pub batches: usize,
    pub h: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            batches: 20,
            h: 1e-4,
            tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub loss: String,
    pub batches: usize,
    pub worst_rel_error: f64,
    pub probes: usize,
    /// Probes straddling a ReLU kink, excluded from the comparison.
    pub skipped: usize,
    pub teacher_grad_absent: bool,
    pub passed: bool,
}

/// Running maximum over batches.
#[derive(Default)]
struct Tally {
    worst: f64,
    probes: usize,
    skipped: usize,
}

impl Tally {
    fn add(&mut self, worst: f64, probes: usize, skipped: usize) {
        self.worst = self.worst.max(worst);
        self.probes += probes;
        self.skipped += skipped;
    }

    fn report(&mut self, r: &GradCheckReport, params: &[Tensor]) {
        self.add(r.worst(), params.iter().map(Tensor::numel).sum(), r.skipped);
    }
}

/// Most probes that may straddle a kink before the check counts as failed.
const MAX_SKIPPED_FRACTION: f64 = 0.01;

const DIM: usize = 5;
const CLASSES: usize = 3;

fn gaussian(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng::normal(rng)).collect()).expect("shape matches data")
}

/// Rows `SCALE · (center + SPREAD · N(0, I))`. After normalization the
/// pairwise logits at `τ = 0.1` span a few units, and the raw norm keeps the
/// curvature of the normalization small against `h = 1e-4`.
fn clustered(rng: &mut Rng, center: &[f64], rows: usize) -> Tensor {
    const SCALE: f64 = 10.0;
    const SPREAD: f64 = 0.25;
    let data = (0..rows)
        .flat_map(|_| {
            center
                .iter()
                .map(|c| SCALE * (c + SPREAD * rng::normal(rng)))
                .collect::<Vec<_>>()
        })
        .collect();
    Tensor::matrix(rows, center.len(), data).expect("shape matches data")
}

fn center(rng: &mut Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..DIM).map(|_| rng::normal(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Random batch of 2–12 rows with labels and a current/rehearsal split
/// holding at least one row of each.
fn random_batch(rng: &mut Rng) -> (usize, Vec<usize>, BatchIndexSets) {
    let n = rng::int_inclusive(rng, 2, 12);
    let labels: Vec<usize> = (0..n).map(|_| rng::below(rng, CLASSES)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    rng::shuffle(rng, &mut order);
    let n_r = rng::int_inclusive(rng, 1, n - 1);
    let mut rehearsal = order[..n_r].to_vec();
    let mut current = order[n_r..].to_vec();
    rehearsal.sort_unstable();
    current.sort_unstable();
    (n, labels, BatchIndexSets { current, rehearsal })
}

/// Backward through `f` with `teacher` as constants; true when none of them
/// received a gradient.
fn teacher_untouched(
    students: &[Tensor],
    teachers: &[Tensor],
    f: impl Fn(&mut Graph, &[Var], &[Var]) -> Result<Var>,
) -> Result<bool> {
    let mut g = Graph::new();
    let s: Vec<Var> = students.iter().map(|t| g.leaf(t.clone())).collect();
    let t: Vec<Var> = teachers.iter().map(|x| g.constant(x.clone())).collect();
    let loss = f(&mut g, &s, &t)?;
    g.backward(loss)?;
    Ok(t.iter().all(|&v| g.grad(v).is_none() && !g.requires_grad(v)))
}

/// [`grad_check`] over a closure returning this crate's errors.
fn fd_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync + Send,
{
    let wrapped =
        |g: &mut Graph, v: &[Var]| f(g, v).map_err(|e| coconut_autodiff::Error::InvalidArgument(e.to_string()));
    Ok(grad_check(wrapped, params, h, tol)?)
}

fn normalized(g: &mut Graph, v: Var) -> Result<Var> {
    Ok(g.l2_normalize_rows(v)?)
}

fn entry(loss: &str, batches: usize, t: Tally, teacher_ok: bool, tol: f64) -> SuiteEntry {
    SuiteEntry {
        loss: loss.into(),
        batches,
        worst_rel_error: t.worst,
        probes: t.probes,
        skipped: t.skipped,
        teacher_grad_absent: teacher_ok,
        passed: t.worst < tol && teacher_ok && (t.skipped as f64) <= MAX_SKIPPED_FRACTION * t.probes as f64,
    }
}

fn check_scl(cfg: &SuiteConfig, rng: &mut Rng) -> Result<SuiteEntry> {
    let mut tally = Tally::default();
    for b in 0..cfg.batches {
        let (n, labels, _) = random_batch(rng);
        let include_self = b % 2 == 0;
        let c = center(rng);
        let z = clustered(rng, &c, n);
        let r = fd_check(
            |g, v| {
                let z = normalized(g, v[0])?;
                scl_loss(g, z, &labels, 0.1, include_self)
            },
            std::slice::from_ref(&z),
            cfg.h,
            cfg.tol,
        )?;
        tally.report(&r, &[z]);
    }
    Ok(entry("scl", cfg.batches, tally, true, cfg.tol))
}

fn check_nspt(cfg: &SuiteConfig, variant: NsptVariant, rng: &mut Rng) -> Result<SuiteEntry> {
    let mut tally = Tally::default();
    let mut teacher_ok = true;
    for b in 0..cfg.batches {
        let (n, labels, idx) = random_batch(rng);
        let loss_cfg = LossConfig {
            nspt_variant: variant,
            include_self_in_denominator: b % 2 == 0,
            ..LossConfig::default()
        };
        let c = center(rng);
        let students = [clustered(rng, &c, n), clustered(rng, &c, n)];
        let teachers = [clustered(rng, &c, n), clustered(rng, &c, n)];
        let f = |g: &mut Graph, s: &[Var], t: &[Var]| -> Result<Var> {
            let x = NsptInputs {
                student_a: normalized(g, s[0])?,
                student_t: normalized(g, s[1])?,
                teacher_a: normalized(g, t[0])?,
                teacher_t: normalized(g, t[1])?,
            };
            nspt_loss(g, &x, &labels, &idx, &loss_cfg)
        };
        let r = fd_check(
            |g, v| {
                let t: Vec<Var> = teachers.iter().map(|x| g.constant(x.clone())).collect();
                f(g, v, &t)
            },
            &students,
            cfg.h,
            cfg.tol,
        )?;
        tally.report(&r, &students);
        teacher_ok &= teacher_untouched(&students, &teachers, f)?;
    }
    Ok(entry(
        &format!("nspt[{}]", variant.name()),
        cfg.batches,
        tally,
        teacher_ok,
        cfg.tol,
    ))
}

fn check_mm(cfg: &SuiteConfig, learnable: bool, rng: &mut Rng) -> Result<SuiteEntry> {
    let mut tally = Tally::default();
    for b in 0..cfg.batches {
        let (n, labels, idx) = random_batch(rng);
        let loss_cfg = LossConfig {
            include_self_in_denominator: b % 2 == 0,
            mm_exclude_rehearsal_anchors: b % 3 != 0,
            ..LossConfig::default()
        };
        let c = center(rng);
        let mut params = vec![clustered(rng, &c, n), clustered(rng, &c, n)];
        if learnable {
            params.push(Tensor::scalar((0.07f64).ln() + 0.2 * rng::normal(rng)));
        }
        let r = fd_check(
            |g, v| {
                let a = normalized(g, v[0])?;
                let t = normalized(g, v[1])?;
                let tau = if learnable {
                    Temperature::LogParam(v[2])
                } else {
                    Temperature::Fixed(loss_cfg.tau)
                };
                mm_loss(g, a, t, &labels, &idx, &loss_cfg, tau)
            },
            &params,
            cfg.h,
            cfg.tol,
        )?;
        tally.report(&r, &params);
    }
    let name = if learnable { "mm[learnable-tau]" } else { "mm" };
    Ok(entry(name, cfg.batches, tally, true, cfg.tol))
}

fn check_feature_kd(cfg: &SuiteConfig, name: &str, rng: &mut Rng) -> Result<SuiteEntry> {
    let mut tally = Tally::default();
    let mut teacher_ok = true;
    for _ in 0..cfg.batches {
        let (n, _, idx) = random_batch(rng);
        let students = [gaussian(rng, n, DIM)];
        let teachers = [gaussian(rng, n, DIM)];
        let f = |g: &mut Graph, s: &[Var], t: &[Var]| feature_kd_loss(g, s[0], t[0], &idx.rehearsal);
        let r = fd_check(
            |g, v| {
                let t = g.constant(teachers[0].clone());
                f(g, v, &[t])
            },
            &students,
            cfg.h,
            cfg.tol,
        )?;
        tally.report(&r, &students);
        teacher_ok &= teacher_untouched(&students, &teachers, f)?;
    }
    Ok(entry(name, cfg.batches, tally, teacher_ok, cfg.tol))
}

/// Smallest `|x|` a ReLU input may have at a checked point.
const KINK_MARGIN: f64 = 1e-3;

/// Backprop against central differences over every parameter of `model`.
/// Returns the largest relative error, the probe count, and the probes
/// skipped for straddling a ReLU kink; `None` when some ReLU input lies
/// within `KINK_MARGIN` of zero, where the point should be redrawn.
pub fn model_grad_check<F>(model: &Model, f: F, h: f64) -> Result<Option<(f64, usize, usize)>>
where
    F: Fn(&mut Graph, &Model) -> Result<Var> + Sync,
{
    let mut g = Graph::new();
    let loss = f(&mut g, model)?;
    if g.relu_margin() < KINK_MARGIN {
        return Ok(None);
    }
    let pattern = g.relu_pattern();
    g.backward(loss)?;
    let mut store = model.params.clone();
    store.zero_grad();
    g.accumulate_param_grads(&mut store);
    let probes: Vec<(coconut_autodiff::ParamId, usize)> = store
        .iter()
        .flat_map(|(id, p)| (0..p.value.numel()).map(move |e| (id, e)))
        .collect();
    let eval = |m: &Model| -> Result<(f64, bool)> {
        let mut g = Graph::no_grad();
        let l = f(&mut g, m)?;
        Ok((g.value(l).item()?, g.relu_pattern() == pattern))
    };
    let errors = par::map(&probes, |&(id, e)| -> Result<Option<f64>> {
        let mut m = model.clone();
        let x = m.params.value(id).data()[e];
        m.params.get_mut(id).value.data_mut()[e] = x + h;
        let (fp, same_p) = eval(&m)?;
        m.params.get_mut(id).value.data_mut()[e] = x - h;
        let (fm, same_m) = eval(&m)?;
        let numeric = (fp - fm) / (2.0 * h);
        Ok((same_p && same_m).then(|| relative_error(store.get(id).grad.data()[e], numeric)))
    });
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for e in errors {
        match e? {
            Some(r) => worst = worst.max(r),
            None => skipped += 1,
        }
    }
    Ok(Some((worst, probes.len(), skipped)))
}

/// Draws until `batches` points were accepted, giving up after 20 tries per
/// batch.
fn accepted_batches(batches: usize, mut draw: impl FnMut() -> Result<bool>) -> Result<()> {
    let mut done = 0;
    for _ in 0..20 * batches {
        if done == batches {
            return Ok(());
        }
        if draw()? {
            done += 1;
        }
    }
    if done == batches {
        Ok(())
    } else {
        Err(Error::Invariant(format!(
            "only {done} of {batches} draws avoided every ReLU kink"
        )))
    }
}

fn tiny_dims(vocab: usize, max_tokens: usize, max_frames: usize, d_in: usize) -> ModelDims {
    ModelDims {
        d_in,
        d_a: 4,
        d_t: 4,
        d_s: 3,
        d_hidden: 5,
        vocab,
        max_tokens,
        max_frames,
    }
}

/// A model at a generic point: every parameter moved off its initial value,
/// biases by enough that projected rows sit well away from the origin.
fn random_model(dims: ModelDims, rng: &mut Rng) -> Result<Model> {
    let mut m = Model::init(dims, rng)?;
    for p in m.params.iter_mut() {
        let is_bias = p.value.rows() == 1 && p.name.rsplit('.').next().is_some_and(|n| n.starts_with('b'));
        let std = if is_bias { 0.5 } else { 0.05 };
        for x in p.value.data_mut() {
            *x += std * rng::normal(rng);
        }
    }
    Ok(m)
}

fn check_asr(cfg: &SuiteConfig, rng: &mut Rng) -> Result<SuiteEntry> {
    const VOCAB: usize = 8;
    const MAX_LEN: usize = 3;
    const MAX_FRAMES: usize = 5;
    let mut tally = Tally::default();
    accepted_batches(cfg.batches, || {
        let model = random_model(tiny_dims(VOCAB, MAX_LEN + 1, MAX_FRAMES, 3), rng)?;
        let n = rng::int_inclusive(rng, 1, 4);
        let audio: Vec<FeatureSequence> = (0..n)
            .map(|_| {
                let u = rng::int_inclusive(rng, 1, MAX_FRAMES);
                FeatureSequence::new(u, 3, (0..u * 3).map(|_| rng::normal(rng)).collect())
            })
            .collect::<Result<_>>()?;
        let targets: Vec<TokenSequence> = (0..n)
            .map(|_| {
                let len = rng::int_inclusive(rng, 1, MAX_LEN);
                TokenSequence((0..len).map(|_| BOS + 1 + rng::below(rng, VOCAB - BOS - 1)).collect())
            })
            .collect();
        let refs: Vec<&FeatureSequence> = audio.iter().collect();
        let batch = AudioBatch::new(&refs)?;
        let trefs: Vec<&TokenSequence> = targets.iter().collect();
        let checked = model_grad_check(
            &model,
            |g, m| {
                let h = encode_audio(g, m, &batch)?;
                asr_cross_entropy(g, m, h, batch.lengths(), &trefs)
            },
            cfg.h,
        )?;
        Ok(checked
            .map(|(worst, probes, skipped)| tally.add(worst, probes, skipped))
            .is_some())
    })?;
    Ok(entry("asr", cfg.batches, tally, true, cfg.tol))
}

/// The full per-step objective of every strategy on a small corpus, with a
/// perturbed copy of the model as teacher.
fn check_combined(cfg: &SuiteConfig, strategy: Strategy, rng: &mut Rng) -> Result<SuiteEntry> {
    let spec = CorpusSpec {
        num_intents: 4,
        class_sizes: Some(vec![6; 4]),
        slot_concepts: vec![2, 2],
        synonyms: 1,
        min_slots: 1,
        max_slots: 2,
        d_in: 3,
        frames_per_word: 2,
        seed: cfg.seed,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec)?;
    let tasks = split_tasks(&corpus, 2)?;
    let dims = tiny_dims(
        corpus.vocab.len(),
        corpus.max_transcript_len() + 1,
        corpus.max_frames(),
        corpus.d_in(),
    );
    // The contrastive terms are validated at τ = 0.1 above; here τ = 1 keeps
    // third derivatives small so the check isolates the wiring.
    let mut scfg = StrategyConfig {
        strategy,
        ..StrategyConfig::default()
    };
    scfg.loss.tau = 1.0;
    let mut tally = Tally::default();
    let mut teacher_ok = true;
    accepted_batches(cfg.batches, || {
        let model = random_model(dims.clone(), rng)?;
        let teacher = random_model(dims.clone(), rng)?.snapshot(0);
        let hash = teacher.hash();
        let n_c = rng::int_inclusive(rng, 1, 4);
        let n_r = rng::int_inclusive(rng, 1, 3);
        let mut ids: Vec<usize> = (0..n_c)
            .map(|_| tasks.train[1][rng::below(rng, tasks.train[1].len())])
            .collect();
        ids.extend((0..n_r).map(|_| tasks.train[0][rng::below(rng, tasks.train[0].len())]));
        let batch = MiniBatch {
            idx: BatchIndexSets {
                current: (0..n_c).collect(),
                rehearsal: (n_c..n_c + n_r).collect(),
            },
            ids,
        };
        let audio: Vec<FeatureSequence> = batch.ids.iter().map(|&id| corpus.examples[id].audio.clone()).collect();
        let pseudo = PseudoTable::new();
        let checked = model_grad_check(
            &model,
            |g, m| Ok(batch_loss(g, m, Some(&teacher), &corpus, &batch, &audio, &pseudo, &scfg, 0.5)?.total),
            cfg.h,
        )?;
        teacher_ok &= teacher.hash() == hash;
        Ok(checked
            .map(|(worst, probes, skipped)| tally.add(worst, probes, skipped))
            .is_some())
    })?;
    Ok(entry(
        &format!("combined[{}]", strategy.name()),
        cfg.batches,
        tally,
        teacher_ok,
        cfg.tol,
    ))
}

/// Runs every check. Each loss draws from its own stream of `cfg.seed`.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<SuiteEntry>> {
    if cfg.batches == 0 {
        return Err(Error::InvalidArgument("the suite needs at least one batch".into()));
    }
    let stream = |k: u64| rng::stream(cfg.seed, 0x6772_6164_0000 + k);
    let mut out = vec![check_asr(cfg, &mut stream(0))?, check_scl(cfg, &mut stream(1))?];
    for (k, v) in NsptVariant::ALL.into_iter().enumerate() {
        out.push(check_nspt(cfg, v, &mut stream(2 + k as u64))?);
    }
    out.push(check_mm(cfg, false, &mut stream(10))?);
    out.push(check_mm(cfg, true, &mut stream(11))?);
    out.push(check_feature_kd(cfg, "a-kd", &mut stream(12))?);
    out.push(check_feature_kd(cfg, "t-kd", &mut stream(13))?);
    for (k, s) in [Strategy::Coconut, Strategy::Akd, Strategy::Tkd]
        .into_iter()
        .enumerate()
    {
        out.push(check_combined(cfg, s, &mut stream(20 + k as u64))?);
    }
    Ok(out)
}
