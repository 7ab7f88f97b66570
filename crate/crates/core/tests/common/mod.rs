//! Brute-force re-implementations shared by the oracle and acceptance tests.

#![allow(dead_code, clippy::needless_range_loop)]

use coconut_autodiff::{Graph, Tensor};
use coconut_core::embedding::{Model, ModelDims};
use coconut_core::harness::select_herding;
use coconut_core::losses::{
    mm_loss, nspt_loss, scl_loss, BatchIndexSets, LossConfig, NsptInputs, NsptVariant, Temperature,
};
use coconut_core::metrics::wer;
use coconut_core::rng::{self, stream, Rng};
use coconut_core::seq2seq::{decode, sequence_log_probs, TokenSequence, BOS, EOS, PAD};
use coconut_core::synth::FeatureSequence;

pub type Rows = Vec<Vec<f64>>;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn unit_rows(r: &mut Rng, n: usize, d: usize) -> Rows {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng::normal(r)).collect();
            let norm = dot(&v, &v).sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

pub fn leaf(g: &mut Graph, rows: &Rows) -> coconut_autodiff::Var {
    g.leaf(Tensor::from_rows(rows).unwrap())
}

pub struct Batch {
    pub labels: Vec<usize>,
    pub current: Vec<usize>,
    pub rehearsal: Vec<usize>,
}

impl Batch {
    pub fn random(r: &mut Rng) -> Self {
        let n = rng::int_inclusive(r, 2, 12);
        let labels = (0..n).map(|_| rng::below(r, 3)).collect();
        let (mut current, mut rehearsal) = (Vec::new(), Vec::new());
        for i in 0..n {
            if rng::uniform(r) < 0.5 {
                current.push(i);
            } else {
                rehearsal.push(i);
            }
        }
        Self {
            labels,
            current,
            rehearsal,
        }
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn all(&self) -> Vec<usize> {
        (0..self.n()).collect()
    }

    pub fn idx(&self) -> BatchIndexSets {
        BatchIndexSets::new(self.current.clone(), self.rehearsal.clone(), self.n()).unwrap()
    }
}

/// `Σ_k −1/|P(k)| Σ_p log(exp(s_k·pos_p/τ) / Σ_{(e,i) ∈ den} exp(s_k·e_i/τ))`,
/// with column `k` dropped from every block when `exclude_self`.
pub fn naive_contrast(
    anchor: &Rows,
    anchors: &[usize],
    positives: impl Fn(usize) -> Vec<usize>,
    pos: &Rows,
    den: &[(&Rows, Vec<usize>)],
    exclude_self: bool,
    tau: f64,
) -> f64 {
    let mut total = 0.0;
    for &k in anchors {
        let ps = positives(k);
        let mut z = 0.0;
        let mut cols = 0;
        for (e, block) in den {
            for &i in block {
                if exclude_self && i == k {
                    continue;
                }
                z += (dot(&anchor[k], &e[i]) / tau).exp();
                cols += 1;
            }
        }
        if ps.is_empty() || cols == 0 {
            continue;
        }
        let mut s = 0.0;
        for &p in &ps {
            s += ((dot(&anchor[k], &pos[p]) / tau).exp() / z).ln();
        }
        total -= s / ps.len() as f64;
    }
    total
}

pub fn same_label(labels: &[usize], pool: &[usize], k: usize, with_k: bool) -> Vec<usize> {
    pool.iter()
        .copied()
        .filter(|&p| labels[p] == labels[k] && (with_k || p != k))
        .collect()
}

pub fn naive_scl(z: &Rows, labels: &[usize], tau: f64, include_self: bool) -> f64 {
    let all: Vec<usize> = (0..z.len()).collect();
    naive_contrast(
        z,
        &all,
        |k| same_label(labels, &all, k, false),
        z,
        &[(z, all.clone())],
        !include_self,
        tau,
    )
}

pub struct Four {
    pub sa: Rows,
    pub ta: Rows,
    pub st: Rows,
    pub tt: Rows,
}

pub fn naive_nspt(x: &Four, b: &Batch, cfg: &LossConfig) -> f64 {
    if b.rehearsal.is_empty() {
        return 0.0;
    }
    let all = b.all();
    let pool = if cfg.nspt_variant == NsptVariant::NsptAa {
        all.clone()
    } else {
        b.rehearsal.clone()
    };
    let term = |s: &Rows, t: &Rows| {
        let den: Vec<(&Rows, Vec<usize>)> = match cfg.nspt_variant {
            NsptVariant::Nspt | NsptVariant::NsptAa => vec![(s, all.clone())],
            NsptVariant::Ntpt => vec![(t, all.clone())],
            NsptVariant::NsptAn => vec![(s, b.current.clone()), (t, b.rehearsal.clone())],
        };
        naive_contrast(
            s,
            &pool,
            |k| same_label(&b.labels, &pool, k, true),
            t,
            &den,
            !cfg.include_self_in_denominator,
            cfg.tau,
        )
    };
    let mut total = 0.0;
    if cfg.nspt_audio {
        total += term(&x.sa, &x.ta);
    }
    if cfg.nspt_text {
        total += term(&x.st, &x.tt);
    }
    total
}

pub fn naive_mm(a: &Rows, t: &Rows, b: &Batch, cfg: &LossConfig, tau: f64) -> f64 {
    let all = b.all();
    let anchors = if cfg.mm_exclude_rehearsal_anchors {
        b.current.clone()
    } else {
        all.clone()
    };
    let inc = cfg.include_self_in_denominator;
    let p = |k: usize| same_label(&b.labels, &all, k, inc);
    naive_contrast(a, &anchors, p, t, &[(t, all.clone())], !inc, tau)
        + naive_contrast(t, &anchors, p, a, &[(a, all.clone())], !inc, tau)
}

pub fn value(g: &Graph, v: coconut_autodiff::Var) -> f64 {
    g.value(v).item().unwrap()
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * (1.0 + b.abs())
}

/// At each step, recompute the exemplar mean of every extension from
/// scratch and keep the closest; the lowest id wins ties.
pub fn herding_oracle(ids: &[usize], e: &Rows, m: usize) -> Vec<usize> {
    let n = ids.len();
    let d = e[0].len();
    let mu: Vec<f64> = (0..d).map(|c| e.iter().map(|x| x[c]).sum::<f64>() / n as f64).collect();
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..m.min(n) {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if chosen.contains(&i) {
                continue;
            }
            let set: Vec<usize> = chosen.iter().copied().chain([i]).collect();
            let dist: f64 = (0..d)
                .map(|c| {
                    let mean = set.iter().map(|&j| e[j][c]).sum::<f64>() / set.len() as f64;
                    (mu[c] - mean).powi(2)
                })
                .sum();
            let better = match best {
                None => true,
                Some((bd, _, bid)) => {
                    let eps = 1e-12 * (1.0 + bd);
                    dist < bd - eps || ((dist - bd).abs() <= eps && ids[i] < bid)
                }
            };
            if better {
                best = Some((dist, i, ids[i]));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen.into_iter().map(|i| ids[i]).collect()
}

/// Full-table Levenshtein distance.
pub fn dp_edits(a: &[usize], b: &[usize]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in t.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        t[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = t[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            t[i][j] = sub.min(t[i - 1][j] + 1).min(t[i][j - 1] + 1);
        }
    }
    t[a.len()][b.len()]
}

pub fn toy_model(r: &mut Rng, vocab: usize, max_tokens: usize) -> Model {
    let dims = ModelDims {
        d_in: 3,
        d_a: 4,
        d_t: 4,
        d_s: 2,
        d_hidden: 6,
        vocab,
        max_tokens,
        max_frames: 5,
    };
    let mut m = Model::init(dims, r).unwrap();
    // sharpen the output distribution so the argmax is not a coin flip
    let id = m.params.id("decoder.wout").unwrap();
    for w in m.params.get_mut(id).value.data_mut() {
        *w *= 3.0;
    }
    m
}

/// Every `EOS`-terminated sequence of at most `max_len` tokens, plus every
/// unterminated one of exactly `max_len`, scored by teacher forcing.
pub fn exhaustive_best(m: &Model, x: &FeatureSequence, max_len: usize) -> (Vec<usize>, f64, f64) {
    let allowed: Vec<usize> = (0..m.dims.vocab)
        .filter(|&t| t != PAD && t != BOS && t != EOS)
        .collect();
    let mut scored: Vec<(f64, Vec<usize>)> = Vec::new();
    let mut prefixes: Vec<Vec<usize>> = vec![Vec::new()];
    for len in 0..max_len {
        for p in &prefixes {
            let lp = sequence_log_probs(m, x, &TokenSequence(p.clone())).unwrap();
            let mut s = p.clone();
            s.push(EOS);
            scored.push((lp.iter().sum(), s));
        }
        prefixes = prefixes
            .iter()
            .flat_map(|p| {
                allowed.iter().map(move |&t| {
                    let mut q = p.clone();
                    q.push(t);
                    q
                })
            })
            .collect();
        if len + 1 == max_len {
            for p in &prefixes {
                let lp = sequence_log_probs(m, x, &TokenSequence(p.clone())).unwrap();
                scored.push((lp[..max_len].iter().sum(), p.clone()));
            }
        }
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
    let (best, seq) = scored[0].clone();
    (seq, best, scored[1].0)
}

/// Library vs double loop on `cases` random batches, both denominator modes.
pub fn check_scl(seed: u64, cases: usize) -> Result<f64, String> {
    let mut r = stream(seed, 0);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let b = Batch::random(&mut r);
        let z = unit_rows(&mut r, b.n(), 4);
        let tau = [0.05, 0.1, 0.5][case % 3];
        for include_self in [true, false] {
            let mut g = Graph::new();
            let zv = leaf(&mut g, &z);
            let l = scl_loss(&mut g, zv, &b.labels, tau, include_self).map_err(|e| e.to_string())?;
            let got = value(&g, l);
            let want = naive_scl(&z, &b.labels, tau, include_self);
            worst = worst.max((got - want).abs());
            if !close(got, want) {
                return Err(format!("scl case {case}: {got} vs {want}"));
            }
        }
    }
    Ok(worst)
}

/// Every variant, both denominator modes and each single-modality toggle.
pub fn check_nspt(seed: u64, cases: usize) -> Result<f64, String> {
    let mut r = stream(seed, 0);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let b = Batch::random(&mut r);
        let n = b.n();
        let x = Four {
            sa: unit_rows(&mut r, n, 4),
            ta: unit_rows(&mut r, n, 4),
            st: unit_rows(&mut r, n, 4),
            tt: unit_rows(&mut r, n, 4),
        };
        for variant in NsptVariant::ALL {
            for (include_self, audio, text) in [
                (true, true, true),
                (false, true, true),
                (true, true, false),
                (true, false, true),
            ] {
                let cfg = LossConfig {
                    nspt_variant: variant,
                    include_self_in_denominator: include_self,
                    nspt_audio: audio,
                    nspt_text: text,
                    tau: [0.1, 0.2][case % 2],
                    ..LossConfig::default()
                };
                let mut g = Graph::new();
                let inputs = NsptInputs {
                    student_a: leaf(&mut g, &x.sa),
                    teacher_a: g.constant(Tensor::from_rows(&x.ta).unwrap()),
                    student_t: leaf(&mut g, &x.st),
                    teacher_t: g.constant(Tensor::from_rows(&x.tt).unwrap()),
                };
                let l = nspt_loss(&mut g, &inputs, &b.labels, &b.idx(), &cfg).map_err(|e| e.to_string())?;
                let got = value(&g, l);
                let want = naive_nspt(&x, &b, &cfg);
                worst = worst.max((got - want).abs());
                if !close(got, want) {
                    return Err(format!("{} case {case}: {got} vs {want}", variant.name()));
                }
            }
        }
    }
    Ok(worst)
}

/// Both anchor rules, both denominator modes, fixed and log-parameter τ.
pub fn check_mm(seed: u64, cases: usize) -> Result<f64, String> {
    let mut r = stream(seed, 0);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let b = Batch::random(&mut r);
        let a = unit_rows(&mut r, b.n(), 4);
        let t = unit_rows(&mut r, b.n(), 4);
        for exclude in [true, false] {
            for include_self in [true, false] {
                let cfg = LossConfig {
                    mm_exclude_rehearsal_anchors: exclude,
                    include_self_in_denominator: include_self,
                    ..LossConfig::default()
                };
                let tau = [0.07, 0.1, 0.3][case % 3];
                let want = naive_mm(&a, &t, &b, &cfg, tau);
                for learned in [false, true] {
                    let mut g = Graph::new();
                    let (av, tv) = (leaf(&mut g, &a), leaf(&mut g, &t));
                    let temp = if learned {
                        Temperature::LogParam(g.constant(Tensor::scalar(tau.ln())))
                    } else {
                        Temperature::Fixed(tau)
                    };
                    let l = mm_loss(&mut g, av, tv, &b.labels, &b.idx(), &cfg, temp).map_err(|e| e.to_string())?;
                    let got = value(&g, l);
                    worst = worst.max((got - want).abs());
                    if !close(got, want) {
                        return Err(format!("mm case {case}: {got} vs {want}"));
                    }
                }
            }
        }
    }
    Ok(worst)
}

/// `sets` random classes of up to 8 members, every `m ≤ 4`.
pub fn check_herding(seed: u64, sets: usize) -> Result<(), String> {
    let mut r = stream(seed, 0);
    for case in 0..sets {
        let n = rng::int_inclusive(&mut r, 1, 8);
        let mut ids: Vec<usize> = (0..n).map(|i| 10 * i + rng::below(&mut r, 10)).collect();
        rng::shuffle(&mut r, &mut ids);
        let e = unit_rows(&mut r, n, 3);
        for m in 1..=4 {
            let got = select_herding(&ids, &e, m).map_err(|e| e.to_string())?;
            let want = herding_oracle(&ids, &e, m);
            if got != want {
                return Err(format!("set {case}, m {m}: {got:?} vs {want:?}"));
            }
        }
    }
    Ok(())
}

/// Exact equality with the full-table DP, with and without the prefix skip.
pub fn check_wer(seed: u64, pairs: usize) -> Result<(), String> {
    let mut r = stream(seed, 0);
    for case in 0..pairs {
        let vocab = rng::int_inclusive(&mut r, 2, 6);
        let rl = rng::int_inclusive(&mut r, 3, 10);
        let hl = rng::int_inclusive(&mut r, 0, 10);
        let a: Vec<usize> = (0..rl).map(|_| rng::below(&mut r, vocab)).collect();
        let b: Vec<usize> = (0..hl).map(|_| rng::below(&mut r, vocab)).collect();
        let tail = |s: &[usize]| s[s.len().min(2)..].to_vec();
        let full = wer(&a, &b, false).map_err(|e| e.to_string())?;
        let skipped = wer(&a, &b, true).map_err(|e| e.to_string())?;
        if full != dp_edits(&a, &b) as f64 / rl as f64
            || skipped != dp_edits(&tail(&a), &tail(&b)) as f64 / (rl - 2) as f64
        {
            return Err(format!("pair {case}: {a:?} / {b:?}"));
        }
    }
    Ok(())
}

/// Beam search with width `|V|^len` against full enumeration. Returns the
/// number of cases whose top two sequences tie within `1e-9`; for those
/// only the score is compared.
pub fn check_beam(seed: u64, cases: usize) -> Result<usize, String> {
    let mut r = stream(seed, 0);
    let mut ties = 0;
    for case in 0..cases {
        let vocab = rng::int_inclusive(&mut r, 5, 8);
        let max_len = rng::int_inclusive(&mut r, 1, 4);
        let m = toy_model(&mut r, vocab, max_len + 1);
        let frames = rng::int_inclusive(&mut r, 1, 5);
        let x = FeatureSequence::new(frames, 3, (0..frames * 3).map(|_| rng::normal(&mut r)).collect()).unwrap();
        let width = (vocab - 2).pow(max_len as u32);
        let got = decode(&m, &x, width, max_len).map_err(|e| e.to_string())?;
        let (seq, best, runner_up) = exhaustive_best(&m, &x, max_len);
        let mut tokens = got.tokens.0.clone();
        if !got.truncated {
            tokens.push(EOS);
        }
        if (got.score - best).abs() > 1e-9 {
            return Err(format!("case {case}: score {} vs {best}", got.score));
        }
        if best - runner_up > 1e-9 {
            if tokens != seq {
                return Err(format!("case {case}: {tokens:?} vs {seq:?}"));
            }
        } else {
            ties += 1;
        }
    }
    Ok(ties)
}
