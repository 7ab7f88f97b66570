//! Per-task training, evaluation, and the full incremental run.

use std::collections::BTreeMap;

use coconut_autodiff::{par, AdamW, Graph, Tensor, Var};
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::embedding::{audio_embeddings, embed_batch, AudioBatch, Model, ModelDims, ModelSnapshot, LOG_TAU};
use crate::error::{Error, Result};
use crate::harness::batches::{make_batches, MiniBatch};
use crate::harness::buffer::{select_herding, select_random, RehearsalBuffer, Selection};
use crate::harness::config::{Strategy, StrategyConfig};
use crate::harness::{split_tasks, TaskSpec};
use crate::losses::{combined_loss, feature_kd_loss, lambda_nspt, mm_loss, nspt_loss, NsptInputs, Temperature};
use crate::metrics::{corpus_wer, intent_accuracy, RunMetrics, Summary};
use crate::rng::{self, tags, Rng};
use crate::seq2seq::{asr_cross_entropy, decode_all, extract_intent, TokenSequence};
use crate::synth::{spec_aug, Corpus, FeatureSequence};

/// Stored decoder outputs standing in for the gold transcripts of buffered
/// examples.
pub type PseudoTable = BTreeMap<usize, TokenSequence>;

/// Loss terms of one optimizer step. Absent terms were not computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub task: usize,
    pub step: usize,
    pub asr: f64,
    pub mm: Option<f64>,
    pub nspt: Option<f64>,
    pub kd: Option<f64>,
    pub lambda_nspt: f64,
    pub total: f64,
}

/// Graph nodes of one batch loss.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub asr: Var,
    pub mm: Option<Var>,
    pub nspt: Option<Var>,
    pub kd: Option<Var>,
}

/// Training target of every batch row: the stored pseudo-transcript for
/// rehearsal rows that have one, the gold transcript otherwise.
pub fn batch_targets<'a>(corpus: &'a Corpus, batch: &MiniBatch, pseudo: &'a PseudoTable) -> Vec<&'a TokenSequence> {
    let rehearsal: Vec<bool> = {
        let mut r = vec![false; batch.ids.len()];
        for &i in &batch.idx.rehearsal {
            r[i] = true;
        }
        r
    };
    batch
        .ids
        .iter()
        .zip(rehearsal)
        .map(|(&id, reh)| match pseudo.get(&id) {
            Some(p) if reh => p,
            _ => &corpus.examples[id].transcript,
        })
        .collect()
}

/// Builds the full objective of one batch on `g`. `audio` holds the
/// (augmented) features of every row. The teacher runs on its own gradient-free
/// graph and enters `g` as constants.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    g: &mut Graph,
    model: &Model,
    teacher: Option<&ModelSnapshot>,
    corpus: &Corpus,
    batch: &MiniBatch,
    audio: &[FeatureSequence],
    pseudo: &PseudoTable,
    cfg: &StrategyConfig,
    lambda_nspt: f64,
) -> Result<BatchLoss> {
    if audio.len() != batch.ids.len() {
        return Err(Error::InvalidArgument(format!(
            "{} feature sequences for {} rows",
            audio.len(),
            batch.ids.len()
        )));
    }
    let labels: Vec<usize> = batch.ids.iter().map(|&id| corpus.examples[id].intent).collect();
    let targets = batch_targets(corpus, batch, pseudo);
    let refs: Vec<&FeatureSequence> = audio.iter().collect();
    let ab = AudioBatch::new(&refs)?;
    let s = embed_batch(g, model, &ab, &targets, cfg.loss.mm_use_cls_only)?;
    let asr = asr_cross_entropy(g, model, s.h_a, ab.lengths(), &targets)?;

    let strategy = cfg.strategy;
    let mm = if strategy.uses_contrastive() {
        let tau = if cfg.loss.learnable_tau {
            Temperature::LogParam(g.param_by_name(&model.params, LOG_TAU)?)
        } else {
            Temperature::Fixed(cfg.loss.tau)
        };
        Some(mm_loss(g, s.a, s.t, &labels, &batch.idx, &cfg.loss, tau)?)
    } else {
        None
    };

    let mut nspt = None;
    let mut kd = None;
    if let Some(teacher) = teacher {
        let needs_teacher = strategy.uses_contrastive() || matches!(strategy, Strategy::Akd | Strategy::Tkd);
        if needs_teacher {
            let mut tg = Graph::no_grad();
            let te = embed_batch(&mut tg, teacher.model(), &ab, &targets, cfg.loss.mm_use_cls_only)?;
            let mut constant = |v: Var| g.constant(tg.value(v).clone());
            let (ta, tt, tpa, tct) = (
                constant(te.a),
                constant(te.t),
                constant(te.pooled_a),
                constant(te.cls_t),
            );
            match strategy {
                Strategy::Coconut | Strategy::CoconutSkd => {
                    let x = NsptInputs {
                        student_a: s.a,
                        teacher_a: ta,
                        student_t: s.t,
                        teacher_t: tt,
                    };
                    nspt = Some(nspt_loss(g, &x, &labels, &batch.idx, &cfg.loss)?);
                }
                Strategy::Akd => kd = Some(feature_kd_loss(g, s.pooled_a, tpa, &batch.idx.rehearsal)?),
                Strategy::Tkd => kd = Some(feature_kd_loss(g, s.cls_t, tct, &batch.idx.rehearsal)?),
                _ => {}
            }
        }
    }

    for (name, v) in [("asr", Some(asr)), ("mm", mm), ("nspt", nspt), ("kd", kd)] {
        if let Some(v) = v {
            let x = g.value(v).item()?;
            if !x.is_finite() {
                return Err(Error::Divergence {
                    task: teacher.map_or(0, |t| t.task() + 1),
                    step: 0,
                    detail: format!("{name} = {x}"),
                });
            }
        }
    }
    let mut total = combined_loss(g, asr, mm, nspt, cfg.loss.lambda_mm, lambda_nspt)?;
    if let Some(kd) = kd {
        let w = g.scale(kd, cfg.kd_weight.unwrap_or(lambda_nspt))?;
        total = g.add(total, w)?;
    }
    Ok(BatchLoss {
        total,
        asr,
        mm,
        nspt,
        kd,
    })
}

/// Mutable state carried across tasks.
struct RunState<'a> {
    corpus: &'a Corpus,
    cfg: &'a StrategyConfig,
    tasks: &'a TaskSpec,
    model: Model,
    buffer: RehearsalBuffer,
    pseudo: PseudoTable,
    batch_rng: Rng,
    aug_rng: Rng,
    sel_rng: Rng,
    logs: Vec<StepLog>,
}

impl RunState<'_> {
    fn train_task(&mut self, n: usize, teacher: Option<&ModelSnapshot>) -> Result<()> {
        let cfg = self.cfg;
        let past: usize = self.tasks.intents[..n].iter().map(Vec::len).sum();
        let lam = if n == 0 {
            0.0
        } else {
            lambda_nspt(past, self.tasks.intents[n].len())?
        };
        let mut opt = AdamW::new(cfg.optimizer);
        let buffer_ids = if cfg.strategy.uses_buffer() {
            self.buffer.ids()
        } else {
            Vec::new()
        };
        let mut step = 0;
        for _ in 0..cfg.epochs(n) {
            let batches = make_batches(
                &self.tasks.train[n],
                &buffer_ids,
                cfg.batch_size,
                cfg.mix_ratio,
                &mut self.batch_rng,
            )?;
            for batch in &batches {
                let audio: Vec<FeatureSequence> = batch
                    .ids
                    .iter()
                    .map(|&id| spec_aug(&self.corpus.examples[id].audio, &cfg.augment, &mut self.aug_rng).0)
                    .collect();
                let mut g = Graph::new();
                let loss = batch_loss(
                    &mut g,
                    &self.model,
                    teacher,
                    self.corpus,
                    batch,
                    &audio,
                    &self.pseudo,
                    cfg,
                    lam,
                )
                .map_err(|e| match e {
                    Error::Divergence { detail, .. } => Error::Divergence { task: n, step, detail },
                    e => e,
                })?;
                let item = |v: Var| g.value(v).data()[0];
                let total = item(loss.total);
                if !total.is_finite() {
                    return Err(Error::Divergence {
                        task: n,
                        step,
                        detail: format!("total = {total}"),
                    });
                }
                self.logs.push(StepLog {
                    task: n,
                    step,
                    asr: item(loss.asr),
                    mm: loss.mm.map(item),
                    nspt: loss.nspt.map(item),
                    kd: loss.kd.map(item),
                    lambda_nspt: lam,
                    total,
                });
                g.backward(loss.total)?;
                self.model.params.zero_grad();
                g.accumulate_param_grads(&mut self.model.params);
                opt.step(&mut self.model.params)?;
                step += 1;
            }
        }
        debug!("task {n}: {step} steps");
        Ok(())
    }

    /// Adds exemplars of task `n`'s classes and returns the newly stored ids.
    fn update_buffer(&mut self, n: usize) -> Result<Vec<usize>> {
        let cfg = self.cfg;
        if !cfg.strategy.uses_buffer() {
            return Ok(Vec::new());
        }
        let m = cfg
            .buffer
            .per_class(self.corpus.train_ids().len(), self.corpus.num_intents())?;
        let mut added = Vec::new();
        for &intent in &self.tasks.intents[n] {
            let ids: Vec<usize> = self.tasks.train[n]
                .iter()
                .copied()
                .filter(|&id| self.corpus.examples[id].intent == intent)
                .collect();
            if ids.is_empty() {
                continue;
            }
            let chosen = match cfg.selection {
                Selection::Random => select_random(&ids, m, &mut self.sel_rng),
                Selection::Herding => {
                    let seqs: Vec<&FeatureSequence> = ids.iter().map(|&id| &self.corpus.examples[id].audio).collect();
                    let emb = audio_embeddings(&self.model, &seqs)?;
                    select_herding(&ids, &embedding_rows(&emb), m)?
                }
            };
            added.extend(&chosen);
            self.buffer.insert_class(intent, chosen)?;
        }
        Ok(added)
    }

    /// Decodes the newly buffered examples into the pseudo-transcript table.
    fn skd_prepare(&mut self, ids: &[usize]) -> Result<()> {
        let seqs: Vec<&FeatureSequence> = ids.iter().map(|&id| &self.corpus.examples[id].audio).collect();
        let out = decode_all(&self.model, &seqs, self.cfg.beam_width, self.model.dims.max_tokens)?;
        for (&id, d) in ids.iter().zip(out) {
            let y = if d.truncated || d.tokens.is_empty() {
                warn!("example {id}: no usable decode, keeping the gold transcript");
                self.corpus.examples[id].transcript.clone()
            } else {
                d.tokens
            };
            self.pseudo.insert(id, y);
        }
        Ok(())
    }

    fn check_provenance(&self, n: usize) -> Result<()> {
        for c in self.buffer.classes() {
            if !self.tasks.task_of(c).is_some_and(|t| t <= n) {
                return Err(Error::Invariant(format!("buffer holds intent {c} after task {n}")));
            }
        }
        for id in self.buffer.ids() {
            let c = self.corpus.examples[id].intent;
            if self.buffer.class(c).is_none_or(|ids| !ids.contains(&id)) {
                return Err(Error::Invariant(format!("example {id} filed under the wrong intent")));
            }
        }
        Ok(())
    }
}

/// Accuracy on each task's test set `0..=upto` and the WER over their union.
pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    tasks: &TaskSpec,
    upto: usize,
    beam_width: usize,
    wer_skip_prefix: bool,
) -> Result<(Vec<f64>, f64)> {
    let ids: Vec<usize> = tasks.test[..=upto].concat();
    let seqs: Vec<&FeatureSequence> = ids.iter().map(|&id| &corpus.examples[id].audio).collect();
    let out = decode_all(model, &seqs, beam_width, model.dims.max_tokens)?;
    let hyp: BTreeMap<usize, &TokenSequence> = ids.iter().copied().zip(out.iter().map(|d| &d.tokens)).collect();
    let mut row = Vec::with_capacity(upto + 1);
    for test in &tasks.test[..=upto] {
        let pred: Vec<Option<usize>> = test.iter().map(|id| extract_intent(&corpus.vocab, hyp[id])).collect();
        let gold: Vec<usize> = test.iter().map(|&id| corpus.examples[id].intent).collect();
        row.push(intent_accuracy(&pred, &gold)?);
    }
    let pairs: Vec<(&[usize], &[usize])> = ids
        .iter()
        .map(|id| (corpus.examples[*id].transcript.ids(), hyp[id].ids()))
        .collect();
    Ok((row, corpus_wer(&pairs, wer_skip_prefix)?))
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: StrategyConfig,
    pub tasks: TaskSpec,
    pub metrics: RunMetrics,
    pub summary: Summary,
    /// Model after each task.
    pub checkpoints: Vec<ModelSnapshot>,
    /// Buffer after each task.
    pub buffers: Vec<RehearsalBuffer>,
    /// Hash of the teacher used in task `n + 1`, taken at capture and after
    /// the task it served.
    pub teacher_hashes: Vec<(String, String)>,
    pub pseudo: PseudoTable,
    pub logs: Vec<StepLog>,
}

impl RunOutput {
    pub fn model(&self) -> &Model {
        self.checkpoints.last().expect("a run trains at least one task").model()
    }
}

/// Runs the whole class-incremental protocol for one configuration.
pub fn run_cil(corpus: &Corpus, cfg: &StrategyConfig) -> Result<RunOutput> {
    cfg.validate()?;
    if corpus.examples.iter().enumerate().any(|(i, e)| e.id != i) {
        return Err(Error::Invariant("example ids must equal their positions".into()));
    }
    let tasks = split_tasks(corpus, cfg.num_tasks)?;
    let seed = cfg.seed;
    let mut model = Model::init(
        ModelDims::for_corpus(corpus, &cfg.model),
        &mut rng::stream(seed, tags::INIT),
    )?;
    if cfg.loss.learnable_tau && cfg.strategy.uses_contrastive() {
        model.add_learnable_tau(cfg.loss.tau_init)?;
    }
    let mut st = RunState {
        corpus,
        cfg,
        tasks: &tasks,
        model,
        buffer: RehearsalBuffer::new(),
        pseudo: PseudoTable::new(),
        batch_rng: rng::stream(seed, tags::BATCHES),
        aug_rng: rng::stream(seed, tags::AUGMENT),
        sel_rng: rng::stream(seed, tags::SELECTION),
        logs: Vec::new(),
    };
    let mut metrics = RunMetrics {
        test_sizes: tasks.test.iter().map(Vec::len).collect(),
        ..RunMetrics::default()
    };
    let mut checkpoints: Vec<ModelSnapshot> = Vec::new();
    let mut buffers = Vec::new();
    let mut teacher_hashes = Vec::new();
    for n in 0..tasks.num_tasks() {
        let teacher = checkpoints.last().cloned();
        let before = teacher.as_ref().map(ModelSnapshot::hash);
        st.train_task(n, teacher.as_ref())?;
        if let (Some(t), Some(h)) = (&teacher, before) {
            let after = t.hash();
            if after != h {
                return Err(Error::Invariant(format!("teacher of task {n} changed during training")));
            }
            teacher_hashes.push((h, after));
        }
        let (row, wer) = evaluate(&st.model, corpus, &tasks, n, cfg.beam_width, cfg.wer_skip_prefix)?;
        info!(
            "{} seed {seed} task {n}: acc {:?} wer {wer:.4}",
            cfg.label(),
            row.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>()
        );
        metrics.accuracy.push(row);
        metrics.wer.push(wer);
        let added = st.update_buffer(n)?;
        st.check_provenance(n)?;
        if cfg.strategy.uses_pseudo_transcripts() {
            st.skd_prepare(&added)?;
        }
        checkpoints.push(st.model.snapshot(n));
        buffers.push(st.buffer.clone());
    }
    let summary = metrics.summarize(cfg.weighted_accuracy)?;
    let (pseudo, logs) = (st.pseudo, st.logs);
    Ok(RunOutput {
        config: cfg.clone(),
        tasks,
        metrics,
        summary,
        checkpoints,
        buffers,
        teacher_hashes,
        pseudo,
        logs,
    })
}

/// Independent runs over one corpus, in parallel when enabled. Results keep
/// the order of `configs`.
pub fn run_many(corpus: &Corpus, configs: &[StrategyConfig]) -> Vec<Result<RunOutput>> {
    par::map(configs, |c| run_cil(corpus, c))
}

/// Projected audio embeddings as plain rows.
pub fn embedding_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}
