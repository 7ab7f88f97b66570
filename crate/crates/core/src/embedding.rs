//! Toy audio and text encoders, pooling, and the projection heads into the
//! shared embedding space.
//!
//! All forward functions are batched: audio frames of every example are
//! stacked into one `ΣU × d` matrix and per-example reductions go through a
//! constant pooling matrix, so one training step is a handful of GEMMs.

use coconut_autodiff::{checkpoint, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::seq2seq::vocab::TokenSequence;
use crate::synth::{Corpus, FeatureSequence};

pub const LOG_TAU: &str = "loss.log_tau";

/// Layer widths that are free choices; the rest follow from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_a: usize,
    pub d_t: usize,
    pub d_s: usize,
    pub d_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_a: 32,
            d_t: 32,
            d_s: 16,
            d_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_in: usize,
    pub d_a: usize,
    pub d_t: usize,
    pub d_s: usize,
    pub d_hidden: usize,
    pub vocab: usize,
    /// Decoder input positions, `BOS` included.
    pub max_tokens: usize,
    pub max_frames: usize,
}

impl ModelDims {
    pub fn for_corpus(corpus: &Corpus, cfg: &ModelConfig) -> Self {
        Self {
            d_in: corpus.d_in(),
            d_a: cfg.d_a,
            d_t: cfg.d_t,
            d_s: cfg.d_s,
            d_hidden: cfg.d_hidden,
            vocab: corpus.vocab.len(),
            max_tokens: corpus.max_transcript_len() + 1,
            max_frames: corpus.max_frames(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub dims: ModelDims,
    pub params: ParamStore,
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| std * rng::normal(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

impl Model {
    /// Weights `N(0, 1/fan_in)`, embeddings and positions `N(0, 1)`,
    /// biases zero.
    pub fn init(dims: ModelDims, rng: &mut Rng) -> Result<Self> {
        let d = &dims;
        if [
            d.d_in,
            d.d_a,
            d.d_t,
            d.d_s,
            d.d_hidden,
            d.vocab,
            d.max_tokens,
            d.max_frames,
        ]
        .contains(&0)
        {
            return Err(Error::InvalidArgument(format!("zero model dimension in {d:?}")));
        }
        let mut p = ParamStore::new();
        let w = |rng: &mut Rng, i: usize, o: usize| gaussian(rng, i, o, (1.0 / i as f64).sqrt());
        let zeros = |n: usize| Tensor::zeros(&[1, n]);
        p.insert("audio_enc.w1", w(rng, d.d_in, d.d_a))?;
        p.insert("audio_enc.b1", zeros(d.d_a))?;
        p.insert("audio_enc.w2", w(rng, d.d_a, d.d_a))?;
        p.insert("audio_enc.b2", zeros(d.d_a))?;
        p.insert("text_enc.embedding", gaussian(rng, d.vocab, d.d_t, 1.0))?;
        p.insert("proj_a.w", w(rng, d.d_a, d.d_s))?;
        p.insert("proj_a.b", zeros(d.d_s))?;
        p.insert("proj_t.w", w(rng, d.d_t, d.d_s))?;
        p.insert("proj_t.b", zeros(d.d_s))?;
        p.insert("decoder.pos", gaussian(rng, d.max_tokens, d.d_t, 1.0))?;
        p.insert("decoder.key_pos", gaussian(rng, d.max_frames, d.d_t, 1.0))?;
        p.insert("decoder.wq", w(rng, d.d_t, d.d_t))?;
        p.insert("decoder.wk", w(rng, d.d_a, d.d_t))?;
        p.insert("decoder.wv", w(rng, d.d_a, d.d_t))?;
        p.insert("decoder.k_null", gaussian(rng, 1, d.d_t, 1.0))?;
        p.insert("decoder.v_null", gaussian(rng, 1, d.d_t, 1.0))?;
        p.insert("decoder.wh", w(rng, d.d_t, d.d_hidden))?;
        p.insert("decoder.bh", zeros(d.d_hidden))?;
        p.insert("decoder.wout", w(rng, d.d_hidden, d.vocab))?;
        p.insert("decoder.bout", zeros(d.vocab))?;
        Ok(Self { dims, params: p })
    }

    /// Adds a learnable temperature stored as `log τ`, excluded from weight
    /// decay.
    pub fn add_learnable_tau(&mut self, tau: f64) -> Result<()> {
        if tau.is_nan() || tau <= 0.0 {
            return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
        }
        self.params
            .insert_with_decay(LOG_TAU, Tensor::scalar(tau.ln()), false)?;
        Ok(())
    }

    pub fn tau(&self) -> Option<f64> {
        self.params.by_name(LOG_TAU).ok().map(|p| p.value.data()[0].exp())
    }

    pub fn snapshot(&self, task: usize) -> ModelSnapshot {
        ModelSnapshot {
            task,
            model: self.clone(),
        }
    }

    /// The same model without the projection heads, which inference never
    /// touches.
    pub fn without_projections(&self) -> Model {
        Model {
            dims: self.dims.clone(),
            params: self.params.filtered(|n| !n.starts_with("proj_")),
        }
    }

    fn p(&self, g: &mut Graph, name: &str) -> Result<Var> {
        Ok(g.param_by_name(&self.params, name)?)
    }
}

/// Frozen copy of a model. Exposes only shared access.
#[derive(Clone, Debug)]
pub struct ModelSnapshot {
    task: usize,
    model: Model,
}

impl ModelSnapshot {
    pub fn task(&self) -> usize {
        self.task
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// SHA-256 of the checkpoint encoding.
    pub fn hash(&self) -> String {
        params_hash(&self.model.params)
    }

    pub fn save(&self, base: impl AsRef<std::path::Path>) -> Result<()> {
        checkpoint::save(&self.model.params, base)?;
        Ok(())
    }
}

pub fn params_hash(params: &ParamStore) -> String {
    use sha2::{Digest, Sha256};
    let (manifest, blob) = checkpoint::encode(params, "params.bin");
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&manifest).expect("manifest serializes"));
    h.update(&blob);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Stacked audio of a batch.
#[derive(Clone, Debug)]
pub struct AudioBatch {
    frames: Tensor,
    lengths: Vec<usize>,
}

impl AudioBatch {
    pub fn new(seqs: &[&FeatureSequence]) -> Result<Self> {
        let first = seqs.first().ok_or(Error::Empty("audio batch"))?;
        let d = first.dim();
        let mut data = Vec::new();
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.dim() != d {
                return Err(Error::InvalidArgument(format!("frame dims {} and {}", d, s.dim())));
            }
            data.extend_from_slice(s.data());
            lengths.push(s.frames());
        }
        let total = lengths.iter().sum();
        Ok(Self {
            frames: Tensor::matrix(total, d, data)?,
            lengths,
        })
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.frames.rows()
    }

    /// Frame index within its own utterance, for each stacked row.
    pub fn frame_positions(&self) -> Vec<usize> {
        self.lengths.iter().flat_map(|&u| 0..u).collect()
    }
}

/// `B × rows` matrix averaging consecutive row blocks of the given lengths.
pub fn pooling_matrix(lengths: &[usize]) -> Tensor {
    let total: usize = lengths.iter().sum();
    let mut data = vec![0.0; lengths.len() * total];
    let mut start = 0;
    for (b, &u) in lengths.iter().enumerate() {
        for j in start..start + u {
            data[b * total + j] = 1.0 / u as f64;
        }
        start += u;
    }
    Tensor::matrix(lengths.len(), total, data).expect("shape matches data")
}

fn affine(g: &mut Graph, m: &Model, x: Var, w: &str, b: &str) -> Result<Var> {
    let (w, b) = (m.p(g, w)?, m.p(g, b)?);
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

/// Per-frame `relu(x W1 + b1) W2 + b2`; returns the stacked `ΣU × d_A`
/// frame matrix.
pub fn encode_audio(g: &mut Graph, m: &Model, batch: &AudioBatch) -> Result<Var> {
    if batch.frames.cols() != m.dims.d_in {
        return Err(Error::InvalidArgument(format!(
            "audio frames have {} dims, model expects {}",
            batch.frames.cols(),
            m.dims.d_in
        )));
    }
    let x = g.constant(batch.frames.clone());
    let h = affine(g, m, x, "audio_enc.w1", "audio_enc.b1")?;
    let h = g.relu(h)?;
    affine(g, m, h, "audio_enc.w2", "audio_enc.b2")
}

/// Mean over frames of each utterance, `B × d_A`.
pub fn pool_audio(g: &mut Graph, h_a: Var, lengths: &[usize]) -> Result<Var> {
    let p = g.constant(pooling_matrix(lengths));
    Ok(g.matmul(p, h_a)?)
}

/// Embedding rows of one token sequence, `J × d_T`.
pub fn encode_text(g: &mut Graph, m: &Model, y: &TokenSequence) -> Result<Var> {
    check_vocab(m, y.ids())?;
    let e = m.p(g, "text_enc.embedding")?;
    Ok(g.embedding(e, y.ids())?)
}

fn check_vocab(m: &Model, ids: &[usize]) -> Result<()> {
    match ids.iter().find(|&&i| i >= m.dims.vocab) {
        Some(&id) => Err(Error::OutOfVocab {
            id,
            vocab: m.dims.vocab,
        }),
        None => Ok(()),
    }
}

/// Text summary per example, `B × d_T`: the embedding at `cls_position`, or
/// the mean over all tokens when `cls_only` is false.
pub fn text_summary(
    g: &mut Graph,
    m: &Model,
    texts: &[&TokenSequence],
    cls_position: usize,
    cls_only: bool,
) -> Result<Var> {
    let e = m.p(g, "text_enc.embedding")?;
    if cls_only {
        let ids = texts
            .iter()
            .map(|t| {
                t.ids().get(cls_position).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!("sequence of length {} has no position {cls_position}", t.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        check_vocab(m, &ids)?;
        return Ok(g.embedding(e, &ids)?);
    }
    let ids: Vec<usize> = texts.iter().flat_map(|t| t.ids().iter().copied()).collect();
    check_vocab(m, &ids)?;
    let lengths: Vec<usize> = texts.iter().map(|t| t.len()).collect();
    if lengths.contains(&0) {
        return Err(Error::Empty("token sequence"));
    }
    let rows = g.embedding(e, &ids)?;
    let p = g.constant(pooling_matrix(&lengths));
    Ok(g.matmul(p, rows)?)
}

/// `normalize(pooled_a W + b)`
pub fn project_audio(g: &mut Graph, m: &Model, pooled: Var) -> Result<Var> {
    let z = affine(g, m, pooled, "proj_a.w", "proj_a.b")?;
    Ok(g.l2_normalize_rows(z)?)
}

/// `normalize(cls_t W + b)`
pub fn project_text(g: &mut Graph, m: &Model, cls: Var) -> Result<Var> {
    let z = affine(g, m, cls, "proj_t.w", "proj_t.b")?;
    Ok(g.l2_normalize_rows(z)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedPair {
    pub a: Vec<f64>,
    pub t: Vec<f64>,
}

/// `a = normalize(g_A(mean h_A))`, `t = normalize(g_T(h_T[cls_position]))`
/// for one utterance, given its frame and token matrices.
pub fn project_pair(m: &Model, h_a: &Tensor, h_t: &Tensor, cls_position: usize) -> Result<ProjectedPair> {
    let (u, _) = h_a.dims2()?;
    let (j, _) = h_t.dims2()?;
    if u == 0 {
        return Err(Error::Empty("audio frames"));
    }
    if cls_position >= j {
        return Err(Error::InvalidArgument(format!(
            "cls position {cls_position} of {j} rows"
        )));
    }
    let mut g = Graph::no_grad();
    let ha = g.constant(h_a.clone());
    let pooled = g.mean(ha, Some(0))?;
    let a = project_audio(&mut g, m, pooled)?;
    let ht = g.constant(h_t.clone());
    let cls = g.gather_rows(ht, &[cls_position])?;
    let t = project_text(&mut g, m, cls)?;
    Ok(ProjectedPair {
        a: g.value(a).data().to_vec(),
        t: g.value(t).data().to_vec(),
    })
}

/// Everything the losses read from one batch forward.
#[derive(Clone, Copy, Debug)]
pub struct Embeddings {
    /// Stacked frames, `ΣU × d_A`.
    pub h_a: Var,
    /// Pooled audio before projection, `B × d_A`.
    pub pooled_a: Var,
    /// Text summary before projection, `B × d_T`.
    pub cls_t: Var,
    pub a: Var,
    pub t: Var,
}

pub fn embed_batch(
    g: &mut Graph,
    m: &Model,
    audio: &AudioBatch,
    texts: &[&TokenSequence],
    cls_only: bool,
) -> Result<Embeddings> {
    if texts.len() != audio.len() {
        return Err(Error::InvalidArgument(format!(
            "{} transcripts for {} utterances",
            texts.len(),
            audio.len()
        )));
    }
    let h_a = encode_audio(g, m, audio)?;
    let pooled_a = pool_audio(g, h_a, audio.lengths())?;
    let cls_t = text_summary(g, m, texts, 0, cls_only)?;
    let a = project_audio(g, m, pooled_a)?;
    let t = project_text(g, m, cls_t)?;
    Ok(Embeddings {
        h_a,
        pooled_a,
        cls_t,
        a,
        t,
    })
}

/// Projected audio embeddings `a` of many utterances, row per utterance.
pub fn audio_embeddings(m: &Model, seqs: &[&FeatureSequence]) -> Result<Tensor> {
    let batch = AudioBatch::new(seqs)?;
    let mut g = Graph::no_grad();
    let h = encode_audio(&mut g, m, &batch)?;
    let pooled = pool_audio(&mut g, h, batch.lengths())?;
    let a = project_audio(&mut g, m, pooled)?;
    Ok(g.value(a).clone())
}
