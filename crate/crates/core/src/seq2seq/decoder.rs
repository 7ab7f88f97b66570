//! One-layer autoregressive decoder with single-head cross-attention over
//! the audio frames, its teacher-forced cross-entropy, and beam search.
//!
//! A decoder row sees the embedding of the previous token plus a learned
//! position vector, attends over the frames of its own utterance and one
//! learned null slot, and maps the result through a relu layer to logits.

use std::cmp::Ordering;

use coconut_autodiff::{par, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::embedding::{encode_audio, AudioBatch, Model};
use crate::error::{Error, Result};
use crate::seq2seq::vocab::{TokenSequence, BOS, EOS, PAD};
use crate::synth::FeatureSequence;

/// Packed decoder rows of a batch.
struct Rows {
    ids: Vec<usize>,
    positions: Vec<usize>,
    example: Vec<usize>,
}

fn p(g: &mut Graph, m: &Model, name: &str) -> Result<Var> {
    Ok(g.param_by_name(&m.params, name)?)
}

/// Keys and values over the stacked frames, null slot last.
fn memory(g: &mut Graph, m: &Model, h_a: Var, lengths: &[usize]) -> Result<(Var, Var)> {
    let positions: Vec<usize> = lengths.iter().flat_map(|&u| 0..u).collect();
    if let Some(&u) = positions.iter().find(|&&u| u >= m.dims.max_frames) {
        return Err(Error::InvalidArgument(format!(
            "frame {u} exceeds the model's {} key positions",
            m.dims.max_frames
        )));
    }
    let wk = p(g, m, "decoder.wk")?;
    let wv = p(g, m, "decoder.wv")?;
    let key_pos = p(g, m, "decoder.key_pos")?;
    let k_null = p(g, m, "decoder.k_null")?;
    let v_null = p(g, m, "decoder.v_null")?;
    let k = g.matmul(h_a, wk)?;
    let kp = g.gather_rows(key_pos, &positions)?;
    let k = g.add(k, kp)?;
    let k = g.concat(&[k, k_null], 0)?;
    let v = g.matmul(h_a, wv)?;
    let v = g.concat(&[v, v_null], 0)?;
    Ok((k, v))
}

fn logits(g: &mut Graph, m: &Model, rows: &Rows, k: Var, v: Var, lengths: &[usize]) -> Result<Var> {
    if let Some(&j) = rows.positions.iter().find(|&&j| j >= m.dims.max_tokens) {
        return Err(Error::InvalidArgument(format!(
            "decoder position {j} exceeds the model's {}",
            m.dims.max_tokens
        )));
    }
    if let Some(&id) = rows.ids.iter().find(|&&id| id >= m.dims.vocab) {
        return Err(Error::OutOfVocab {
            id,
            vocab: m.dims.vocab,
        });
    }
    let e = p(g, m, "text_enc.embedding")?;
    let pos = p(g, m, "decoder.pos")?;
    let emb = g.embedding(e, &rows.ids)?;
    let pe = g.gather_rows(pos, &rows.positions)?;
    let s = g.add(emb, pe)?;

    let wq = p(g, m, "decoder.wq")?;
    let q = g.matmul(s, wq)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (m.dims.d_t as f64).sqrt())?;
    let scores = if lengths.len() > 1 {
        let total: usize = lengths.iter().sum();
        let starts: Vec<usize> = lengths
            .iter()
            .scan(0, |acc, &u| {
                let s = *acc;
                *acc += u;
                Some(s)
            })
            .collect();
        let cols = total + 1;
        let mut mask = vec![true; rows.ids.len() * cols];
        for (r, &b) in rows.example.iter().enumerate() {
            let row = &mut mask[r * cols..(r + 1) * cols];
            row[starts[b]..starts[b] + lengths[b]].fill(false);
            row[total] = false;
        }
        g.masked_fill(scores, &mask, f64::NEG_INFINITY)?
    } else {
        scores
    };
    let attn = g.softmax_rows(scores)?;
    let ctx = g.matmul(attn, v)?;

    let x = g.add(s, ctx)?;
    let wh = p(g, m, "decoder.wh")?;
    let bh = p(g, m, "decoder.bh")?;
    let h = g.matmul(x, wh)?;
    let h = g.add(h, bh)?;
    let h = g.relu(h)?;
    let wo = p(g, m, "decoder.wout")?;
    let bo = p(g, m, "decoder.bout")?;
    let o = g.matmul(h, wo)?;
    Ok(g.add(o, bo)?)
}

/// Teacher-forced logits: for target `y` the inputs are `[BOS, y…]` and row
/// `j` predicts `y_j` (or `EOS` on the last row). Returns the logits with
/// rows packed example by example, and the gold target of every row.
pub fn teacher_forced_logits(
    g: &mut Graph,
    m: &Model,
    h_a: Var,
    lengths: &[usize],
    targets: &[&TokenSequence],
) -> Result<(Var, Vec<usize>)> {
    if targets.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if targets.len() != lengths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} targets for {} utterances",
            targets.len(),
            lengths.len()
        )));
    }
    let mut rows = Rows {
        ids: Vec::new(),
        positions: Vec::new(),
        example: Vec::new(),
    };
    let mut gold = Vec::new();
    for (b, y) in targets.iter().enumerate() {
        let ids = y.ids();
        for j in 0..=ids.len() {
            rows.ids.push(if j == 0 { BOS } else { ids[j - 1] });
            rows.positions.push(j);
            rows.example.push(b);
            gold.push(if j < ids.len() { ids[j] } else { EOS });
        }
    }
    let (k, v) = memory(g, m, h_a, lengths)?;
    let out = logits(g, m, &rows, k, v, lengths)?;
    Ok((out, gold))
}

fn one_hot(rows: usize, cols: usize, hot: &[usize]) -> Tensor {
    let mut data = vec![0.0; rows * cols];
    for (r, &c) in hot.iter().enumerate() {
        data[r * cols + c] = 1.0;
    }
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

/// `−(1/B) Σ_b log p(y_b | x_b)` under teacher forcing, summed over every
/// target token and the closing `EOS`.
pub fn asr_cross_entropy(
    g: &mut Graph,
    m: &Model,
    h_a: Var,
    lengths: &[usize],
    targets: &[&TokenSequence],
) -> Result<Var> {
    let (z, gold) = teacher_forced_logits(g, m, h_a, lengths, targets)?;
    let lp = g.log_softmax_rows(z)?;
    let oh = g.constant(one_hot(gold.len(), m.dims.vocab, &gold));
    let picked = g.mul(lp, oh)?;
    let s = g.sum(picked)?;
    Ok(g.scale(s, -1.0 / targets.len() as f64)?)
}

/// Per-token log-probabilities of `y` followed by `EOS` given `x`.
pub fn sequence_log_probs(m: &Model, x: &FeatureSequence, y: &TokenSequence) -> Result<Vec<f64>> {
    let batch = AudioBatch::new(&[x])?;
    let mut g = Graph::no_grad();
    let h = encode_audio(&mut g, m, &batch)?;
    let (z, gold) = teacher_forced_logits(&mut g, m, h, batch.lengths(), &[y])?;
    let lp = g.log_softmax_rows(z)?;
    let t = g.value(lp);
    Ok(gold.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    /// Generated tokens without `BOS` and the closing `EOS`.
    pub tokens: TokenSequence,
    /// Log-probability of every generated token, `EOS` included when emitted.
    pub log_probs: Vec<f64>,
    pub score: f64,
    /// No `EOS` within `max_len` steps.
    pub truncated: bool,
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<usize>,
    log_probs: Vec<f64>,
    score: f64,
}

/// Higher score first, then the lexicographically smaller sequence.
fn rank(a: &Hyp, b: &Hyp) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search from `BOS` for at most `max_len` steps (`EOS` included).
/// `beam_width = 1` is greedy decoding. Scores are summed token
/// log-probabilities; equal scores prefer lower token ids. Search stops
/// early once the best finished hypothesis outscores every live one, which
/// is exact because extending a hypothesis never raises its score.
pub fn decode(m: &Model, x: &FeatureSequence, beam_width: usize, max_len: usize) -> Result<Decoded> {
    if beam_width == 0 {
        return Err(Error::InvalidArgument("beam width must be at least 1".into()));
    }
    if max_len == 0 || max_len > m.dims.max_tokens {
        return Err(Error::InvalidArgument(format!(
            "max_len {max_len} outside 1..={}",
            m.dims.max_tokens
        )));
    }
    let batch = AudioBatch::new(&[x])?;
    let mut g = Graph::no_grad();
    let h = encode_audio(&mut g, m, &batch)?;
    let (k, v) = memory(&mut g, m, h, batch.lengths())?;
    let allowed: Vec<usize> = (0..m.dims.vocab).filter(|&t| t != PAD && t != BOS).collect();

    let mut live = vec![Hyp {
        tokens: Vec::new(),
        log_probs: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    for step in 0..max_len {
        let rows = Rows {
            ids: live.iter().map(|h| h.tokens.last().copied().unwrap_or(BOS)).collect(),
            positions: vec![step; live.len()],
            example: vec![0; live.len()],
        };
        let z = logits(&mut g, m, &rows, k, v, batch.lengths())?;
        let lp = g.log_softmax_rows(z)?;
        let lp = g.value(lp).clone();
        let mut cand = Vec::with_capacity(live.len() * allowed.len());
        for (r, h) in live.iter().enumerate() {
            for &t in &allowed {
                let l = lp.get(r, t);
                let mut c = h.clone();
                c.tokens.push(t);
                c.log_probs.push(l);
                c.score += l;
                cand.push(c);
            }
        }
        cand.sort_by(rank);
        cand.truncate(beam_width);
        live.clear();
        for c in cand {
            if c.tokens.last() == Some(&EOS) {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        finished.sort_by(rank);
        let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || finished.first().is_some_and(|f| f.score >= best_live) {
            break;
        }
    }
    let truncated: Vec<(Hyp, bool)> = live.into_iter().map(|h| (h, true)).collect();
    let (best, was_truncated) = finished
        .into_iter()
        .map(|h| (h, false))
        .chain(truncated)
        .min_by(|a, b| rank(&a.0, &b.0))
        .expect("the search keeps at least one hypothesis");
    let mut tokens = best.tokens;
    if !was_truncated {
        tokens.pop();
    }
    Ok(Decoded {
        tokens: TokenSequence(tokens),
        log_probs: best.log_probs,
        score: best.score,
        truncated: was_truncated,
    })
}

/// Decodes many utterances, in parallel when the `parallel` feature is on.
pub fn decode_all(m: &Model, xs: &[&FeatureSequence], beam_width: usize, max_len: usize) -> Result<Vec<Decoded>> {
    par::map(xs, |x| decode(m, x, beam_width, max_len))
        .into_iter()
        .collect()
}

/// Sequential twin of [`decode_all`].
pub fn decode_all_sequential(
    m: &Model,
    xs: &[&FeatureSequence],
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<Decoded>> {
    par::map_sequential(xs, |x| decode(m, x, beam_width, max_len))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ModelDims;
    use crate::rng::{self, stream};

    fn model(vocab: usize) -> Model {
        let dims = ModelDims {
            d_in: 3,
            d_a: 4,
            d_t: 4,
            d_s: 2,
            d_hidden: 5,
            vocab,
            max_tokens: 5,
            max_frames: 6,
        };
        Model::init(dims, &mut stream(5, 1)).unwrap()
    }

    fn seq(u: usize, seed: u64) -> FeatureSequence {
        let mut r = stream(seed, 77);
        FeatureSequence::new(u, 3, (0..u * 3).map(|_| rng::normal(&mut r)).collect()).unwrap()
    }

    fn zero_output(m: &mut Model) {
        for n in ["decoder.wout", "decoder.bout"] {
            let id = m.params.id(n).unwrap();
            m.params.get_mut(id).value.data_mut().fill(0.0);
        }
    }

    #[test]
    fn uniform_logits_cost_log_v_per_token() {
        let mut m = model(8);
        zero_output(&mut m);
        let x = seq(3, 1);
        let y = TokenSequence(vec![4, 3, 6]);
        let mut g = Graph::no_grad();
        let b = AudioBatch::new(&[&x]).unwrap();
        let h = encode_audio(&mut g, &m, &b).unwrap();
        let l = asr_cross_entropy(&mut g, &m, h, b.lengths(), &[&y]).unwrap();
        let want = 4.0 * (8f64).ln();
        assert!((g.value(l).item().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn huge_gold_margin_drives_loss_to_zero() {
        let mut m = model(8);
        zero_output(&mut m);
        let y = TokenSequence(vec![5, 5, 5, 5]);
        // the gold token of every row is 5 except the EOS row
        let id = m.params.id("decoder.bout").unwrap();
        m.params.get_mut(id).value.data_mut()[5] = 1e3;
        let x = seq(2, 3);
        let lp = sequence_log_probs(&m, &x, &y).unwrap();
        assert!(lp[..4].iter().all(|&l| l.abs() < 1e-300));
    }

    #[test]
    fn batched_loss_is_mean_of_single_losses() {
        let m = model(8);
        let xs = [seq(3, 1), seq(5, 2), seq(1, 3)];
        let ys = [
            TokenSequence(vec![4, 3]),
            TokenSequence(vec![5, 3, 7, 6]),
            TokenSequence(vec![4, 3, 6]),
        ];
        let mut g = Graph::no_grad();
        let b = AudioBatch::new(&xs.iter().collect::<Vec<_>>()).unwrap();
        let h = encode_audio(&mut g, &m, &b).unwrap();
        let l = asr_cross_entropy(&mut g, &m, h, b.lengths(), &ys.iter().collect::<Vec<_>>()).unwrap();
        let singles: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| -sequence_log_probs(&m, x, y).unwrap().iter().sum::<f64>())
            .sum::<f64>()
            / 3.0;
        assert!((g.value(l).item().unwrap() - singles).abs() < 1e-10);
    }

    #[test]
    fn empty_batch_rejected() {
        let m = model(8);
        let mut g = Graph::no_grad();
        let b = AudioBatch::new(&[&seq(2, 1)]).unwrap();
        let h = encode_audio(&mut g, &m, &b).unwrap();
        assert!(asr_cross_entropy(&mut g, &m, h, &[], &[]).is_err());
    }

    #[test]
    fn greedy_is_stepwise_argmax() {
        let m = model(8);
        let x = seq(4, 9);
        let d = decode(&m, &x, 1, 5).unwrap();
        // replay: the argmax of each teacher-forced row over allowed tokens
        let mut prefix = Vec::new();
        for (j, &lp) in d.log_probs.iter().enumerate() {
            let emitted = if j < d.tokens.len() { d.tokens.ids()[j] } else { EOS };
            let probe = TokenSequence(prefix.clone());
            let all = (0..8)
                .filter(|&t| t != PAD && t != BOS)
                .map(|t| {
                    let mut s = probe.0.clone();
                    s.push(t);
                    let lps = sequence_log_probs(&m, &x, &TokenSequence(s)).unwrap();
                    (t, lps[j])
                })
                .collect::<Vec<_>>();
            let best = all.iter().fold(
                (usize::MAX, f64::NEG_INFINITY),
                |acc, &(t, l)| if l > acc.1 { (t, l) } else { acc },
            );
            assert_eq!(best.0, emitted);
            assert!((best.1 - lp).abs() < 1e-12);
            prefix.push(emitted);
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let m = model(8);
        let x = seq(4, 2);
        assert_eq!(decode(&m, &x, 1, 5).unwrap(), decode(&m, &x, 1, 5).unwrap());
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let m = model(8);
        let xs: Vec<FeatureSequence> = (0..6).map(|i| seq(1 + i % 5, i as u64)).collect();
        let refs: Vec<&FeatureSequence> = xs.iter().collect();
        assert_eq!(
            decode_all(&m, &refs, 3, 5).unwrap(),
            decode_all_sequential(&m, &refs, 3, 5).unwrap()
        );
    }

    #[test]
    fn bad_arguments_rejected() {
        let m = model(8);
        let x = seq(2, 0);
        assert!(decode(&m, &x, 0, 5).is_err());
        assert!(decode(&m, &x, 1, 6).is_err());
        assert!(decode(&m, &seq(7, 0), 1, 5).is_err());
    }
}
