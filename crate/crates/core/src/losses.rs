//! Supervised contrastive objectives over projected embeddings: the generic
//! form, the teacher-positive distillation loss and its variants, the
//! symmetric audio/text alignment loss, feature distillation, and the
//! weighting schedule.
//!
//! Every contrastive term is assembled from whole-batch matrix products.
//! For anchor rows `Z_k`, positive rows `W` and negative blocks `N_b`:
//!
//! ```text
//! loss = Σ_k [ −(1/|P(k)|) Σ_{p∈P(k)} z_k·w_p/τ + log Σ_{i} exp(z_k·n_i/τ) ]
//! ```
//!
//! where anchors with no positive (or no negative) contribute nothing.

use coconut_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NsptVariant {
    /// Student anchors and negatives, teacher positives, rehearsal anchors.
    #[default]
    Nspt,
    /// Teacher positives and negatives.
    Ntpt,
    /// Anchors drawn from the whole batch.
    NsptAa,
    /// Current-task negatives from the student, rehearsal negatives from the
    /// teacher.
    NsptAn,
}

impl NsptVariant {
    pub const ALL: [NsptVariant; 4] = [Self::Nspt, Self::Ntpt, Self::NsptAa, Self::NsptAn];

    pub fn name(self) -> &'static str {
        match self {
            Self::Nspt => "nspt",
            Self::Ntpt => "ntpt",
            Self::NsptAa => "nspt-aa",
            Self::NsptAn => "nspt-an",
        }
    }
}

impl std::str::FromStr for NsptVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    /// Learn the alignment temperature as `log τ`, starting from
    /// `tau_init`.
    pub learnable_tau: bool,
    pub tau_init: f64,
    pub lambda_mm: f64,
    pub nspt_variant: NsptVariant,
    pub nspt_audio: bool,
    pub nspt_text: bool,
    pub mm_use_cls_only: bool,
    pub mm_exclude_rehearsal_anchors: bool,
    pub include_self_in_denominator: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            learnable_tau: false,
            tau_init: 0.07,
            lambda_mm: 0.1,
            nspt_variant: NsptVariant::Nspt,
            nspt_audio: true,
            nspt_text: true,
            mm_use_cls_only: true,
            mm_exclude_rehearsal_anchors: true,
            include_self_in_denominator: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature {} must be positive",
                self.tau
            )));
        }
        if self.learnable_tau && !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "initial temperature {} must be positive",
                self.tau_init
            )));
        }
        Ok(())
    }
}

/// Temperature of one loss term: a constant, or `exp(log τ)` read from a
/// scalar graph node.
#[derive(Clone, Copy, Debug)]
pub enum Temperature {
    Fixed(f64),
    LogParam(Var),
}

impl Temperature {
    fn check(self) -> Result<Self> {
        match self {
            Self::Fixed(t) if !(t > 0.0 && t.is_finite()) => {
                Err(Error::InvalidArgument(format!("temperature {t} must be positive")))
            }
            t => Ok(t),
        }
    }

    fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(match self {
            Self::Fixed(t) => g.scale(x, 1.0 / t)?,
            Self::LogParam(log_tau) => {
                let neg = g.scale(log_tau, -1.0)?;
                let inv = g.exp(neg)?;
                g.mul(x, inv)?
            }
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchIndexSets {
    /// New-task rows.
    pub current: Vec<usize>,
    /// Rehearsal rows.
    pub rehearsal: Vec<usize>,
}

impl BatchIndexSets {
    pub fn new(current: Vec<usize>, rehearsal: Vec<usize>, batch_size: usize) -> Result<Self> {
        let mut seen = vec![false; batch_size];
        for &i in current.iter().chain(&rehearsal) {
            if i >= batch_size {
                return Err(Error::InvalidArgument(format!(
                    "index {i} outside a batch of {batch_size}"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!("index {i} appears twice")));
            }
        }
        Ok(Self { current, rehearsal })
    }

    /// Current rows only.
    pub fn all_current(batch_size: usize) -> Self {
        Self {
            current: (0..batch_size).collect(),
            rehearsal: Vec::new(),
        }
    }

    /// `I = I_c ∪ I_r`, ascending.
    pub fn all(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.current.iter().chain(&self.rehearsal).copied().collect();
        v.sort_unstable();
        v
    }

    pub fn len(&self) -> usize {
        self.current.len() + self.rehearsal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `P(k)` for each anchor: the candidates sharing its label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositiveMap {
    pub anchors: Vec<usize>,
    pub positives: Vec<Vec<usize>>,
}

impl PositiveMap {
    pub fn build(labels: &[usize], anchors: &[usize], candidates: &[usize], include_self: bool) -> Self {
        let positives = anchors
            .iter()
            .map(|&k| {
                candidates
                    .iter()
                    .copied()
                    .filter(|&p| labels[p] == labels[k] && (include_self || p != k))
                    .collect()
            })
            .collect();
        Self {
            anchors: anchors.to_vec(),
            positives,
        }
    }
}

/// One block of denominator columns: rows `cols` of `emb`.
struct Negatives {
    emb: Var,
    cols: Vec<usize>,
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// The assembled contrastive sum. `pos_emb` rows are indexed by batch
/// position; `exclude_self` drops column `k` from anchor `k`'s denominator.
fn contrast(
    g: &mut Graph,
    anchor_emb: Var,
    pos: &PositiveMap,
    pos_emb: Var,
    negatives: &[Negatives],
    exclude_self: bool,
    tau: Temperature,
) -> Result<Var> {
    let tau = tau.check()?;
    let allowed = |k: usize, i: usize| !(exclude_self && i == k);
    let active: Vec<usize> = (0..pos.anchors.len())
        .filter(|&a| {
            let k = pos.anchors[a];
            !pos.positives[a].is_empty() && negatives.iter().any(|n| n.cols.iter().any(|&i| allowed(k, i)))
        })
        .collect();
    if active.is_empty() {
        return Ok(zero(g));
    }
    let anchors: Vec<usize> = active.iter().map(|&a| pos.anchors[a]).collect();
    let z = g.gather_rows(anchor_emb, &anchors)?;

    let b = g.value(pos_emb).rows();
    let mut w = vec![0.0; anchors.len() * b];
    for (r, &a) in active.iter().enumerate() {
        let ps = &pos.positives[a];
        for &p in ps {
            w[r * b + p] += 1.0 / ps.len() as f64;
        }
    }
    let wt = g.transpose(pos_emb)?;
    let num = g.matmul(z, wt)?;
    let num = tau.apply(g, num)?;
    let wc = g.constant(Tensor::matrix(anchors.len(), b, w)?);
    let num = g.mul(num, wc)?;
    let num = g.sum(num)?;

    let mut blocks = Vec::with_capacity(negatives.len());
    let mut mask = Vec::new();
    for n in negatives.iter().filter(|n| !n.cols.is_empty()) {
        let rows = g.gather_rows(n.emb, &n.cols)?;
        let rt = g.transpose(rows)?;
        blocks.push(g.matmul(z, rt)?);
    }
    for &k in &anchors {
        for n in negatives.iter().filter(|n| !n.cols.is_empty()) {
            mask.extend(n.cols.iter().map(|&i| !allowed(k, i)));
        }
    }
    let den = if blocks.len() == 1 {
        blocks[0]
    } else {
        g.concat(&blocks, 1)?
    };
    let den = tau.apply(g, den)?;
    let den = if mask.iter().any(|&m| m) {
        g.masked_fill(den, &mask, f64::NEG_INFINITY)?
    } else {
        den
    };
    let lse = g.log_sum_exp_rows(den)?;
    let lse = g.sum(lse)?;
    Ok(g.sub(lse, num)?)
}

fn check_finite(g: &Graph, vs: &[Var], what: &str) -> Result<()> {
    if vs.iter().all(|&v| g.value(v).all_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("non-finite {what} embedding")))
    }
}

fn check_rows(g: &Graph, vs: &[Var], labels: &[usize]) -> Result<()> {
    for &v in vs {
        let r = g.value(v).rows();
        if r != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{r} embedding rows for {} labels",
                labels.len()
            )));
        }
    }
    Ok(())
}

/// Supervised contrastive loss over the rows of `z`: every row is an
/// anchor, `P(k)` holds the other rows with its label, and the denominator
/// runs over all rows (row `k` included unless `include_self` is off).
pub fn scl_loss(g: &mut Graph, z: Var, labels: &[usize], tau: f64, include_self: bool) -> Result<Var> {
    check_rows(g, &[z], labels)?;
    check_finite(g, &[z], "contrastive")?;
    let all: Vec<usize> = (0..labels.len()).collect();
    let pos = PositiveMap::build(labels, &all, &all, false);
    let neg = [Negatives { emb: z, cols: all }];
    contrast(g, z, &pos, z, &neg, !include_self, Temperature::Fixed(tau))
}

/// Student and teacher projections of one batch, every row populated.
#[derive(Clone, Copy, Debug)]
pub struct NsptInputs {
    pub student_a: Var,
    pub teacher_a: Var,
    pub student_t: Var,
    pub teacher_t: Var,
}

/// Contrastive distillation with teacher positives. Anchors are the
/// rehearsal rows (every row for `NsptAa`); `P(k)` holds the rehearsal rows
/// (every row for `NsptAa`) sharing `k`'s label, `k` itself included. Returns
/// zero when the batch has no rehearsal rows.
pub fn nspt_loss(
    g: &mut Graph,
    x: &NsptInputs,
    labels: &[usize],
    idx: &BatchIndexSets,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let ms = [x.student_a, x.teacher_a, x.student_t, x.teacher_t];
    check_rows(g, &ms, labels)?;
    check_finite(g, &ms, "distillation")?;
    if idx.rehearsal.is_empty() {
        return Ok(zero(g));
    }
    let all = idx.all();
    let (anchors, candidates) = match cfg.nspt_variant {
        NsptVariant::NsptAa => (all.clone(), all.clone()),
        _ => (idx.rehearsal.clone(), idx.rehearsal.clone()),
    };
    let pos = PositiveMap::build(labels, &anchors, &candidates, true);
    let exclude_self = !cfg.include_self_in_denominator;
    let tau = Temperature::Fixed(cfg.tau);
    let term = |g: &mut Graph, student: Var, teacher: Var| -> Result<Var> {
        let neg = match cfg.nspt_variant {
            NsptVariant::Nspt | NsptVariant::NsptAa => vec![Negatives {
                emb: student,
                cols: all.clone(),
            }],
            NsptVariant::Ntpt => vec![Negatives {
                emb: teacher,
                cols: all.clone(),
            }],
            NsptVariant::NsptAn => vec![
                Negatives {
                    emb: student,
                    cols: idx.current.clone(),
                },
                Negatives {
                    emb: teacher,
                    cols: idx.rehearsal.clone(),
                },
            ],
        };
        contrast(g, student, &pos, teacher, &neg, exclude_self, tau)
    };
    let mut total = zero(g);
    if cfg.nspt_audio {
        let la = term(g, x.student_a, x.teacher_a)?;
        total = g.add(total, la)?;
    }
    if cfg.nspt_text {
        let lt = term(g, x.student_t, x.teacher_t)?;
        total = g.add(total, lt)?;
    }
    Ok(total)
}

/// Symmetric audio↔text alignment. Anchors are the current rows (every row
/// when rehearsal anchors are allowed), `P(k)` holds every row sharing the
/// label with `k` included, and both denominators run over the batch.
pub fn mm_loss(
    g: &mut Graph,
    a: Var,
    t: Var,
    labels: &[usize],
    idx: &BatchIndexSets,
    cfg: &LossConfig,
    tau: Temperature,
) -> Result<Var> {
    check_rows(g, &[a, t], labels)?;
    check_finite(g, &[a, t], "alignment")?;
    let all = idx.all();
    let anchors = if cfg.mm_exclude_rehearsal_anchors {
        idx.current.clone()
    } else {
        all.clone()
    };
    let include_self = cfg.include_self_in_denominator;
    let pos = PositiveMap::build(labels, &anchors, &all, include_self);
    let a2t = contrast(
        g,
        a,
        &pos,
        t,
        &[Negatives {
            emb: t,
            cols: all.clone(),
        }],
        !include_self,
        tau,
    )?;
    let t2a = contrast(g, t, &pos, a, &[Negatives { emb: a, cols: all }], !include_self, tau)?;
    Ok(g.add(a2t, t2a)?)
}

/// Mean over rehearsal rows of `1 − cos(student_k, teacher_k)`; zero
/// without rehearsal rows.
pub fn feature_kd_loss(g: &mut Graph, student: Var, teacher: Var, rehearsal: &[usize]) -> Result<Var> {
    if rehearsal.is_empty() {
        return Ok(zero(g));
    }
    let s = g.gather_rows(student, rehearsal)?;
    let t = g.gather_rows(teacher, rehearsal)?;
    let s = g.l2_normalize_rows(s)?;
    let t = g.l2_normalize_rows(t)?;
    let c = g.mul(s, t)?;
    let c = g.sum(c)?;
    let c = g.scale(c, -1.0 / rehearsal.len() as f64)?;
    let one = g.constant(Tensor::scalar(1.0));
    Ok(g.add(c, one)?)
}

/// `L_p / (L_p + L_n)`
pub fn lambda_nspt(past: usize, new: usize) -> Result<f64> {
    if past + new == 0 {
        return Err(Error::InvalidArgument("no classes to weight".into()));
    }
    Ok(past as f64 / (past + new) as f64)
}

/// `asr + λ_MM·mm + λ_NSPT·nspt`; absent terms are skipped.
pub fn combined_loss(
    g: &mut Graph,
    asr: Var,
    mm: Option<Var>,
    nspt: Option<Var>,
    lambda_mm: f64,
    lambda_nspt: f64,
) -> Result<Var> {
    let mut total = asr;
    for (v, w) in [(mm, lambda_mm), (nspt, lambda_nspt)] {
        let Some(v) = v else { continue };
        let term = g.scale(v, w)?;
        total = g.add(total, term)?;
    }
    for v in [Some(asr), mm, nspt, Some(total)].into_iter().flatten() {
        let x = g.value(v).item()?;
        if !x.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite loss term {x}")));
        }
    }
    Ok(total)
}
