//! Rehearsal memory and exemplar selection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BufferPolicy {
    /// Fixed exemplars per class.
    PerClass(usize),
    /// Fraction of the whole training set, spread evenly over classes.
    Fraction(f64),
}

impl BufferPolicy {
    /// Exemplars per class: `m`, or `max(1, ⌊f · n_train / n_classes⌋)`.
    pub fn per_class(self, n_train: usize, n_classes: usize) -> Result<usize> {
        match self {
            Self::PerClass(0) => Err(Error::InvalidArgument("exemplars per class must be positive".into())),
            Self::PerClass(m) => Ok(m),
            Self::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                Err(Error::InvalidArgument(format!("buffer fraction {f} outside (0, 1]")))
            }
            Self::Fraction(f) => Ok(((f * n_train as f64) / n_classes.max(1) as f64).floor().max(1.0) as usize),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    #[default]
    Random,
    Herding,
}

/// Per-class exemplar lists in selection order. Classes are never evicted.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RehearsalBuffer {
    per_class: BTreeMap<usize, Vec<usize>>,
}

impl RehearsalBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_class(&mut self, intent: usize, ids: Vec<usize>) -> Result<()> {
        if self.per_class.contains_key(&intent) {
            return Err(Error::Invariant(format!("intent {intent} is already buffered")));
        }
        self.per_class.insert(intent, ids);
        Ok(())
    }

    /// Every stored id, class by class in selection order.
    pub fn ids(&self) -> Vec<usize> {
        self.per_class.values().flatten().copied().collect()
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_class.keys().copied()
    }

    pub fn class(&self, intent: usize) -> Option<&[usize]> {
        self.per_class.get(&intent).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Uniform sample of `min(m, n)` ids without replacement, in draw order.
pub fn select_random(ids: &[usize], m: usize, rng: &mut Rng) -> Vec<usize> {
    let mut pool = ids.to_vec();
    let k = m.min(pool.len());
    for i in 0..k {
        let j = i + rng::below(rng, pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Distances closer than this (relative) count as ties.
const TIE_EPS: f64 = 1e-12;

/// iCaRL herding. Row `i` of `embeddings` belongs to `ids[i]`. At step `j`
/// picks the unchosen example whose addition brings the running exemplar
/// mean closest to the class mean; ties go to the lower id.
pub fn select_herding(ids: &[usize], embeddings: &[Vec<f64>], m: usize) -> Result<Vec<usize>> {
    if ids.len() != embeddings.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ids for {} embeddings",
            ids.len(),
            embeddings.len()
        )));
    }
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::InvalidArgument("ragged embeddings".into()));
    }
    let n = ids.len();
    let mut mu = vec![0.0; d];
    for e in embeddings {
        for (m, x) in mu.iter_mut().zip(e) {
            *m += x / n as f64;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| ids[i]);
    let mut taken = vec![false; n];
    let mut acc = vec![0.0; d];
    let mut out = Vec::with_capacity(m.min(n));
    for step in 1..=m.min(n) {
        let mut best: Option<(f64, usize)> = None;
        for &i in &order {
            if taken[i] {
                continue;
            }
            let dist: f64 = mu
                .iter()
                .zip(&acc)
                .zip(&embeddings[i])
                .map(|((m, a), x)| {
                    let r = m - (a + x) / step as f64;
                    r * r
                })
                .sum();
            if best.is_none_or(|(b, _)| dist < b - TIE_EPS * (1.0 + b)) {
                best = Some((dist, i));
            }
        }
        let (_, i) = best.expect("an unchosen example remains");
        taken[i] = true;
        for (a, x) in acc.iter_mut().zip(&embeddings[i]) {
            *a += x;
        }
        out.push(ids[i]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn policy_sizes() {
        assert_eq!(BufferPolicy::PerClass(8).per_class(100, 10).unwrap(), 8);
        assert_eq!(BufferPolicy::Fraction(0.01).per_class(1750, 30).unwrap(), 1);
        assert_eq!(BufferPolicy::Fraction(0.5).per_class(100, 10).unwrap(), 5);
        assert!(BufferPolicy::PerClass(0).per_class(100, 10).is_err());
        assert!(BufferPolicy::Fraction(0.0).per_class(100, 10).is_err());
    }

    #[test]
    fn random_takes_all_when_m_exceeds_class() {
        let mut r = stream(1, 1);
        let mut s = select_random(&[3, 1, 2], 5, &mut r);
        s.sort_unstable();
        assert_eq!(s, vec![1, 2, 3]);
    }

    #[test]
    fn random_is_seeded() {
        let ids: Vec<usize> = (0..50).collect();
        assert_eq!(
            select_random(&ids, 5, &mut stream(9, 4)),
            select_random(&ids, 5, &mut stream(9, 4))
        );
    }

    #[test]
    fn herding_picks_the_mean_point() {
        let e = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert_eq!(select_herding(&[10, 11, 12], &e, 1).unwrap(), vec![11]);
    }

    #[test]
    fn herding_full_class_returns_everything() {
        let e = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5], vec![2.0, 2.0]];
        let mut s = select_herding(&[4, 5, 6, 7], &e, 4).unwrap();
        assert_eq!(s[0], 6);
        s.sort_unstable();
        assert_eq!(s, vec![4, 5, 6, 7]);
    }

    #[test]
    fn herding_ties_prefer_lower_id() {
        let e = vec![vec![1.0], vec![-1.0], vec![1.0], vec![-1.0]];
        // every single point is equally far from the mean 0
        assert_eq!(select_herding(&[9, 3, 7, 5], &e, 1).unwrap(), vec![3]);
    }

    #[test]
    fn herding_empty_class() {
        assert!(select_herding(&[], &[], 3).unwrap().is_empty());
    }

    #[test]
    fn buffer_rejects_duplicate_class() {
        let mut b = RehearsalBuffer::new();
        b.insert_class(2, vec![5, 6]).unwrap();
        b.insert_class(0, vec![1]).unwrap();
        assert!(b.insert_class(2, vec![7]).is_err());
        assert_eq!(b.ids(), vec![1, 5, 6]);
        assert_eq!(b.len(), 3);
    }
}
