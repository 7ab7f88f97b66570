//! Intent accuracy, word error rate, and the per-run accuracy matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of predictions equal to the gold intent; `None` is wrong.
pub fn intent_accuracy(predictions: &[Option<usize>], golds: &[usize]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} golds",
            predictions.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let hits = predictions.iter().zip(golds).filter(|(p, g)| **p == Some(**g)).count();
    Ok(hits as f64 / golds.len() as f64)
}

/// Unit-cost Levenshtein distance, two-row dynamic programme.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance over reference length. With `skip_prefix` the first two
/// tokens (intent and separator) of both sequences are ignored.
pub fn wer(reference: &[usize], hypothesis: &[usize], skip_prefix: bool) -> Result<f64> {
    let (r, h) = if skip_prefix {
        (tail(reference), tail(hypothesis))
    } else {
        (reference, hypothesis)
    };
    if r.is_empty() {
        return Err(Error::Empty("reference"));
    }
    Ok(edit_distance(r, h) as f64 / r.len() as f64)
}

fn tail(s: &[usize]) -> &[usize] {
    &s[s.len().min(2)..]
}

/// Corpus-level WER: total edits over total reference length.
pub fn corpus_wer(pairs: &[(&[usize], &[usize])], skip_prefix: bool) -> Result<f64> {
    let mut edits = 0;
    let mut len = 0;
    for (r, h) in pairs {
        let (r, h) = if skip_prefix { (tail(r), tail(h)) } else { (*r, *h) };
        edits += edit_distance(r, h);
        len += r.len();
    }
    if len == 0 {
        return Err(Error::Empty("reference"));
    }
    Ok(edits as f64 / len as f64)
}

/// Evaluation history of one run. `accuracy[i][j]` is the accuracy on task
/// `j`'s test set after training task `i`, for `j ≤ i`; `test_sizes[j]`
/// weights task `j`; `wer[i]` covers the union of test sets `0..=i`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub accuracy: Vec<Vec<f64>>,
    pub wer: Vec<f64>,
    pub test_sizes: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub avg_acc: f64,
    pub last_acc: f64,
    pub avg_wer: f64,
}

impl RunMetrics {
    pub fn num_tasks(&self) -> usize {
        self.test_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_tasks();
        if n == 0 {
            return Err(Error::Empty("metrics"));
        }
        if self.accuracy.len() != n || self.wer.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} accuracy rows and {} WER entries for {n} tasks",
                self.accuracy.len(),
                self.wer.len()
            )));
        }
        for (i, row) in self.accuracy.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::InvalidArgument(format!(
                    "accuracy row {i} has {} entries",
                    row.len()
                )));
            }
            if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::InvalidArgument(format!("accuracy row {i} leaves [0, 1]")));
            }
        }
        if self.test_sizes.contains(&0) {
            return Err(Error::Empty("task test set"));
        }
        Ok(())
    }

    /// Accuracy after task `i` over tasks `0..=i`, size-weighted or plain.
    pub fn after_task(&self, i: usize, weighted: bool) -> f64 {
        let row = &self.accuracy[i];
        if weighted {
            let total: usize = self.test_sizes[..=i].iter().sum();
            row.iter()
                .zip(&self.test_sizes)
                .map(|(a, &n)| a * n as f64)
                .sum::<f64>()
                / total as f64
        } else {
            row.iter().sum::<f64>() / row.len() as f64
        }
    }

    pub fn summarize(&self, weighted: bool) -> Result<Summary> {
        self.validate()?;
        let n = self.num_tasks();
        let a: Vec<f64> = (0..n).map(|i| self.after_task(i, weighted)).collect();
        Ok(Summary {
            avg_acc: a.iter().sum::<f64>() / n as f64,
            last_acc: a[n - 1],
            avg_wer: self.wer.iter().sum::<f64>() / n as f64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_cases() {
        assert_eq!(intent_accuracy(&[Some(1), Some(2)], &[1, 2]).unwrap(), 1.0);
        assert_eq!(intent_accuracy(&[None, None], &[1, 2]).unwrap(), 0.0);
        let p: Vec<Option<usize>> = (0..10).map(|i| if i < 7 { Some(i) } else { Some(99) }).collect();
        let g: Vec<usize> = (0..10).collect();
        assert!((intent_accuracy(&p, &g).unwrap() - 0.7).abs() < 1e-15);
        assert!(intent_accuracy(&[], &[]).is_err());
        assert!(intent_accuracy(&[Some(1)], &[]).is_err());
    }

    #[test]
    fn wer_cases() {
        assert_eq!(wer(&[1, 2, 3], &[1, 2, 3], false).unwrap(), 0.0);
        assert!((wer(&[1, 2, 3], &[1, 9, 3], false).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer(&[1, 2], &[1, 2, 3, 4], false).unwrap(), 1.0);
        assert!(wer(&[], &[1], false).is_err());
        // intent and separator ignored
        assert_eq!(wer(&[5, 3, 7], &[6, 3, 7], true).unwrap(), 0.0);
    }

    #[test]
    fn corpus_wer_pools_edits() {
        let r1 = [1, 2, 3, 4];
        let h1 = [1, 2, 3, 4];
        let r2 = [1, 2];
        let h2 = [9, 9];
        let w = corpus_wer(&[(&r1, &h1), (&r2, &h2)], false).unwrap();
        assert!((w - 2.0 / 6.0).abs() < 1e-15);
    }

    fn metrics(rows: Vec<Vec<f64>>, sizes: Vec<usize>) -> RunMetrics {
        let n = rows.len();
        RunMetrics {
            accuracy: rows,
            wer: vec![0.1; n],
            test_sizes: sizes,
        }
    }

    #[test]
    fn single_task_summary() {
        let s = metrics(vec![vec![0.9]], vec![5]).summarize(true).unwrap();
        assert_eq!((s.avg_acc, s.last_acc), (0.9, 0.9));
    }

    #[test]
    fn averages_after_each_task() {
        let m = metrics(vec![vec![0.8], vec![0.7, 0.7], vec![0.6, 0.6, 0.6]], vec![3, 3, 3]);
        let s = m.summarize(true).unwrap();
        assert!((s.avg_acc - 0.7).abs() < 1e-15);
        assert!((s.last_acc - 0.6).abs() < 1e-15);
        assert!((s.avg_wer - 0.1).abs() < 1e-15);
    }

    #[test]
    fn equal_sizes_weight_evenly() {
        let m = metrics(vec![vec![1.0], vec![1.0, 0.5]], vec![4, 4]);
        assert_eq!(m.after_task(1, true), 0.75);
        let m = metrics(vec![vec![1.0], vec![1.0, 0.5]], vec![6, 2]);
        assert_eq!(m.after_task(1, true), 0.875);
        assert_eq!(m.after_task(1, false), 0.75);
    }

    #[test]
    fn incomplete_matrix_rejected() {
        assert!(metrics(vec![vec![0.8], vec![0.7]], vec![3, 3]).summarize(true).is_err());
        assert!(metrics(vec![vec![1.5]], vec![3]).summarize(true).is_err());
        assert!(RunMetrics::default().summarize(true).is_err());
    }
}
