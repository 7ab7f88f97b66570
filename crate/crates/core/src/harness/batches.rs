//! Replay-mixed minibatches.

use crate::error::{Error, Result};
use crate::losses::BatchIndexSets;
use crate::rng::{self, Rng};

/// Example ids of one batch: current-task rows first, rehearsal rows after.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiniBatch {
    pub ids: Vec<usize>,
    pub idx: BatchIndexSets,
}

/// One epoch of batches. The current-task ids are shuffled and chunked into
/// `batch_size − ⌊mix_ratio · batch_size⌋` slots per batch; the remaining
/// slots are drawn uniformly with replacement from `buffer`. An empty buffer
/// gives all-current batches.
pub fn make_batches(
    task_ids: &[usize],
    buffer: &[usize],
    batch_size: usize,
    mix_ratio: f64,
    rng: &mut Rng,
) -> Result<Vec<MiniBatch>> {
    if !(0.0..1.0).contains(&mix_ratio) {
        return Err(Error::InvalidArgument(format!("mix ratio {mix_ratio} outside [0, 1)")));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let n_r = if buffer.is_empty() {
        0
    } else {
        (mix_ratio * batch_size as f64).floor() as usize
    };
    let n_c = batch_size - n_r;
    if n_c == 0 {
        return Err(Error::InvalidArgument("no current-task slots in a batch".into()));
    }
    let mut order = task_ids.to_vec();
    rng::shuffle(rng, &mut order);
    Ok(order
        .chunks(n_c)
        .map(|chunk| {
            let mut ids = chunk.to_vec();
            ids.extend((0..n_r).map(|_| buffer[rng::below(rng, buffer.len())]));
            let c = chunk.len();
            MiniBatch {
                idx: BatchIndexSets {
                    current: (0..c).collect(),
                    rehearsal: (c..c + n_r).collect(),
                },
                ids,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn zero_mix_has_no_rehearsal() {
        let ids: Vec<usize> = (0..70).collect();
        let b = make_batches(&ids, &[100, 101], 32, 0.0, &mut stream(0, 2)).unwrap();
        assert!(b.iter().all(|m| m.idx.rehearsal.is_empty()));
    }

    #[test]
    fn quarter_mix_of_32() {
        let ids: Vec<usize> = (0..48).collect();
        let b = make_batches(&ids, &[100, 101, 102], 32, 0.25, &mut stream(0, 2)).unwrap();
        assert_eq!((b[0].idx.current.len(), b[0].idx.rehearsal.len()), (24, 8));
        for m in &b {
            for &r in &m.idx.rehearsal {
                assert!(m.ids[r] >= 100);
            }
        }
    }

    #[test]
    fn epoch_covers_task_once() {
        let ids: Vec<usize> = (10..87).collect();
        let b = make_batches(&ids, &[1, 2], 32, 0.25, &mut stream(3, 2)).unwrap();
        let mut seen: Vec<usize> = b
            .iter()
            .flat_map(|m| m.idx.current.iter().map(|&i| m.ids[i]).collect::<Vec<_>>())
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, ids);
    }

    #[test]
    fn empty_buffer_gives_full_current_batches() {
        let ids: Vec<usize> = (0..64).collect();
        let b = make_batches(&ids, &[], 32, 0.25, &mut stream(0, 2)).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b
            .iter()
            .all(|m| m.idx.current.len() == 32 && m.idx.rehearsal.is_empty()));
    }
}
