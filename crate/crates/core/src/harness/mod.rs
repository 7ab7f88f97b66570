//! The class-incremental protocol.

pub mod batches;
pub mod buffer;
pub mod config;
pub mod rundir;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{Corpus, Split};

pub use batches::{make_batches, MiniBatch};
pub use buffer::{select_herding, select_random, BufferPolicy, RehearsalBuffer, Selection};
pub use config::{Strategy, StrategyConfig};
pub use rundir::{run_dir_name, write_run};
pub use train::{batch_loss, batch_targets, evaluate, run_cil, run_many, BatchLoss, PseudoTable, RunOutput, StepLog};

/// Disjoint intent groups in training order, with their example ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub intents: Vec<Vec<usize>>,
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

impl TaskSpec {
    pub fn num_tasks(&self) -> usize {
        self.intents.len()
    }

    /// Task holding `intent`.
    pub fn task_of(&self, intent: usize) -> Option<usize> {
        self.intents.iter().position(|t| t.contains(&intent))
    }
}

/// Intent ids by descending count, ties by ascending id.
pub fn order_intents(counts: &[usize]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..counts.len()).collect();
    ids.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    ids
}

/// Splits the intents into `num_tasks` equal consecutive groups, larger
/// classes first.
pub fn split_tasks(corpus: &Corpus, num_tasks: usize) -> Result<TaskSpec> {
    let n = corpus.num_intents();
    if num_tasks == 0 || !n.is_multiple_of(num_tasks) {
        return Err(Error::InvalidArgument(format!(
            "{n} intents do not split into {num_tasks} tasks"
        )));
    }
    let per = n / num_tasks;
    let order = order_intents(&corpus.class_counts());
    let intents: Vec<Vec<usize>> = order.chunks(per).map(<[usize]>::to_vec).collect();
    let ids_of = |task: &[usize], split: Split| -> Vec<usize> {
        corpus
            .examples
            .iter()
            .filter(|e| e.split == split && task.contains(&e.intent))
            .map(|e| e.id)
            .collect()
    };
    Ok(TaskSpec {
        train: intents.iter().map(|t| ids_of(t, Split::Train)).collect(),
        test: intents.iter().map(|t| ids_of(t, Split::Test)).collect(),
        intents,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, CorpusSpec};

    #[test]
    fn cardinality_order() {
        // A:10, B:30, C:20
        assert_eq!(order_intents(&[10, 30, 20]), vec![1, 2, 0]);
        assert_eq!(order_intents(&[5, 7, 5, 7]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn default_corpus_six_by_five() {
        let c = generate_corpus(&CorpusSpec::default()).unwrap();
        let t = split_tasks(&c, 6).unwrap();
        assert!(t.intents.iter().all(|g| g.len() == 5));
        let mut all: Vec<usize> = t.intents.concat();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
        let counts = c.class_counts();
        let seq: Vec<usize> = t.intents.concat().iter().map(|&i| counts[i]).collect();
        assert!(seq.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(t.train.iter().map(Vec::len).sum::<usize>(), c.train_ids().len());
    }

    #[test]
    fn offline_is_one_task() {
        let c = generate_corpus(&CorpusSpec::default()).unwrap();
        let t = split_tasks(&c, 1).unwrap();
        assert_eq!(t.num_tasks(), 1);
        assert_eq!(t.intents[0].len(), 30);
    }

    #[test]
    fn indivisible_rejected() {
        let c = generate_corpus(&CorpusSpec::default()).unwrap();
        assert!(split_tasks(&c, 7).is_err());
        assert!(split_tasks(&c, 0).is_err());
    }
}
