//! On-disk layout of one run.
//!
//! ```text
//! config.json            run configuration
//! tasks.json             intent groups and example ids
//! checkpoints/task_N.*   model after task N
//! teachers/task_N.*      teacher used during task N (N ≥ 1) and its hashes
//! buffers/task_N.json    per-intent exemplar ids in selection order
//! skd/pseudo.json        pseudo-transcript table (S-KD strategies)
//! metrics.json           accuracy matrix, WER, summary
//! result.json            result record incl. wall time
//! log.json               per-step loss terms
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use crate::error::Result;
use crate::harness::train::RunOutput;
use crate::report::ResultRecord;
use crate::synth::Corpus;

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Writes every artifact of `run` under `dir` and returns the result record.
pub fn write_run(dir: impl AsRef<Path>, run: &RunOutput, corpus: &Corpus, wall_time_secs: f64) -> Result<ResultRecord> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_json(&dir.join("config.json"), &run.config)?;
    write_json(&dir.join("tasks.json"), &run.tasks)?;
    for (n, snap) in run.checkpoints.iter().enumerate() {
        snap.save(dir.join("checkpoints").join(format!("task_{n}")))?;
    }
    for (n, (captured, after)) in run.teacher_hashes.iter().enumerate() {
        let task = n + 1;
        let base = dir.join("teachers").join(format!("task_{task}"));
        run.checkpoints[n].save(&base)?;
        write_json(
            &base.with_extension("hash.json"),
            &json!({ "task": task, "teacher_from_task": n, "captured": captured, "after_training": after }),
        )?;
    }
    for (n, b) in run.buffers.iter().enumerate() {
        write_json(&dir.join("buffers").join(format!("task_{n}.json")), b)?;
    }
    if run.config.strategy.uses_pseudo_transcripts() {
        let table: Vec<_> = run
            .pseudo
            .iter()
            .map(|(id, y)| {
                let gold = &corpus.examples[*id].transcript;
                json!({ "id": id, "tokens": y, "gold": gold, "matches_gold": y == gold })
            })
            .collect();
        write_json(&dir.join("skd").join("pseudo.json"), &table)?;
    }
    write_json(
        &dir.join("metrics.json"),
        &json!({ "metrics": run.metrics, "summary": run.summary }),
    )?;
    let record = ResultRecord::from_run(run, wall_time_secs);
    record.save(dir.join("result.json"))?;
    write_json(&dir.join("log.json"), &run.logs)?;
    Ok(record)
}

/// `root/<label>_<setting>_seed<seed>` with `/` replaced.
pub fn run_dir_name(root: impl AsRef<Path>, run: &RunOutput) -> PathBuf {
    let c = &run.config;
    let name = format!("{}_{}_seed{}", c.label(), c.setting().replace('/', "-per-"), c.seed);
    root.as_ref().join(name.replace('+', "-plus-"))
}
