//! Result records and the cross-run comparison table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::RunOutput;
use crate::metrics::RunMetrics;

/// One finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    /// Strategy label, e.g. `er-herding`.
    pub strategy: String,
    /// Buffer setting, e.g. `8/class`.
    pub setting: String,
    pub seed: u64,
    pub config_hash: String,
    pub weighted: bool,
    pub metrics: RunMetrics,
    pub avg_acc: f64,
    pub last_acc: f64,
    pub avg_wer: f64,
    pub wall_time_secs: f64,
}

impl ResultRecord {
    pub fn from_run(run: &RunOutput, wall_time_secs: f64) -> Self {
        Self {
            strategy: run.config.label(),
            setting: run.config.setting(),
            seed: run.config.seed,
            config_hash: run.config.hash(),
            weighted: run.config.weighted_accuracy,
            metrics: run.metrics.clone(),
            avg_acc: run.summary.avg_acc,
            last_acc: run.summary.last_acc,
            avg_wer: run.summary.avg_wer,
            wall_time_secs,
        }
    }

    /// Recomputes the scalars from the matrix and compares within `1e-12`.
    pub fn check(&self) -> Result<()> {
        let s = self.metrics.summarize(self.weighted)?;
        for (name, stored, fresh) in [
            ("avg_acc", self.avg_acc, s.avg_acc),
            ("last_acc", self.last_acc, s.last_acc),
            ("avg_wer", self.avg_wer, s.avg_wer),
        ] {
            if (stored - fresh).abs() > 1e-12 {
                return Err(Error::Invariant(format!(
                    "{name} {stored} disagrees with its matrix ({fresh})"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        r.check()?;
        Ok(r)
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::Empty("sample"));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: String,
    pub setting: String,
    pub seeds: Vec<u64>,
    pub avg_acc: (f64, f64),
    pub last_acc: (f64, f64),
    pub avg_wer: (f64, f64),
}

/// One row per strategy × setting pair, in order of first appearance.
pub fn compare(records: &[ResultRecord]) -> Result<Vec<ComparisonRow>> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in records {
        let k = (r.strategy.clone(), r.setting.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(strategy, setting)| {
            let group: Vec<&ResultRecord> = records
                .iter()
                .filter(|r| r.strategy == strategy && r.setting == setting)
                .collect();
            let col = |f: fn(&ResultRecord) -> f64| mean_std(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
            Ok(ComparisonRow {
                seeds: group.iter().map(|r| r.seed).collect(),
                avg_acc: col(|r| r.avg_acc)?,
                last_acc: col(|r| r.last_acc)?,
                avg_wer: col(|r| r.avg_wer)?,
                strategy,
                setting,
            })
        })
        .collect()
}

fn pct((m, s): (f64, f64)) -> String {
    format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s)
}

pub fn markdown_table(rows: &[ComparisonRow]) -> String {
    let mut out =
        String::from("| Strategy | Buffer | Seeds | Avg Acc | Last Acc | Avg WER |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} |",
            r.strategy,
            r.setting,
            r.seeds.len(),
            pct(r.avg_acc),
            pct(r.last_acc),
            pct(r.avg_wer)
        );
    }
    out
}

pub fn csv_table(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(
        "strategy,setting,seeds,avg_acc_mean,avg_acc_std,last_acc_mean,last_acc_std,avg_wer_mean,avg_wer_std\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.strategy,
            r.setting,
            r.seeds.len(),
            r.avg_acc.0,
            r.avg_acc.1,
            r.last_acc.0,
            r.last_acc.1,
            r.avg_wer.0,
            r.avg_wer.1
        );
    }
    out
}

/// Writes `comparison.md`, `comparison.csv` and `comparison.json` into `dir`.
pub fn export_comparison(records: &[ResultRecord], dir: impl AsRef<Path>) -> Result<Vec<ComparisonRow>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let rows = compare(records)?;
    fs::write(dir.join("comparison.md"), markdown_table(&rows))?;
    fs::write(dir.join("comparison.csv"), csv_table(&rows))?;
    fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(rows)
}

/// Every `result.json` found directly under `root` or one level below it.
pub fn collect_records(root: impl AsRef<Path>) -> Result<Vec<ResultRecord>> {
    let root = root.as_ref();
    let mut paths = Vec::new();
    if root.join("result.json").is_file() {
        paths.push(root.join("result.json"));
    }
    let mut dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    paths.extend(dirs.into_iter().map(|d| d.join("result.json")).filter(|p| p.is_file()));
    paths.iter().map(ResultRecord::load).collect()
}
