//! Comparison tables over a directory of `result.json` files.

use std::path::{Path, PathBuf};

use avcil_core::baselines::Strategy;
use avcil_core::model::Modality;
use walkdir::WalkDir;

use crate::error::{config_err, HarnessError, Result};
use crate::results::RunResult;

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    /// Result file path relative to the scanned directory.
    pub source: String,
    pub strategy: Strategy,
    pub modality: Modality,
    pub seed: u64,
    pub mean_acc: f64,
    pub avg_forget: Option<f64>,
    /// Accuracy on all seen classes after each step.
    pub acc_step: Vec<f64>,
    /// Accuracy on task k right after step k.
    pub task_acc: Vec<f64>,
}

impl CompareRow {
    pub fn from_result(source: String, r: &RunResult) -> CompareRow {
        CompareRow {
            source,
            strategy: r.strategy,
            modality: r.modality,
            seed: r.seed,
            mean_acc: r.mean_accuracy,
            avg_forget: r.average_forgetting,
            acc_step: r.matrix.overall.clone(),
            task_acc: r.matrix.diagonal(),
        }
    }
}

/// Every `result.json` below `dir`, verified, in path order.
pub fn collect_results(dir: &Path) -> Result<Vec<(PathBuf, RunResult)>> {
    if !dir.is_dir() {
        return Err(config_err(format!("{} is not a directory", dir.display())));
    }
    let mut out = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| config_err(format!("scanning {}: {e}", dir.display())))?;
        if entry.file_type().is_file() && entry.file_name() == "result.json" {
            let path = entry.path().to_path_buf();
            let r = RunResult::load(&path)?;
            out.push((path, r));
        }
    }
    if out.is_empty() {
        return Err(config_err(format!("no result.json files under {}", dir.display())));
    }
    Ok(out)
}

/// Rows sorted by mean accuracy, best first.
pub fn compare_rows(dir: &Path) -> Result<Vec<CompareRow>> {
    let mut rows: Vec<CompareRow> = collect_results(dir)?
        .iter()
        .map(|(p, r)| {
            let rel = p.strip_prefix(dir).unwrap_or(p);
            CompareRow::from_result(rel.display().to_string(), r)
        })
        .collect();
    rows.sort_by(|a, b| b.mean_acc.total_cmp(&a.mean_acc).then_with(|| a.source.cmp(&b.source)));
    Ok(rows)
}

pub fn compare_csv(rows: &[CompareRow]) -> Result<Vec<u8>> {
    let steps = rows.iter().map(|r| r.acc_step.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["strategy", "modality", "seed", "mean_acc", "avg_forget"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=steps).map(|k| format!("acc_step_{k}")));
    header.extend((1..=steps).map(|k| format!("task_acc_{k}")));
    header.push("source".into());
    w.write_record(&header)?;
    let cell = |v: Option<&f64>| v.map(f64::to_string).unwrap_or_default();
    for r in rows {
        let mut rec = vec![
            r.strategy.tag().to_string(),
            r.modality.name().to_string(),
            r.seed.to_string(),
            r.mean_acc.to_string(),
            cell(r.avg_forget.as_ref()),
        ];
        rec.extend((0..steps).map(|k| cell(r.acc_step.get(k))));
        rec.extend((0..steps).map(|k| cell(r.task_acc.get(k))));
        rec.push(r.source.clone());
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| HarnessError::Config(format!("csv buffer: {e}")))
}
