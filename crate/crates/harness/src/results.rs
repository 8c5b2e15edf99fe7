//! Result files: per-seed `result.json`, `timing.json` and the cross-seed
//! `aggregate.json`.
//!
//! `result.json` holds only deterministic content, so reruns with the same
//! config reproduce it byte for byte; wall times live in `timing.json`.

use std::path::Path;

use avcil_core::datasets::GeneratorSpec;
use avcil_core::metrics::{average_forgetting, mean_accuracy, AccuracyMatrix};
use avcil_core::model::Modality;
use avcil_core::protocol::{TaskSequence, TrainConfig};
use avcil_core::baselines::Strategy;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::FORMAT_VERSION;
use crate::error::{HarnessError, Result};

pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataEcho {
    Dataset { path: String, sha256: String },
    Generator { spec: GeneratorSpec },
}

/// The fully resolved inputs of one seed's run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEcho {
    pub data: DataEcho,
    pub sequence: TaskSequence,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub format_version: u32,
    pub library_version: String,
    pub seed: u64,
    pub strategy: Strategy,
    pub modality: Modality,
    pub config: RunEcho,
    pub matrix: AccuracyMatrix,
    pub mean_accuracy: f64,
    pub average_forgetting: Option<f64>,
    /// Mean training loss per epoch, one list per step.
    pub loss_curves: Vec<Vec<f64>>,
    /// SHA-256 of the compact JSON of this record with an empty hash field.
    pub content_hash: String,
}

impl RunResult {
    pub fn new(seed: u64, config: RunEcho, matrix: AccuracyMatrix, loss_curves: Vec<Vec<f64>>) -> Result<RunResult> {
        let mut r = RunResult {
            format_version: FORMAT_VERSION,
            library_version: LIBRARY_VERSION.to_string(),
            seed,
            strategy: config.train.strategy,
            modality: config.train.modality,
            mean_accuracy: mean_accuracy(&matrix)?,
            average_forgetting: average_forgetting(&matrix),
            config,
            matrix,
            loss_curves,
            content_hash: String::new(),
        };
        r.content_hash = r.compute_hash();
        Ok(r)
    }

    fn compute_hash(&self) -> String {
        let blank = RunResult {
            content_hash: String::new(),
            ..self.clone()
        };
        sha256_hex(&serde_json::to_vec(&blank).expect("plain data serializes"))
    }

    /// Stored scalars must equal the metrics recomputed from the stored
    /// matrix, and the hash must match the content.
    pub fn verify(&self) -> Result<()> {
        let fail = |m: String| Err(HarnessError::Verification(format!("seed {}: {m}", self.seed)));
        if self.format_version != FORMAT_VERSION {
            return fail(format!("unsupported format_version {}", self.format_version));
        }
        let mean = mean_accuracy(&self.matrix)?;
        if mean.to_bits() != self.mean_accuracy.to_bits() {
            return fail(format!("stored mean accuracy {} but matrix gives {mean}", self.mean_accuracy));
        }
        let forget = average_forgetting(&self.matrix);
        if forget.map(f64::to_bits) != self.average_forgetting.map(f64::to_bits) {
            return fail(format!(
                "stored average forgetting {:?} but matrix gives {forget:?}",
                self.average_forgetting
            ));
        }
        let hash = self.compute_hash();
        if hash != self.content_hash {
            return fail(format!("content hash {} does not match {hash}", self.content_hash));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).expect("plain data serializes");
        s.push('\n');
        Ok(s)
    }

    /// Reads and verifies a result file.
    pub fn load(path: &Path) -> Result<RunResult> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        let r: RunResult = serde_json::from_str(&text).map_err(HarnessError::json(path))?;
        r.verify().map_err(|e| match e {
            HarnessError::Verification(m) => HarnessError::Verification(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub format_version: u32,
    pub seed: u64,
    pub step_seconds: Vec<f64>,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(MeanStd { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub mean_accuracy: f64,
    pub average_forgetting: Option<f64>,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub format_version: u32,
    pub library_version: String,
    pub strategy: Strategy,
    pub modality: Modality,
    pub runs: Vec<SeedSummary>,
    pub mean_accuracy: MeanStd,
    /// Absent for single-step runs.
    pub average_forgetting: Option<MeanStd>,
    /// Accuracy on all seen classes after each step.
    pub step_accuracy: Vec<MeanStd>,
}

impl Aggregate {
    pub fn from_results(results: &[RunResult]) -> Result<Aggregate> {
        let first = results
            .first()
            .ok_or_else(|| HarnessError::Config("nothing to aggregate".into()))?;
        let means: Vec<f64> = results.iter().map(|r| r.mean_accuracy).collect();
        let forgets: Vec<f64> = results.iter().filter_map(|r| r.average_forgetting).collect();
        let steps = results.iter().map(|r| r.matrix.steps()).min().unwrap_or(0);
        let step_accuracy = (0..steps)
            .map(|t| {
                let v: Vec<f64> = results.iter().map(|r| r.matrix.overall[t]).collect();
                MeanStd::of(&v).expect("non-empty")
            })
            .collect();
        Ok(Aggregate {
            format_version: FORMAT_VERSION,
            library_version: LIBRARY_VERSION.to_string(),
            strategy: first.strategy,
            modality: first.modality,
            runs: results
                .iter()
                .map(|r| SeedSummary {
                    seed: r.seed,
                    mean_accuracy: r.mean_accuracy,
                    average_forgetting: r.average_forgetting,
                    content_hash: r.content_hash.clone(),
                })
                .collect(),
            mean_accuracy: MeanStd::of(&means).expect("non-empty"),
            average_forgetting: if forgets.len() == results.len() {
                MeanStd::of(&forgets)
            } else {
                None
            },
            step_accuracy,
        })
    }
}
