//! Run configuration files.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "generator": { "mode": "aligned", ... },
//!   "sequence": { "steps": 4, "classes_per_step": 4 },
//!   "train": { "strategy": "avcil", "epochs": 30, ... },
//!   "seeds": [0, 1, 2]
//! }
//! ```
//!
//! Exactly one of `dataset` (path to an AVCF file, relative paths resolve
//! against the config file's directory) and `generator` must be given.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use avcil_core::datasets::{load_dataset, FeatureDataset, GeneratorSpec};
use avcil_core::protocol::{build_task_sequence, TaskSequence, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, HarnessError, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "AVCIL_OUTPUT_ROOT";

fn format_version() -> u32 {
    FORMAT_VERSION
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    pub steps: usize,
    pub classes_per_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "format_version")]
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
    pub sequence: SequenceSpec,
    #[serde(default)]
    pub train: TrainConfig,
    /// Each seed drives the task order and initialization; with a generator
    /// it also replaces the generator seed.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Seeds trained concurrently.
    #[serde(default = "one")]
    pub workers: usize,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        let mut cfg = RunConfig::from_json(&text).map_err(|e| match e {
            HarnessError::Config(m) => config_err(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(ds) = &cfg.dataset {
            if ds.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.dataset = Some(base.join(ds));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(config_err(format!(
                "format_version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        match (&self.dataset, &self.generator) {
            (Some(_), Some(_)) => return Err(config_err("give either `dataset` or `generator`, not both")),
            (None, None) => return Err(config_err("one of `dataset` or `generator` is required")),
            _ => {}
        }
        if let Some(g) = &self.generator {
            g.validate().map_err(|e| config_err(format!("generator: {e}")))?;
            self.check_class_budget(g.num_classes)?;
        }
        if self.sequence.steps == 0 || self.sequence.classes_per_step == 0 {
            return Err(config_err("sequence.steps and sequence.classes_per_step must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds must not be empty"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(config_err("seeds must be distinct"));
        }
        if self.workers == 0 {
            return Err(config_err("workers must be at least 1"));
        }
        self.train.validate().map_err(|e| config_err(format!("train: {e}")))
    }

    fn check_class_budget(&self, available: usize) -> Result<()> {
        let need = self.sequence.steps * self.sequence.classes_per_step;
        if need > available {
            return Err(config_err(format!(
                "sequence needs {need} classes ({} x {}), the data has {available}",
                self.sequence.steps, self.sequence.classes_per_step
            )));
        }
        Ok(())
    }

    /// The train config for one seed.
    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    pub fn generator_for(&self, seed: u64) -> Option<GeneratorSpec> {
        self.generator.as_ref().map(|g| GeneratorSpec { seed, ..g.clone() })
    }

    pub fn sequence_for(&self, dataset: &FeatureDataset, seed: u64) -> Result<TaskSequence> {
        self.check_class_budget(dataset.num_classes)?;
        let ids: Vec<u32> = (0..dataset.num_classes as u32).collect();
        Ok(build_task_sequence(&ids, self.sequence.steps, self.sequence.classes_per_step, seed)?)
    }

    /// Output directory: explicit override, then the config's `output_dir`,
    /// then `$AVCIL_OUTPUT_ROOT`, then `./runs`.
    pub fn output_root(&self, cli_override: Option<&Path>) -> PathBuf {
        if let Some(p) = cli_override {
            return p.to_path_buf();
        }
        if let Some(p) = &self.output_dir {
            return p.clone();
        }
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root),
            _ => PathBuf::from("runs"),
        }
    }

    pub fn load_fixed_dataset(&self) -> Result<Option<FeatureDataset>> {
        let Some(path) = &self.dataset else {
            return Ok(None);
        };
        let ds = load_dataset(path).map_err(|e| match e {
            avcil_core::Error::Io(source) => HarnessError::Io {
                path: path.clone(),
                source,
            },
            other => other.into(),
        })?;
        ds.check_splits()?;
        self.check_class_budget(ds.num_classes)?;
        Ok(Some(ds))
    }
}
