//! Precomputed-feature datasets: in-memory model, the AVCF binary format,
//! stratified splitting and synthetic generators.

mod format;
mod split;
mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub use format::{load_dataset, read_dataset, save_dataset, write_dataset, FORMAT_MAGIC, FORMAT_VERSION};
pub use split::{split_dataset, SplitRequest};
pub use synthetic::{generate_synthetic, GeneratorMode, GeneratorSpec};

/// Shape of one sample's features: audio is `d`, visual is `frames x cells x d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub d: usize,
    pub frames: usize,
    pub cells: usize,
}

impl Geometry {
    pub fn visual_len(&self) -> usize {
        self.frames * self.cells * self.d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Split> {
        match tag {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// One video's frozen features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSample {
    pub sample_id: u32,
    pub label: u32,
    pub split: Split,
    /// `d` values.
    pub audio: Vec<f64>,
    /// `frames * cells * d` values, row-major.
    pub visual: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default)]
    pub generator: Option<GeneratorSpec>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub geometry: Geometry,
    pub num_classes: usize,
    pub samples: Vec<FeatureSample>,
    pub manifest: Manifest,
}

impl FeatureDataset {
    pub fn new(geometry: Geometry, num_classes: usize, samples: Vec<FeatureSample>) -> Result<Self> {
        let ds = FeatureDataset {
            geometry,
            num_classes,
            samples,
            manifest: Manifest::default(),
        };
        ds.check_samples()?;
        Ok(ds)
    }

    /// Shapes, label range and finiteness of every sample.
    pub fn check_samples(&self) -> Result<()> {
        ensure!(self.geometry.d > 0, "feature width must be positive");
        for s in &self.samples {
            ensure!(
                (s.label as usize) < self.num_classes,
                "sample {} has label {} outside {} classes",
                s.sample_id,
                s.label,
                self.num_classes
            );
            ensure!(
                s.audio.len() == self.geometry.d && s.visual.len() == self.geometry.visual_len(),
                "sample {} does not match geometry {:?}",
                s.sample_id,
                self.geometry
            );
            ensure!(
                s.audio.iter().chain(&s.visual).all(|v| v.is_finite()),
                "sample {} has non-finite features",
                s.sample_id
            );
        }
        Ok(())
    }

    /// Every class appears in both the train and the test split.
    pub fn check_splits(&self) -> Result<()> {
        let counts = self.split_counts();
        for c in 0..self.num_classes as u32 {
            let (train, _, test) = counts.get(&c).copied().unwrap_or_default();
            ensure!(train > 0 && test > 0, "class {} lacks train or test samples", c);
        }
        Ok(())
    }

    /// (train, val, test) counts per class.
    pub fn split_counts(&self) -> BTreeMap<u32, (usize, usize, usize)> {
        let mut out: BTreeMap<u32, (usize, usize, usize)> = BTreeMap::new();
        for s in &self.samples {
            let e = out.entry(s.label).or_default();
            match s.split {
                Split::Train => e.0 += 1,
                Split::Val => e.1 += 1,
                Split::Test => e.2 += 1,
            }
        }
        out
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    /// Indices into `samples` with the given split and a label in `classes`.
    pub fn indices_where(&self, split: Split, classes: &[u32]) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split && classes.contains(&s.label))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn index_of(&self, sample_id: u32) -> Option<usize> {
        self.samples.iter().position(|s| s.sample_id == sample_id)
    }
}
