use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{FeatureDataset, Split};
use crate::error::{contract, ensure, Result};
use crate::rng::{stream, Purpose};

/// How many samples of each class go to validation and test; the rest train.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRequest {
    /// Fractions of each class, rounded down.
    Ratios { val: f64, test: f64 },
    /// Exact per-class counts.
    Counts { val: usize, test: usize },
}

/// Re-tags every sample with a stratified, seeded split.
pub fn split_dataset(ds: &FeatureDataset, request: SplitRequest, seed: u64) -> Result<FeatureDataset> {
    if let SplitRequest::Ratios { val, test } = request {
        ensure!(
            val >= 0.0 && test >= 0.0 && val + test <= 1.0,
            "split ratios val={} test={} must be non-negative and sum to at most 1",
            val,
            test
        );
    }
    let mut out = ds.clone();
    let mut too_small = Vec::new();
    let mut by_class: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, s) in ds.samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    for (&class, members) in &by_class {
        let n = members.len();
        let (val, test) = match request {
            SplitRequest::Ratios { val, test } => {
                ((val * n as f64).floor() as usize, (test * n as f64).floor() as usize)
            }
            SplitRequest::Counts { val, test } => (val, test),
        };
        // at least one training sample must remain
        if val + test >= n {
            too_small.push(format!("class {class} ({n} samples, needs > {})", val + test));
            continue;
        }
        let mut order = members.clone();
        order.shuffle(&mut stream(seed, Purpose::Split, class as u64));
        for (k, &idx) in order.iter().enumerate() {
            out.samples[idx].split = if k < val {
                Split::Val
            } else if k < val + test {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    if !too_small.is_empty() {
        return Err(contract(format!(
            "classes too small for the requested split: {}",
            too_small.join(", ")
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, GeneratorSpec};

    fn ds(per_class: usize) -> FeatureDataset {
        generate_synthetic(&GeneratorSpec {
            num_classes: 3,
            train_per_class: per_class,
            test_per_class: 0,
            d: 2,
            frames: 1,
            cells: 1,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn exact_counts() {
        let out = split_dataset(&ds(200), SplitRequest::Counts { val: 50, test: 50 }, 1).unwrap();
        for (_, (train, val, test)) in out.split_counts() {
            assert_eq!((train, val, test), (100, 50, 50));
        }
        out.check_splits().unwrap();
    }

    #[test]
    fn ratios() {
        let out = split_dataset(&ds(10), SplitRequest::Ratios { val: 0.2, test: 0.3 }, 1).unwrap();
        for (_, counts) in out.split_counts() {
            assert_eq!(counts, (5, 2, 3));
        }
    }

    #[test]
    fn ratios_over_one_rejected() {
        assert!(split_dataset(&ds(10), SplitRequest::Ratios { val: 0.6, test: 0.5 }, 1).is_err());
    }

    #[test]
    fn small_class_named() {
        let err = split_dataset(&ds(4), SplitRequest::Counts { val: 2, test: 2 }, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("class 0") && msg.contains("class 2"), "{msg}");
    }

    #[test]
    fn deterministic_tags() {
        let req = SplitRequest::Counts { val: 3, test: 3 };
        let a = split_dataset(&ds(20), req, 9).unwrap();
        let b = split_dataset(&ds(20), req, 9).unwrap();
        let c = split_dataset(&ds(20), req, 10).unwrap();
        let tags = |d: &FeatureDataset| d.samples.iter().map(|s| s.split).collect::<Vec<_>>();
        assert_eq!(tags(&a), tags(&b));
        assert_ne!(tags(&a), tags(&c));
    }
}
