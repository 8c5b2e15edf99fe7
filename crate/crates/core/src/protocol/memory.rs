use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::FeatureSample;
use crate::error::{ensure, Result};
use crate::rng::{stream, Purpose};

/// Fixed-capacity exemplar store, balanced across classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarMemory {
    pub capacity: usize,
    /// Class label to stored sample ids (ascending).
    pub store: BTreeMap<u32, Vec<u32>>,
    pub seed: u64,
}

impl ExemplarMemory {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ExemplarMemory {
            capacity,
            store: BTreeMap::new(),
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.store.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.store.len()
    }

    /// Every stored sample id, ordered by class then id.
    pub fn sample_ids(&self) -> Vec<u32> {
        self.store.values().flatten().copied().collect()
    }

    pub fn per_class(&self) -> BTreeMap<u32, usize> {
        self.store.iter().map(|(&c, v)| (c, v.len())).collect()
    }
}

fn pick(mut ids: Vec<u32>, m: usize, seed: u64, index: u64) -> Vec<u32> {
    ids.sort_unstable();
    ids.shuffle(&mut stream(seed, Purpose::Memory, index));
    ids.truncate(m);
    ids.sort_unstable();
    ids
}

/// Adds the new classes and rebalances to `floor(capacity / classes)` per
/// class. Returns the updated memory and the new classes that had fewer
/// samples than their share.
pub fn update_memory(
    memory: &ExemplarMemory,
    new_task_samples: &[&FeatureSample],
    new_class_ids: &[u32],
    step: usize,
) -> Result<(ExemplarMemory, Vec<u32>)> {
    for c in new_class_ids {
        ensure!(!memory.store.contains_key(c), "class {} is already stored", c);
    }
    let classes = memory.num_classes() + new_class_ids.len();
    let m = memory.capacity.checked_div(classes).unwrap_or(0);
    let tag = |class: u32| ((step as u64) << 32) | class as u64;
    let mut out = ExemplarMemory {
        store: BTreeMap::new(),
        ..memory.clone()
    };
    for (&c, ids) in &memory.store {
        out.store.insert(c, pick(ids.clone(), m, memory.seed, tag(c)));
    }
    let mut short = Vec::new();
    for &c in new_class_ids {
        let ids: Vec<u32> = new_task_samples.iter().filter(|s| s.label == c).map(|s| s.sample_id).collect();
        if ids.len() < m {
            log::warn!("class {c} has {} samples, fewer than its memory share {m}", ids.len());
            short.push(c);
        }
        out.store.insert(c, pick(ids, m, memory.seed, tag(c)));
    }
    Ok((out, short))
}
