//! Strategy plugins: per-batch loss composition and memory/teacher policy
//! for every compared method.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::FeatureDataset;
use crate::diffmath::{Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::AccuracyMatrix;
use crate::model::{ForwardTrace, Inference};
use crate::objectives::{cross_entropy, full_kd, total_loss, LossWeights, TaskLayout};
use crate::protocol::{run_incremental, TaskSequence, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Finetune,
    Lwf,
    IcarlFc,
    IcarlNme,
    Ssil,
    #[default]
    Avcil,
    Oracle,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Finetune,
        Strategy::Lwf,
        Strategy::IcarlFc,
        Strategy::IcarlNme,
        Strategy::Ssil,
        Strategy::Avcil,
        Strategy::Oracle,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Strategy::Finetune => "finetune",
            Strategy::Lwf => "lwf",
            Strategy::IcarlFc => "icarl_fc",
            Strategy::IcarlNme => "icarl_nme",
            Strategy::Ssil => "ssil",
            Strategy::Avcil => "avcil",
            Strategy::Oracle => "oracle",
        }
    }

    /// Replays exemplars from earlier tasks.
    pub fn uses_memory(self) -> bool {
        matches!(self, Strategy::IcarlFc | Strategy::IcarlNme | Strategy::Ssil | Strategy::Avcil)
    }

    /// Distills from the previous step's model (from step 2 on).
    pub fn uses_teacher(self) -> bool {
        matches!(
            self,
            Strategy::Lwf | Strategy::IcarlFc | Strategy::IcarlNme | Strategy::Ssil | Strategy::Avcil
        )
    }

    /// Predicts with nearest exemplar means instead of the classifier head.
    pub fn uses_nme(self) -> bool {
        self == Strategy::IcarlNme
    }

    /// Retrains on every seen class's full training data each step.
    pub fn is_oracle(self) -> bool {
        self == Strategy::Oracle
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

pub fn finetune_loss(tape: &mut Tape, trace: &ForwardTrace, labels: &[usize]) -> Result<Var> {
    cross_entropy(tape, trace.logits, labels)
}

/// Cross-entropy over the full head plus softmax-KL to the teacher over the
/// teacher's classes.
pub fn lwf_loss(tape: &mut Tape, trace: &ForwardTrace, teacher: Option<&Inference>, labels: &[usize]) -> Result<Var> {
    let ce = cross_entropy(tape, trace.logits, labels)?;
    match teacher {
        Some(teacher) => {
            let kd = full_kd(tape, trace.logits, &teacher.logits)?;
            tape.add(ce, kd)
        }
        None => Ok(ce),
    }
}

/// Same composer as [`lwf_loss`]; the exemplars only change the batch.
pub fn icarl_loss(tape: &mut Tape, trace: &ForwardTrace, teacher: Option<&Inference>, labels: &[usize]) -> Result<Var> {
    lwf_loss(tape, trace, teacher, labels)
}

/// Separated softmax plus task-wise distillation.
pub fn ssil_loss(
    tape: &mut Tape,
    trace: &ForwardTrace,
    teacher: Option<&Inference>,
    labels: &[usize],
    layout: &TaskLayout,
) -> Result<Var> {
    total_loss(tape, trace, teacher, labels, &[], layout, &LossWeights::none())
}

/// The batch loss of `strategy`.
#[allow(clippy::too_many_arguments)]
pub fn strategy_loss(
    strategy: Strategy,
    tape: &mut Tape,
    trace: &ForwardTrace,
    teacher: Option<&Inference>,
    labels: &[usize],
    exemplar_mask: &[bool],
    layout: &TaskLayout,
    weights: &LossWeights,
) -> Result<Var> {
    match strategy {
        Strategy::Finetune | Strategy::Oracle => finetune_loss(tape, trace, labels),
        Strategy::Lwf => lwf_loss(tape, trace, teacher, labels),
        Strategy::IcarlFc | Strategy::IcarlNme => icarl_loss(tape, trace, teacher, labels),
        Strategy::Ssil => ssil_loss(tape, trace, teacher, labels, layout),
        Strategy::Avcil => total_loss(tape, trace, teacher, labels, exemplar_mask, layout, weights),
    }
}

/// Upper bound: retrain on all seen classes each step.
pub fn oracle_strategy(dataset: &FeatureDataset, sequence: &TaskSequence, config: &TrainConfig) -> Result<AccuracyMatrix> {
    let config = TrainConfig {
        strategy: Strategy::Oracle,
        ..config.clone()
    };
    Ok(run_incremental(dataset, sequence, &config)?.matrix)
}

#[cfg(test)]
mod tests;
