//! The class-incremental state machine: task sequencing, exemplar memory,
//! per-step training with teacher snapshots, and evaluation after each step.

mod memory;

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::{strategy_loss, Strategy};
use crate::datasets::{FeatureDataset, FeatureSample, Split};
use crate::diffmath::{AdamState, Tape, Tensor, DEFAULT_LR, DEFAULT_WEIGHT_DECAY};
use crate::error::{contract, ensure, Error, Result};
use crate::metrics::{evaluate, nme_classify, score, AccuracyMatrix};
use crate::model::{
    expand_classifier, forward, infer, init_params, reset_classifier, snapshot, Batch, Inference, Modality,
    ModelParams, Snapshot,
};
use crate::objectives::{LossWeights, TaskLayout};
use crate::rng::{stream, Purpose};

pub use memory::{update_memory, ExemplarMemory};

/// Ordered, pairwise disjoint class sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub tasks: Vec<Vec<u32>>,
    pub seed: u64,
}

impl TaskSequence {
    pub fn new(tasks: Vec<Vec<u32>>, seed: u64) -> Result<Self> {
        ensure!(!tasks.is_empty(), "task sequence is empty");
        let mut seen = std::collections::BTreeSet::new();
        for (t, task) in tasks.iter().enumerate() {
            ensure!(!task.is_empty(), "task {} has no classes", t + 1);
            for &c in task {
                ensure!(seen.insert(c), "class {} appears in more than one task", c);
            }
        }
        Ok(TaskSequence { tasks, seed })
    }

    pub fn steps(&self) -> usize {
        self.tasks.len()
    }

    /// Classes in the order the classifier learns them.
    pub fn class_order(&self) -> Vec<u32> {
        self.tasks.iter().flatten().copied().collect()
    }

    /// Dataset label to classifier row.
    pub fn index_map(&self) -> HashMap<u32, usize> {
        self.class_order().into_iter().enumerate().map(|(i, c)| (c, i)).collect()
    }

    /// Layout after `step` (1-based) steps.
    pub fn layout(&self, step: usize) -> Result<TaskLayout> {
        ensure!(step >= 1 && step <= self.steps(), "step {} outside 1..={}", step, self.steps());
        TaskLayout::new(self.tasks[..step].iter().map(Vec::len).collect())
    }
}

/// Shuffles `class_ids` with `seed` and cuts the first
/// `steps * classes_per_step` into consecutive tasks.
pub fn build_task_sequence(class_ids: &[u32], steps: usize, classes_per_step: usize, seed: u64) -> Result<TaskSequence> {
    ensure!(steps >= 1 && classes_per_step >= 1, "steps and classes per step must be positive");
    ensure!(
        steps * classes_per_step <= class_ids.len(),
        "{} steps of {} classes need {} classes, only {} available",
        steps,
        classes_per_step,
        steps * classes_per_step,
        class_ids.len()
    );
    let mut order = class_ids.to_vec();
    order.shuffle(&mut stream(seed, Purpose::TaskOrder, 0));
    let tasks = order[..steps * classes_per_step]
        .chunks(classes_per_step)
        .map(|c| c.to_vec())
        .collect();
    TaskSequence::new(tasks, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub lr: f64,
    pub weight_decay: f64,
    pub memory_capacity: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub modality: Modality,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            weights: LossWeights::default(),
            lr: DEFAULT_LR,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            memory_capacity: 340,
            seed: 0,
            strategy: Strategy::Avcil,
            modality: Modality::Audiovisual,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.memory_capacity == 0 && self.strategy.uses_memory() {
            return bad(format!("strategy {} replays exemplars but memory_capacity is 0", self.strategy));
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Line-delimited run log entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    StepStarted {
        step: usize,
        classes: Vec<u32>,
        train_samples: usize,
        exemplars: usize,
    },
    EpochLoss {
        step: usize,
        epoch: usize,
        loss: f64,
    },
    MemoryUpdated {
        step: usize,
        per_class: usize,
        total: usize,
        short_classes: Vec<u32>,
    },
    StepEvaluated {
        step: usize,
        overall: f64,
        per_task: Vec<f64>,
    },
}

pub fn events_to_jsonl(events: &[RunEvent]) -> Result<String> {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

/// Everything carried from one step to the next.
#[derive(Debug, Clone)]
pub struct StepState {
    /// Completed steps.
    pub step: usize,
    pub params: Option<ModelParams>,
    /// Frozen copy of the previous step's parameters; present from step 2.
    pub teacher: Option<Snapshot>,
    pub memory: ExemplarMemory,
    pub layout: Option<TaskLayout>,
    pub optimizer: Option<AdamState>,
}

impl StepState {
    pub fn new(memory_capacity: usize, seed: u64) -> Self {
        StepState {
            step: 0,
            params: None,
            teacher: None,
            memory: ExemplarMemory::new(memory_capacity, seed),
            layout: None,
            optimizer: None,
        }
    }
}

fn select_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect())
}

fn select_inference(inf: &Inference, idx: &[usize]) -> Result<Inference> {
    Ok(Inference {
        logits: select_rows(&inf.logits, idx)?,
        fused: select_rows(&inf.fused, idx)?,
        attended_visual: select_rows(&inf.attended_visual, idx)?,
        spatial: inf.spatial.as_ref().map(|t| select_rows(t, idx)).transpose()?,
        temporal: inf.temporal.as_ref().map(|t| select_rows(t, idx)).transpose()?,
    })
}

/// Teacher outputs over a whole sample list, in chunks.
fn infer_all(params: &ModelParams, samples: &[&FeatureSample], ds: &FeatureDataset, modality: Modality) -> Result<Inference> {
    let mut parts = Vec::new();
    for chunk in samples.chunks(256) {
        parts.push(infer(params, &Batch::from_samples(chunk, ds.geometry)?, modality)?);
    }
    let cat = |get: &dyn Fn(&Inference) -> Option<&Tensor>| -> Result<Option<Tensor>> {
        let Some(first) = get(&parts[0]) else {
            return Ok(None);
        };
        let mut shape = first.shape().to_vec();
        shape[0] = samples.len();
        let data = parts.iter().flat_map(|p| get(p).expect("uniform").data().iter().copied()).collect();
        Ok(Some(Tensor::new(shape, data)?))
    };
    Ok(Inference {
        logits: cat(&|p| Some(&p.logits))?.expect("present"),
        fused: cat(&|p| Some(&p.fused))?.expect("present"),
        attended_visual: cat(&|p| Some(&p.attended_visual))?.expect("present"),
        spatial: cat(&|p| p.spatial.as_ref())?,
        temporal: cat(&|p| p.temporal.as_ref())?,
    })
}

fn diverged(step: usize, epoch: usize, batch: usize, loss: f64) -> Error {
    Error::Diverged { step, epoch, batch, loss }
}

/// Runs step `state.step + 1` of `sequence`: grows the classifier, trains on
/// the new task (plus exemplars or, for the oracle, every seen class) and
/// refreshes the memory.
pub fn train_step(
    state: StepState,
    dataset: &FeatureDataset,
    sequence: &TaskSequence,
    config: &TrainConfig,
    log: &mut Vec<RunEvent>,
) -> Result<StepState> {
    config.validate()?;
    let t = state.step + 1;
    ensure!(t <= sequence.steps(), "all {} steps already trained", sequence.steps());
    let strategy = config.strategy;
    let seed = config.seed;
    let classes = &sequence.tasks[t - 1];
    let k = classes.len();
    let index = sequence.index_map();
    let layout = sequence.layout(t)?;

    let teacher = state.params.as_ref().map(snapshot);
    let mut params = match &state.params {
        None => init_params(dataset.geometry.d, k, seed)?,
        Some(p) if strategy.is_oracle() => reset_classifier(p, layout.total(), seed)?,
        Some(p) => expand_classifier(p, k, seed)?,
    };
    ensure!(params.num_classes == layout.total(), "classifier and layout disagree");

    let seen: Vec<u32> = sequence.tasks[..t].iter().flatten().copied().collect();
    let train_classes: &[u32] = if strategy.is_oracle() { &seen } else { classes };
    let mut rows: Vec<usize> = dataset.indices_where(Split::Train, train_classes);
    let new_count = rows.len();
    ensure!(new_count > 0, "step {} has no training samples", t);
    if strategy.uses_memory() {
        for id in state.memory.sample_ids() {
            let i = dataset
                .index_of(id)
                .ok_or_else(|| contract(format!("exemplar {id} is not in the dataset")))?;
            rows.push(i);
        }
    }
    let samples: Vec<&FeatureSample> = rows.iter().map(|&i| &dataset.samples[i]).collect();
    let targets: Vec<usize> = samples
        .iter()
        .map(|s| {
            index
                .get(&s.label)
                .copied()
                .filter(|&y| y < layout.total())
                .ok_or_else(|| contract(format!("label {} outside the layout of step {t}", s.label)))
        })
        .collect::<Result<_>>()?;
    let from_memory: Vec<bool> = (0..samples.len()).map(|i| i >= new_count).collect();
    log.push(RunEvent::StepStarted {
        step: t,
        classes: classes.clone(),
        train_samples: new_count,
        exemplars: samples.len() - new_count,
    });

    let teacher_out = match (&teacher, strategy.uses_teacher()) {
        (Some(snap), true) => Some(infer_all(snap, &samples, dataset, config.modality)?),
        _ => None,
    };

    let mut adam = AdamState::new(&params.buffer_lens(), config.lr, config.weight_decay);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut stream(seed, Purpose::Shuffle, ((t as u64) << 32) | epoch as u64));
        let mut total = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch_samples: Vec<&FeatureSample> = idx.iter().map(|&i| samples[i]).collect();
            let batch = Batch::from_samples(&batch_samples, dataset.geometry)?;
            let labels: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
            let mask: Vec<bool> = idx.iter().map(|&i| from_memory[i]).collect();
            let teacher_batch = teacher_out.as_ref().map(|inf| select_inference(inf, idx)).transpose()?;

            let mut tape = Tape::new();
            let pv = params.register(&mut tape, true);
            let loss = forward(&mut tape, &pv, &batch, config.modality).and_then(|trace| {
                strategy_loss(
                    strategy,
                    &mut tape,
                    &trace,
                    teacher_batch.as_ref(),
                    &labels,
                    &mask,
                    &layout,
                    &config.weights,
                )
            });
            let loss = match loss {
                Ok(l) => l,
                Err(Error::Numeric(_)) => return Err(diverged(t, epoch, b, f64::NAN)),
                Err(e) => return Err(e),
            };
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(diverged(t, epoch, b, value));
            }
            tape.backward(loss)?;
            let grads: Vec<Tensor> = pv.all().iter().map(|&v| tape.grad(v)).collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.data()).collect();
            adam.step(&mut params.buffers_mut(), &grad_refs)?;
            if !params.buffers().iter().all(|t| t.all_finite()) {
                return Err(diverged(t, epoch, b, value));
            }
            total += value * idx.len() as f64;
        }
        log.push(RunEvent::EpochLoss {
            step: t,
            epoch,
            loss: total / samples.len() as f64,
        });
    }

    let memory = if strategy.uses_memory() {
        let new_samples: Vec<&FeatureSample> = samples[..new_count].to_vec();
        let (memory, short_classes) = update_memory(&state.memory, &new_samples, classes, t)?;
        log.push(RunEvent::MemoryUpdated {
            step: t,
            per_class: memory.capacity / memory.num_classes().max(1),
            total: memory.len(),
            short_classes,
        });
        memory
    } else {
        state.memory
    };

    Ok(StepState {
        step: t,
        params: Some(params),
        teacher,
        memory,
        layout: Some(layout),
        optimizer: Some(adam),
    })
}

/// Results of a full run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub matrix: AccuracyMatrix,
    pub params: ModelParams,
    /// Parameters after each step.
    pub step_params: Vec<ModelParams>,
    /// Memory after each step.
    pub memory_history: Vec<ExemplarMemory>,
    pub log: Vec<RunEvent>,
    /// Wall time of each step (training plus evaluation).
    pub step_seconds: Vec<f64>,
}

impl RunOutput {
    /// Mean training loss per epoch, one list per step.
    pub fn loss_curves(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for e in &self.log {
            if let RunEvent::EpochLoss { step, loss, .. } = e {
                if out.len() < *step {
                    out.resize(*step, Vec::new());
                }
                out[step - 1].push(*loss);
            }
        }
        out
    }
}

/// Test accuracy after a step, over every class seen so far.
pub fn evaluate_step(
    params: &ModelParams,
    memory: &ExemplarMemory,
    dataset: &FeatureDataset,
    sequence: &TaskSequence,
    step: usize,
    config: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let layout = sequence.layout(step)?;
    let index = sequence.index_map();
    let seen: Vec<u32> = sequence.tasks[..step].iter().flatten().copied().collect();
    let test: Vec<&FeatureSample> = dataset
        .indices_where(Split::Test, &seen)
        .into_iter()
        .map(|i| &dataset.samples[i])
        .collect();
    ensure!(!test.is_empty(), "no test samples for the classes of step {}", step);
    let targets: Vec<usize> = test.iter().map(|s| index[&s.label]).collect();
    if config.strategy.uses_nme() {
        let mut exemplars = Vec::new();
        for id in memory.sample_ids() {
            let i = dataset
                .index_of(id)
                .ok_or_else(|| contract(format!("exemplar {id} is not in the dataset")))?;
            exemplars.push(&dataset.samples[i]);
        }
        let ex_targets: Vec<usize> = exemplars.iter().map(|s| index[&s.label]).collect();
        let preds = nme_classify(params, &exemplars, &ex_targets, &test, dataset.geometry, config.modality)?;
        score(&preds, &targets, &layout)
    } else {
        evaluate(params, &test, &targets, dataset.geometry, &layout, config.modality)
    }
}

pub fn run_incremental(dataset: &FeatureDataset, sequence: &TaskSequence, config: &TrainConfig) -> Result<RunOutput> {
    run_incremental_logged(dataset, sequence, config, &mut Vec::new())
}

/// Like [`run_incremental`], but events are appended to `log` as they happen,
/// so a caller still has them when the run fails.
pub fn run_incremental_logged(
    dataset: &FeatureDataset,
    sequence: &TaskSequence,
    config: &TrainConfig,
    log: &mut Vec<RunEvent>,
) -> Result<RunOutput> {
    config.validate()?;
    let index = sequence.index_map();
    for c in index.keys() {
        ensure!((*c as usize) < dataset.num_classes, "class {} is not in the dataset", c);
    }
    let first_event = log.len();
    let mut state = StepState::new(config.memory_capacity, config.seed);
    let mut matrix = AccuracyMatrix::new();
    let mut step_params = Vec::new();
    let mut memory_history = Vec::new();
    let mut step_seconds = Vec::new();
    for t in 1..=sequence.steps() {
        let started = Instant::now();
        state = train_step(state, dataset, sequence, config, log)?;
        let params = state.params.as_ref().expect("trained");
        let (overall, per_task) = evaluate_step(params, &state.memory, dataset, sequence, t, config)?;
        log.push(RunEvent::StepEvaluated {
            step: t,
            overall,
            per_task: per_task.clone(),
        });
        log::info!("{} step {t}: {:.2}% on seen classes", config.strategy, overall);
        matrix.push_step(overall, per_task)?;
        step_params.push(params.clone());
        memory_history.push(state.memory.clone());
        step_seconds.push(started.elapsed().as_secs_f64());
    }
    Ok(RunOutput {
        matrix,
        params: state.params.expect("at least one step"),
        step_params,
        memory_history,
        log: log[first_event..].to_vec(),
        step_seconds,
    })
}

#[cfg(test)]
mod tests;
