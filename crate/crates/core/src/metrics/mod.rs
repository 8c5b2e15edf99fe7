//! Accuracy bookkeeping, mean accuracy, average forgetting and the
//! nearest-mean-of-exemplars classifier.

use serde::{Deserialize, Serialize};

use crate::datasets::{FeatureSample, Geometry};
use crate::diffmath::Tensor;
use crate::error::{contract, ensure, Result};
use crate::model::{infer, Batch, Modality, ModelParams};
use crate::objectives::TaskLayout;

const CHUNK: usize = 256;

/// Lower-triangular accuracies: `per_task[t][i]` is the accuracy (percent) on
/// task `i`'s test data after step `t` (both 0-based, `i <= t`); `overall[t]`
/// is the accuracy on every class seen by step `t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub per_task: Vec<Vec<f64>>,
    pub overall: Vec<f64>,
}

fn check_pct(v: f64) -> Result<()> {
    ensure!((0.0..=100.0).contains(&v), "accuracy {} outside [0, 100]", v);
    Ok(())
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a matrix from complete rows, checking shape and range.
    pub fn from_rows(per_task: Vec<Vec<f64>>, overall: Vec<f64>) -> Result<Self> {
        let mut m = AccuracyMatrix::new();
        ensure!(
            per_task.len() == overall.len(),
            "{} per-task rows but {} overall entries",
            per_task.len(),
            overall.len()
        );
        for (row, a) in per_task.into_iter().zip(overall) {
            m.push_step(a, row)?;
        }
        Ok(m)
    }

    pub fn push_step(&mut self, overall: f64, per_task: Vec<f64>) -> Result<()> {
        ensure!(
            per_task.len() == self.steps() + 1,
            "step {} needs {} task accuracies, got {}",
            self.steps() + 1,
            self.steps() + 1,
            per_task.len()
        );
        check_pct(overall)?;
        for &v in &per_task {
            check_pct(v)?;
        }
        self.per_task.push(per_task);
        self.overall.push(overall);
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.overall.len()
    }

    /// `a_{t,i}` with 0-based indices; `None` above the diagonal.
    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.per_task.get(t)?.get(i).copied()
    }

    /// Accuracy on each task right after learning it.
    pub fn diagonal(&self) -> Vec<f64> {
        self.per_task.iter().enumerate().map(|(t, row)| row[t]).collect()
    }
}

/// Average of the all-seen accuracies over steps.
pub fn mean_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    mean_of(&m.overall)
}

pub fn mean_of(values: &[f64]) -> Result<f64> {
    ensure!(!values.is_empty(), "mean of an empty accuracy list");
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean over steps `t >= 2` of the average drop of each earlier task from
/// its best earlier accuracy. Drops are floored at zero. `None` for one step.
pub fn average_forgetting(m: &AccuracyMatrix) -> Option<f64> {
    let steps = m.steps();
    if steps < 2 {
        return None;
    }
    let mut total = 0.0;
    for t in 1..steps {
        let mut f_t = 0.0;
        for i in 0..t {
            let best = (i..t).map(|tau| m.per_task[tau][i]).fold(f64::NEG_INFINITY, f64::max);
            f_t += (best - m.per_task[t][i]).max(0.0);
        }
        total += f_t / t as f64;
    }
    Some(total / (steps - 1) as f64)
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let rows = logits.shape()[0];
    (0..rows)
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn chunks<'a>(samples: &'a [&'a FeatureSample]) -> impl Iterator<Item = &'a [&'a FeatureSample]> {
    samples.chunks(CHUNK)
}

/// Full-head predictions in model class indices.
pub fn predict(params: &ModelParams, samples: &[&FeatureSample], g: Geometry, modality: Modality) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in chunks(samples) {
        let inf = infer(params, &Batch::from_samples(chunk, g)?, modality)?;
        out.extend(argmax_rows(&inf.logits));
    }
    Ok(out)
}

/// Classifier inputs, `[n, d]`.
pub fn fused_features(params: &ModelParams, samples: &[&FeatureSample], g: Geometry, modality: Modality) -> Result<Tensor> {
    let mut data = Vec::with_capacity(samples.len() * params.d);
    for chunk in chunks(samples) {
        let inf = infer(params, &Batch::from_samples(chunk, g)?, modality)?;
        data.extend_from_slice(inf.fused.data());
    }
    Tensor::new(vec![samples.len(), params.d], data)
}

/// Overall and per-task accuracy (percent) of `predictions` against
/// `targets`, both in model class indices.
pub fn score(predictions: &[usize], targets: &[usize], layout: &TaskLayout) -> Result<(f64, Vec<f64>)> {
    ensure!(
        predictions.len() == targets.len() && !targets.is_empty(),
        "{} predictions for {} targets",
        predictions.len(),
        targets.len()
    );
    let mut hits = vec![0usize; layout.step()];
    let mut counts = vec![0usize; layout.step()];
    for (&p, &y) in predictions.iter().zip(targets) {
        let b = layout
            .block_of(y)
            .ok_or_else(|| contract(format!("test label {y} has not been seen by step {}", layout.step())))?;
        counts[b] += 1;
        hits[b] += usize::from(p == y);
    }
    if let Some(b) = counts.iter().position(|&c| c == 0) {
        return Err(contract(format!("task {} has no test samples", b + 1)));
    }
    let per_task = hits.iter().zip(&counts).map(|(&h, &c)| 100.0 * h as f64 / c as f64).collect();
    let overall = 100.0 * hits.iter().sum::<usize>() as f64 / targets.len() as f64;
    Ok((overall, per_task))
}

pub fn evaluate(
    params: &ModelParams,
    samples: &[&FeatureSample],
    targets: &[usize],
    g: Geometry,
    layout: &TaskLayout,
    modality: Modality,
) -> Result<(f64, Vec<f64>)> {
    let preds = predict(params, samples, g, modality)?;
    score(&preds, targets, layout)
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Normalized mean of each class's rows of `features`.
pub fn class_means(features: &Tensor, targets: &[usize], num_classes: usize) -> Result<Vec<Vec<f64>>> {
    let d = features.shape()[1];
    ensure!(features.shape()[0] == targets.len(), "feature rows and targets differ in length");
    let mut sums = vec![vec![0.0; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (i, &y) in targets.iter().enumerate() {
        ensure!(y < num_classes, "exemplar label {} outside {} classes", y, num_classes);
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(contract(format!("class {c} has no exemplars")));
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| normalized(&s.iter().map(|v| v / c as f64).collect::<Vec<_>>()))
        .collect())
}

/// Nearest normalized class mean by Euclidean distance; ties go to the
/// lowest class index.
pub fn nearest_mean(means: &[Vec<f64>], queries: &Tensor) -> Vec<usize> {
    (0..queries.shape()[0])
        .map(|i| {
            let q = normalized(queries.row(i));
            let dist = |m: &Vec<f64>| m.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let mut best = 0;
            let mut best_d = dist(&means[0]);
            for (c, m) in means.iter().enumerate().skip(1) {
                let d = dist(m);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

/// Classifies `queries` by the nearest exemplar mean in fused space.
pub fn nme_classify(
    params: &ModelParams,
    exemplars: &[&FeatureSample],
    exemplar_targets: &[usize],
    queries: &[&FeatureSample],
    g: Geometry,
    modality: Modality,
) -> Result<Vec<usize>> {
    let ex = fused_features(params, exemplars, g, modality)?;
    let means = class_means(&ex, exemplar_targets, params.num_classes)?;
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let q = fused_features(params, queries, g, modality)?;
    Ok(nearest_mean(&means, &q))
}

#[cfg(test)]
mod tests;
