//! Training losses: contrastive audio-visual similarity, attention
//! distillation, separated-softmax cross-entropy and task-wise distillation.

use serde::{Deserialize, Serialize};

use crate::diffmath::{Tape, Tensor, Var};
use crate::error::{contract, ensure, numeric, Result};
use crate::model::{ForwardTrace, Inference};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_i: f64,
    pub lambda_c: f64,
    /// Mix between spatial (weight) and temporal (1 - weight) distillation.
    pub lambda_vad: f64,
    pub tau: f64,
    /// Attention distillation on/off.
    pub vad: bool,
    /// L2-normalize features before the similarity products.
    pub normalize_features: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_i: 0.5,
            lambda_c: 1.0,
            lambda_vad: 0.5,
            tau: 0.05,
            vad: true,
            normalize_features: true,
        }
    }
}

impl LossWeights {
    /// Only the separated softmax and task-wise distillation terms remain.
    pub fn none() -> Self {
        LossWeights {
            lambda_i: 0.0,
            lambda_c: 0.0,
            vad: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lambda_i >= 0.0 && self.lambda_i.is_finite(),
            "lambda_i must be finite and >= 0, got {}",
            self.lambda_i
        );
        ensure!(
            self.lambda_c >= 0.0 && self.lambda_c.is_finite(),
            "lambda_c must be finite and >= 0, got {}",
            self.lambda_c
        );
        ensure!(
            (0.0..=1.0).contains(&self.lambda_vad),
            "lambda_vad must lie in [0, 1], got {}",
            self.lambda_vad
        );
        ensure!(self.tau > 0.0 && self.tau.is_finite(), "tau must be > 0, got {}", self.tau);
        Ok(())
    }
}

/// Class counts of the tasks seen so far; the last block is the current task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskLayout {
    boundaries: Vec<usize>,
}

impl TaskLayout {
    pub fn new(boundaries: Vec<usize>) -> Result<Self> {
        ensure!(!boundaries.is_empty(), "task layout needs at least one block");
        ensure!(boundaries.iter().all(|&b| b > 0), "task blocks must be non-empty: {:?}", boundaries);
        Ok(TaskLayout { boundaries })
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// 1-based current step.
    pub fn step(&self) -> usize {
        self.boundaries.len()
    }

    pub fn total(&self) -> usize {
        self.boundaries.iter().sum()
    }

    pub fn new_count(&self) -> usize {
        *self.boundaries.last().expect("non-empty")
    }

    pub fn old_count(&self) -> usize {
        self.total() - self.new_count()
    }

    /// `(start, len)` of block `s` (0-based).
    pub fn block(&self, s: usize) -> (usize, usize) {
        (self.boundaries[..s].iter().sum(), self.boundaries[s])
    }

    /// Index of the block holding `class`.
    pub fn block_of(&self, class: usize) -> Option<usize> {
        let mut start = 0;
        for (s, &len) in self.boundaries.iter().enumerate() {
            if class < start + len {
                return Some(s);
            }
            start += len;
        }
        None
    }

    pub fn push(&self, new_count: usize) -> Result<TaskLayout> {
        let mut b = self.boundaries.clone();
        b.push(new_count);
        TaskLayout::new(b)
    }
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

fn rows(tape: &Tape, v: Var) -> usize {
    tape.shape(v)[0]
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    ensure!(labels.len() == n, "{} labels for a batch of {}", labels.len(), n);
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(contract(format!("label {bad} outside the {classes} seen classes")));
    }
    Ok(())
}

/// Divides every row by its Euclidean norm.
pub fn l2_normalize_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    ensure!(shape.len() == 2, "expected [n, d], got {:?}", shape);
    let sq = tape.mul(x, x)?;
    let ss = tape.sum(sq, 1)?;
    if let Some(i) = tape.value(ss).data().iter().position(|&v| v <= 0.0) {
        return Err(numeric(format!("row {i} has zero norm and cannot be normalized")));
    }
    let norm = tape.sqrt(ss)?;
    let norm = tape.reshape(norm, &[shape[0], 1])?;
    tape.div(x, norm)
}

/// `s_ij = <f_a_i, f_pv_j> / tau`, optionally on unit-norm rows.
pub fn similarity(tape: &mut Tape, f_a: Var, f_pv: Var, tau: f64, normalize: bool) -> Result<Var> {
    ensure!(tau > 0.0, "tau must be positive, got {}", tau);
    ensure!(
        tape.shape(f_a) == tape.shape(f_pv) && tape.shape(f_a).len() == 2 && rows(tape, f_a) >= 1,
        "similarity inputs {:?} / {:?} must be equal non-empty [n, d]",
        tape.shape(f_a),
        tape.shape(f_pv)
    );
    let (a, v) = if normalize {
        (l2_normalize_rows(tape, f_a)?, l2_normalize_rows(tape, f_pv)?)
    } else {
        (f_a, f_pv)
    };
    let vt = tape.transpose(v)?;
    let dots = tape.matmul(a, vt)?;
    Ok(tape.scale(dots, 1.0 / tau))
}

/// Per-row log-sum-exp of `s` restricted to entries where `mask` is 1.
/// Every row must have at least one unmasked entry.
fn masked_logsumexp(tape: &mut Tape, s: Var, mask: &[f64]) -> Result<Var> {
    let shape = tape.shape(s).to_vec();
    let (n, m) = (shape[0], shape[1]);
    let vals = tape.value(s).data();
    let maxes: Vec<f64> = (0..n)
        .map(|i| {
            (0..m)
                .filter(|&j| mask[i * m + j] > 0.0)
                .map(|j| vals[i * m + j])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let shift = tape.constant(Tensor::new(vec![n, 1], maxes)?);
    let centred = tape.sub(s, shift)?;
    let e = tape.exp(centred);
    let mask = tape.constant(Tensor::new(vec![n, m], mask.to_vec())?);
    let kept = tape.mul(e, mask)?;
    let z = tape.sum(kept, 1)?;
    let lz = tape.log(z)?;
    let shift = tape.reshape(shift, &[n])?;
    tape.add(lz, shift)
}

/// Instance-aware similarity: audio of sample i should match the visual of
/// the same sample among all visuals in the batch.
pub fn i_avss(tape: &mut Tape, f_a: Var, f_pv: Var, tau: f64, normalize: bool) -> Result<Var> {
    let s = similarity(tape, f_a, f_pv, tau, normalize)?;
    let n = rows(tape, s);
    let lsm = tape.log_softmax(s, 1)?;
    let diag: Vec<usize> = (0..n).collect();
    let picked = tape.gather(lsm, &diag)?;
    let m = tape.mean_all(picked);
    Ok(tape.scale(m, -1.0))
}

/// Class-aware similarity: every same-class visual (self included) is a
/// positive, averaged through the positive count.
pub fn c_avss(tape: &mut Tape, f_a: Var, f_pv: Var, labels: &[usize], tau: f64, normalize: bool) -> Result<Var> {
    let s = similarity(tape, f_a, f_pv, tau, normalize)?;
    let n = rows(tape, s);
    ensure!(labels.len() == n, "{} labels for a batch of {}", labels.len(), n);
    let mut pos = vec![0.0; n * n];
    let mut log_count = Vec::with_capacity(n);
    for i in 0..n {
        let mut c = 0usize;
        for j in 0..n {
            if labels[i] == labels[j] {
                pos[i * n + j] = 1.0;
                c += 1;
            }
        }
        log_count.push((c as f64).ln());
    }
    let lse_pos = masked_logsumexp(tape, s, &pos)?;
    let lse_all = masked_logsumexp(tape, s, &vec![1.0; n * n])?;
    let ratio = tape.sub(lse_all, lse_pos)?;
    let lc = tape.constant(Tensor::from_vec(log_count));
    let per = tape.add(ratio, lc)?;
    Ok(tape.mean_all(per))
}

/// `lambda_i * I-AVSS + lambda_c * C-AVSS`; zero-weight terms are not built.
pub fn d_avsc(tape: &mut Tape, f_a: Var, f_pv: Var, labels: &[usize], w: &LossWeights) -> Result<Var> {
    let mut terms = Vec::new();
    if w.lambda_i > 0.0 {
        let l = i_avss(tape, f_a, f_pv, w.tau, w.normalize_features)?;
        terms.push(tape.scale(l, w.lambda_i));
    }
    if w.lambda_c > 0.0 {
        let l = c_avss(tape, f_a, f_pv, labels, w.tau, w.normalize_features)?;
        terms.push(tape.scale(l, w.lambda_c));
    }
    sum_terms(tape, &terms)
}

fn sum_terms(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(zero(tape));
    };
    rest.iter().try_fold(first, |acc, &t| tape.add(acc, t))
}

/// Attention distillation on the masked samples.
///
/// `current_spatial` is `[n, L, S, d]`, `current_temporal` is `[n, L, d]`;
/// the teacher maps have the same shapes and carry no gradient.
pub fn vad(
    tape: &mut Tape,
    current_spatial: Var,
    current_temporal: Var,
    teacher_spatial: &Tensor,
    teacher_temporal: &Tensor,
    mask: &[bool],
    lambda_vad: f64,
) -> Result<Var> {
    ensure!(
        tape.shape(current_spatial) == teacher_spatial.shape() && tape.shape(current_temporal) == teacher_temporal.shape(),
        "attention shapes differ: {:?}/{:?} vs teacher {:?}/{:?}",
        tape.shape(current_spatial),
        tape.shape(current_temporal),
        teacher_spatial.shape(),
        teacher_temporal.shape()
    );
    ensure!(
        teacher_spatial.rank() == 4 && teacher_temporal.rank() == 3,
        "attention maps must be [n, L, S, d] and [n, L, d]"
    );
    let n = teacher_spatial.shape()[0];
    ensure!(mask.len() == n, "mask of {} for a batch of {}", mask.len(), n);
    ensure!((0.0..=1.0).contains(&lambda_vad), "lambda_vad {} outside [0, 1]", lambda_vad);
    let idx: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Ok(zero(tape));
    }
    let select = |t: &Tensor| -> Result<Tensor> {
        let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect::<Vec<_>>();
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        Tensor::new(shape, data)
    };
    let ts = tape.constant(select(teacher_spatial)?);
    let tt = tape.constant(select(teacher_temporal)?);
    let cs = tape.index_select(current_spatial, &idx)?;
    let ct = tape.index_select(current_temporal, &idx)?;
    let spa = tape.kl_rows(cs, ts, 2)?;
    let tem = tape.kl_rows(ct, tt, 1)?;
    let spa = tape.scale(spa, lambda_vad);
    let tem = tape.scale(tem, 1.0 - lambda_vad);
    tape.add(spa, tem)
}

/// Mean cross-entropy over the full head.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    ensure!(shape.len() == 2, "logits must be [n, classes], got {:?}", shape);
    check_labels(labels, shape[0], shape[1])?;
    let lsm = tape.log_softmax(logits, 1)?;
    let picked = tape.gather(lsm, labels)?;
    let m = tape.mean_all(picked);
    Ok(tape.scale(m, -1.0))
}

/// Summed negative log-likelihood of `labels - start` within the column block.
fn block_nll(tape: &mut Tape, logits: Var, rows_idx: &[usize], labels: &[usize], start: usize, len: usize) -> Result<Var> {
    let sel = tape.index_select(logits, rows_idx)?;
    let block = tape.narrow(sel, 1, start, len)?;
    let lsm = tape.log_softmax(block, 1)?;
    let targets: Vec<usize> = rows_idx.iter().map(|&i| labels[i] - start).collect();
    let picked = tape.gather(lsm, &targets)?;
    let s = tape.sum_all(picked);
    Ok(tape.scale(s, -1.0))
}

/// Separated softmax: new-class samples are scored within the current task's
/// block, old-class samples within the block of all earlier classes.
pub fn ss_ce(tape: &mut Tape, logits: Var, labels: &[usize], layout: &TaskLayout) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    ensure!(
        shape.len() == 2 && shape[1] == layout.total(),
        "logits {:?} do not match a layout of {} classes",
        shape,
        layout.total()
    );
    check_labels(labels, shape[0], shape[1])?;
    let old = layout.old_count();
    if old == 0 {
        return cross_entropy(tape, logits, labels);
    }
    let n = shape[0];
    let (new_rows, old_rows): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| labels[i] >= old);
    let mut terms = Vec::new();
    if !new_rows.is_empty() {
        terms.push(block_nll(tape, logits, &new_rows, labels, old, layout.new_count())?);
    }
    if !old_rows.is_empty() {
        terms.push(block_nll(tape, logits, &old_rows, labels, 0, old)?);
    }
    let s = sum_terms(tape, &terms)?;
    Ok(tape.scale(s, 1.0 / n as f64))
}

fn check_teacher(tape: &Tape, logits: Var, teacher: &Tensor, width: usize) -> Result<usize> {
    let n = rows(tape, logits);
    ensure!(
        teacher.shape() == [n, width],
        "teacher logits {:?} do not cover [{}, {}]",
        teacher.shape(),
        n,
        width
    );
    Ok(n)
}

/// Task-wise distillation: per earlier task block, KL between the block
/// softmax of the current model and of the teacher (temperature 1).
pub fn tkd(tape: &mut Tape, logits: Var, teacher_logits: &Tensor, layout: &TaskLayout) -> Result<Var> {
    ensure!(
        tape.shape(logits).len() == 2 && tape.shape(logits)[1] == layout.total(),
        "logits {:?} do not match a layout of {} classes",
        tape.shape(logits),
        layout.total()
    );
    check_teacher(tape, logits, teacher_logits, layout.old_count())?;
    let teacher = tape.constant(teacher_logits.clone());
    let mut terms = Vec::new();
    for s in 0..layout.step() - 1 {
        let (start, len) = layout.block(s);
        let cur = tape.narrow(logits, 1, start, len)?;
        let cur = tape.softmax(cur, 1)?;
        let old = tape.narrow(teacher, 1, start, len)?;
        let old = tape.softmax(old, 1)?;
        terms.push(tape.kl_rows(cur, old, 1)?);
    }
    sum_terms(tape, &terms)
}

/// KL between the softmax over the current model's first `teacher width`
/// logits and the teacher's softmax over all of its logits.
pub fn full_kd(tape: &mut Tape, logits: Var, teacher_logits: &Tensor) -> Result<Var> {
    let width = teacher_logits.shape().get(1).copied().unwrap_or(0);
    ensure!(
        width >= 1 && tape.shape(logits).len() == 2 && tape.shape(logits)[1] >= width,
        "teacher width {} does not fit logits {:?}",
        width,
        tape.shape(logits)
    );
    check_teacher(tape, logits, teacher_logits, width)?;
    let teacher = tape.constant(teacher_logits.clone());
    let cur = tape.narrow(logits, 1, 0, width)?;
    let cur = tape.softmax(cur, 1)?;
    let old = tape.softmax(teacher, 1)?;
    tape.kl_rows(cur, old, 1)
}

/// `SS-CE + TKD + D-AVSC + VAD`. The teacher is required exactly when the
/// layout has earlier tasks; terms with zero weight are left out entirely.
pub fn total_loss(
    tape: &mut Tape,
    trace: &ForwardTrace,
    teacher: Option<&Inference>,
    labels: &[usize],
    exemplar_mask: &[bool],
    layout: &TaskLayout,
    w: &LossWeights,
) -> Result<Var> {
    ensure!(
        teacher.is_some() == (layout.step() > 1),
        "teacher must be present exactly when t > 1 (t = {})",
        layout.step()
    );
    let mut terms = vec![ss_ce(tape, trace.logits, labels, layout)?];
    if let Some(teacher) = teacher {
        terms.push(tkd(tape, trace.logits, &teacher.logits, layout)?);
    }
    let has_maps = trace.spatial.is_some() && trace.temporal.is_some();
    if has_maps && (w.lambda_i > 0.0 || w.lambda_c > 0.0) {
        terms.push(d_avsc(tape, trace.audio, trace.attended_visual, labels, w)?);
    }
    if let (Some(teacher), true, true) = (teacher, has_maps, w.vad) {
        if exemplar_mask.iter().any(|&m| m) {
            let (Some(ts), Some(tt)) = (&teacher.spatial, &teacher.temporal) else {
                return Err(contract("teacher inference carries no attention maps"));
            };
            let spa = trace.spatial.expect("checked");
            let tem = trace.temporal.expect("checked");
            terms.push(vad(tape, spa, tem, ts, tt, exemplar_mask, w.lambda_vad)?);
        }
    }
    sum_terms(tape, &terms)
}
