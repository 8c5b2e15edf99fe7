use super::{Modality, ModelParams, ParamVars};
use crate::datasets::{FeatureSample, Geometry};
use crate::diffmath::{Tape, Tensor, Var};
use crate::error::{ensure, Result};

/// Stacked features for a mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[n, d]`
    pub audio: Tensor,
    /// `[n, frames, cells, d]`
    pub visual: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[&FeatureSample], g: Geometry) -> Result<Batch> {
        ensure!(!samples.is_empty(), "empty batch");
        let n = samples.len();
        let mut audio = Vec::with_capacity(n * g.d);
        let mut visual = Vec::with_capacity(n * g.visual_len());
        for s in samples {
            ensure!(
                s.audio.len() == g.d && s.visual.len() == g.visual_len(),
                "sample {} does not match geometry {:?}",
                s.sample_id,
                g
            );
            audio.extend_from_slice(&s.audio);
            visual.extend_from_slice(&s.visual);
        }
        Ok(Batch {
            audio: Tensor::new(vec![n, g.d], audio)?,
            visual: Tensor::new(vec![n, g.frames, g.cells, g.d], visual)?,
        })
    }

    pub fn len(&self) -> usize {
        self.audio.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-sample attention maps.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    /// `[frames, cells, d]`, sums to one over cells.
    pub spatial: Tensor,
    /// `[frames, d]`, sums to one over frames.
    pub temporal: Tensor,
}

impl AttentionMaps {
    /// Spatial map averaged over channels: `frames x cells`.
    pub fn spatial_channel_mean(&self) -> Vec<Vec<f64>> {
        let s = self.spatial.shape();
        let (frames, cells, d) = (s[0], s[1], s[2]);
        (0..frames)
            .map(|l| {
                (0..cells)
                    .map(|c| {
                        let base = (l * cells + c) * d;
                        self.spatial.data()[base..base + d].iter().sum::<f64>() / d as f64
                    })
                    .collect()
            })
            .collect()
    }

    /// Temporal weights averaged over channels: one value per frame.
    pub fn temporal_channel_mean(&self) -> Vec<f64> {
        let s = self.temporal.shape();
        let (frames, d) = (s[0], s[1]);
        (0..frames)
            .map(|l| self.temporal.data()[l * d..(l + 1) * d].iter().sum::<f64>() / d as f64)
            .collect()
    }
}

/// Tape handles produced by [`forward`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardTrace {
    /// `[n, d]` raw audio features.
    pub audio: Var,
    /// `[n, d]` attention-pooled visual features.
    pub attended_visual: Var,
    /// `[n, frames, cells, d]`; absent when attention is not computed.
    pub spatial: Option<Var>,
    /// `[n, frames, d]`
    pub temporal: Option<Var>,
    /// `[n, d]` input of the classifier.
    pub fused: Var,
    /// `[n, classes]`
    pub logits: Var,
}

impl ForwardTrace {
    pub fn batch_size(&self, tape: &Tape) -> usize {
        tape.shape(self.logits)[0]
    }

    pub fn maps(&self, tape: &Tape, i: usize) -> Option<AttentionMaps> {
        let (spa, tem) = (self.spatial?, self.temporal?);
        let ss = tape.shape(spa);
        let ts = tape.shape(tem);
        let spatial = Tensor::new(ss[1..].to_vec(), tape.value(spa).row(i).to_vec()).ok()?;
        let temporal = Tensor::new(ts[1..].to_vec(), tape.value(tem).row(i).to_vec()).ok()?;
        Some(AttentionMaps { spatial, temporal })
    }
}

/// Spatial attention per frame and channel, plus the visual score it was
/// computed from.
///
/// `Score^a = tanh(f_a W_a)`, `Score^v = tanh(f_v W_v)` per cell, and the map
/// is the softmax over cells of their product with the audio score broadcast
/// across cells.
pub fn spatial_attention(tape: &mut Tape, f_a: Var, f_v: Var, p: &ParamVars) -> Result<(Var, Var)> {
    let sa = tape.shape(f_a).to_vec();
    let sv = tape.shape(f_v).to_vec();
    ensure!(
        sa.len() == 2 && sv.len() == 4 && sv[0] == sa[0] && sv[3] == sa[1],
        "attention inputs {:?} / {:?} are not [n, d] / [n, L, S, d]",
        sa,
        sv
    );
    let (n, d) = (sa[0], sa[1]);
    let (frames, cells) = (sv[1], sv[2]);
    let audio_proj = tape.matmul(f_a, p.w_a)?;
    let score_a = tape.tanh(audio_proj);
    let score_a = tape.reshape(score_a, &[n, 1, 1, d])?;
    let flat = tape.reshape(f_v, &[n * frames * cells, d])?;
    let visual_proj = tape.matmul(flat, p.w_v)?;
    let score_v = tape.tanh(visual_proj);
    let score_v = tape.reshape(score_v, &[n, frames, cells, d])?;
    let joint = tape.mul(score_v, score_a)?;
    let w_spa = tape.softmax(joint, 2)?;
    Ok((w_spa, score_v))
}

/// Softmax over frames of the spatially attended visual scores.
pub fn temporal_attention(tape: &mut Tape, w_spa: Var, score_v: Var) -> Result<Var> {
    ensure!(
        tape.shape(w_spa) == tape.shape(score_v) && tape.shape(w_spa).len() == 4,
        "temporal attention shapes {:?} / {:?}",
        tape.shape(w_spa),
        tape.shape(score_v)
    );
    let weighted = tape.mul(w_spa, score_v)?;
    let per_frame = tape.sum(weighted, 2)?;
    tape.softmax(per_frame, 1)
}

/// `f'_v = sum_l w_tem[l] * sum_s f_v[l, s] * w_spa[l, s]`, per channel.
pub fn pool_visual(tape: &mut Tape, f_v: Var, w_spa: Var, w_tem: Var) -> Result<Var> {
    let sv = tape.shape(f_v).to_vec();
    ensure!(
        tape.shape(w_spa) == sv.as_slice(),
        "spatial map {:?} does not match visual features {:?}",
        tape.shape(w_spa),
        sv
    );
    ensure!(
        tape.shape(w_tem) == [sv[0], sv[1], sv[3]],
        "temporal map {:?} does not match visual features {:?}",
        tape.shape(w_tem),
        sv
    );
    let weighted = tape.mul(f_v, w_spa)?;
    let per_frame = tape.sum(weighted, 2)?;
    let timed = tape.mul(per_frame, w_tem)?;
    tape.sum(timed, 1)
}

fn classify(tape: &mut Tape, fused: Var, p: &ParamVars) -> Result<Var> {
    let wt = tape.transpose(p.cls_weight)?;
    let raw = tape.matmul(fused, wt)?;
    let classes = tape.shape(p.cls_bias)[0];
    let bias = tape.reshape(p.cls_bias, &[1, classes])?;
    tape.add(raw, bias)
}

/// `fused = tanh(f_a U_a) + tanh(f'_v U_v)`, `logits = fused W^T + b`.
/// Returns `(logits, fused)`.
pub fn fuse_and_classify(tape: &mut Tape, f_a: Var, f_pv: Var, p: &ParamVars) -> Result<(Var, Var)> {
    ensure!(
        tape.shape(f_a) == tape.shape(f_pv),
        "fusion inputs {:?} / {:?} differ",
        tape.shape(f_a),
        tape.shape(f_pv)
    );
    let a = tape.matmul(f_a, p.u_a)?;
    let a = tape.tanh(a);
    let v = tape.matmul(f_pv, p.u_v)?;
    let v = tape.tanh(v);
    let fused = tape.add(a, v)?;
    Ok((classify(tape, fused, p)?, fused))
}

/// Full forward pass. Audio-only fusion drops the visual branch; visual-only
/// uses uniform (mean) pooling and drops the audio branch.
pub fn forward(tape: &mut Tape, p: &ParamVars, batch: &Batch, modality: Modality) -> Result<ForwardTrace> {
    ensure!(!batch.is_empty(), "empty batch");
    let d = tape.shape(p.w_a)[0];
    ensure!(
        batch.audio.shape()[1] == d,
        "batch width {} does not match parameters {}",
        batch.audio.shape()[1],
        d
    );
    let f_a = tape.constant(batch.audio.clone());
    let f_v = tape.constant(batch.visual.clone());
    match modality {
        Modality::Audiovisual => {
            let (w_spa, score_v) = spatial_attention(tape, f_a, f_v, p)?;
            let w_tem = temporal_attention(tape, w_spa, score_v)?;
            let f_pv = pool_visual(tape, f_v, w_spa, w_tem)?;
            let (logits, fused) = fuse_and_classify(tape, f_a, f_pv, p)?;
            Ok(ForwardTrace {
                audio: f_a,
                attended_visual: f_pv,
                spatial: Some(w_spa),
                temporal: Some(w_tem),
                fused,
                logits,
            })
        }
        Modality::Audio | Modality::Visual => {
            let over_cells = tape.mean(f_v, 2)?;
            let f_pv = tape.mean(over_cells, 1)?;
            let fused = if modality == Modality::Audio {
                let a = tape.matmul(f_a, p.u_a)?;
                tape.tanh(a)
            } else {
                let v = tape.matmul(f_pv, p.u_v)?;
                tape.tanh(v)
            };
            let logits = classify(tape, fused, p)?;
            Ok(ForwardTrace {
                audio: f_a,
                attended_visual: f_pv,
                spatial: None,
                temporal: None,
                fused,
                logits,
            })
        }
    }
}

/// Gradient-free forward results.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub logits: Tensor,
    pub fused: Tensor,
    pub attended_visual: Tensor,
    pub spatial: Option<Tensor>,
    pub temporal: Option<Tensor>,
}

impl Inference {
    pub fn maps(&self, i: usize) -> Option<AttentionMaps> {
        let (spa, tem) = (self.spatial.as_ref()?, self.temporal.as_ref()?);
        Some(AttentionMaps {
            spatial: Tensor::new(spa.shape()[1..].to_vec(), spa.row(i).to_vec()).ok()?,
            temporal: Tensor::new(tem.shape()[1..].to_vec(), tem.row(i).to_vec()).ok()?,
        })
    }
}

pub fn infer(params: &ModelParams, batch: &Batch, modality: Modality) -> Result<Inference> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let tr = forward(&mut tape, &pv, batch, modality)?;
    Ok(Inference {
        logits: tape.value(tr.logits).clone(),
        fused: tape.value(tr.fused).clone(),
        attended_visual: tape.value(tr.attended_visual).clone(),
        spatial: tr.spatial.map(|v| tape.value(v).clone()),
        temporal: tr.temporal.map(|v| tape.value(v).clone()),
    })
}
