//! The trainable head over frozen features: audio-guided spatial/temporal
//! attention, audio-visual fusion and a growing linear classifier.

mod checkpoint;
mod forward;

use std::ops::Deref;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Tape, Tensor, Var};
use crate::error::{ensure, Result};
use crate::rng::{stream, Purpose};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    forward, fuse_and_classify, infer, pool_visual, spatial_attention, temporal_attention, AttentionMaps, Batch,
    ForwardTrace, Inference,
};

/// Which input streams feed the fusion layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Visual,
    #[default]
    Audiovisual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Visual, Modality::Audiovisual];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
            Modality::Audiovisual => "audiovisual",
        }
    }
}

/// Trainable parameters. Projections are `d x d`; the classifier holds one
/// row per class seen so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub d: usize,
    pub num_classes: usize,
    pub w_a: Tensor,
    pub w_v: Tensor,
    pub u_a: Tensor,
    pub u_v: Tensor,
    pub cls_weight: Tensor,
    pub cls_bias: Tensor,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

pub fn init_params(d: usize, num_classes: usize, seed: u64) -> Result<ModelParams> {
    ensure!(d >= 1, "feature width must be at least 1");
    ensure!(num_classes >= 1, "need at least one class");
    let bound = 1.0 / (d as f64).sqrt();
    let mut rng = stream(seed, Purpose::InitParams, 0);
    Ok(ModelParams {
        d,
        num_classes,
        w_a: uniform(&[d, d], bound, &mut rng),
        w_v: uniform(&[d, d], bound, &mut rng),
        u_a: uniform(&[d, d], bound, &mut rng),
        u_v: uniform(&[d, d], bound, &mut rng),
        cls_weight: uniform(&[num_classes, d], bound, &mut rng),
        cls_bias: Tensor::zeros(&[num_classes]),
    })
}

/// Appends `k_new` freshly initialized classifier rows; existing rows are
/// copied bit for bit.
pub fn expand_classifier(params: &ModelParams, k_new: usize, seed: u64) -> Result<ModelParams> {
    ensure!(k_new >= 1, "classifier expansion needs at least one new class");
    let d = params.d;
    let bound = 1.0 / (d as f64).sqrt();
    let mut rng = stream(seed, Purpose::ExpandClassifier, params.num_classes as u64);
    let fresh = uniform(&[k_new, d], bound, &mut rng);
    let total = params.num_classes + k_new;
    let mut weight = params.cls_weight.data().to_vec();
    weight.extend_from_slice(fresh.data());
    let mut bias = params.cls_bias.data().to_vec();
    bias.resize(total, 0.0);
    Ok(ModelParams {
        num_classes: total,
        cls_weight: Tensor::new(vec![total, d], weight)?,
        cls_bias: Tensor::new(vec![total], bias)?,
        ..params.clone()
    })
}

/// Same projections, brand-new classifier with `num_classes` rows.
pub fn reset_classifier(params: &ModelParams, num_classes: usize, seed: u64) -> Result<ModelParams> {
    let fresh = init_params(params.d, num_classes, seed)?;
    Ok(ModelParams {
        num_classes,
        cls_weight: fresh.cls_weight,
        cls_bias: fresh.cls_bias,
        ..params.clone()
    })
}

impl ModelParams {
    pub fn check(&self) -> Result<()> {
        let d = self.d;
        for (name, t) in [("W_a", &self.w_a), ("W_v", &self.w_v), ("U_a", &self.u_a), ("U_v", &self.u_v)] {
            ensure!(t.shape() == [d, d], "{} has shape {:?}, expected [{}, {}]", name, t.shape(), d, d);
        }
        ensure!(
            self.cls_weight.shape() == [self.num_classes, d] && self.cls_bias.shape() == [self.num_classes],
            "classifier shapes {:?}/{:?} disagree with {} classes",
            self.cls_weight.shape(),
            self.cls_bias.shape(),
            self.num_classes
        );
        Ok(())
    }

    /// Buffers in declared order: W_a, W_v, U_a, U_v, cls_weight, cls_bias.
    pub fn buffers(&self) -> [&Tensor; 6] {
        [&self.w_a, &self.w_v, &self.u_a, &self.u_v, &self.cls_weight, &self.cls_bias]
    }

    pub fn buffers_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w_a.data_mut(),
            self.w_v.data_mut(),
            self.u_a.data_mut(),
            self.u_v.data_mut(),
            self.cls_weight.data_mut(),
            self.cls_bias.data_mut(),
        ]
    }

    pub fn buffer_lens(&self) -> Vec<usize> {
        self.buffers().iter().map(|t| t.numel()).collect()
    }

    /// Puts every buffer on `tape`; as gradient leaves when `trainable`.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ParamVars {
            w_a: put(&self.w_a),
            w_v: put(&self.w_v),
            u_a: put(&self.u_a),
            u_v: put(&self.u_v),
            cls_weight: put(&self.cls_weight),
            cls_bias: put(&self.cls_bias),
        }
    }

    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.d == other.d
            && self.num_classes == other.num_classes
            && self.buffers().iter().zip(other.buffers()).all(|(a, b)| {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Tape handles for one registration of [`ModelParams`].
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub w_a: Var,
    pub w_v: Var,
    pub u_a: Var,
    pub u_v: Var,
    pub cls_weight: Var,
    pub cls_bias: Var,
}

impl ParamVars {
    pub fn all(&self) -> [Var; 6] {
        [self.w_a, self.w_v, self.u_a, self.u_v, self.cls_weight, self.cls_bias]
    }
}

/// Frozen copy of the parameters used as a distillation teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot(ModelParams);

impl Deref for Snapshot {
    type Target = ModelParams;
    fn deref(&self) -> &ModelParams {
        &self.0
    }
}

impl Snapshot {
    /// Constant (gradient-free) registration on `tape`.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        self.0.register(tape, false)
    }
}

pub fn snapshot(params: &ModelParams) -> Snapshot {
    Snapshot(params.clone())
}

#[cfg(test)]
mod tests;
