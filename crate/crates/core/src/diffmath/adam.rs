use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;

/// Adam with bias correction and coupled L2 weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Zeroed moments for parameter buffers of the given lengths.
    pub fn new(buffer_lens: &[usize], lr: f64, weight_decay: f64) -> Self {
        AdamState {
            first_moment: buffer_lens.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: buffer_lens.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One update of every buffer in `params` using the matching `grads`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        ensure!(
            params.len() == self.first_moment.len() && grads.len() == params.len(),
            "adam: {} parameter buffers, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            self.first_moment.len()
        );
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            ensure!(
                p.len() == g.len() && p.len() == self.first_moment[i].len(),
                "adam: buffer {} has {} values, gradient {}, moments {}",
                i,
                p.len(),
                g.len(),
                self.first_moment[i].len()
            );
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for k in 0..p.len() {
                let gk = g[k] + self.weight_decay * p[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
