//! Adam with bias correction, decoupled weight decay and an optional cosine
//! learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub schedule: Schedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            schedule: Schedule::Cosine,
        }
    }
}

impl Schedule {
    /// Multiplier applied to the base learning rate at 1-based `step` of
    /// `total`.
    pub fn factor(self, step: u64, total: u64) -> f32 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine => {
                if total == 0 {
                    return 1.0;
                }
                let frac = step.min(total) as f64 / total as f64;
                (0.5 * (1.0 + (std::f64::consts::PI * frac).cos())) as f32
            }
        }
    }
}

/// Per-parameter moments for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    total_steps: u64,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore, total_steps: u64) -> Self {
        let first: Vec<Vec<f32>> = (0..store.len()).map(|i| vec![0.0; store.get(i).numel()]).collect();
        let second = first.clone();
        Self { config, total_steps, step: 0, first, second }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f32 {
        self.config.lr * self.config.schedule.factor(self.step, self.total_steps)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            bail!(Shape, "optimizer state does not match the parameter store");
        }
        self.step += 1;
        let c = &self.config;
        let lr = self.current_lr();
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads.iter().enumerate() {
            let p = store.get_mut(id);
            if p.shape() != g.shape() {
                bail!(Shape, "gradient {:?} vs parameter {:?}", g.shape(), p.shape());
            }
            let m = &mut self.first[id];
            let v = &mut self.second[id];
            for (((w, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * c.weight_decay * *w;
                *w -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Rescale `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f32) -> f32 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
