//! AdamW with decoupled weight decay and a cosine-annealed learning rate.

use serde::{Deserialize, Serialize};

use super::{ParamGrads, ParamId, ParamStore};

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at step `total - 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total <= 1 {
            return self.lr_min;
        }
        let t = step.min(self.total - 1) as f64 / (self.total - 1) as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// AdamW state for a subset of the parameters in a store.
pub struct AdamW {
    cfg: AdamWConfig,
    trainable: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    /// Optimizes exactly `trainable`; other parameters are never touched.
    pub fn new(store: &ParamStore, trainable: Vec<ParamId>, cfg: AdamWConfig) -> Self {
        let m = trainable.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect();
        let v = trainable.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect();
        AdamW {
            cfg,
            trainable,
            m,
            v,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Weight decay applies to matrices and kernels (rank ≥ 2) only.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (slot, &id) in self.trainable.iter().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            let decay = store.get(id).shape().len() >= 2;
            let p = store.get_mut(id).data_mut();
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                if decay {
                    p[i] -= lr * c.weight_decay * p[i];
                }
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}
