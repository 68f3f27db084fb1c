use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

/// Linear warmup to `peak`, then linear decay to zero at `total` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LinearSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let rest = self.total.saturating_sub(self.warmup).max(1);
        let done = (step - self.warmup) as f64 / rest as f64;
        self.peak * (1.0 - done).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (AdamW); 0 gives plain Adam.
    pub weight_decay: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

/// Adam over the trainable parameters of a store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.params().iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        Adam {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update; returns the pre-clip global gradient norm over trainable
    /// parameters.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> f64 {
        let trainable: Vec<bool> = store.params().iter().map(|p| p.trainable).collect();
        let norm = grads
            .iter()
            .zip(&trainable)
            .filter(|(_, &t)| t)
            .map(|(g, _)| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let names: Vec<String> = store.params().iter().map(|p| p.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            if !trainable[i] {
                continue;
            }
            let w = store.get_mut(name).data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, &g) in grads[i].data().iter().enumerate() {
                let g = g * clip;
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + self.cfg.eps);
                w[k] -= lr * (update + self.cfg.weight_decay * w[k]);
            }
        }
        norm
    }
}
