//! Minibatch training of the toy LM on masked next-token loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lm::{LmExample, TinyLm};
use super::optim::{Adam, AdamConfig, LinearSchedule};
use super::tensor::Tensor;
use crate::mask::{build_mask, MaskScheme};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            epochs: 20,
            lr: 2e-3,
            batch_size: 16,
            warmup_steps: 20,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Trains `model` in place. Per-example gradients within a batch are
/// computed in parallel and summed in example order, so results do not
/// depend on the thread count. Returns the mean loss of each epoch.
pub fn train_lm(model: &mut TinyLm, examples: &[LmExample], scheme: MaskScheme, cfg: &LmTrainConfig) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::Insufficient("no training examples".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0) {
        return Err(Error::invalid("train", "batch_size > 0 and lr >= 0 required"));
    }
    if let Some(i) = examples.iter().position(|e| e.targets().0.is_empty()) {
        return Err(Error::Insufficient(format!("example {i} has no loss positions")));
    }
    let masks: Vec<_> = examples.iter().map(|e| build_mask(&e.seq, scheme)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let sched = LinearSchedule {
        peak: cfg.lr,
        warmup: cfg.warmup_steps,
        total: cfg.epochs * steps_per_epoch,
    };
    let mut opt = Adam::new(
        &model.store,
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let m: &TinyLm = model;
            let results: Vec<(f64, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| m.loss_and_grads(&examples[i], &masks[i]))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut sum: Vec<Tensor> = results[0].1.iter().map(|t| Tensor::zeros(t.shape())).collect();
            let mut batch_loss = 0.0;
            for (loss, grads) in &results {
                batch_loss += loss;
                for (s, g) in sum.iter_mut().zip(grads) {
                    for (a, b) in s.data_mut().iter_mut().zip(g.data()) {
                        *a += b * scale;
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { step, loss: batch_loss });
            }
            opt.step(&mut model.store, &sum, sched.lr(step));
            total += batch_loss;
            step += 1;
        }
        curve.push(total / examples.len() as f64);
    }
    Ok(curve)
}

/// Mean masked CE over `examples`.
pub fn eval_loss(model: &TinyLm, examples: &[LmExample], scheme: MaskScheme) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Insufficient("no examples".into()));
    }
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|e| model.loss(e, &build_mask(&e.seq, scheme)))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}
