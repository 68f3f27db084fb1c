//! 1-D convolutional autoencoder over 1-second segments, and the linear
//! projection from latents into the language model's width.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Conv, Graph, Var};
use super::optim::{Adam, AdamConfig, LinearSchedule};
use super::params::{Bound, ParamStore};
use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeConfig {
    /// Samples per segment.
    pub n: usize,
    /// Latent width.
    pub d: usize,
    pub channels: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            n: 256,
            d: 64,
            channels: [16, 32, 64],
            kernel: 7,
            stride: 4,
        }
    }
}

impl AeConfig {
    fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Temporal lengths after each encoder layer.
    pub fn lengths(&self) -> [usize; 4] {
        let p = self.pad();
        let f = |n: usize| (n + 2 * p - self.kernel) / self.stride + 1;
        let l1 = f(self.n);
        let l2 = f(l1);
        [self.n, l1, l2, f(l2)]
    }

    pub fn flat(&self) -> usize {
        self.channels[2] * self.lengths()[3]
    }

    /// Output padding that makes each transposed layer invert its encoder
    /// layer's length.
    fn output_pad(&self, from: usize, to: usize) -> Option<usize> {
        let base = (from - 1) * self.stride + self.kernel;
        (to + 2 * self.pad()).checked_sub(base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.stride == 0 || self.n == 0 || self.d == 0 {
            return Err(Error::invalid("ae", "kernel must be odd; stride, n and d positive"));
        }
        if self.channels.contains(&0) {
            return Err(Error::invalid("ae.channels", "must be positive"));
        }
        let l = self.lengths();
        for w in l.windows(2) {
            match self.output_pad(w[1], w[0]) {
                Some(op) if op < self.stride => {}
                _ => {
                    return Err(Error::invalid(
                        "ae",
                        format!("length {} cannot be inverted from {} with stride {}", w[0], w[1], self.stride),
                    ))
                }
            }
        }
        Ok(())
    }
}

fn he(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoEncoder {
    pub cfg: AeConfig,
    pub store: ParamStore,
}

impl AutoEncoder {
    /// He-normal weights, zero biases.
    pub fn new(cfg: AeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let [c1, c2, c3] = cfg.channels;
        let k = cfg.kernel;
        let chans = [1, c1, c2, c3];
        for i in 0..3 {
            let (ci, co) = (chans[i], chans[i + 1]);
            s.insert(format!("enc.conv{}.w", i + 1), he(&[co, ci, k], ci * k, &mut rng), true);
            s.insert(format!("enc.conv{}.b", i + 1), Tensor::zeros(&[co]), true);
        }
        let flat = cfg.flat();
        s.insert("enc.fc.w", he(&[cfg.d, flat], flat, &mut rng), true);
        s.insert("enc.fc.b", Tensor::zeros(&[cfg.d]), true);
        s.insert("dec.fc.w", he(&[flat, cfg.d], cfg.d, &mut rng), true);
        s.insert("dec.fc.b", Tensor::zeros(&[flat]), true);
        for i in 0..3 {
            let (ci, co) = (chans[3 - i], chans[2 - i]);
            s.insert(format!("dec.deconv{}.w", i + 1), he(&[ci, co, k], ci * k / cfg.stride, &mut rng), true);
            s.insert(format!("dec.deconv{}.b", i + 1), Tensor::zeros(&[co]), true);
        }
        Ok(AutoEncoder { cfg, store: s })
    }

    /// `x[B,1,N] -> z[B,d]`.
    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 1..=3 {
            h = g.conv1d(h, p.var(&format!("enc.conv{i}.w")), p.var(&format!("enc.conv{i}.b")), self.cfg.stride, self.cfg.pad())?;
            h = g.gelu(h);
        }
        let b = g.value(x).shape()[0];
        let flat = g.reshape(h, &[b, self.cfg.flat()])?;
        super::lora::linear(g, flat, p.var("enc.fc.w"), Some(p.var("enc.fc.b")), None)
    }

    /// `z[B,d] -> x̂[B,1,N]`.
    pub fn decode_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let b = g.value(z).shape()[0];
        let l = self.cfg.lengths();
        let h = super::lora::linear(g, z, p.var("dec.fc.w"), Some(p.var("dec.fc.b")), None)?;
        let h = g.gelu(h);
        let mut h = g.reshape(h, &[b, self.cfg.channels[2], l[3]])?;
        for i in 1..=3 {
            let conv = Conv {
                stride: self.cfg.stride,
                pad: self.cfg.pad(),
                output_pad: self.cfg.output_pad(l[4 - i], l[3 - i]).unwrap(),
            };
            h = g.conv_transpose1d(h, p.var(&format!("dec.deconv{i}.w")), p.var(&format!("dec.deconv{i}.b")), conv)?;
            if i < 3 {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }

    fn batch_tensor(&self, xs: &[&[f64]]) -> Result<Tensor> {
        let n = self.cfg.n;
        let mut data = Vec::with_capacity(xs.len() * n);
        for x in xs {
            if x.len() != n {
                return Err(Error::Shape(format!("segment of {} samples, encoder expects {n}", x.len())));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("encoder input".into()));
            }
            data.extend_from_slice(x);
        }
        Tensor::new(vec![xs.len(), 1, n], data)
    }

    pub fn encode_batch(&self, xs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let x = g.leaf(self.batch_tensor(xs)?);
        let z = self.encode_graph(&mut g, &p, x)?;
        Ok(g.value(z).data().chunks(self.cfg.d).map(|c| c.to_vec()).collect())
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode_batch(&[x])?.remove(0))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.cfg.d {
            return Err(Error::Shape(format!("latent of width {}, expected {}", z.len(), self.cfg.d)));
        }
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let zv = g.leaf(Tensor::new(vec![1, self.cfg.d], z.to_vec())?);
        let x = self.decode_graph(&mut g, &p, zv)?;
        Ok(g.value(x).data().to_vec())
    }

    /// Mean reconstruction MSE over `xs`.
    pub fn reconstruction_mse(&self, xs: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in xs.chunks(64) {
            let refs: Vec<&[f64]> = chunk.iter().map(|v| v.as_slice()).collect();
            let mut g = Graph::new();
            let p = self.store.bind(&mut g);
            let x = g.leaf(self.batch_tensor(&refs)?);
            let z = self.encode_graph(&mut g, &p, x)?;
            let y = self.decode_graph(&mut g, &p, z)?;
            let l = g.mse(y, x)?;
            total += g.value(l).item() * chunk.len() as f64;
        }
        Ok(total / xs.len() as f64)
    }
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("mse over {} and {} values", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig {
            epochs: 30,
            lr: 3e-3,
            batch_size: 32,
            warmup_steps: 20,
            seed: 0,
        }
    }
}

pub const MIN_TRAIN_SEGMENTS: usize = 64;

/// Adam on reconstruction MSE. Returns the trained model and the mean
/// training loss of each epoch.
pub fn train_autoencoder(segments: &[Vec<f64>], cfg: &AeConfig, train: &AeTrainConfig) -> Result<(AutoEncoder, Vec<f64>)> {
    if segments.len() < MIN_TRAIN_SEGMENTS {
        return Err(Error::Insufficient(format!(
            "{} segments, training needs at least {MIN_TRAIN_SEGMENTS}",
            segments.len()
        )));
    }
    if train.batch_size == 0 || !(train.lr >= 0.0) {
        return Err(Error::invalid("train", "batch_size > 0 and lr >= 0 required"));
    }
    let mut ae = AutoEncoder::new(cfg.clone(), train.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed);
    let steps_per_epoch = segments.len().div_ceil(train.batch_size);
    let sched = LinearSchedule {
        peak: train.lr,
        warmup: train.warmup_steps,
        total: train.epochs * steps_per_epoch,
    };
    let mut opt = Adam::new(&ae.store, AdamConfig::default());
    let mut order: Vec<usize> = (0..segments.len()).collect();
    let mut curve = Vec::with_capacity(train.epochs);
    let mut step = 0;
    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(train.batch_size) {
            let refs: Vec<&[f64]> = batch.iter().map(|&i| segments[i].as_slice()).collect();
            let mut g = Graph::new();
            let p = ae.store.bind(&mut g);
            let x = g.leaf(ae.batch_tensor(&refs)?);
            let z = ae.encode_graph(&mut g, &p, x)?;
            let y = ae.decode_graph(&mut g, &p, z)?;
            let loss = g.mse(y, x)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged { step, loss: lv });
            }
            let mut grads = g.backward(loss);
            let grads = p.grads(&ae.store, &mut grads);
            opt.step(&mut ae.store, &grads, sched.lr(step));
            total += lv * batch.len() as f64;
            step += 1;
        }
        curve.push(total / segments.len() as f64);
    }
    Ok((ae, curve))
}

/// Single linear layer from latent width `d` to model width `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// `[d, h]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Projection {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (_, h) = weight.dims2();
        if bias.shape() != [h] {
            return Err(Error::Shape(format!("bias {:?} for weight {:?}", bias.shape(), weight.shape())));
        }
        Ok(Projection { weight, bias })
    }

    pub fn identity(d: usize) -> Self {
        let mut w = Tensor::zeros(&[d, d]);
        (0..d).for_each(|i| w.data_mut()[i * d + i] = 1.0);
        Projection {
            weight: w,
            bias: Tensor::zeros(&[d]),
        }
    }

    pub fn project(&self, z: &[f64]) -> Result<Vec<f64>> {
        let (d, h) = self.weight.dims2();
        if z.len() != d {
            return Err(Error::Shape(format!("latent of width {}, projection expects {d}", z.len())));
        }
        let w = self.weight.data();
        Ok((0..h)
            .map(|j| self.bias.data()[j] + (0..d).map(|i| z[i] * w[i * h + j]).sum::<f64>())
            .collect())
    }
}

/// Graph form: `z[m,d] W[d,h] + b`.
pub fn project_graph(g: &mut Graph, z: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(z, w)?;
    g.add_row(y, b)
}
