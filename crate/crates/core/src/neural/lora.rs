//! Low-rank adapters: `W_eff = W + (alpha / r) B A` with `W` frozen.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::{mm_acc, mm_t_acc, Tensor};
use crate::{Error, Result};

/// Standard deviation of the `A` initialization.
pub const LORA_A_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// `[out, in]`, frozen.
    pub base: Tensor,
    /// `[r, in]`.
    pub a: Tensor,
    /// `[out, r]`, zero at wrap time.
    pub b: Tensor,
    pub alpha: f64,
    pub r: usize,
}

pub fn lora_wrap(weight: &Tensor, r: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<LoraAdapter> {
    if weight.shape().len() != 2 {
        return Err(Error::Shape(format!("LoRA needs a matrix, got {:?}", weight.shape())));
    }
    let (out, inp) = weight.dims2();
    if r == 0 || r > out.min(inp) {
        return Err(Error::invalid("rank", format!("{r} must be in 1..={}", out.min(inp))));
    }
    Ok(LoraAdapter {
        base: weight.clone(),
        a: Tensor::randn(&[r, inp], LORA_A_STD, rng),
        b: Tensor::zeros(&[out, r]),
        alpha,
        r,
    })
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.r as f64
    }

    /// `x[m,in] -> x W^T + s (x A^T) B^T`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (m, inp) = x.dims2();
        let (out, _) = self.base.dims2();
        let mut y = vec![0.0; m * out];
        mm_t_acc(x.data(), self.base.data(), &mut y, m, inp, out);
        let mut xa = vec![0.0; m * self.r];
        mm_t_acc(x.data(), self.a.data(), &mut xa, m, inp, self.r);
        let mut delta = vec![0.0; m * out];
        mm_t_acc(&xa, self.b.data(), &mut delta, m, self.r, out);
        let s = self.scaling();
        y.iter_mut().zip(&delta).for_each(|(a, d)| *a += s * d);
        Tensor::new(vec![m, out], y).unwrap()
    }
}

/// Fold the adapter into a dense weight.
pub fn lora_merge(adapter: &LoraAdapter) -> Tensor {
    let (out, inp) = adapter.base.dims2();
    let mut ba = vec![0.0; out * inp];
    mm_acc(adapter.b.data(), adapter.a.data(), &mut ba, out, adapter.r, inp);
    let s = adapter.scaling();
    let data = adapter.base.data().iter().zip(&ba).map(|(w, d)| w + s * d).collect();
    Tensor::new(vec![out, inp], data).unwrap()
}

/// Graph form of a (possibly adapted) linear map on `x[m,in]` with weight
/// `w[out,in]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>, lora: Option<(Var, Var, f64)>) -> Result<Var> {
    let mut y = g.matmul_t(x, w)?;
    if let Some((a, bb, s)) = lora {
        let xa = g.matmul_t(x, a)?;
        let d = g.matmul_t(xa, bb)?;
        let d = g.scale(d, s);
        y = g.add(y, d)?;
    }
    match b {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}
