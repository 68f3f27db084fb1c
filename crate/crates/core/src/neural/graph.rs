//! Tape-based reverse-mode autodiff over [`Tensor`]s.

use std::rc::Rc;

use super::tensor::{mm_acc, mm_t_acc, tm_acc, Tensor};
use crate::mask::AttentionMask;
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub stride: usize,
    pub pad: usize,
    /// Transposed convolutions only.
    pub output_pad: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    MaskedSoftmax(Var),
    Conv1d { x: Var, w: Var, b: Var, conv: Conv },
    ConvT1d { x: Var, w: Var, b: Var, conv: Conv },
    Reshape(Var),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Mse(Var, Var),
    MaskedCe { logits: Var, rows: Vec<usize>, targets: Vec<usize>, probs: Vec<f64> },
    DotConst(Var, Tensor),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A computation tape. Values are computed eagerly on construction;
/// [`Graph::backward`] walks the tape in reverse.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Shape(format!("expected a matrix, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// `a[m,k] b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        mm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// `a[m,k] b[n,k]^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul_t [{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        mm_t_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b)))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b)?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect()).unwrap();
        self.push(t, Op::Scale(a, c))
    }

    /// `x[m,n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.shape(b) != [n] {
            return Err(Error::Shape(format!("bias {:?} for [{m},{n}]", self.shape(b))));
        }
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        out.chunks_mut(n).for_each(|r| r.iter_mut().zip(&bv).for_each(|(a, b)| *a += b));
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddRow(x, b)))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| gelu(v)).collect()).unwrap();
        self.push(t, Op::Gelu(x))
    }

    /// Normalize each row of `x[m,n]`, then scale by `gamma[n]` and shift by `beta[n]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::Shape(format!("layer norm params for width {n}")));
        }
        let vx = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let r = &vx[i * n..(i + 1) * n];
            let mu = r.iter().sum::<f64>() / n as f64;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (r[j] - mu) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = g[j] * h + b[j];
            }
        }
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
        ))
    }

    /// Row softmax over the entries `mask` allows; disallowed entries are
    /// exactly zero.
    pub fn masked_softmax(&mut self, s: Var, mask: Rc<AttentionMask>) -> Result<Var> {
        let (m, n) = self.dims2(s)?;
        if mask.n() != m || m != n {
            return Err(Error::Shape(format!("mask of size {} for scores [{m},{n}]", mask.n())));
        }
        let vs = self.value(s).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &vs[i * n..(i + 1) * n];
            let mx = (0..n).filter(|&j| mask.get(i, j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for j in (0..n).filter(|&j| mask.get(i, j)) {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            out[i * n..(i + 1) * n].iter_mut().for_each(|v| *v /= z);
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MaskedSoftmax(s)))
    }

    /// `x[B,Ci,N]`, `w[Co,Ci,K]`, `b[Co]` -> `[B,Co,(N+2P-K)/S+1]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let conv = Conv { stride, pad, output_pad: 0 };
        let (bs, ci, n) = dims3(self.shape(x))?;
        let (co, ci2, k) = dims3(self.shape(w))?;
        if ci != ci2 || self.shape(b) != [co] || stride == 0 || n + 2 * pad < k {
            return Err(Error::Shape(format!(
                "conv1d x {:?} w {:?} b {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let no = (n + 2 * pad - k) / stride + 1;
        let (vx, vw, vb) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; bs * co * no];
        for bi in 0..bs {
            for o in 0..co {
                let orow = &mut out[(bi * co + o) * no..(bi * co + o + 1) * no];
                orow.iter_mut().for_each(|v| *v = vb[o]);
                for c in 0..ci {
                    let xrow = &vx[(bi * ci + c) * n..(bi * ci + c + 1) * n];
                    let wrow = &vw[(o * ci + c) * k..(o * ci + c + 1) * k];
                    for (t, ov) in orow.iter_mut().enumerate() {
                        let base = (t * stride) as isize - pad as isize;
                        let mut acc = 0.0;
                        for (kk, wv) in wrow.iter().enumerate() {
                            let p = base + kk as isize;
                            if p >= 0 && (p as usize) < n {
                                acc += wv * xrow[p as usize];
                            }
                        }
                        *ov += acc;
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(vec![bs, co, no], out)?, Op::Conv1d { x, w, b, conv }))
    }

    /// Transposed convolution: `x[B,Ci,N]`, `w[Ci,Co,K]`, `b[Co]` ->
    /// `[B,Co,(N-1)S-2P+K+OP]`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Var, conv: Conv) -> Result<Var> {
        let (bs, ci, n) = dims3(self.shape(x))?;
        let (ci2, co, k) = dims3(self.shape(w))?;
        let Conv { stride, pad, output_pad } = conv;
        let full = (n.max(1) - 1) * stride + k + output_pad;
        if ci != ci2 || self.shape(b) != [co] || stride == 0 || full < 2 * pad + 1 || output_pad >= stride.max(pad + 1) {
            return Err(Error::Shape(format!(
                "conv_transpose1d x {:?} w {:?} b {:?} {conv:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let no = full - 2 * pad;
        let (vx, vw, vb) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; bs * co * no];
        for bi in 0..bs {
            for o in 0..co {
                out[(bi * co + o) * no..(bi * co + o + 1) * no].iter_mut().for_each(|v| *v = vb[o]);
            }
            for c in 0..ci {
                let xrow = &vx[(bi * ci + c) * n..(bi * ci + c + 1) * n];
                for o in 0..co {
                    let wrow = &vw[(c * co + o) * k..(c * co + o + 1) * k];
                    let orow = &mut out[(bi * co + o) * no..(bi * co + o + 1) * no];
                    for (t, &xv) in xrow.iter().enumerate() {
                        let base = (t * stride) as isize - pad as isize;
                        for (kk, wv) in wrow.iter().enumerate() {
                            let p = base + kk as isize;
                            if p >= 0 && (p as usize) < no {
                                orow[p as usize] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(vec![bs, co, no], out)?, Op::ConvT1d { x, w, b, conv }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Rows `idx` of `x[m,n]`, repeats allowed.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Shape(format!("row {bad} of {m}")));
        }
        let vx = self.value(x);
        let data = idx.iter().flat_map(|&i| vx.row(i).iter().copied()).collect();
        Ok(self.push(Tensor::new(vec![idx.len(), n], data)?, Op::SelectRows(x, idx.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims2(parts[0])?.1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != n {
                return Err(Error::Shape(format!("concat_rows widths {n} and {c}")));
            }
            data.extend_from_slice(self.value(p).data());
            m += r;
        }
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `[lo, hi)` of `x[m,n]`.
    pub fn slice_cols(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if lo >= hi || hi > n {
            return Err(Error::Shape(format!("columns {lo}..{hi} of {n}")));
        }
        let vx = self.value(x);
        let data = (0..m).flat_map(|i| vx.row(i)[lo..hi].iter().copied()).collect();
        Ok(self.push(Tensor::new(vec![m, hi - lo], data)?, Op::SliceCols(x, lo)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims2(parts[0])?.0;
        let mut widths = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != m {
                return Err(Error::Shape(format!("concat_cols heights {m} and {r}")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::ConcatCols(parts.to_vec())))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let v = va.iter().zip(vb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / va.len() as f64;
        Ok(self.push(Tensor::scalar(v), Op::Mse(a, b)))
    }

    /// Mean cross-entropy of `logits[n,V]` rows `rows` against `targets`.
    pub fn masked_ce(&mut self, logits: Var, rows: &[usize], targets: &[usize]) -> Result<Var> {
        let (m, v) = self.dims2(logits)?;
        if rows.is_empty() {
            return Err(Error::Insufficient("no loss positions".into()));
        }
        if rows.len() != targets.len() || rows.iter().any(|&r| r >= m) || targets.iter().any(|&t| t >= v) {
            return Err(Error::Shape(format!("loss rows/targets out of range for [{m},{v}]")));
        }
        let vl = self.value(logits);
        let mut probs = Vec::with_capacity(rows.len() * v);
        let mut loss = 0.0;
        for (&r, &t) in rows.iter().zip(targets) {
            let row = vl.row(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            loss += z.ln() + mx - row[t];
            probs.extend(row.iter().map(|x| (x - mx).exp() / z));
        }
        loss /= rows.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedCe {
                logits,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// `sum(x * c)` for a constant `c`.
    pub fn dot_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape(x), c.shape())));
        }
        let v = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(v), Op::DotConst(x, c)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(v), Op::Sum(x))
    }

    /// Gradients of the scalar `loss` with respect to every node; `None`
    /// for nodes it does not depend on.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients(grads)
    }

    fn backprop(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let gd = g.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2();
                let n = out.dims2().1;
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                acc(a, &|ga| mm_t_acc(gd, vb, ga, m, n, k));
                acc(b, &|gb| tm_acc(va, gd, gb, m, k, n));
            }
            &Op::MatMulT(a, b) => {
                let (m, k) = self.value(a).dims2();
                let n = out.dims2().1;
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                acc(a, &|ga| mm_acc(gd, vb, ga, m, n, k));
                acc(b, &|gb| tm_acc(gd, va, gb, m, n, k));
            }
            &Op::Add(a, b) => {
                acc(a, &|ga| ga.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                acc(b, &|gb| gb.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
            }
            &Op::Sub(a, b) => {
                acc(a, &|ga| ga.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                acc(b, &|gb| gb.iter_mut().zip(gd).for_each(|(x, y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                acc(a, &|ga| ga.iter_mut().zip(gd).zip(vb).for_each(|((x, g), y)| *x += g * y));
                acc(b, &|gb| gb.iter_mut().zip(gd).zip(va).for_each(|((x, g), y)| *x += g * y));
            }
            &Op::Scale(a, c) => acc(a, &|ga| ga.iter_mut().zip(gd).for_each(|(x, g)| *x += c * g)),
            &Op::AddRow(x, b) => {
                let n = out.dims2().1;
                acc(x, &|gx| gx.iter_mut().zip(gd).for_each(|(a, g)| *a += g));
                acc(b, &|gb| gd.chunks(n).for_each(|r| gb.iter_mut().zip(r).for_each(|(a, g)| *a += g)));
            }
            &Op::Gelu(x) => {
                let vx = self.value(x).data();
                acc(x, &|gx| {
                    gx.iter_mut().zip(gd).zip(vx).for_each(|((a, g), &v)| *a += g * gelu_grad(v))
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (m, n) = out.dims2();
                let gm = self.value(*gamma).data();
                acc(*gamma, &|gg| {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += gd[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                acc(*beta, &|gb| gd.chunks(n).for_each(|r| gb.iter_mut().zip(r).for_each(|(a, g)| *a += g)));
                acc(*x, &|gx| {
                    for i in 0..m {
                        let gh: Vec<f64> = (0..n).map(|j| gd[i * n + j] * gm[j]).collect();
                        let h = &xhat[i * n..(i + 1) * n];
                        let mean_g = gh.iter().sum::<f64>() / n as f64;
                        let mean_gh = gh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[i * n + j] += inv_std[i] * (gh[j] - mean_g - h[j] * mean_gh);
                        }
                    }
                });
            }
            Op::MaskedSoftmax(s) => {
                let (m, n) = out.dims2();
                let y = out.data();
                acc(*s, &|gs| {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &gd[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gs[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            &Op::Conv1d { x, w, b, conv } => {
                let (bs, ci, n) = dims3(self.value(x).shape()).unwrap();
                let (co, _, k) = dims3(self.value(w).shape()).unwrap();
                let no = out.shape()[2];
                let (vx, vw) = (self.value(x).data(), self.value(w).data());
                let taps = |t: usize, kk: usize| {
                    let p = (t * conv.stride + kk) as isize - conv.pad as isize;
                    (p >= 0 && (p as usize) < n).then_some(p as usize)
                };
                acc(b, &|gb| {
                    for bi in 0..bs {
                        for (o, gbo) in gb.iter_mut().enumerate() {
                            *gbo += gd[(bi * co + o) * no..(bi * co + o + 1) * no].iter().sum::<f64>();
                        }
                    }
                });
                acc(w, &|gw| {
                    for bi in 0..bs {
                        for o in 0..co {
                            let grow = &gd[(bi * co + o) * no..(bi * co + o + 1) * no];
                            for c in 0..ci {
                                let xrow = &vx[(bi * ci + c) * n..(bi * ci + c + 1) * n];
                                for kk in 0..k {
                                    let mut s = 0.0;
                                    for (t, gv) in grow.iter().enumerate() {
                                        if let Some(p) = taps(t, kk) {
                                            s += gv * xrow[p];
                                        }
                                    }
                                    gw[(o * ci + c) * k + kk] += s;
                                }
                            }
                        }
                    }
                });
                acc(x, &|gx| {
                    for bi in 0..bs {
                        for o in 0..co {
                            let grow = &gd[(bi * co + o) * no..(bi * co + o + 1) * no];
                            for c in 0..ci {
                                let wrow = &vw[(o * ci + c) * k..(o * ci + c + 1) * k];
                                let gxr = &mut gx[(bi * ci + c) * n..(bi * ci + c + 1) * n];
                                for (t, gv) in grow.iter().enumerate() {
                                    for (kk, wv) in wrow.iter().enumerate() {
                                        if let Some(p) = taps(t, kk) {
                                            gxr[p] += gv * wv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            &Op::ConvT1d { x, w, b, conv } => {
                let (bs, ci, n) = dims3(self.value(x).shape()).unwrap();
                let (_, co, k) = dims3(self.value(w).shape()).unwrap();
                let no = out.shape()[2];
                let (vx, vw) = (self.value(x).data(), self.value(w).data());
                let taps = |t: usize, kk: usize| {
                    let p = (t * conv.stride + kk) as isize - conv.pad as isize;
                    (p >= 0 && (p as usize) < no).then_some(p as usize)
                };
                acc(b, &|gb| {
                    for bi in 0..bs {
                        for (o, gbo) in gb.iter_mut().enumerate() {
                            *gbo += gd[(bi * co + o) * no..(bi * co + o + 1) * no].iter().sum::<f64>();
                        }
                    }
                });
                acc(w, &|gw| {
                    for bi in 0..bs {
                        for c in 0..ci {
                            let xrow = &vx[(bi * ci + c) * n..(bi * ci + c + 1) * n];
                            for o in 0..co {
                                let grow = &gd[(bi * co + o) * no..(bi * co + o + 1) * no];
                                for kk in 0..k {
                                    let mut s = 0.0;
                                    for (t, xv) in xrow.iter().enumerate() {
                                        if let Some(p) = taps(t, kk) {
                                            s += xv * grow[p];
                                        }
                                    }
                                    gw[(c * co + o) * k + kk] += s;
                                }
                            }
                        }
                    }
                });
                acc(x, &|gx| {
                    for bi in 0..bs {
                        for c in 0..ci {
                            let gxr = &mut gx[(bi * ci + c) * n..(bi * ci + c + 1) * n];
                            for o in 0..co {
                                let grow = &gd[(bi * co + o) * no..(bi * co + o + 1) * no];
                                let wrow = &vw[(c * co + o) * k..(c * co + o + 1) * k];
                                for (t, gxv) in gxr.iter_mut().enumerate() {
                                    for (kk, wv) in wrow.iter().enumerate() {
                                        if let Some(p) = taps(t, kk) {
                                            *gxv += grow[p] * wv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            &Op::Reshape(x) => acc(x, &|gx| gx.iter_mut().zip(gd).for_each(|(a, g)| *a += g)),
            Op::SelectRows(x, idx) => {
                let n = out.dims2().1;
                acc(*x, &|gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        gx[i * n..(i + 1) * n]
                            .iter_mut()
                            .zip(&gd[r * n..(r + 1) * n])
                            .for_each(|(a, g)| *a += g);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, &|gp| gp.iter_mut().zip(&gd[off..off + len]).for_each(|(a, g)| *a += g));
                    off += len;
                }
            }
            &Op::SliceCols(x, lo) => {
                let (m, w) = out.dims2();
                let n = self.value(x).dims2().1;
                acc(x, &|gx| {
                    for i in 0..m {
                        for j in 0..w {
                            gx[i * n + lo + j] += gd[i * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, n) = out.dims2();
                let mut lo = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    acc(p, &|gp| {
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += gd[i * n + lo + j];
                            }
                        }
                    });
                    lo += w;
                }
            }
            &Op::Mse(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let c = 2.0 * gd[0] / va.len() as f64;
                acc(a, &|ga| ga.iter_mut().enumerate().for_each(|(i, x)| *x += c * (va[i] - vb[i])));
                acc(b, &|gb| gb.iter_mut().enumerate().for_each(|(i, x)| *x -= c * (va[i] - vb[i])));
            }
            Op::MaskedCe { logits, rows, targets, probs } => {
                let v = self.value(*logits).dims2().1;
                let c = gd[0] / rows.len() as f64;
                acc(*logits, &|gl| {
                    for (k, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * v + j] += c * (probs[k * v + j] - onehot);
                        }
                    }
                });
            }
            Op::DotConst(x, c) => {
                acc(*x, &|gx| gx.iter_mut().zip(c.data()).for_each(|(a, b)| *a += gd[0] * b));
            }
            &Op::Sum(x) => acc(x, &|gx| gx.iter_mut().for_each(|a| *a += gd[0])),
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(|g| g.take())
    }
}

fn dims3(s: &[usize]) -> Result<(usize, usize, usize)> {
    match *s {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::Shape(format!("expected 3 dims, got {s:?}"))),
    }
}

/// tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}
