//! Central finite-difference verification of the analytic gradients.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::autoencoder::{AeConfig, AutoEncoder};
use super::graph::{Conv, Graph, Var};
use super::lm::{LmExample, LoraConfig, TinyLm, TinyLmConfig};
use super::lora::linear;
use super::params::Bound;
use super::tensor::Tensor;
use crate::mask::{build_mask, AttentionMask, MaskScheme};
use crate::tokenizer::{assemble, EcgBlock, Part, PositionMode, Role};
use crate::Result;

pub const FD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub op: String,
    pub trials: usize,
    /// Worst norm-wise relative error over trials and inputs.
    pub max_rel_err: f64,
}

/// `|a - n| / max(|a| + |n|, 1e-6)` over the checked coordinates.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-6)
}

/// Compare analytic gradients of the scalar `f(inputs)` with central
/// differences. At most `max_coords` coordinates per input are probed
/// (all when `None`).
pub fn check<F>(f: F, inputs: &[Tensor], max_coords: Option<usize>, rng: &mut ChaCha8Rng) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out);
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < t.numel() => sample(rng, t.numel(), m).into_vec(),
            _ => (0..t.numel()).collect(),
        };
        let analytic: Vec<f64> = coords
            .iter()
            .map(|&c| grads.get(vars[k]).map_or(0.0, |gr| gr.data()[c]))
            .collect();
        let mut numeric = Vec::with_capacity(coords.len());
        let mut xs = inputs.to_vec();
        for &c in &coords {
            let orig = xs[k].data()[c];
            xs[k].data_mut()[c] = orig + FD_EPS;
            let up = eval(&xs)?;
            xs[k].data_mut()[c] = orig - FD_EPS;
            let down = eval(&xs)?;
            xs[k].data_mut()[c] = orig;
            numeric.push((up - down) / (2.0 * FD_EPS));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Reduce a non-scalar output to a scalar with fixed random weights.
fn project_out(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = randn(g.value(y).shape(), &mut rng);
    g.dot_const(y, c)
}

fn random_mask(n: usize, rng: &mut ChaCha8Rng) -> AttentionMask {
    let mut m = AttentionMask::empty(n);
    for i in 0..n {
        m.set(i, i);
        for j in 0..n {
            if rng.gen_bool(0.5) {
                m.set(i, j);
            }
        }
    }
    m
}

type Case = (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>, Option<usize>);

fn op_case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let d = |rng: &mut ChaCha8Rng| rng.gen_range(1..=5);
    let seed: u64 = rng.gen();
    let (m, k, n) = (d(rng), d(rng), d(rng));
    match op {
        "matmul" => (
            vec![randn(&[m, k], rng), randn(&[k, n], rng)],
            Box::new(move |g, v| { let y = g.matmul(v[0], v[1])?; project_out(g, y, seed) }),
            None,
        ),
        "matmul_t" => (
            vec![randn(&[m, k], rng), randn(&[n, k], rng)],
            Box::new(move |g, v| { let y = g.matmul_t(v[0], v[1])?; project_out(g, y, seed) }),
            None,
        ),
        "add" | "sub" | "mul" => {
            let op = op.to_string();
            (
                vec![randn(&[m, n], rng), randn(&[m, n], rng)],
                Box::new(move |g, v| {
                    let y = match op.as_str() {
                        "add" => g.add(v[0], v[1])?,
                        "sub" => g.sub(v[0], v[1])?,
                        _ => g.mul(v[0], v[1])?,
                    };
                    project_out(g, y, seed)
                }),
                None,
            )
        }
        "scale" => {
            let c: f64 = rng.gen_range(-2.0..2.0);
            (vec![randn(&[m, n], rng)], Box::new(move |g, v| { let y = g.scale(v[0], c); project_out(g, y, seed) }), None)
        }
        "add_row" => (
            vec![randn(&[m, n], rng), randn(&[n], rng)],
            Box::new(move |g, v| { let y = g.add_row(v[0], v[1])?; project_out(g, y, seed) }),
            None,
        ),
        "gelu" => (vec![randn(&[m, n], rng)], Box::new(move |g, v| { let y = g.gelu(v[0]); project_out(g, y, seed) }), None),
        "layer_norm" => {
            let n = n + 1;
            (
                vec![randn(&[m, n], rng), randn(&[n], rng), randn(&[n], rng)],
                Box::new(move |g, v| { let y = g.layer_norm(v[0], v[1], v[2])?; project_out(g, y, seed) }),
                None,
            )
        }
        "masked_softmax" => {
            let mask = Rc::new(random_mask(n, rng));
            (
                vec![randn(&[n, n], rng)],
                Box::new(move |g, v| { let y = g.masked_softmax(v[0], mask.clone())?; project_out(g, y, seed) }),
                None,
            )
        }
        "conv1d" => {
            let (ci, co, kk) = (d(rng), d(rng), rng.gen_range(1..=4));
            let stride = rng.gen_range(1..=3);
            let pad = rng.gen_range(0..=kk / 2);
            let len = kk + rng.gen_range(0..8);
            (
                vec![randn(&[2, ci, len], rng), randn(&[co, ci, kk], rng), randn(&[co], rng)],
                Box::new(move |g, v| { let y = g.conv1d(v[0], v[1], v[2], stride, pad)?; project_out(g, y, seed) }),
                None,
            )
        }
        "conv_transpose1d" => {
            let (ci, co, kk) = (d(rng), d(rng), rng.gen_range(2..=5));
            let stride = rng.gen_range(1..=3);
            let output_pad = rng.gen_range(0..stride);
            let len = rng.gen_range(2..6);
            let full = (len - 1) * stride + kk + output_pad;
            let pad = rng.gen_range(0..=(kk - 1).min((full - 1) / 2));
            let conv = Conv { stride, pad, output_pad };
            (
                vec![randn(&[2, ci, len], rng), randn(&[ci, co, kk], rng), randn(&[co], rng)],
                Box::new(move |g, v| { let y = g.conv_transpose1d(v[0], v[1], v[2], conv)?; project_out(g, y, seed) }),
                None,
            )
        }
        "reshape" => (
            vec![randn(&[m, n], rng)],
            Box::new(move |g, v| { let y = g.reshape(v[0], &[m * n])?; project_out(g, y, seed) }),
            None,
        ),
        "select_rows" => {
            let idx: Vec<usize> = (0..rng.gen_range(1..7)).map(|_| rng.gen_range(0..m)).collect();
            (
                vec![randn(&[m, n], rng)],
                Box::new(move |g, v| { let y = g.select_rows(v[0], &idx)?; project_out(g, y, seed) }),
                None,
            )
        }
        "concat_rows" => (
            vec![randn(&[m, n], rng), randn(&[k, n], rng)],
            Box::new(move |g, v| { let y = g.concat_rows(&[v[0], v[1]])?; project_out(g, y, seed) }),
            None,
        ),
        "slice_cols" => {
            let n = n + 1;
            let lo = rng.gen_range(0..n - 1);
            let hi = rng.gen_range(lo + 1..=n);
            (
                vec![randn(&[m, n], rng)],
                Box::new(move |g, v| { let y = g.slice_cols(v[0], lo, hi)?; project_out(g, y, seed) }),
                None,
            )
        }
        "concat_cols" => (
            vec![randn(&[m, n], rng), randn(&[m, k], rng)],
            Box::new(move |g, v| { let y = g.concat_cols(&[v[0], v[1]])?; project_out(g, y, seed) }),
            None,
        ),
        "mse" => (vec![randn(&[m, n], rng), randn(&[m, n], rng)], Box::new(|g, v| g.mse(v[0], v[1])), None),
        "masked_ce" => {
            let v_sz = n + 1;
            let rows: Vec<usize> = (0..m).filter(|_| rng.gen_bool(0.7)).chain([0]).collect();
            let targets: Vec<usize> = rows.iter().map(|_| rng.gen_range(0..v_sz)).collect();
            (
                vec![randn(&[m, v_sz], rng)],
                Box::new(move |g, v| g.masked_ce(v[0], &rows, &targets)),
                None,
            )
        }
        "sum" => (vec![randn(&[m, n], rng)], Box::new(|g, v| Ok(g.sum(v[0]))), None),
        "lora_linear" => {
            let r = rng.gen_range(1..=k.min(n));
            let s: f64 = rng.gen_range(0.5..3.0);
            (
                vec![randn(&[m, k], rng), randn(&[n, k], rng), randn(&[n], rng), randn(&[r, k], rng), randn(&[n, r], rng)],
                Box::new(move |g, v| {
                    let y = linear(g, v[0], v[1], Some(v[2]), Some((v[3], v[4], s)))?;
                    project_out(g, y, seed)
                }),
                None,
            )
        }
        _ => unreachable!("unknown op {op}"),
    }
}

pub const OPS: [&str; 22] = [
    "matmul",
    "matmul_t",
    "add",
    "sub",
    "mul",
    "scale",
    "add_row",
    "gelu",
    "layer_norm",
    "masked_softmax",
    "conv1d",
    "conv_transpose1d",
    "reshape",
    "select_rows",
    "concat_rows",
    "slice_cols",
    "concat_cols",
    "mse",
    "masked_ce",
    "sum",
    "lora_linear",
    "dot_const",
];

/// Check every primitive op over `trials` random instances each.
pub fn gradcheck_ops(trials: usize, seed: u64) -> Result<Vec<GradcheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for op in OPS {
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            // dot_const is the reduction every other case ends in
            let name = if op == "dot_const" { "matmul" } else { op };
            let (inputs, f, coords) = op_case(name, &mut rng);
            worst = worst.max(check(f, &inputs, coords, &mut rng)?);
        }
        out.push(GradcheckReport { op: op.to_string(), trials, max_rel_err: worst });
    }
    Ok(out)
}

/// Autoencoder reconstruction loss with respect to every parameter tensor
/// (a random subset of coordinates each).
pub fn gradcheck_autoencoder(trials: usize, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let cfg = AeConfig {
            n: 64,
            d: 8,
            channels: [3, 4, 5],
            kernel: 5,
            stride: 2,
        };
        let ae = AutoEncoder::new(cfg.clone(), seed + t as u64)?;
        let x = randn(&[2, 1, cfg.n], &mut rng);
        let names: Vec<String> = ae.store.params().iter().map(|p| p.name.clone()).collect();
        let mut inputs: Vec<Tensor> = ae.store.params().iter().map(|p| p.tensor.clone()).collect();
        inputs.push(x);
        let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let p = Bound::from_parts(&names, &v[..names.len()]);
            let xv = v[v.len() - 1];
            let z = ae.encode_graph(g, &p, xv)?;
            let y = ae.decode_graph(g, &p, z)?;
            g.mse(y, xv)
        };
        worst = worst.max(check(f, &inputs, Some(6), &mut rng)?);
    }
    Ok(GradcheckReport { op: "autoencoder".into(), trials, max_rel_err: worst })
}

/// Masked LM cross-entropy (with LoRA, all three mask schemes) with respect
/// to every parameter tensor and the ECG latents.
pub fn gradcheck_lm(trials: usize, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let cfg = TinyLmConfig {
            text_vocab: 6,
            generic_leads: 2,
            h_model: 4,
            layers: 2,
            heads: 2,
            ctx: 24,
            mlp_mult: 2,
            d_latent: 3,
            lora: LoraConfig { rank: 2, ..Default::default() },
            position_mode: PositionMode::Flat,
        };
        let mut lm = TinyLm::new(cfg.clone(), seed + t as u64, true)?;
        // Non-zero B so the adapters carry gradient into A.
        for p in lm.store.params().iter().map(|p| p.name.clone()).collect::<Vec<_>>() {
            if p.ends_with("lora_b") {
                let shape = lm.store.get(&p).shape().to_vec();
                *lm.store.get_mut(&p) = Tensor::randn(&shape, 0.3, &mut rng);
            }
        }
        let seq = assemble(
            &[vec![1, 2], vec![3, 4, 5]],
            &[EcgBlock::new(2, 2)],
            &[Part::text(0), Part::ecg(0), Part::text(1).role(Role::Assistant)],
        )?;
        let latents: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let ex = LmExample::new(seq, &cfg.vocab(), &[], latents.clone())?;
        let scheme = MaskScheme::ALL[t % 3];
        let mask = Rc::new(build_mask(&ex.seq, scheme));
        let (rows, targets) = ex.targets();
        let names: Vec<String> = lm.store.params().iter().map(|p| p.name.clone()).collect();
        let mut inputs: Vec<Tensor> = lm.store.params().iter().map(|p| p.tensor.clone()).collect();
        inputs.push(Tensor::from_rows(&latents)?);
        let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let p = Bound::from_parts(&names, &v[..names.len()]);
            let x0 = lm.embed_graph(g, &p, &ex, Some(v[v.len() - 1]))?;
            let logits = lm.forward_graph(g, &p, x0, &mask)?;
            g.masked_ce(logits, &rows, &targets)
        };
        worst = worst.max(check(f, &inputs, Some(8), &mut rng)?);
    }
    Ok(GradcheckReport { op: "tiny_lm".into(), trials, max_rel_err: worst })
}
