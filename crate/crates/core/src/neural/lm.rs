//! A tiny pre-LN transformer over mixed text/ECG token sequences, with
//! learned positions and optional LoRA adapters on its linear maps.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::autoencoder::project_graph;
use super::graph::{Graph, Var};
use super::lora::{linear, LORA_A_STD};
use super::params::{Bound, ParamStore};
use super::tensor::Tensor;
use crate::mask::AttentionMask;
use crate::tokenizer::{loss_positions, positions, PositionMode, SpecialVocab, Token, TokenSequence};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
    MlpIn,
    MlpOut,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 6] = [
        LoraTarget::Q,
        LoraTarget::K,
        LoraTarget::V,
        LoraTarget::O,
        LoraTarget::MlpIn,
        LoraTarget::MlpOut,
    ];

    fn key(self) -> &'static str {
        match self {
            LoraTarget::Q => "q",
            LoraTarget::K => "k",
            LoraTarget::V => "v",
            LoraTarget::O => "o",
            LoraTarget::MlpIn => "mlp_in",
            LoraTarget::MlpOut => "mlp_out",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    /// 0 disables adapters.
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 8.0,
            targets: LoraTarget::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TinyLmConfig {
    /// Text vocabulary; special tokens are allocated above it.
    pub text_vocab: u32,
    /// Generic lead-marker pool size.
    pub generic_leads: u32,
    pub h_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ctx: usize,
    pub mlp_mult: usize,
    /// ECG latent width fed to the projection.
    pub d_latent: usize,
    pub lora: LoraConfig,
    pub position_mode: PositionMode,
}

impl Default for TinyLmConfig {
    fn default() -> Self {
        TinyLmConfig {
            text_vocab: 512 - 2 - 2 * (12 + 4),
            generic_leads: 4,
            h_model: 64,
            layers: 2,
            heads: 4,
            ctx: 256,
            mlp_mult: 4,
            d_latent: 64,
            lora: LoraConfig::default(),
            position_mode: PositionMode::Flat,
        }
    }
}

impl TinyLmConfig {
    pub fn vocab(&self) -> SpecialVocab {
        SpecialVocab::new(self.text_vocab, self.generic_leads)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab().size() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.h_model == 0 || self.heads == 0 || self.h_model % self.heads != 0 {
            return Err(Error::invalid("h_model", format!("{} must be a positive multiple of heads = {}", self.h_model, self.heads)));
        }
        if self.layers == 0 || self.ctx == 0 || self.mlp_mult == 0 || self.d_latent == 0 {
            return Err(Error::invalid("lm", "layers, ctx, mlp_mult and d_latent must be positive"));
        }
        if self.lora.rank > self.h_model {
            return Err(Error::invalid("lora.rank", format!("{} exceeds h_model = {}", self.lora.rank, self.h_model)));
        }
        Ok(())
    }
}

/// One model input: the sequence, the embedding id of each non-segment
/// token, and an ECG latent per segment token (in sequence order).
#[derive(Debug, Clone, PartialEq)]
pub struct LmExample {
    pub seq: TokenSequence,
    pub ids: Vec<Option<usize>>,
    pub latents: Vec<Vec<f64>>,
}

impl LmExample {
    pub fn new(seq: TokenSequence, vocab: &SpecialVocab, lead_names: &[String], latents: Vec<Vec<f64>>) -> Result<Self> {
        let mut ids = Vec::with_capacity(seq.len());
        let mut n_seg = 0;
        for (p, t) in seq.tokens().iter().enumerate() {
            if t.is_seg() {
                n_seg += 1;
                ids.push(None);
            } else {
                let id = vocab
                    .id(t, lead_names)
                    .ok_or_else(|| Error::MalformedSequence(format!("position {p}: {t:?} has no vocabulary id")))?;
                ids.push(Some(id as usize));
            }
        }
        if n_seg != latents.len() {
            return Err(Error::Shape(format!("{n_seg} segment tokens, {} latents", latents.len())));
        }
        Ok(LmExample { seq, ids, latents })
    }

    /// Next-token targets: `(row, target id)` where the target token is a
    /// loss position.
    pub fn targets(&self) -> (Vec<usize>, Vec<usize>) {
        let lp = loss_positions(&self.seq);
        let (mut rows, mut targets) = (Vec::new(), Vec::new());
        for p in 1..self.seq.len() {
            if lp[p] {
                rows.push(p - 1);
                targets.push(self.ids[p].expect("loss positions are text"));
            }
        }
        (rows, targets)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyLm {
    pub cfg: TinyLmConfig,
    pub store: ParamStore,
}

const INIT_STD: f64 = 0.02;

impl TinyLm {
    /// Base weights are trainable iff `train_base`; adapters, embeddings,
    /// projection and head always are.
    pub fn new(cfg: TinyLmConfig, seed: u64, train_base: bool) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, v, hm) = (cfg.h_model, cfg.vocab_size(), cfg.h_model * cfg.mlp_mult);
        let mut s = ParamStore::new();
        s.insert("tok_emb", Tensor::randn(&[v, h], INIT_STD, &mut rng), true);
        s.insert("pos_emb", Tensor::randn(&[cfg.ctx, h], INIT_STD, &mut rng), true);
        s.insert("proj.w", Tensor::randn(&[cfg.d_latent, h], (1.0 / cfg.d_latent as f64).sqrt(), &mut rng), true);
        s.insert("proj.b", Tensor::zeros(&[h]), true);
        let out_std = INIT_STD / (2.0 * cfg.layers as f64).sqrt();
        for l in 0..cfg.layers {
            for ln in ["ln1", "ln2"] {
                s.insert(format!("l{l}.{ln}.g"), Tensor::full(&[h], 1.0), train_base);
                s.insert(format!("l{l}.{ln}.b"), Tensor::zeros(&[h]), train_base);
            }
            for (t, out, inp, std) in [
                (LoraTarget::Q, h, h, INIT_STD),
                (LoraTarget::K, h, h, INIT_STD),
                (LoraTarget::V, h, h, INIT_STD),
                (LoraTarget::O, h, h, out_std),
                (LoraTarget::MlpIn, hm, h, INIT_STD),
                (LoraTarget::MlpOut, h, hm, out_std),
            ] {
                let key = t.key();
                s.insert(format!("l{l}.{key}.w"), Tensor::randn(&[out, inp], std, &mut rng), train_base);
                s.insert(format!("l{l}.{key}.b"), Tensor::zeros(&[out]), train_base);
                if cfg.lora.rank > 0 && cfg.lora.targets.contains(&t) {
                    let r = cfg.lora.rank;
                    s.insert(format!("l{l}.{key}.lora_a"), Tensor::randn(&[r, inp], LORA_A_STD, &mut rng), true);
                    s.insert(format!("l{l}.{key}.lora_b"), Tensor::zeros(&[out, r]), true);
                }
            }
        }
        s.insert("ln_f.g", Tensor::full(&[h], 1.0), true);
        s.insert("ln_f.b", Tensor::zeros(&[h]), true);
        s.insert("head.w", Tensor::randn(&[v, h], INIT_STD, &mut rng), true);
        s.insert("head.b", Tensor::zeros(&[v]), true);
        Ok(TinyLm { cfg, store: s })
    }

    fn lin(&self, g: &mut Graph, p: &Bound, x: Var, l: usize, t: LoraTarget) -> Result<Var> {
        let key = t.key();
        let lora = p.try_var(&format!("l{l}.{key}.lora_a")).map(|a| {
            (a, p.var(&format!("l{l}.{key}.lora_b")), self.cfg.lora.alpha / self.cfg.lora.rank as f64)
        });
        linear(g, x, p.var(&format!("l{l}.{key}.w")), Some(p.var(&format!("l{l}.{key}.b"))), lora)
    }

    /// Input rows `x0[n,h]`: token or projected ECG embeddings plus positions.
    pub fn embed_graph(&self, g: &mut Graph, p: &Bound, ex: &LmExample, latents: Option<Var>) -> Result<Var> {
        let n = ex.seq.len();
        if n == 0 {
            return Err(Error::MalformedSequence("empty sequence".into()));
        }
        let pos = positions(&ex.seq, self.cfg.position_mode);
        if let Some(&bad) = pos.iter().find(|&&q| q >= self.cfg.ctx) {
            return Err(Error::Shape(format!("position {bad} beyond context {}", self.cfg.ctx)));
        }
        let text_ids: Vec<usize> = ex.ids.iter().flatten().copied().collect();
        let mut parts = Vec::new();
        let mut order = vec![0; n];
        if !text_ids.is_empty() {
            parts.push(g.select_rows(p.var("tok_emb"), &text_ids)?);
        }
        let n_text = text_ids.len();
        if !ex.latents.is_empty() {
            let z = match latents {
                Some(z) => z,
                None => g.leaf(Tensor::from_rows(&ex.latents)?),
            };
            parts.push(project_graph(g, z, p.var("proj.w"), p.var("proj.b"))?);
        }
        let (mut ti, mut si) = (0, 0);
        for (q, id) in ex.ids.iter().enumerate() {
            if id.is_some() {
                order[q] = ti;
                ti += 1;
            } else {
                order[q] = n_text + si;
                si += 1;
            }
        }
        let all = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let x = g.select_rows(all, &order)?;
        let pe = g.select_rows(p.var("pos_emb"), &pos)?;
        g.add(x, pe)
    }

    fn attention(&self, g: &mut Graph, p: &Bound, h: Var, l: usize, mask: &Rc<AttentionMask>) -> Result<Var> {
        let q = self.lin(g, p, h, l, LoraTarget::Q)?;
        let k = self.lin(g, p, h, l, LoraTarget::K)?;
        let v = self.lin(g, p, h, l, LoraTarget::V)?;
        let dh = self.cfg.h_model / self.cfg.heads;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for hd in 0..self.cfg.heads {
            let (lo, hi) = (hd * dh, (hd + 1) * dh);
            let (qh, kh, vh) = (g.slice_cols(q, lo, hi)?, g.slice_cols(k, lo, hi)?, g.slice_cols(v, lo, hi)?);
            let s = g.matmul_t(qh, kh)?;
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let a = g.masked_softmax(s, mask.clone())?;
            heads.push(g.matmul(a, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        self.lin(g, p, cat, l, LoraTarget::O)
    }

    /// Residual stack and output head: `x0[n,h] -> logits[n,V]`.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, x0: Var, mask: &Rc<AttentionMask>) -> Result<Var> {
        let n = g.value(x0).dims2().0;
        if mask.n() != n {
            return Err(Error::Shape(format!("mask of size {} for {n} positions", mask.n())));
        }
        let mut x = x0;
        for l in 0..self.cfg.layers {
            let h = g.layer_norm(x, p.var(&format!("l{l}.ln1.g")), p.var(&format!("l{l}.ln1.b")))?;
            let a = self.attention(g, p, h, l, mask)?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x, p.var(&format!("l{l}.ln2.g")), p.var(&format!("l{l}.ln2.b")))?;
            let m = self.lin(g, p, h, l, LoraTarget::MlpIn)?;
            let m = g.gelu(m);
            let m = self.lin(g, p, m, l, LoraTarget::MlpOut)?;
            x = g.add(x, m)?;
        }
        let h = g.layer_norm(x, p.var("ln_f.g"), p.var("ln_f.b"))?;
        linear(g, h, p.var("head.w"), Some(p.var("head.b")), None)
    }

    pub fn embed(&self, ex: &LmExample) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let x = self.embed_graph(&mut g, &p, ex, None)?;
        Ok(g.value(x).clone())
    }

    pub fn forward_embedded(&self, x0: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let x = g.leaf(x0.clone());
        let y = self.forward_graph(&mut g, &p, x, &Rc::new(mask.clone()))?;
        Ok(g.value(y).clone())
    }

    /// Logits per position.
    pub fn forward(&self, ex: &LmExample, mask: &AttentionMask) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let x = self.embed_graph(&mut g, &p, ex, None)?;
        let y = self.forward_graph(&mut g, &p, x, &Rc::new(mask.clone()))?;
        Ok(g.value(y).clone())
    }

    /// Output of the first attention sublayer (before the residual add).
    pub fn first_attention(&self, x0: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let x = g.leaf(x0.clone());
        let h = g.layer_norm(x, p.var("l0.ln1.g"), p.var("l0.ln1.b"))?;
        let a = self.attention(&mut g, &p, h, 0, &Rc::new(mask.clone()))?;
        Ok(g.value(a).clone())
    }

    /// Masked next-token cross-entropy without gradients.
    pub fn loss(&self, ex: &LmExample, mask: &AttentionMask) -> Result<f64> {
        let (rows, targets) = ex.targets();
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let x = self.embed_graph(&mut g, &p, ex, None)?;
        let logits = self.forward_graph(&mut g, &p, x, &Rc::new(mask.clone()))?;
        let loss = g.masked_ce(logits, &rows, &targets)?;
        Ok(g.value(loss).item())
    }

    /// Masked next-token cross-entropy and per-parameter gradients.
    pub fn loss_and_grads(&self, ex: &LmExample, mask: &AttentionMask) -> Result<(f64, Vec<Tensor>)> {
        let (rows, targets) = ex.targets();
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let x = self.embed_graph(&mut g, &p, ex, None)?;
        let logits = self.forward_graph(&mut g, &p, x, &Rc::new(mask.clone()))?;
        let loss = g.masked_ce(logits, &rows, &targets)?;
        let lv = g.value(loss).item();
        let mut grads = g.backward(loss);
        Ok((lv, p.grads(&self.store, &mut grads)))
    }

    /// Greedy prediction of the token following position `pos`.
    pub fn predict_next(&self, ex: &LmExample, mask: &AttentionMask, pos: usize) -> Result<usize> {
        let logits = self.forward(ex, mask)?;
        Ok(argmax(logits.row(pos)))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Mean cross-entropy of the rows of `logits` flagged in `positions`
/// against `targets` (one per flagged row).
pub fn masked_ce(logits: &Tensor, targets: &[usize], positions: &[bool]) -> Result<f64> {
    let rows: Vec<usize> = (0..positions.len()).filter(|&i| positions[i]).collect();
    let mut g = Graph::new();
    let l = g.leaf(logits.clone());
    let loss = g.masked_ce(l, &rows, targets)?;
    Ok(g.value(loss).item())
}

/// For each query position, the key positions whose input perturbation
/// changes its first-layer attention output.
pub fn attention_reach(model: &TinyLm, x0: &Tensor, mask: &AttentionMask, seed: u64) -> Result<AttentionMask> {
    let base = model.first_attention(x0, mask)?;
    let (n, h) = x0.dims2();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reach = AttentionMask::empty(n);
    for j in 0..n {
        let mut x = x0.clone();
        let noise = Tensor::randn(&[h], 1.0, &mut rng);
        x.data_mut()[j * h..(j + 1) * h].iter_mut().zip(noise.data()).for_each(|(a, d)| *a += d);
        let out = model.first_attention(&x, mask)?;
        for i in 0..n {
            let d = out.row(i).iter().zip(base.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if d > 1e-12 {
                reach.set(i, j);
            }
        }
    }
    Ok(reach)
}

/// Segment tokens of a sequence in order, for pairing with latents.
pub fn segment_tokens(seq: &TokenSequence) -> Vec<Token> {
    seq.tokens().iter().copied().filter(Token::is_seg).collect()
}
