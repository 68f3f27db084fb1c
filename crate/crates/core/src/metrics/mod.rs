//! Evaluation metrics: macro-F1, accuracy, hamming score, AUROC, RMSE and
//! a linear-probe protocol. Percentages are in [0, 100]; AUROC in [0, 1].

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

mod report;

pub use report::{evaluate_files, evaluate_rows, EvalTask};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ClassCounts {
    /// `2tp / (2tp + fp + fn)`, 0 when the denominator is 0.
    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / d as f64
        }
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} predictions for {b} labels")));
    }
    if a == 0 {
        return Err(Error::Insufficient("no samples".into()));
    }
    Ok(())
}

/// One-vs-rest counts for every class seen in either `preds` or `labels`.
pub fn confusion<T: Ord + Clone>(preds: &[T], labels: &[T]) -> Result<BTreeMap<T, ClassCounts>> {
    check_lengths(preds.len(), labels.len())?;
    let classes: BTreeSet<&T> = preds.iter().chain(labels).collect();
    let mut out = BTreeMap::new();
    for c in classes {
        let mut k = ClassCounts::default();
        for (p, l) in preds.iter().zip(labels) {
            match (p == c, l == c) {
                (true, true) => k.tp += 1,
                (true, false) => k.fp += 1,
                (false, true) => k.fn_ += 1,
                (false, false) => k.tn += 1,
            }
        }
        out.insert(c.clone(), k);
    }
    Ok(out)
}

/// Unweighted mean of per-class F1 over the classes present in `labels`.
pub fn macro_f1<T: Ord + Clone>(preds: &[T], labels: &[T]) -> Result<f64> {
    let counts = confusion(preds, labels)?;
    let present: BTreeSet<&T> = labels.iter().collect();
    let sum: f64 = present.iter().map(|c| counts[*c].f1()).sum();
    Ok(100.0 * sum / present.len() as f64)
}

pub fn accuracy<T: PartialEq>(preds: &[T], labels: &[T]) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HammingMode {
    /// Per-sample `|P ∩ L| / |P ∪ L|` (two empty sets score 1).
    #[default]
    Jaccard,
    /// Per-sample fraction of the label universe on which P and L agree.
    Bitwise,
}

/// Mean per-sample hamming score, as a percentage.
pub fn hamming<T: Ord>(pred_sets: &[BTreeSet<T>], label_sets: &[BTreeSet<T>], mode: HammingMode) -> Result<f64> {
    check_lengths(pred_sets.len(), label_sets.len())?;
    let universe: BTreeSet<&T> = pred_sets.iter().chain(label_sets).flatten().collect();
    let total: f64 = pred_sets
        .iter()
        .zip(label_sets)
        .map(|(p, l)| match mode {
            HammingMode::Jaccard => {
                let union = p.union(l).count();
                if union == 0 {
                    1.0
                } else {
                    p.intersection(l).count() as f64 / union as f64
                }
            }
            HammingMode::Bitwise => {
                if universe.is_empty() {
                    1.0
                } else {
                    1.0 - p.symmetric_difference(l).count() as f64 / universe.len() as f64
                }
            }
        })
        .sum();
    Ok(100.0 * total / pred_sets.len() as f64)
}

/// Area under the ROC curve via the normalized Mann-Whitney U statistic;
/// tied scores count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {i}")));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Insufficient("AUROC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks (1-based) summed over positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub train_ratio: f64,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            train_ratio: 0.5,
            seed: 0,
            epochs: 300,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

/// Seeded stratified split: `train_ratio` of each class (at least one
/// sample) goes to train; the rest is held out.
pub fn stratified_split(labels: &[bool], train_ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_ratio > 0.0 && train_ratio <= 1.0) {
        return Err(Error::invalid("train_ratio", format!("{train_ratio} not in (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64 * train_ratio).round() as usize).clamp(1.min(idx.len()), idx.len());
        if k == 0 {
            return Err(Error::Insufficient(format!("class {class} absent from the training split")));
        }
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Logistic-regression head trained by full-batch gradient descent on
/// standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticProbe {
    pub fn fit(x: &[Vec<f64>], y: &[bool], cfg: &ProbeConfig) -> Result<Self> {
        check_lengths(x.len(), y.len())?;
        let d = x[0].len();
        if x.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged embedding matrix".into()));
        }
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..d).map(|k| x.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|k| {
                let v = x.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
                if v > 1e-24 { v.sqrt() } else { 1.0 }
            })
            .collect();
        let mut probe = LogisticProbe {
            mean,
            scale,
            weights: vec![0.0; d],
            bias: 0.0,
        };
        let z: Vec<Vec<f64>> = x.iter().map(|r| probe.standardize(r)).collect();
        for _ in 0..cfg.epochs {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (r, &label) in z.iter().zip(y) {
                let p = sigmoid(probe.logit_std(r));
                let e = p - if label { 1.0 } else { 0.0 };
                gw.iter_mut().zip(r).for_each(|(g, v)| *g += e * v);
                gb += e;
            }
            for (w, g) in probe.weights.iter_mut().zip(&gw) {
                *w -= cfg.lr * (g / n + cfg.l2 * *w);
            }
            probe.bias -= cfg.lr * gb / n;
        }
        Ok(probe)
    }

    fn standardize(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn logit_std(&self, z: &[f64]) -> f64 {
        self.bias + z.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn score(&self, r: &[f64]) -> f64 {
        sigmoid(self.logit_std(&self.standardize(r)))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Train a logistic head on a stratified `train_ratio` split of frozen
/// embeddings and report held-out AUROC.
pub fn linear_probe(embeddings: &[Vec<f64>], labels: &[bool], cfg: &ProbeConfig) -> Result<f64> {
    check_lengths(embeddings.len(), labels.len())?;
    let (train, test) = stratified_split(labels, cfg.train_ratio, cfg.seed)?;
    let tx: Vec<Vec<f64>> = train.iter().map(|&i| embeddings[i].clone()).collect();
    let ty: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
    let probe = LogisticProbe::fit(&tx, &ty, cfg)?;
    // With ratio 1 nothing is held out; score the training set instead.
    let eval = if test.is_empty() { &train } else { &test };
    let scores: Vec<f64> = eval.iter().map(|&i| probe.score(&embeddings[i])).collect();
    let truth: Vec<bool> = eval.iter().map(|&i| labels[i]).collect();
    auroc(&scores, &truth)
}
