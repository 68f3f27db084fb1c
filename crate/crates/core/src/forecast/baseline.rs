use serde::{Deserialize, Serialize};

use crate::metrics::{LogisticProbe, ProbeConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Logistic,
    StumpEnsemble,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 2] = [BaselineKind::Logistic, BaselineKind::StumpEnsemble];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Logistic => "logistic",
            BaselineKind::StumpEnsemble => "stump_ensemble",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid("baseline", format!("unknown baseline {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StumpConfig {
    pub rounds: usize,
    pub learning_rate: f64,
    /// L2 penalty on leaf values.
    pub lambda: f64,
}

impl Default for StumpConfig {
    fn default() -> Self {
        StumpConfig {
            rounds: 100,
            learning_rate: 0.1,
            lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    pub left: f64,
    pub right: f64,
}

/// Gradient-boosted depth-1 trees on the logistic loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StumpEnsemble {
    pub base: f64,
    pub stumps: Vec<Stump>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl StumpEnsemble {
    pub fn fit(x: &[Vec<f64>], y: &[bool], cfg: &StumpConfig) -> Result<Self> {
        let n = x.len();
        let d = x[0].len();
        let pos = y.iter().filter(|&&b| b).count() as f64;
        let p0 = pos / n as f64;
        let base = (p0 / (1.0 - p0)).ln();
        // Feature columns in ascending order; every boundary between distinct
        // values is a candidate split.
        let order: Vec<Vec<usize>> = (0..d)
            .map(|k| {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.sort_by(|&a, &b| x[a][k].total_cmp(&x[b][k]));
                idx
            })
            .collect();
        let mut f = vec![base; n];
        let mut stumps = Vec::with_capacity(cfg.rounds);
        for _ in 0..cfg.rounds {
            let (g, h): (Vec<f64>, Vec<f64>) = f
                .iter()
                .zip(y)
                .map(|(&fi, &yi)| {
                    let p = sigmoid(fi);
                    (p - if yi { 1.0 } else { 0.0 }, (p * (1.0 - p)).max(1e-12))
                })
                .unzip();
            let (gt, ht) = (g.iter().sum::<f64>(), h.iter().sum::<f64>());
            let mut best: Option<(f64, Stump)> = None;
            for (k, idx) in order.iter().enumerate() {
                let (mut gl, mut hl) = (0.0, 0.0);
                for w in idx.windows(2) {
                    gl += g[w[0]];
                    hl += h[w[0]];
                    let (lo, hi) = (x[w[0]][k], x[w[1]][k]);
                    if lo == hi {
                        continue;
                    }
                    let (gr, hr) = (gt - gl, ht - hl);
                    let gain = gl * gl / (hl + cfg.lambda) + gr * gr / (hr + cfg.lambda);
                    if best.as_ref().map_or(true, |(b, _)| gain > *b) {
                        let stump = Stump {
                            feature: k,
                            threshold: 0.5 * (lo + hi),
                            left: -gl / (hl + cfg.lambda),
                            right: -gr / (hr + cfg.lambda),
                        };
                        best = Some((gain, stump));
                    }
                }
            }
            let Some((_, mut s)) = best else { break };
            s.left *= cfg.learning_rate;
            s.right *= cfg.learning_rate;
            for (fi, r) in f.iter_mut().zip(x) {
                *fi += s.eval(r);
            }
            stumps.push(s);
        }
        Ok(StumpEnsemble { base, stumps })
    }

    pub fn score(&self, r: &[f64]) -> f64 {
        sigmoid(self.base + self.stumps.iter().map(|s| s.eval(r)).sum::<f64>())
    }
}

impl Stump {
    fn eval(&self, r: &[f64]) -> f64 {
        if r[self.feature] <= self.threshold {
            self.left
        } else {
            self.right
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Head {
    Logistic(LogisticProbe),
    StumpEnsemble(StumpEnsemble),
}

impl Head {
    fn score(&self, r: &[f64]) -> f64 {
        match self {
            Head::Logistic(p) => p.score(r),
            Head::StumpEnsemble(e) => e.score(r),
        }
    }
}

/// One-vs-rest feature classifier over `n_classes` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub kind: BaselineKind,
    pub n_classes: usize,
    /// One head for binary tasks, one per class otherwise.
    heads: Vec<Head>,
}

impl Baseline {
    /// `y` holds class indices in `0..n_classes`. Both fits are
    /// deterministic full-batch procedures, so `seed` does not change the
    /// result.
    pub fn train(kind: BaselineKind, x: &[Vec<f64>], y: &[usize], n_classes: usize, _seed: u64) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Shape(format!("{} feature rows for {} labels", x.len(), y.len())));
        }
        if x.is_empty() {
            return Err(Error::Insufficient("empty training set".into()));
        }
        let d = x[0].len();
        if d == 0 || x.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged or empty feature matrix".into()));
        }
        if x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        if n_classes < 2 || y.iter().any(|&c| c >= n_classes) {
            return Err(Error::invalid("labels", format!("class index outside 0..{n_classes}")));
        }
        let mut present = vec![false; n_classes];
        y.iter().for_each(|&c| present[c] = true);
        if present.iter().filter(|&&p| p).count() < 2 {
            return Err(Error::Insufficient("training set holds a single class".into()));
        }
        let targets: Vec<usize> = if n_classes == 2 { vec![1] } else { (0..n_classes).collect() };
        let heads = targets
            .into_iter()
            .map(|c| {
                let yb: Vec<bool> = y.iter().map(|&v| v == c).collect();
                if !yb.contains(&true) {
                    return Ok(None);
                }
                let h = match kind {
                    BaselineKind::Logistic => Head::Logistic(LogisticProbe::fit(
                        x,
                        &yb,
                        &ProbeConfig {
                            epochs: 500,
                            lr: 0.5,
                            l2: 1e-3,
                            ..ProbeConfig::default()
                        },
                    )?),
                    BaselineKind::StumpEnsemble => Head::StumpEnsemble(StumpEnsemble::fit(x, &yb, &StumpConfig::default())?),
                };
                Ok(Some(h))
            })
            .collect::<Result<Vec<_>>>()?;
        // An absent class keeps a placeholder head that never wins.
        let heads = heads
            .into_iter()
            .map(|h| {
                h.unwrap_or(Head::StumpEnsemble(StumpEnsemble {
                    base: f64::NEG_INFINITY,
                    stumps: vec![],
                }))
            })
            .collect();
        Ok(Baseline { kind, n_classes, heads })
    }

    /// Per-class scores; for binary tasks `[1 - p, p]`.
    pub fn scores(&self, r: &[f64]) -> Vec<f64> {
        if self.n_classes == 2 {
            let p = self.heads[0].score(r);
            vec![1.0 - p, p]
        } else {
            self.heads.iter().map(|h| h.score(r)).collect()
        }
    }

    /// Predicted class and its score.
    pub fn predict(&self, r: &[f64]) -> (usize, f64) {
        let s = self.scores(r);
        let mut best = 0;
        for (i, v) in s.iter().enumerate() {
            if *v > s[best] {
                best = i;
            }
        }
        (best, s[best])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::macro_f1;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blobs(n: usize, gap: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let c = i % 2;
                let off = if c == 1 { gap } else { -gap };
                (vec![off + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 3.0], c)
            })
            .unzip()
    }

    #[test]
    fn separable_set_is_fit_exactly() {
        let (x, y) = blobs(200, 1.5, 0);
        for kind in BaselineKind::ALL {
            let m = Baseline::train(kind, &x, &y, 2, 0).unwrap();
            let hits = x.iter().zip(&y).filter(|(r, &c)| m.predict(r).0 == c).count();
            assert_eq!(hits, x.len(), "{kind:?}");
        }
    }

    #[test]
    fn permuted_labels_score_near_chance() {
        let (x, mut y) = blobs(400, 1.5, 1);
        y.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        let (tx, vx) = x.split_at(200);
        let (ty, vy) = y.split_at(200);
        for kind in BaselineKind::ALL {
            let m = Baseline::train(kind, tx, ty, 2, 0).unwrap();
            let pred: Vec<usize> = vx.iter().map(|r| m.predict(r).0).collect();
            let f1 = macro_f1(&pred, vy).unwrap();
            assert!((30.0..=70.0).contains(&f1), "{kind:?}: {f1}");
        }
    }

    #[test]
    fn deterministic_parameters() {
        let (x, y) = blobs(100, 0.3, 2);
        for kind in BaselineKind::ALL {
            assert_eq!(Baseline::train(kind, &x, &y, 2, 5).unwrap(), Baseline::train(kind, &x, &y, 2, 5).unwrap());
        }
    }

    #[test]
    fn single_class_rejected() {
        let x = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            Baseline::train(BaselineKind::Logistic, &x, &[0, 0], 2, 0),
            Err(Error::Insufficient(_))
        ));
    }

    #[test]
    fn three_classes() {
        let x: Vec<Vec<f64>> = (0..90).map(|i| vec![(i % 3) as f64 * 4.0 + (i as f64 * 0.01)]).collect();
        let y: Vec<usize> = (0..90).map(|i| i % 3).collect();
        for kind in BaselineKind::ALL {
            let m = Baseline::train(kind, &x, &y, 3, 0).unwrap();
            let hits = x.iter().zip(&y).filter(|(r, &c)| m.predict(r).0 == c).count();
            assert!(hits >= 85, "{kind:?}: {hits}");
        }
    }
}
