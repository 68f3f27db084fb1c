//! Toy reproduction of the masking ablation: a cross-lead matching task
//! where the answer depends on comparing leads at the same second.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::autoencoder::{train_autoencoder, AeConfig, AeTrainConfig, AutoEncoder};
use super::lm::{LmExample, TinyLm, TinyLmConfig};
use super::tensor::normal;
use super::train::{train_lm, LmTrainConfig};
use crate::mask::{build_mask, MaskScheme};
use crate::tokenizer::{assemble, EcgBlock, Part, Role, TokenSequence};
use crate::{Error, Result};

pub const QUESTION: u32 = 10;
pub const YES: u32 = 11;
pub const NO: u32 = 12;

/// One task instance: `leads[l][t]` is a 1-second segment.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossLeadSample {
    pub leads: [Vec<Vec<f64>>; 2],
    pub matched: bool,
}

fn beat(n: usize, amp: f64, center: f64, width: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let x = (i as f64 / n as f64 - center) / width;
            amp * (-0.5 * x * x).exp()
        })
        .collect()
}

/// Lead 1 holds one random beat per second. Lead 2 is its inverted copy,
/// either aligned (`matched`) or rotated by one second.
pub fn cross_lead_task(count: usize, seconds: usize, n: usize, seed: u64) -> Result<Vec<CrossLeadSample>> {
    if seconds < 2 {
        return Err(Error::invalid("seconds", "need at least 2 to build a mismatch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let lead1: Vec<Vec<f64>> = (0..seconds)
            .map(|_| {
                let amp = rng.gen_range(0.3..1.5);
                let center = rng.gen_range(0.2..0.8);
                let width = rng.gen_range(0.02..0.06);
                beat(n, amp, center, width)
            })
            .collect();
        let matched = rng.gen_bool(0.5);
        let lead2 = (0..seconds)
            .map(|t| {
                let src = if matched { t } else { (t + 1) % seconds };
                lead1[src].iter().map(|v| -v + 0.01 * normal(&mut rng)).collect()
            })
            .collect();
        out.push(CrossLeadSample {
            leads: [lead1, lead2],
            matched,
        });
    }
    Ok(out)
}

/// `[ECG block, question]` from the user, answer from the assistant.
pub fn task_sequence(seconds: usize, matched: bool) -> Result<TokenSequence> {
    let answer = if matched { YES } else { NO };
    assemble(
        &[vec![QUESTION], vec![answer]],
        &[EcgBlock::new(2, seconds as u32)],
        &[Part::ecg(0), Part::text(0), Part::text(1).role(Role::Assistant)],
    )
}

fn lead_names() -> Vec<String> {
    vec!["I".into(), "II".into()]
}

fn to_example(s: &CrossLeadSample, ae: &AutoEncoder, cfg: &TinyLmConfig) -> Result<LmExample> {
    let seconds = s.leads[0].len();
    let segs: Vec<&[f64]> = s.leads.iter().flat_map(|l| l.iter().map(|v| v.as_slice())).collect();
    let latents = ae.encode_batch(&segs)?;
    LmExample::new(task_sequence(seconds, s.matched)?, &cfg.vocab(), &lead_names(), latents)
}

/// Share of examples whose greedy answer is correct, in percent.
pub fn answer_accuracy(model: &TinyLm, examples: &[LmExample], scheme: MaskScheme) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Insufficient("no examples".into()));
    }
    let hits: Vec<bool> = examples
        .par_iter()
        .map(|e| {
            let (rows, targets) = e.targets();
            let logits = model.forward(e, &build_mask(&e.seq, scheme))?;
            Ok(super::lm::argmax(logits.row(rows[0])) == targets[0])
        })
        .collect::<Result<_>>()?;
    Ok(100.0 * hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub seconds: usize,
    pub seeds: Vec<u64>,
    pub schemes: Vec<MaskScheme>,
    /// Update base transformer weights too, instead of LoRA only.
    pub train_base: bool,
    pub ae: AeTrainConfig,
    pub lm: TinyLmConfig,
    pub train: LmTrainConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            n_train: 600,
            n_test: 200,
            seconds: 2,
            seeds: vec![0, 1, 2],
            schemes: MaskScheme::ALL.to_vec(),
            train_base: false,
            ae: AeTrainConfig {
                epochs: 8,
                ..AeTrainConfig::default()
            },
            lm: TinyLmConfig {
                ctx: 32,
                ..TinyLmConfig::default()
            },
            train: LmTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeResult {
    pub scheme: MaskScheme,
    /// Test accuracy per seed, percent.
    pub accuracy: Vec<f64>,
    pub mean: f64,
    pub final_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub chance: f64,
    pub results: Vec<SchemeResult>,
    pub elapsed_s: f64,
}

impl AblationReport {
    pub fn get(&self, scheme: MaskScheme) -> Option<&SchemeResult> {
        self.results.iter().find(|r| r.scheme == scheme)
    }
}

/// For each seed: fresh task data, a briefly trained encoder shared by all
/// schemes, then one LM per scheme from the same initialization.
pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationReport> {
    run_ablation_with(cfg, |_, _, _, _| Ok(()))
}

/// [`run_ablation`], handing every trained `(seed, scheme, encoder, model)`
/// to `visit` (e.g. to save checkpoints).
pub fn run_ablation_with<F>(cfg: &AblationConfig, mut visit: F) -> Result<AblationReport>
where
    F: FnMut(u64, MaskScheme, &AutoEncoder, &TinyLm) -> Result<()>,
{
    let start = Instant::now();
    let n = AeConfig::default().n;
    let mut results: Vec<SchemeResult> = cfg
        .schemes
        .iter()
        .map(|&scheme| SchemeResult {
            scheme,
            accuracy: Vec::new(),
            mean: 0.0,
            final_loss: Vec::new(),
        })
        .collect();
    for &seed in &cfg.seeds {
        let data = cross_lead_task(cfg.n_train + cfg.n_test, cfg.seconds, n, seed)?;
        let (train, test) = data.split_at(cfg.n_train);
        let segs: Vec<Vec<f64>> = train.iter().flat_map(|s| s.leads.iter().flatten().cloned()).collect();
        let (ae, _) = train_autoencoder(&segs, &AeConfig::default(), &AeTrainConfig { seed, ..cfg.ae.clone() })?;
        let train_ex = train.iter().map(|s| to_example(s, &ae, &cfg.lm)).collect::<Result<Vec<_>>>()?;
        let test_ex = test.iter().map(|s| to_example(s, &ae, &cfg.lm)).collect::<Result<Vec<_>>>()?;
        for r in results.iter_mut() {
            let mut model = TinyLm::new(cfg.lm.clone(), seed, cfg.train_base)?;
            let curve = train_lm(&mut model, &train_ex, r.scheme, &LmTrainConfig { seed, ..cfg.train.clone() })?;
            r.final_loss.push(*curve.last().unwrap_or(&f64::NAN));
            r.accuracy.push(answer_accuracy(&model, &test_ex, r.scheme)?);
            visit(seed, r.scheme, &ae, &model)?;
        }
    }
    for r in results.iter_mut() {
        r.mean = r.accuracy.iter().sum::<f64>() / r.accuracy.len().max(1) as f64;
    }
    Ok(AblationReport {
        chance: 50.0,
        results,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::loss_positions;

    #[test]
    fn task_layout() {
        let seq = task_sequence(2, true).unwrap();
        assert_eq!(seq.len(), 2 * 4 + 2 + 2);
        let lp = loss_positions(&seq);
        assert_eq!(lp.iter().filter(|&&b| b).count(), 1);
        assert!(lp[seq.len() - 1]);
    }

    #[test]
    fn mismatch_is_a_rotation() {
        let data = cross_lead_task(40, 3, 64, 5).unwrap();
        for s in &data {
            for t in 0..3 {
                let src = if s.matched { t } else { (t + 1) % 3 };
                let err = s.leads[0][src]
                    .iter()
                    .zip(&s.leads[1][t])
                    .map(|(a, b)| (a + b).abs())
                    .fold(0.0, f64::max);
                assert!(err < 0.1);
            }
        }
        assert!(data.iter().any(|s| s.matched) && data.iter().any(|s| !s.matched));
    }

    #[test]
    fn one_second_is_rejected() {
        assert!(cross_lead_task(1, 1, 64, 0).is_err());
    }
}
