use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_stage, Manifest, PipelineConfig};
use crate::datagen::LlmClient;
use crate::forecast::{
    eval_grid, extract_samples, featurize_all, split_by_record, synth_corpus, train_grid, BaselineKind, ForecastModel,
    GridReport,
};
use crate::mask::{build_mask, MaskScheme};
use crate::neural::checkpoint::{save_checkpoint, Dtype};
use crate::neural::train_autoencoder;
use crate::preprocess::{preprocess, CleanOutcome};
use crate::signal::{random_segments, save_record, synth_ecg, write_jsonl, EcgRecord, LeadSpec, Rhythm, SynthSpec, WaveParams};
use crate::stats::stat_report;
use crate::tokenizer::{assemble, segment, write_sequence, EcgBlock, Part, Role};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub records: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub tokens: usize,
    pub ae_segments: usize,
    pub ae_final_loss: f64,
    /// Held-out reconstruction MSE over held-out signal variance.
    pub ae_heldout_ratio: f64,
    /// `(stage, kept, rejected, skipped)`.
    pub datagen: Vec<(u8, usize, usize, usize)>,
    pub forecast_samples: usize,
    pub grid: GridReport,
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn synth_records(cfg: &PipelineConfig) -> Result<Vec<(String, EcgRecord)>> {
    let sc = &cfg.synth;
    (0..sc.n_records)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
            let arrhythmic = rng.gen::<f64>() < sc.arrhythmia_share;
            let mut schedule = vec![(0.0, Rhythm::Norm)];
            if arrhythmic {
                let kind = if rng.gen::<bool>() { Rhythm::Afib } else { Rhythm::Afl };
                schedule.push(((sc.duration_s * rng.gen_range(0.3..0.6)).round(), kind));
            }
            let base = WaveParams {
                pr_ms: rng.gen_range(140.0..190.0),
                qrs_width_ms: rng.gen_range(80.0..110.0),
                ..WaveParams::default()
            };
            let leads = sc
                .leads
                .iter()
                .enumerate()
                .map(|(k, name)| LeadSpec::new(name.clone(), base.scaled(if k % 3 == 2 { -0.6 } else { 1.0 - 0.2 * k as f64 })))
                .collect();
            let spec = SynthSpec {
                duration_s: sc.duration_s,
                fs: sc.fs,
                heart_rate_bpm: rng.gen_range(55.0..100.0),
                rr_jitter_ms: 15.0,
                pac_positions: if rng.gen::<bool>() { vec![6] } else { vec![] },
                leads,
                rhythm_schedule: schedule,
            };
            Ok((format!("rec{i:03}"), synth_ecg(&spec, rng.gen())?))
        })
        .collect()
}

/// synth -> preprocess -> stats -> tokenize -> mask -> train-ae -> datagen
/// (mock client) -> forecastbench, with every artifact under `out` and a
/// manifest listing their hashes. Deterministic for a given config.
pub fn run_demo(cfg: &PipelineConfig, out: &Path) -> Result<DemoSummary> {
    cfg.validate()?;
    cfg.install(|| demo_inner(cfg, out))?
}

fn demo_inner(cfg: &PipelineConfig, out: &Path) -> Result<DemoSummary> {
    for d in ["records", "preprocessed", "stats", "tokens", "masks", "ae", "datagen", "forecast"] {
        mkdir(&out.join(d))?;
    }

    let raw = synth_records(cfg)?;
    for (id, rec) in &raw {
        save_record(rec, &out.join("records").join(format!("{id}.ecg")))?;
    }

    let processed: Vec<(String, std::result::Result<EcgRecord, String>, Vec<String>)> = raw
        .par_iter()
        .map(|(id, rec)| {
            let p = preprocess(rec, &cfg.preprocess)?;
            let outcome = match p.outcome {
                CleanOutcome::Accepted(r) => Ok(r),
                CleanOutcome::Rejected(r) => Err(format!("{:?} on lead {} ({} s)", r.reason, r.lead, r.run_s)),
            };
            Ok((id.clone(), outcome, p.provenance))
        })
        .collect::<Result<_>>()?;
    let mut log = Vec::new();
    let mut clean: Vec<(String, EcgRecord)> = Vec::new();
    for (id, outcome, provenance) in processed {
        log.push(serde_json::json!({"id": id, "steps": provenance, "rejected": outcome.as_ref().err()}));
        if let Ok(r) = outcome {
            save_record(&r, &out.join("preprocessed").join(format!("{id}.ecg")))?;
            clean.push((id, r));
        }
    }
    write_jsonl(&out.join("preprocessed").join("log.jsonl"), &log)?;

    let reports: Vec<_> = clean.par_iter().map(|(_, r)| stat_report(r)).collect();
    for ((id, _), rep) in clean.iter().zip(&reports) {
        write_json(&out.join("stats").join(format!("{id}.json")), rep)?;
    }

    let mut tokens = 0;
    let mut segments = Vec::new();
    for (i, (id, rec)) in clean.iter().enumerate() {
        let segs = segment(rec)?;
        let t = segs[0].len() as u32;
        let question: Vec<u32> = (1..=6).collect();
        let answer = vec![7 + i as u32 % 3];
        let seq = assemble(
            &[question, answer],
            &[EcgBlock::new(rec.n_leads() as u16, t)],
            &[Part::text(0), Part::ecg(0), Part::text(1).role(Role::Assistant)],
        )?;
        tokens += seq.len();
        write_sequence(&seq, &out.join("tokens").join(format!("{id}.jsonl")))?;
        for scheme in MaskScheme::ALL {
            build_mask(&seq, scheme).save(&out.join("masks").join(format!("{id}.{}.mask", scheme.as_str())))?;
        }
        segments.extend(segs.into_iter().flatten());
    }

    let fs = cfg.preprocess.target_fs;
    segments.extend(random_segments(cfg.ae_extra_segments, fs, cfg.seed ^ 0xae)?);
    let n_test = segments.len() / 5;
    let test = segments.split_off(segments.len() - n_test);
    let train_cfg = crate::neural::AeTrainConfig {
        seed: cfg.seed,
        ..cfg.ae_train.clone()
    };
    let (ae, curve) = train_autoencoder(&segments, &cfg.ae, &train_cfg)?;
    let flat: Vec<f64> = test.iter().flatten().copied().collect();
    let mean = flat.iter().sum::<f64>() / flat.len() as f64;
    let var = flat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / flat.len() as f64;
    let ratio = ae.reconstruction_mse(&test)? / var;
    save_checkpoint(&out.join("ae").join("ae.ckpt"), "autoencoder", &serde_json::to_value(&cfg.ae)?, &ae.store, Dtype::F32)?;
    write_json(&out.join("ae").join("curve.json"), &curve)?;

    let corpus = synth_corpus(&cfg.forecast.corpus, cfg.seed)?;
    let client = LlmClient::new(crate::datagen::ClientConfig {
        mock: true,
        ..cfg.datagen.client.clone()
    })?;
    let mut datagen = Vec::new();
    for stage in 2..=5u8 {
        let recs = if stage == 5 { &corpus[..corpus.len().min(2)] } else { &clean[..] };
        let o = run_stage(stage, recs, &cfg.datagen, &client, cfg.seed)?;
        write_jsonl(&out.join("datagen").join(format!("stage{stage}.jsonl")), &o.conversations)?;
        datagen.push((stage, o.conversations.len(), o.rejected.len(), o.skipped.len()));
    }

    let specs = cfg.forecast.specs();
    let lookup: HashMap<&str, &EcgRecord> = corpus.iter().map(|(id, r)| (id.as_str(), r)).collect();
    let mut samples = Vec::new();
    for (k, spec) in specs.iter().enumerate() {
        let per: Vec<_> = corpus
            .par_iter()
            .map(|(id, rec)| extract_samples(id, rec, spec, cfg.seed.wrapping_add(k as u64)))
            .collect::<Result<_>>()?;
        samples.extend(per.into_iter().flatten());
    }
    featurize_all(&mut samples, |id| lookup.get(id).copied())?;
    write_jsonl(&out.join("forecast").join("benchmark.jsonl"), &samples)?;
    let n_samples = samples.len();
    let (train, test) = split_by_record(samples, cfg.forecast.test_fraction, cfg.seed)?;
    let task = cfg.forecast.task;
    let models: Vec<_> = BaselineKind::ALL
        .iter()
        .map(|&k| train_grid(k, &train, task, cfg.seed))
        .collect::<Result<_>>()?;
    write_json(&out.join("forecast").join("models.json"), &models)?;
    let refs: Vec<&dyn ForecastModel> = models.iter().map(|m| m as &dyn ForecastModel).collect();
    let grid = eval_grid(&refs, &test, &specs, task);
    write_json(&out.join("forecast").join("grid.json"), &grid)?;
    std::fs::write(out.join("forecast").join("grid.txt"), grid.to_table()).map_err(|e| Error::io(out, e))?;

    let summary = DemoSummary {
        records: raw.len(),
        accepted: clean.len(),
        rejected: raw.len() - clean.len(),
        tokens,
        ae_segments: segments.len(),
        ae_final_loss: curve.last().copied().unwrap_or(f64::NAN),
        ae_heldout_ratio: ratio,
        datagen,
        forecast_samples: n_samples,
        grid,
    };
    write_json(&out.join("summary.json"), &summary)?;
    let manifest_path = out.join("manifest.json");
    let mut m = Manifest::new("demo", cfg.seed, cfg.hash());
    m.add_tree(out, &manifest_path)?;
    m.summary = serde_json::json!({"records": summary.records, "ae_heldout_ratio": summary.ae_heldout_ratio});
    m.write(&manifest_path)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_demo_runs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.synth.n_records = 2;
        cfg.synth.duration_s = 8.0;
        cfg.ae_train.epochs = 1;
        cfg.ae_extra_segments = 64;
        cfg.forecast.corpus.n_records = 4;
        cfg.forecast.corpus.duration_s = 400.0;
        cfg.forecast.windows_s = vec![10];
        cfg.forecast.horizons_s = vec![60];
        cfg.datagen.window_s = 30;
        cfg.datagen.horizon_s = 60;
        let s = run_demo(&cfg, dir.path()).unwrap();
        assert_eq!(s.records, 2);
        assert!(dir.path().join("manifest.json").exists());
        assert!(s.datagen.iter().all(|d| d.2 == 0), "{:?}", s.datagen);
    }
}
