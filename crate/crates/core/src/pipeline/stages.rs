use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::DatagenConfig;
use crate::datagen::{
    build_stage4_prompt, build_stage5_prompt, gen_stage2, gen_stage3, stats_string, validate_conversation, Blueprint,
    Conversation, ForecastLabel, Grounding, LlmClient, Provenance, QaFormat, Stage2Spec, StatsView, TaskType, Violation,
};
use crate::forecast::{extract_samples, ForecastSpec};
use crate::signal::{load_record, BeatLabel, EcgRecord};
use crate::stats::{stat_report, StatReport};
use crate::{Error, Result};

/// Every `*.ecg` record in `dir`, sorted by file name; ids are file stems.
pub fn load_records(dir: &Path) -> Result<Vec<(String, EcgRecord)>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ecg"))
        .collect();
    paths.sort();
    paths
        .par_iter()
        .map(|p| {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, load_record(p)?))
        })
        .collect()
}

/// Majority rhythm of the annotated beats (PACs count as sinus rhythm).
pub fn record_label(record: &EcgRecord) -> Option<&'static str> {
    let ann = record.annotations()?;
    let mut counts = [0usize; 3];
    for &l in ann.labels() {
        match l {
            BeatLabel::Norm | BeatLabel::Pac => counts[0] += 1,
            BeatLabel::Afib => counts[1] += 1,
            BeatLabel::Afl => counts[2] += 1,
            BeatLabel::Other => {}
        }
    }
    let best = (0..3).max_by_key(|&i| (counts[i], std::cmp::Reverse(i)))?;
    (counts[best] > 0).then_some(["NORM", "AFIB", "AFL"][best])
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageOutput {
    /// Conversations that passed validation.
    pub conversations: Vec<Conversation>,
    /// `(source id, violation)` for every rejected conversation.
    pub rejected: Vec<(String, Violation)>,
    /// Items that could not be produced, with the reason.
    pub skipped: Vec<String>,
}

struct Job {
    source: String,
    prompt: String,
    ground: Grounding,
    label: Option<ForecastLabel>,
    provenance: Provenance,
}

fn keep(out: &mut StageOutput, source: &str, conv: Conversation, ground: &Grounding, label: Option<ForecastLabel>) {
    let v = validate_conversation(&conv, ground, label);
    if v.is_empty() {
        out.conversations.push(conv);
    } else {
        out.rejected.extend(v.into_iter().map(|v| (source.to_string(), v)));
    }
}

fn item_seed(seed: u64, i: usize, k: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add((i * 64 + k) as u64)
}

/// Curriculum stage `stage` (2 to 5) over `records`. Stages 2 and 3 are
/// template-generated; stages 4 and 5 go through `client`.
pub fn run_stage(stage: u8, records: &[(String, EcgRecord)], cfg: &DatagenConfig, client: &LlmClient, seed: u64) -> Result<StageOutput> {
    let reports: Vec<StatReport> = records.par_iter().map(|(_, r)| stat_report(r)).collect();
    let mut out = StageOutput::default();
    match stage {
        2 => {
            let mut labels: BTreeSet<String> = ["NORM", "AFIB", "AFL"].iter().map(|s| s.to_string()).collect();
            labels.extend(records.iter().filter_map(|(_, r)| record_label(r)).map(str::to_string));
            let label_set: Vec<String> = labels.into_iter().collect();
            let spec = Stage2Spec {
                format: QaFormat::MultipleChoice,
                n_options: cfg.stage2_options.min(label_set.len()),
            };
            for (i, (id, rec)) in records.iter().enumerate() {
                let Some(label) = record_label(rec) else {
                    out.skipped.push(format!("{id}: no beat annotations"));
                    continue;
                };
                let item = gen_stage2(id, label, &label_set, spec, item_seed(seed, i, 0))?;
                let mut conv = item.to_conversation();
                conv.provenance.stage = Some(2);
                keep(&mut out, id, conv, &Grounding::from_map(&item.grounded_values), None);
            }
        }
        3 => {
            for (i, (id, _)) in records.iter().enumerate() {
                for (k, task) in TaskType::ALL.into_iter().enumerate() {
                    let (b, ids) = if task == TaskType::Comparative {
                        if records.len() < 2 {
                            out.skipped.push(format!("{id}: comparison needs a second record"));
                            continue;
                        }
                        let j = (i + 1) % records.len();
                        (Some(&reports[j]), vec![id.clone(), records[j].0.clone()])
                    } else {
                        (None, vec![id.clone()])
                    };
                    match gen_stage3(&reports[i], b, task, &ids, item_seed(seed, i, k)) {
                        Ok(item) => {
                            let mut conv = item.to_conversation();
                            conv.provenance.stage = Some(3);
                            keep(&mut out, id, conv, &Grounding::from_map(&item.grounded_values), None);
                        }
                        Err(Error::NotGenerable(m)) => out.skipped.push(format!("{id} {}: {m}", task.as_str())),
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        4 => {
            let mut jobs = Vec::new();
            for (i, (id, rec)) in records.iter().enumerate() {
                let Some(condition) = record_label(rec) else {
                    out.skipped.push(format!("{id}: no diagnosis label"));
                    continue;
                };
                let blueprint = Blueprint::sample(&mut ChaCha8Rng::seed_from_u64(item_seed(seed, i, 0)));
                let stats = stats_string(&reports[i], StatsView::Full);
                let prompt = build_stage4_prompt(&stats, condition, &blueprint)?;
                jobs.push(Job {
                    source: id.clone(),
                    prompt,
                    ground: Grounding::from_report(&reports[i]),
                    label: None,
                    provenance: Provenance {
                        source_ids: vec![id.clone()],
                        stage: Some(4),
                        catalog_extension: blueprint.uses_extension()?,
                        blueprint: Some(blueprint),
                        stats: Some(stats),
                        condition: Some(condition.to_string()),
                        ..Provenance::default()
                    },
                });
            }
            run_jobs(jobs, client, &mut out)?;
        }
        5 => {
            let spec = ForecastSpec::new(cfg.window_s, cfg.horizon_s);
            let mut jobs = Vec::new();
            for (i, (id, rec)) in records.iter().enumerate() {
                let samples = match extract_samples(id, rec, &spec, item_seed(seed, i, 0)) {
                    Ok(s) => s,
                    Err(e) => {
                        out.skipped.push(format!("{id}: {e}"));
                        continue;
                    }
                };
                let step = samples.len().div_ceil(cfg.max_per_record.max(1)).max(1);
                for s in samples.iter().step_by(step) {
                    let fs = rec.fs() as usize;
                    let span = rec.slice(s.t0_s as usize * fs, s.input_end_s() as usize * fs)?;
                    let report = stat_report(&span);
                    let stats = stats_string(&report, StatsView::Forecast);
                    jobs.push(Job {
                        source: format!("{id}:{}", s.t0_s),
                        prompt: build_stage5_prompt(&stats, s.horizon_s, s.label)?,
                        ground: Grounding::from_report(&report),
                        label: Some(s.label),
                        provenance: Provenance {
                            source_ids: vec![id.clone()],
                            stage: Some(5),
                            stats: Some(stats),
                            forecast_label: Some(s.label),
                            horizon_s: Some(s.horizon_s),
                            ..Provenance::default()
                        },
                    });
                }
            }
            run_jobs(jobs, client, &mut out)?;
        }
        _ => return Err(Error::invalid("stage", format!("{stage} is not one of 2, 3, 4, 5"))),
    }
    Ok(out)
}

fn run_jobs(jobs: Vec<Job>, client: &LlmClient, out: &mut StageOutput) -> Result<()> {
    let prompts: Vec<String> = jobs.iter().map(|j| j.prompt.clone()).collect();
    for (job, reply) in jobs.into_iter().zip(client.generate_batch(&prompts)) {
        let raw = match reply {
            Ok(r) => r,
            Err(e @ Error::Auth { .. }) => return Err(e),
            Err(e) => {
                out.skipped.push(format!("{}: {e}", job.source));
                continue;
            }
        };
        match Conversation::parse_turns(&raw) {
            Ok(turns) => {
                let conv = Conversation {
                    turns,
                    provenance: job.provenance,
                };
                keep(out, &job.source, conv, &job.ground, job.label);
            }
            Err(e) => out.skipped.push(format!("{}: {e}", job.source)),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::ClientConfig;
    use crate::signal::{synth_ecg, Rhythm, SynthSpec};

    fn records() -> Vec<(String, EcgRecord)> {
        let mk = |rhythm: Vec<(f64, Rhythm)>, pacs: Vec<usize>, hr: f64, seed| {
            synth_ecg(
                &SynthSpec {
                    duration_s: 400.0,
                    fs: 250,
                    heart_rate_bpm: hr,
                    pac_positions: pacs,
                    rhythm_schedule: rhythm,
                    ..SynthSpec::default()
                },
                seed,
            )
            .unwrap()
        };
        vec![
            ("a".into(), mk(vec![(0.0, Rhythm::Norm)], vec![8, 40], 72.0, 1)),
            ("b".into(), mk(vec![(0.0, Rhythm::Norm), (300.0, Rhythm::Afib)], vec![20], 80.0, 2)),
            ("c".into(), mk(vec![(0.0, Rhythm::Afl)], vec![], 90.0, 3)),
        ]
    }

    #[test]
    fn labels_follow_majority_rhythm() {
        let r = records();
        let got: Vec<_> = r.iter().map(|(_, x)| record_label(x)).collect();
        assert_eq!(got, [Some("NORM"), Some("NORM"), Some("AFL")]);
    }

    #[test]
    fn every_stage_validates_cleanly() {
        let recs = records();
        let client = LlmClient::new(ClientConfig::mock()).unwrap();
        let cfg = DatagenConfig {
            window_s: 30,
            horizon_s: 60,
            ..DatagenConfig::default()
        };
        for stage in 2..=5 {
            let out = run_stage(stage, &recs, &cfg, &client, 4).unwrap();
            assert!(out.rejected.is_empty(), "stage {stage}: {:?}", out.rejected);
            assert!(!out.conversations.is_empty(), "stage {stage}: {:?}", out.skipped);
            assert!(out.conversations.iter().all(|c| c.provenance.stage == Some(stage)));
        }
        assert!(run_stage(6, &recs, &cfg, &client, 0).is_err());
    }
}
