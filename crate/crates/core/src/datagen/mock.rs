//! Offline stand-in for the LLM service: answers dialogue and forecasting
//! prompts with minimal, valid conversations built from the statistics in
//! the prompt itself.

use super::prompts::{forecast_question, parse_stats_list, parse_stats_scalars};
use super::{fmt_num, ForecastLabel, Turn};
use crate::{Error, Result};

fn line_after<'a>(prompt: &'a str, prefix: &str) -> Option<&'a str> {
    prompt.lines().find_map(|l| l.strip_prefix(prefix)).map(str::trim)
}

struct Stats {
    scalars: Vec<(String, f64)>,
}

impl Stats {
    fn get(&self, name: &str) -> Option<f64> {
        self.scalars.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }
}

/// Rate sentence with the worked division, when both values are present.
fn rate_sentence(s: &Stats) -> Option<String> {
    let (m, hr) = (s.get("mean_rr_ms")?, s.get("heart_rate_bpm")?);
    Some(format!(
        "The mean RR interval is {} ms, giving a heart rate of 60,000 / {} ≈ {} bpm.",
        fmt_num(m),
        fmt_num(m),
        fmt_num(hr)
    ))
}

fn interval_sentence(s: &Stats) -> Option<String> {
    for (field, name) in [("qrs_duration_ms", "QRS duration"), ("pr_interval_ms", "PR interval"), ("qtc_ms", "corrected QT interval")] {
        if let Some(v) = s.get(field) {
            return Some(format!("The {name} is {} ms.", fmt_num(v)));
        }
    }
    None
}

fn stage4(prompt: &str, stats: &Stats) -> Result<Vec<Turn>> {
    let condition = line_after(prompt, "Diagnosis: ")
        .filter(|c| !c.is_empty())
        .ok_or_else(|| Error::Template("prompt has no diagnosis line".into()))?;
    let mut reasoning: Vec<String> = [rate_sentence(stats), interval_sentence(stats)].into_iter().flatten().collect();
    if reasoning.is_empty() {
        reasoning.push("The tracing was reviewed lead by lead.".into());
    }
    Ok(vec![
        Turn::human("Please interpret this ECG and give your diagnosis."),
        Turn::gpt(format!("Reasoning: {} Diagnosis: {condition}.", reasoning.join(" "))),
    ])
}

fn stage5(prompt: &str, stats: &Stats, label_line: &str) -> Result<Vec<Turn>> {
    let (h, label) = label_line
        .split_once(" seconds: ")
        .ok_or_else(|| Error::Template(format!("unrecognized forecast line {label_line:?}")))?;
    let horizon: u32 = h.trim().parse().map_err(|_| Error::Template(format!("bad horizon {h:?}")))?;
    let label: ForecastLabel = label.trim().parse()?;
    let mut parts = Vec::new();
    match label {
        ForecastLabel::Norm => {
            if let Some(r) = rate_sentence(stats) {
                parts.push(r);
            }
            if let Some(v) = stats.get("rmssd_ms") {
                parts.push(format!(
                    "Beat-to-beat variation is modest, with an RMSSD of {} ms, and the rhythm shows no progressive shortening of the RR intervals.",
                    fmt_num(v)
                ));
            }
            if let Some(v) = stats.get("pr_interval_ms") {
                parts.push(format!("The PR interval of {} ms indicates steady atrioventricular conduction.", fmt_num(v)));
            }
            parts.push(format!(
                "These findings point to a stable rhythm, so conversion to AFib or AFlutter within the next {horizon} seconds is unlikely. Forecast: NORM"
            ));
        }
        ForecastLabel::Abnormal => {
            if let Some(v) = stats.get("rmssd_ms") {
                parts.push(format!("The RMSSD of {} ms reflects marked beat-to-beat irregularity.", fmt_num(v)));
            }
            if let Some(v) = stats.get("sdnn_ms") {
                parts.push(format!("The SDNN of {} ms confirms elevated overall RR variability.", fmt_num(v)));
            }
            let pacs: Vec<String> = parse_stats_list(&stats_line(prompt), "pac_beat_indices")
                .into_iter()
                .flatten()
                .map(|k| format!("beat {}", k as usize))
                .collect();
            if !pacs.is_empty() {
                parts.push(format!("Premature atrial contractions occur at {}.", pacs.join(", ")));
            }
            parts.push(format!(
                "This atrial instability commonly precedes an atrial tachyarrhythmia within the next {horizon} seconds; \
                 whether AFib or AFlutter is more likely is uncertain. Forecast: ABNORMAL"
            ));
        }
    }
    Ok(vec![Turn::human(forecast_question(horizon)), Turn::gpt(parts.join(" "))])
}

fn stats_line(prompt: &str) -> String {
    line_after(prompt, "ECG STATISTICS: ")
        .or_else(|| line_after(prompt, "Stats: "))
        .unwrap_or("")
        .to_string()
}

/// Deterministic reply to a dialogue or forecasting prompt, as the JSON
/// turn list a real service is asked to return.
pub fn mock_generate(prompt: &str) -> Result<String> {
    let stats = Stats {
        scalars: parse_stats_scalars(&stats_line(prompt)),
    };
    let turns = match line_after(prompt, "Ground-truth Event after ") {
        Some(line) => stage5(prompt, &stats, line)?,
        None => stage4(prompt, &stats)?,
    };
    Ok(serde_json::to_string(&turns)?)
}
