//! System prompts for dialogue (Stage 4) and forecasting (Stage 5) data,
//! and the statistics rendering they embed.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;

use super::{fmt_num, Blueprint, ForecastLabel};
use crate::stats::{StatFields, StatReport, SCALAR_FIELDS};
use crate::{Error, Result};

pub const STAGE4_TEMPLATE: &str = r#"You are an expert cardiologist. Generate a realistic clinical dialogue interpreting an ECG according to the specifications below. Always include a clinically supported diagnosis consistent with the report and provided statistics.

Objectives
1. Realistic clinical reasoning: Reflect how a cardiologist visually analyzes an ECG and arrives at a diagnosis.
2. Evidence-based diagnosis: Support conclusions with ECG findings and statistics when applicable. Do not cite statistics that contradict the diagnosis.
3. Logical flow: Present reasoning from basic observations to final diagnosis.

Dialogue constraints
- Knowledge asymmetry: The human can see the ECG image only and does not know the statistics or diagnosis.
- ECG-dependent: The conversation must require the ECG; avoid questions answerable from text alone.
- Role discipline: The human asks questions; the gpt role ONLY answers and explains. GPT must NEVER ask questions.
- Human limitations: The human must NOT describe ECG features, morphology, or measurements.
- Multi-turn continuity: Each turn should build on prior discussion.

Clinical reasoning rules
- Reasoning before conclusions: Each gpt turn must include clinical reasoning before any final answer.
- Numeric fidelity: All values must exactly match ground truth, including units and lead-specific details when relevant.
- Stepwise computation: When interpreting metrics (e.g., heart rate, intervals), show individual measurements and math before the final value.
- No patient history assumptions: Discuss only what is observable from the ECG.
- No software references: Interpretation must be framed as human visual analysis only.
- Avoid filler language; be direct and clinical.

Formatting rules
- Return ONLY a JSON list of turns using DOUBLE QUOTES.
- Valid elements: {"from":"human","value":"..."} or {"from":"gpt","value":"..."}.
- Do not refer to the assistant as "doctor" or "doc".
- If a specific output format (e.g., SOAP) is required, it must be explicitly requested by the human.

Ground truth inputs
Stats: {stats_str}
Diagnosis: {condition}

{blueprint_spec}

Generate the conversation now:"#;

pub const STAGE5_TEMPLATE: &str = r#"You are an expert cardiologist specializing in arrhythmia risk prediction. Using ONLY the ECG statistics provided, produce evidence-based clinical reasoning to forecast whether an AFib or AFlutter event will occur within the next {horizon_seconds} seconds.

Interpret the values as if you personally reviewed the ECG and measured them. Do not assume patient history, do not diagnose the current rhythm, and do not reference software, models, or automated interpretation.

Task
Given ECG-derived metrics (including beat-level sequences such as RR, PR, QRS, and ectopy markers), produce:
1. A concise, evidence-grounded clinical reasoning narrative describing near-term rhythm stability.
2. A forecast of AFib/AFlutter occurrence within {horizon_seconds} seconds.

Core rules
- Use ONLY the provided statistics; do not invent values or features.
- Cite AT MOST 3-4 relevant metrics. Discuss evidence BEFORE forming any opinion.
- Ground every claim in specific metrics; reference individual beats explicitly when applicable (1-based).
- Numeric fidelity is mandatory. Show math for any derived values.
- Do not analyze metrics that contradict the ground-truth event.
- No filler, hedging clichés, patient history, or diagnostic statements.

Reasoning objectives (in order)
1. Evidence extraction: Identify metrics relevant to short-horizon AFib/AFlutter risk (e.g., RR variability, ectopy, atrial surrogates, conduction instability).
2. Beat-referenced reasoning: Tie claims to specific beats when possible (e.g., "short RR at beat 7").
3. Mechanistic interpretation: Explain how observed findings plausibly precede AFib/AFlutter, using only supported relationships.
4. Forecast formation: Provide a final forecast only after reasoning.

Output requirements
- Return ONLY a JSON list of chat turns using double quotes.
- Include reasoning before the forecast.
- End with exactly one of:
  - Forecast: NORM
  - Forecast: ABNORMAL
- If ABNORMAL, state whether AFib or AFlutter is more likely, or explicitly say uncertain.

Clinical phrasing constraints
- Do NOT refer to inputs as arrays, indices, fields, JSON, or statistics.
- Describe missing data clinically (e.g., "no premature atrial beats identified").
- If PAC count is zero or label is NORM, do NOT mention PACs.
- Beat references must remain explicit and 1-based (e.g., "beat 5").

Ground truth inputs
ECG STATISTICS: {stats_str}
Ground-truth Event after {horizon_seconds} seconds: {forecast_label}

Generate the response now:"#;

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").expect("valid regex"))
}

/// Substitutes `{name}` placeholders. Every placeholder in `template` needs
/// a value; substituted text is not scanned again.
pub fn fill_template(template: &str, values: &[(&str, &str)]) -> Result<String> {
    let wanted: BTreeSet<&str> = placeholder_re()
        .captures_iter(template)
        .map(|c| c.get(1).expect("group").as_str())
        .collect();
    if let Some(missing) = wanted.iter().find(|w| !values.iter().any(|(k, _)| k == *w)) {
        return Err(Error::Template(format!("unresolved placeholder {{{missing}}}")));
    }
    Ok(placeholder_re()
        .replace_all(template, |c: &regex::Captures| {
            let key = &c[1];
            values.iter().find(|(k, _)| *k == key).map(|(_, v)| v.to_string()).expect("checked above")
        })
        .into_owned())
}

pub fn build_stage4_prompt(stats_str: &str, condition: &str, blueprint: &Blueprint) -> Result<String> {
    if condition.trim().is_empty() {
        return Err(Error::Template("missing condition".into()));
    }
    if stats_str.trim().is_empty() {
        return Err(Error::Template("missing statistics".into()));
    }
    let spec = blueprint.spec()?;
    fill_template(
        STAGE4_TEMPLATE,
        &[("stats_str", stats_str), ("condition", condition), ("blueprint_spec", &spec)],
    )
}

pub fn build_stage5_prompt(stats_str: &str, horizon_s: u32, label: ForecastLabel) -> Result<String> {
    if stats_str.trim().is_empty() {
        return Err(Error::Template("missing statistics".into()));
    }
    let h = horizon_s.to_string();
    fill_template(
        STAGE5_TEMPLATE,
        &[("stats_str", stats_str), ("horizon_seconds", &h), ("forecast_label", label.as_str())],
    )
}

/// The human turn of a forecasting conversation.
pub fn forecast_question(horizon_s: u32) -> String {
    format!(
        "Analyze the ECG signal and predict the cardiac rhythm for the next {horizon_s}.0 seconds.\n\n\
         NORM: Normal ECG\n\nABNORM: Atrial Fibrillation or Atrial Flutter\n\nOutput one of: NORM or ABNORM."
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsView {
    /// Global rhythm and morphology plus per-lead intervals and amplitudes.
    Full,
    /// Global rhythm, ectopy and beat-level sequences only.
    Forecast,
}

const FORECAST_SCALARS: [&str; 10] = [
    "mean_rr_ms",
    "heart_rate_bpm",
    "rmssd_ms",
    "sdnn_ms",
    "rr_iqr_ms",
    "pac_count",
    "pr_interval_ms",
    "p_duration_ms",
    "qrs_duration_ms",
    "estimated_atrial_rate_bpm",
];

const LEAD_SCALARS: [&str; 8] = [
    "pr_interval_ms",
    "p_duration_ms",
    "qrs_duration_ms",
    "qt_ms",
    "qtc_ms",
    "p_amplitude_mv",
    "qrs_amplitude_mv",
    "t_amplitude_mv",
];

fn list(values: impl Iterator<Item = Option<f64>>) -> String {
    let items: Vec<String> = values.map(|v| v.map_or("NA".into(), fmt_num)).collect();
    format!("[{}]", items.join(", "))
}

fn scalars(s: &StatFields, names: &[&str], out: &mut Vec<String>) {
    for &name in names {
        if let Some(v) = s.scalar(name) {
            out.push(format!("{name}={}", fmt_num(v)));
        }
    }
}

/// `name=value` pairs separated by `; `; per-lead groups follow as
/// `lead <name>: ...` separated by ` | `.
pub fn stats_string(report: &StatReport, view: StatsView) -> String {
    let g = &report.global;
    let mut items = Vec::new();
    match view {
        StatsView::Full => scalars(g, &SCALAR_FIELDS, &mut items),
        StatsView::Forecast => scalars(g, &FORECAST_SCALARS, &mut items),
    }
    if !g.rr_intervals_ms.is_empty() {
        items.push(format!("rr_intervals_ms={}", list(g.rr_intervals_ms.iter().map(|&v| Some(v)))));
    }
    items.push(format!("pac_beat_indices={}", list(g.pac_beat_indices.iter().map(|&v| Some(v as f64)))));
    let mut out = items.join("; ");
    match view {
        StatsView::Forecast => {
            for (name, l) in [("beat_pr_ms", &g.beat_pr_ms), ("beat_qrs_ms", &g.beat_qrs_ms)] {
                if !l.is_empty() {
                    out.push_str(&format!("; {name}={}", list(l.iter().copied())));
                }
            }
        }
        StatsView::Full => {
            for l in &report.leads {
                let mut items = Vec::new();
                scalars(&l.stats, &LEAD_SCALARS, &mut items);
                if !items.is_empty() {
                    out.push_str(&format!(" | lead {}: {}", l.lead, items.join("; ")));
                }
            }
        }
    }
    out
}

/// Global `name=value` scalars from a rendered statistics string (the
/// part before the first per-lead group).
pub(crate) fn parse_stats_scalars(s: &str) -> Vec<(String, f64)> {
    let global = s.split(" | ").next().unwrap_or("");
    global
        .split("; ")
        .filter_map(|kv| kv.split_once('='))
        .filter_map(|(k, v)| v.parse::<f64>().ok().map(|v| (k.trim().to_string(), v)))
        .collect()
}

pub(crate) fn parse_stats_list(s: &str, name: &str) -> Vec<Option<f64>> {
    let global = s.split(" | ").next().unwrap_or("");
    global
        .split("; ")
        .filter_map(|kv| kv.split_once('='))
        .find(|(k, _)| k.trim() == name)
        .map(|(_, v)| {
            v.trim_matches(|c| c == '[' || c == ']')
                .split(", ")
                .filter(|x| !x.is_empty())
                .map(|x| x.parse().ok())
                .collect()
        })
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{LeadReport, StatFields};

    fn report() -> StatReport {
        let mut global = StatFields::from_rr(&[762.0, 770.0, 590.0, 863.0, 773.0, 762.0, 770.0, 754.0, 773.0]);
        global.pr_interval_ms = Some(188.0);
        global.qrs_duration_ms = Some(104.0);
        let mut v1 = StatFields::default();
        v1.qrs_amplitude_mv = Some(-0.72);
        StatReport {
            fs: 500,
            duration_s: 10.0,
            rhythm_lead: "II".into(),
            global,
            leads: vec![LeadReport {
                lead: "V1".into(),
                r_peaks: vec![],
                stats: v1,
            }],
            diagnostics: vec![],
        }
    }

    #[test]
    fn stage5_fields() {
        let p = build_stage5_prompt("mean_rr_ms=819", 300, ForecastLabel::Norm).unwrap();
        assert!(p.contains("within the next 300 seconds"));
        assert!(p.contains("Ground-truth Event after 300 seconds: NORM"));
        assert!(p.contains("ECG STATISTICS: mean_rr_ms=819\n"));
        assert!(!placeholder_re().is_match(&p));
    }

    #[test]
    fn stage4_fields() {
        let b = Blueprint::new("teaching", "clinician_to_patient", "soap_note", "lay_translation").unwrap();
        let p = build_stage4_prompt("mean_rr_ms=819", "Sinus rhythm", &b).unwrap();
        assert!(p.starts_with("You are an expert cardiologist. Generate a realistic clinical dialogue"));
        assert!(p.contains("Stats: mean_rr_ms=819\nDiagnosis: Sinus rhythm\n\nBlueprint:"));
        for k in ["teaching", "clinician_to_patient", "soap_note", "lay_translation"] {
            assert!(p.contains(k));
        }
        assert!(p.contains(r#"{"from":"human","value":"..."}"#));
        assert!(matches!(build_stage4_prompt("x=1", "  ", &b), Err(Error::Template(_))));
    }

    #[test]
    fn unresolved_placeholder() {
        assert!(fill_template("a {x} b {y}", &[("x", "1")]).is_err());
        assert_eq!(fill_template("a {x} {\"k\":1}", &[("x", "{y}")]).unwrap(), "a {y} {\"k\":1}");
    }

    #[test]
    fn stats_round_trip() {
        let r = report();
        let s = stats_string(&r, StatsView::Full);
        assert!(s.contains("mean_rr_ms=757.44"), "{s}");
        assert!(s.contains("heart_rate_bpm=79"));
        assert!(s.contains("pac_beat_indices=[4]"));
        assert!(s.contains("lead V1: qrs_amplitude_mv=-0.72"));
        let sc = parse_stats_scalars(&s);
        assert!(sc.contains(&("qrs_duration_ms".to_string(), 104.0)));
        assert!(!sc.iter().any(|(k, _)| k == "qrs_amplitude_mv"));
        assert_eq!(parse_stats_list(&s, "rr_intervals_ms")[2], Some(590.0));
        let f = stats_string(&r, StatsView::Forecast);
        assert!(!f.contains("lead V1"));
        assert!(!f.contains("qt_ms"));
    }

    #[test]
    fn forecast_question_text() {
        assert!(forecast_question(60).starts_with("Analyze the ECG signal and predict the cardiac rhythm for the next 60.0 seconds."));
    }
}
