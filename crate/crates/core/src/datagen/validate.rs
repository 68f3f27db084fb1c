//! Conversation checks: shape, role discipline, numeric fidelity against
//! ground-truth statistics, rendered arithmetic and forecast tags.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Conversation, ForecastLabel, Speaker};
use crate::stats::{StatFields, StatReport, SCALAR_FIELDS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Ms,
    Bpm,
    Mv,
    None,
}

impl Unit {
    /// Unit implied by a field name suffix (`_ms`, `_bpm`, `_mv`), ignoring
    /// any `[i]` index.
    pub fn of_field(name: &str) -> Unit {
        let base = name.split('[').next().unwrap_or(name);
        if base.ends_with("_ms") {
            Unit::Ms
        } else if base.ends_with("_bpm") {
            Unit::Bpm
        } else if base.ends_with("_mv") {
            Unit::Mv
        } else {
            Unit::None
        }
    }

    fn parse(s: &str) -> Unit {
        match s {
            "ms" => Unit::Ms,
            "bpm" => Unit::Bpm,
            "mV" => Unit::Mv,
            _ => Unit::None,
        }
    }
}

/// Named ground-truth values a conversation may quote.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grounding {
    values: Vec<(String, f64, Unit)>,
}

impl Grounding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        let name = name.into();
        let unit = Unit::of_field(&name);
        self.values.push((name, value, unit));
    }

    pub fn from_map(map: &BTreeMap<String, f64>) -> Self {
        let mut g = Grounding::new();
        for (k, &v) in map {
            g.push(k.clone(), v);
        }
        g
    }

    /// Global fields bare, per-lead fields as `<lead>.<field>`, list entries
    /// as `<field>[i]`.
    pub fn from_report(report: &StatReport) -> Self {
        let mut g = Grounding::new();
        g.add_fields("", &report.global);
        for l in &report.leads {
            g.add_fields(&format!("{}.", l.lead), &l.stats);
        }
        g
    }

    fn add_fields(&mut self, prefix: &str, s: &StatFields) {
        for name in SCALAR_FIELDS {
            if let Some(v) = s.scalar(name) {
                self.push(format!("{prefix}{name}"), v);
            }
        }
        for (i, &v) in s.rr_intervals_ms.iter().enumerate() {
            self.push(format!("{prefix}rr_intervals_ms[{i}]"), v);
        }
        for (field, list) in [("beat_pr_ms", &s.beat_pr_ms), ("beat_qrs_ms", &s.beat_qrs_ms)] {
            for (i, v) in list.iter().enumerate() {
                if let Some(v) = v {
                    self.push(format!("{prefix}{field}[{i}]"), *v);
                }
            }
        }
    }

    pub fn extend(&mut self, other: &Grounding) {
        self.values.extend(other.values.iter().cloned());
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// A quoted number with `decimals` digits after the point matches a
    /// value of the same unit when it is that value rounded (integers) or
    /// within 0.01 (decimals).
    pub fn matches(&self, quoted: f64, decimals: usize, unit: Unit) -> Option<&str> {
        self.values
            .iter()
            .filter(|(_, _, u)| *u == unit)
            .find(|(_, v, _)| {
                if decimals == 0 {
                    v.round() == quoted
                } else {
                    (v - quoted).abs() <= 0.01 + 1e-9
                }
            })
            .map(|(n, _, _)| n.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Shape,
    RoleOrder,
    GptQuestion,
    NumericFidelity,
    Arithmetic,
    MissingForecast,
    ForecastMismatch,
    ForecastRationale,
    PacMention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub turn: Option<usize>,
    pub detail: String,
}

fn v(kind: ViolationKind, turn: Option<usize>, detail: impl Into<String>) -> Violation {
    Violation {
        kind,
        turn,
        detail: detail.into(),
    }
}

const NUM: &str = r"-?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?";

fn quantity_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(&format!(r"(?:^|[^\w.,])({NUM})\s?(ms|bpm|mV)\b")).expect("valid regex"))
}

fn parse_num(s: &str) -> (f64, usize) {
    let clean = s.replace(',', "");
    let decimals = clean.split_once('.').map_or(0, |(_, d)| d.len());
    (clean.parse().unwrap_or(f64::NAN), decimals)
}

fn slack(decimals: usize) -> f64 {
    0.5 * 10f64.powi(-(decimals as i32)) + 0.01
}

/// Arithmetic rendered in text that does not evaluate to its stated
/// result: means `(a + b + ...) / k = m`, rates `60,000 / m ≈ b` and
/// differences `a - b = c`. Stated results may be rounded to their shown
/// precision.
pub fn check_arithmetic(text: &str) -> Vec<String> {
    static RES: OnceLock<[Regex; 3]> = OnceLock::new();
    let [mean, rate, diff] = RES.get_or_init(|| {
        [
            Regex::new(&format!(r"\(\s*({NUM}(?:\s*\+\s*{NUM})*)\s*\)\s*/\s*(\d+)\s*=\s*({NUM})")).expect("valid regex"),
            Regex::new(&format!(r"60,?000\s*/\s*({NUM})\s*(?:=|≈|~)\s*({NUM})")).expect("valid regex"),
            Regex::new(&format!(r"({NUM})\s+[-−]\s+({NUM})\s*=\s*({NUM})")).expect("valid regex"),
        ]
    });
    let mut out = Vec::new();
    for c in mean.captures_iter(text) {
        let terms: Vec<f64> = c[1].split('+').map(|t| parse_num(t.trim()).0).collect();
        let k: usize = c[2].parse().unwrap_or(0);
        let (stated, d) = parse_num(&c[3]);
        if k != terms.len() {
            out.push(format!("{}: {} terms divided by {k}", &c[0], terms.len()));
        } else if (terms.iter().sum::<f64>() / k as f64 - stated).abs() > slack(d) {
            out.push(format!("{}: evaluates to {:.3}", &c[0], terms.iter().sum::<f64>() / k as f64));
        }
    }
    for c in rate.captures_iter(text) {
        let (m, _) = parse_num(&c[1]);
        let (stated, d) = parse_num(&c[2]);
        if (60000.0 / m - stated).abs() > slack(d) {
            out.push(format!("{}: evaluates to {:.3}", &c[0], 60000.0 / m));
        }
    }
    for c in diff.captures_iter(text) {
        let (a, _) = parse_num(&c[1]);
        let (b, _) = parse_num(&c[2]);
        let (stated, d) = parse_num(&c[3]);
        if (a - b - stated).abs() > slack(d) {
            out.push(format!("{}: evaluates to {:.3}", &c[0], a - b));
        }
    }
    out
}

/// All violations of `conv` against `ground`. With a forecast `label` the
/// conversation is held to the forecast rules as well.
pub fn validate_conversation(conv: &Conversation, ground: &Grounding, label: Option<ForecastLabel>) -> Vec<Violation> {
    use ViolationKind::*;
    let mut out = Vec::new();
    if conv.turns.is_empty() {
        out.push(v(Shape, None, "conversation has no turns"));
        return out;
    }
    for (i, t) in conv.turns.iter().enumerate() {
        let expected = if i % 2 == 0 { Speaker::Human } else { Speaker::Gpt };
        if t.from != expected {
            out.push(v(RoleOrder, Some(i), format!("expected {expected:?}, found {:?}", t.from)));
        }
        if t.value.trim().is_empty() {
            out.push(v(Shape, Some(i), "empty turn"));
        }
        if t.from != Speaker::Gpt {
            continue;
        }
        if t.value.trim_end().ends_with('?') {
            out.push(v(GptQuestion, Some(i), "gpt turn ends with a question"));
        }
        for c in quantity_re().captures_iter(&t.value) {
            let (q, d) = parse_num(&c[1]);
            if ground.matches(q, d, Unit::parse(&c[2])).is_none() {
                out.push(v(NumericFidelity, Some(i), format!("{} {} matches no ground-truth value", &c[1], &c[2])));
            }
        }
        for problem in check_arithmetic(&t.value) {
            out.push(v(Arithmetic, Some(i), problem));
        }
    }
    if let Some(label) = label {
        check_forecast(conv, label, &mut out);
    }
    out
}

fn check_forecast(conv: &Conversation, label: ForecastLabel, out: &mut Vec<Violation>) {
    use ViolationKind::*;
    let tags = [ForecastLabel::Norm, ForecastLabel::Abnormal];
    let last = conv.turns.len() - 1;
    let gpt_text: Vec<(usize, &str)> = conv
        .turns
        .iter()
        .enumerate()
        .filter(|(_, t)| t.from == Speaker::Gpt)
        .map(|(i, t)| (i, t.value.as_str()))
        .collect();
    let count: usize = gpt_text
        .iter()
        .map(|(_, t)| tags.iter().map(|l| t.matches(&l.tag()).count()).sum::<usize>())
        .sum();
    let end = conv.turns[last].value.trim_end();
    let ending = tags.into_iter().find(|l| end.ends_with(&l.tag()));
    match ending {
        Some(found) if conv.turns[last].from == Speaker::Gpt && count == 1 => {
            if found != label {
                out.push(v(ForecastMismatch, Some(last), format!("tag {found}, label {label}")));
            }
        }
        _ => out.push(v(
            MissingForecast,
            Some(last),
            format!("final gpt turn must end with exactly one forecast tag ({count} found)"),
        )),
    }
    let all: String = gpt_text.iter().map(|(_, t)| *t).collect::<Vec<_>>().join("\n");
    let lower = all.to_lowercase();
    if label == ForecastLabel::Abnormal && !["afib", "aflutter", "uncertain"].iter().any(|k| lower.contains(k)) {
        out.push(v(ForecastRationale, None, "ABNORMAL forecast names neither AFib, AFlutter nor uncertainty"));
    }
    if label == ForecastLabel::Norm && (lower.contains("premature atrial") || all.contains("PAC")) {
        out.push(v(PacMention, None, "NORM forecast mentions premature atrial contractions"));
    }
}

/// Validates an LLM reply as raw text: it must be a JSON list of turns.
pub fn validate_raw(raw: &str, ground: &Grounding, label: Option<ForecastLabel>) -> Vec<Violation> {
    match Conversation::parse_turns(raw) {
        Ok(turns) => validate_conversation(
            &Conversation {
                turns,
                provenance: Default::default(),
            },
            ground,
            label,
        ),
        Err(e) => vec![v(ViolationKind::Shape, None, e.to_string())],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Turn;

    fn conv(turns: Vec<Turn>) -> Conversation {
        Conversation {
            turns,
            provenance: Default::default(),
        }
    }

    fn ground(pairs: &[(&str, f64)]) -> Grounding {
        let mut g = Grounding::new();
        for (k, val) in pairs {
            g.push(*k, *val);
        }
        g
    }

    fn kinds(vs: &[Violation]) -> Vec<ViolationKind> {
        vs.iter().map(|v| v.kind).collect()
    }

    #[test]
    fn quoted_mean_rr_matches() {
        let g = ground(&[("mean_rr_ms", 819.0), ("heart_rate_bpm", 73.0)]);
        let c = conv(vec![
            Turn::human("What is the rate?"),
            Turn::gpt("The mean RR interval is 819 ms, resulting in a heart rate of 73 bpm (60,000 / 819 = 73)."),
        ]);
        assert!(validate_conversation(&c, &g, None).is_empty());
    }

    #[test]
    fn gpt_question_is_flagged() {
        let c = conv(vec![Turn::human("Rate?"), Turn::gpt("What do you think?")]);
        assert_eq!(kinds(&validate_conversation(&c, &Grounding::new(), None)), vec![ViolationKind::GptQuestion]);
    }

    #[test]
    fn role_order() {
        let c = conv(vec![Turn::gpt("Hello."), Turn::human("Hi")]);
        let k = kinds(&validate_conversation(&c, &Grounding::new(), None));
        assert_eq!(k.iter().filter(|&&k| k == ViolationKind::RoleOrder).count(), 2);
    }

    #[test]
    fn forecast_label_consistency() {
        let c = conv(vec![Turn::human("Predict."), Turn::gpt("Stable rhythm. Forecast: ABNORMAL")]);
        let k = kinds(&validate_conversation(&c, &Grounding::new(), Some(ForecastLabel::Norm)));
        assert!(k.contains(&ViolationKind::ForecastMismatch));
        let ok = conv(vec![Turn::human("Predict."), Turn::gpt("Stable rhythm. Forecast: NORM")]);
        assert!(validate_conversation(&ok, &Grounding::new(), Some(ForecastLabel::Norm)).is_empty());
        let twice = conv(vec![Turn::human("Predict."), Turn::gpt("Forecast: NORM. Forecast: NORM")]);
        assert!(kinds(&validate_conversation(&twice, &Grounding::new(), Some(ForecastLabel::Norm)))
            .contains(&ViolationKind::MissingForecast));
    }

    #[test]
    fn rounding_aware_numbers() {
        let g = ground(&[("heart_rate_bpm", 92.02), ("rr_iqr_ms", 128.914), ("V1.qrs_amplitude_mv", -0.72)]);
        assert!(g.matches(92.0, 0, Unit::Bpm).is_some());
        assert!(g.matches(93.0, 0, Unit::Bpm).is_none());
        assert!(g.matches(128.91, 2, Unit::Ms).is_some());
        assert!(g.matches(128.93, 2, Unit::Ms).is_none());
        assert!(g.matches(-0.72, 2, Unit::Mv).is_some());
        assert!(g.matches(-0.72, 2, Unit::Ms).is_none());
    }

    #[test]
    fn corrupted_value_caught() {
        let g = ground(&[("qrs_duration_ms", 104.0)]);
        let c = conv(vec![Turn::human("QRS?"), Turn::gpt("The QRS duration is 105 ms.")]);
        assert_eq!(kinds(&validate_conversation(&c, &g, None)), vec![ViolationKind::NumericFidelity]);
    }

    #[test]
    fn arithmetic_examples() {
        let good = "(648 + 652 + 652 + 652 + 652 + 652 + 652 + 652 + 648 + 652 + 656 + 652 + 652 + 656 + 652) / 15 = 652 ms. \
                    The heart rate is 60,000 / 652 ≈ 92 bpm.";
        assert!(check_arithmetic(good).is_empty());
        assert!(check_arithmetic("60,000 / 757 = 79").is_empty());
        assert_eq!(check_arithmetic("(700 + 800) / 2 = 760 ms").len(), 1);
        assert_eq!(check_arithmetic("(700 + 800) / 3 = 750 ms").len(), 1);
        assert_eq!(check_arithmetic("60,000 / 652 ≈ 90 bpm").len(), 1);
        assert!(check_arithmetic("150 - 90 = 60 ms").is_empty());
        assert_eq!(check_arithmetic("150 - 90 = 50 ms").len(), 1);
    }

    #[test]
    fn raw_shape() {
        let g = Grounding::new();
        assert_eq!(kinds(&validate_raw("[{'from':'human','value':'x'}]", &g, None)), vec![ViolationKind::Shape]);
        assert_eq!(
            kinds(&validate_raw(r#"[{"from":"human","value":"x","extra":1}]"#, &g, None)),
            vec![ViolationKind::Shape]
        );
        assert!(validate_raw(r#"[{"from":"human","value":"x"},{"from":"gpt","value":"y"}]"#, &g, None).is_empty());
    }

    #[test]
    fn numbers_extracted_with_units_only() {
        let caps: Vec<String> = quantity_re()
            .captures_iter("V1 (-0.72 mV), rate 1,030 ms and 60,000 / 652 with 12 beats, 10 msec")
            .map(|c| format!("{} {}", &c[1], &c[2]))
            .collect();
        assert_eq!(caps, vec!["-0.72 mV", "1,030 ms"]);
    }
}
