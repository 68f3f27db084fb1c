//! Deterministic question templates: classification items (Stage 2) and
//! statistics questions (Stage 3).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fmt_num, QaFormat, QaItem, TaskType};
use crate::stats::{StatFields, StatReport};
use crate::{Error, Result};

const LETTERS: [char; 5] = ['A', 'B', 'C', 'D', 'E'];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage2Spec {
    pub format: QaFormat,
    /// Option count for multiple choice, 2 to 5.
    pub n_options: usize,
}

impl Default for Stage2Spec {
    fn default() -> Self {
        Stage2Spec {
            format: QaFormat::MultipleChoice,
            n_options: 4,
        }
    }
}

const STAGE2_MC: [&str; 3] = [
    "Which of the following best describes this ECG?",
    "Select the rhythm classification that fits this ECG.",
    "Which label applies to this ECG recording?",
];

const STAGE2_SHORT: [&str; 3] = [
    "What is the rhythm classification of this ECG?",
    "Classify this ECG.",
    "Which rhythm does this ECG show?",
];

fn options_block(question: &str, options: &[String]) -> String {
    let mut q = question.to_string();
    for (i, o) in options.iter().enumerate() {
        q.push_str(&format!("\n({}) {o}", LETTERS[i]));
    }
    q
}

/// A classification item for a record with class `label`. Distractors
/// come from `label_set` without the true label.
pub fn gen_stage2(record_id: &str, label: &str, label_set: &[String], spec: Stage2Spec, seed: u64) -> Result<QaItem> {
    if label.trim().is_empty() {
        return Err(Error::NotGenerable(format!("{record_id}: record has no class label")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = QaItem {
        question: String::new(),
        answer: String::new(),
        format: spec.format,
        task_type: None,
        source_ids: vec![record_id.to_string()],
        grounded_values: BTreeMap::new(),
        options: Vec::new(),
        answer_index: None,
    };
    match spec.format {
        QaFormat::MultipleChoice => {
            if !(2..=5).contains(&spec.n_options) {
                return Err(Error::invalid("n_options", format!("{} not in 2..=5", spec.n_options)));
            }
            let mut pool: Vec<&String> = label_set.iter().filter(|l| l.as_str() != label).collect();
            pool.dedup();
            if label_set.len() < spec.n_options || pool.len() < spec.n_options - 1 {
                return Err(Error::invalid(
                    "label_set",
                    format!("{} labels cannot fill {} options", label_set.len(), spec.n_options),
                ));
            }
            let mut options: Vec<String> = pool.choose_multiple(&mut rng, spec.n_options - 1).map(|s| s.to_string()).collect();
            let key = rng.gen_range(0..spec.n_options);
            options.insert(key, label.to_string());
            let stem = STAGE2_MC[rng.gen_range(0..STAGE2_MC.len())];
            Ok(QaItem {
                question: options_block(stem, &options),
                answer: format!("({}) {label}", LETTERS[key]),
                options,
                answer_index: Some(key),
                ..base
            })
        }
        QaFormat::ShortAnswer => Ok(QaItem {
            question: STAGE2_SHORT[rng.gen_range(0..STAGE2_SHORT.len())].to_string(),
            answer: format!("{label}."),
            ..base
        }),
        QaFormat::StepByStep => Err(Error::invalid("format", "stage 2 items are multiple choice or short answer")),
    }
}

fn human_name(field: &str) -> &'static str {
    match field {
        "mean_rr_ms" => "mean RR interval",
        "heart_rate_bpm" => "heart rate",
        "pr_interval_ms" => "PR interval",
        "p_duration_ms" => "P-wave duration",
        "qrs_duration_ms" => "QRS duration",
        "qt_ms" => "QT interval",
        "qtc_ms" => "corrected QT interval",
        "beat_pr_ms" => "PR interval",
        "beat_qrs_ms" => "QRS duration",
        _ => "value",
    }
}

fn unit(field: &str) -> &'static str {
    if field.ends_with("_bpm") {
        "bpm"
    } else {
        "ms"
    }
}

struct Builder {
    rng: ChaCha8Rng,
    grounded: BTreeMap<String, f64>,
}

impl Builder {
    fn ground(&mut self, name: impl Into<String>, v: f64) -> String {
        self.grounded.insert(name.into(), v);
        fmt_num(v)
    }

    fn pick_format(&mut self, choices: &[QaFormat]) -> QaFormat {
        choices[self.rng.gen_range(0..choices.len())]
    }
}

fn not_generable(task: TaskType, why: &str) -> Error {
    Error::NotGenerable(format!("{}: {why}", task.as_str()))
}

/// A statistics question on `a` (and `b` for comparisons). Items whose
/// required fields are missing fail with [`Error::NotGenerable`].
pub fn gen_stage3(
    a: &StatReport,
    b: Option<&StatReport>,
    task: TaskType,
    source_ids: &[String],
    seed: u64,
) -> Result<QaItem> {
    let mut bd = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        grounded: BTreeMap::new(),
    };
    let (question, answer, format, options, answer_index) = match task {
        TaskType::BeatwiseRetrieval => beatwise(&a.global, &mut bd)?,
        TaskType::TemporalAnomaly => temporal(&a.global, &mut bd)?,
        TaskType::Comparative => {
            let b = b.ok_or_else(|| not_generable(task, "comparison needs a second report"))?;
            comparative(&a.global, &b.global, &mut bd)?
        }
        TaskType::StepwiseComputation => stepwise(&a.global, &mut bd)?,
        TaskType::Verification => verification(&a.global, &mut bd)?,
    };
    Ok(QaItem {
        question,
        answer,
        format,
        task_type: Some(task),
        source_ids: source_ids.to_vec(),
        grounded_values: bd.grounded,
        options,
        answer_index,
    })
}

type Parts = (String, String, QaFormat, Vec<String>, Option<usize>);

fn beatwise(g: &StatFields, bd: &mut Builder) -> Result<Parts> {
    let mut candidates: Vec<(&str, usize, f64)> = Vec::new();
    for (field, list) in [("beat_qrs_ms", &g.beat_qrs_ms), ("beat_pr_ms", &g.beat_pr_ms)] {
        candidates.extend(list.iter().enumerate().filter_map(|(i, v)| v.map(|v| (field, i, v))));
    }
    if candidates.is_empty() {
        candidates.extend(g.rr_intervals_ms.iter().enumerate().map(|(i, &v)| ("rr_intervals_ms", i, v)));
    }
    if candidates.is_empty() {
        return Err(not_generable(TaskType::BeatwiseRetrieval, "no beat-wise measurements"));
    }
    let (field, i, value) = candidates[bd.rng.gen_range(0..candidates.len())];
    let k = i + 1;
    let shown = bd.ground(format!("{field}[{i}]"), value);
    let (question, statement) = if field == "rr_intervals_ms" {
        (
            format!("What is the RR interval between beat {k} and beat {}?", k + 1),
            format!("The RR interval between beat {k} and beat {} is {shown} ms.", k + 1),
        )
    } else {
        let name = human_name(field);
        (format!("What is the {name} of beat {k}?"), format!("Beat {k} has a {name} of {shown} ms."))
    };
    match bd.pick_format(&[QaFormat::ShortAnswer, QaFormat::MultipleChoice]) {
        QaFormat::MultipleChoice => {
            let mut deltas = vec![-24.0, -16.0, -8.0, 8.0, 16.0, 24.0];
            deltas.retain(|d| value + d > 0.0);
            if deltas.len() < 3 {
                deltas = vec![8.0, 16.0, 24.0];
            }
            deltas.shuffle(&mut bd.rng);
            let mut options: Vec<String> = deltas[..3].iter().map(|d| format!("{} ms", fmt_num(value + d))).collect();
            let key = bd.rng.gen_range(0..4);
            options.insert(key, format!("{shown} ms"));
            Ok((
                options_block(&question, &options),
                format!("({}) {shown} ms. {statement}", LETTERS[key]),
                QaFormat::MultipleChoice,
                options,
                Some(key),
            ))
        }
        f => Ok((question, statement, f, vec![], None)),
    }
}

fn temporal(g: &StatFields, bd: &mut Builder) -> Result<Parts> {
    let rr = &g.rr_intervals_ms;
    let mean = g.mean_rr_ms.filter(|_| rr.len() >= 4);
    let Some(mean) = mean else {
        return Err(not_generable(TaskType::TemporalAnomaly, "premature beat screening needs at least 4 RR intervals"));
    };
    let question = "Are there any premature beats in this ECG? If so, identify them by beat number.".to_string();
    let m = bd.ground("mean_rr_ms", mean);
    let answer = if g.pac_beat_indices.is_empty() {
        format!("No. The RR intervals show no premature beats; the mean RR interval is {m} ms.")
    } else {
        let beats: Vec<String> = g.pac_beat_indices.iter().map(|k| format!("beat {k}")).collect();
        let mut s = format!(
            "Yes. {} premature atrial {} at {}.",
            beats.len(),
            if beats.len() == 1 { "contraction occurs" } else { "contractions occur" },
            beats.join(", ")
        );
        for &k in &g.pac_beat_indices {
            let Some(before) = k.checked_sub(2) else { continue };
            let after = k - 1;
            let short = bd.ground(format!("rr_intervals_ms[{before}]"), rr[before]);
            let pause = if after < rr.len() {
                format!(", followed by a pause of {} ms", bd.ground(format!("rr_intervals_ms[{after}]"), rr[after]))
            } else {
                String::new()
            };
            s.push_str(&format!(" Beat {k} arrives after a short RR interval of {short} ms{pause}."));
        }
        s.push_str(&format!(" The mean RR interval is {m} ms."));
        s
    };
    Ok((question, answer, QaFormat::ShortAnswer, vec![], None))
}

const COMPARABLE: [&str; 7] = [
    "qrs_duration_ms",
    "pr_interval_ms",
    "qt_ms",
    "qtc_ms",
    "p_duration_ms",
    "mean_rr_ms",
    "heart_rate_bpm",
];

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn comparative(a: &StatFields, b: &StatFields, bd: &mut Builder) -> Result<Parts> {
    let fields: Vec<(&str, f64, f64)> = COMPARABLE
        .iter()
        .filter_map(|&f| Some((f, a.scalar(f)?, b.scalar(f)?)))
        .collect();
    if fields.is_empty() {
        return Err(not_generable(TaskType::Comparative, "no field present in both reports"));
    }
    let (field, va, vb) = fields[bd.rng.gen_range(0..fields.len())];
    let (name, u) = (human_name(field), unit(field));
    let (va, vb) = (round2(va), round2(vb));
    let sa = bd.ground(format!("a.{field}"), va);
    let sb = bd.ground(format!("b.{field}"), vb);
    let (more, less) = if u == "bpm" { ("faster", "slower") } else { ("longer", "shorter") };
    let question = format!("Compare the {name} of ECG A and ECG B. Which is {more}, and by how much?");
    let format = bd.pick_format(&[QaFormat::ShortAnswer, QaFormat::StepByStep]);
    let conclusion = if va == vb {
        format!("Both ECGs have the same {name}.")
    } else {
        let (hi, lo, who) = if vb > va { (&sb, &sa, "B") } else { (&sa, &sb, "A") };
        let d = bd.ground(format!("diff.{field}"), round2((va - vb).abs()));
        format!("{hi} - {lo} = {d} {u}, so ECG {who} is {more} by {d} {u}; the other is {less}.")
    };
    let answer = match format {
        QaFormat::StepByStep => format!(
            "Step 1: ECG A has a {name} of {sa} {u}. Step 2: ECG B has a {name} of {sb} {u}. Step 3: {conclusion}"
        ),
        _ => format!("ECG A has a {name} of {sa} {u} and ECG B has {sb} {u}. {conclusion}"),
    };
    Ok((question, answer, format, vec![], None))
}

fn stepwise(g: &StatFields, bd: &mut Builder) -> Result<Parts> {
    let (Some(mean), Some(hr)) = (g.mean_rr_ms, g.heart_rate_bpm) else {
        return Err(not_generable(TaskType::StepwiseComputation, "no RR intervals"));
    };
    let rr = &g.rr_intervals_ms;
    for (i, &v) in rr.iter().enumerate() {
        bd.grounded.insert(format!("rr_intervals_ms[{i}]"), v);
    }
    bd.grounded.insert("rr_count".into(), rr.len() as f64);
    bd.grounded.insert("mean_rr_ms".into(), mean);
    bd.grounded.insert("heart_rate_bpm".into(), hr as f64);
    // Integer mean as in hand-worked examples, unless rounding it would
    // move the rate past the stated value.
    let shown = if (60000.0 / mean.round() - hr as f64).abs() <= 0.5 {
        format!("{}", mean.round() as i64)
    } else {
        format!("{mean:.2}")
    };
    let terms: Vec<String> = rr.iter().map(|&v| fmt_num(v)).collect();
    let answer = format!(
        "To determine the heart rate, we calculate the mean of the RR intervals: ({}) / {} = {shown} ms. \
         The heart rate is 60,000 / {shown} ≈ {hr} bpm.",
        terms.join(" + "),
        rr.len()
    );
    Ok((
        "Calculate the heart rate of this ECG from its RR intervals. Show each step.".into(),
        answer,
        QaFormat::StepByStep,
        vec![],
        None,
    ))
}

const VERIFIABLE: [&str; 5] = ["pr_interval_ms", "qrs_duration_ms", "qtc_ms", "heart_rate_bpm", "mean_rr_ms"];

fn verification(g: &StatFields, bd: &mut Builder) -> Result<Parts> {
    let fields: Vec<(&str, f64)> = VERIFIABLE.iter().filter_map(|&f| Some((f, g.scalar(f)?))).collect();
    if fields.is_empty() {
        return Err(not_generable(TaskType::Verification, "no verifiable field"));
    }
    let (field, value) = fields[bd.rng.gen_range(0..fields.len())];
    let (name, u) = (human_name(field), unit(field));
    let truth = value.round();
    let correct = bd.rng.gen_bool(0.5);
    let claimed = if correct {
        truth
    } else {
        let step = if u == "bpm" { bd.rng.gen_range(5..=15) } else { bd.rng.gen_range(10..=40) } as f64;
        if bd.rng.gen_bool(0.5) || truth - step <= 0.0 {
            truth + step
        } else {
            truth - step
        }
    };
    let shown = bd.ground(field, value);
    let shown = if value == truth { shown } else { format!("{}", truth as i64) };
    let claim = bd.ground(format!("claimed.{field}"), claimed);
    let question = format!("The {name} of this ECG was reported as {claim} {u}. Is that correct?");
    let statement = if correct {
        format!("Yes. The {name} measures {shown} {u}, matching the reported {claim} {u}.")
    } else {
        format!("No. The {name} measures {shown} {u}, not {claim} {u}.")
    };
    match bd.pick_format(&[QaFormat::ShortAnswer, QaFormat::MultipleChoice]) {
        QaFormat::MultipleChoice => {
            let options = vec!["Yes".to_string(), "No".to_string()];
            let key = if correct { 0 } else { 1 };
            Ok((
                options_block(&question, &options),
                format!("({}) {}", LETTERS[key], statement),
                QaFormat::MultipleChoice,
                options,
                Some(key),
            ))
        }
        f => Ok((question, statement, f, vec![], None)),
    }
}
