//! Blueprint catalogs for multi-turn dialogue generation. The first five
//! entries of each list are the core set; the rest are generic
//! extensions flagged as such.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CatalogEntry {
    pub key: &'static str,
    pub label: &'static str,
    pub description: &'static str,
    pub extension: bool,
}

const fn e(key: &'static str, label: &'static str, description: &'static str) -> CatalogEntry {
    CatalogEntry {
        key,
        label,
        description,
        extension: false,
    }
}

const fn x(key: &'static str, label: &'static str, description: &'static str) -> CatalogEntry {
    CatalogEntry {
        key,
        label,
        description,
        extension: true,
    }
}

pub const TASK_TYPES: [CatalogEntry; 28] = [
    e("concise_summary", "Concise summary", "provide a brief clinical summary of the ECG findings"),
    e("structured_report", "Structured report", "generate a structured clinical report with specific fields"),
    e("qa_probing", "QA probing", "answer specific questions about ECG features"),
    e("clinical_explanation", "Clinical explanation", "explain the clinical significance of findings"),
    e("teaching", "Teaching", "teach ECG interpretation concepts using this example"),
    x("rhythm_analysis", "Rhythm analysis", "work through the rhythm from rate and regularity"),
    x("rate_calculation", "Rate calculation", "derive the heart rate from the measured intervals"),
    x("interval_review", "Interval review", "review PR, QRS and QT intervals against normal ranges"),
    x("axis_assessment", "Axis assessment", "assess the frontal plane axis from limb leads"),
    x("conduction_review", "Conduction review", "evaluate atrioventricular and intraventricular conduction"),
    x("ectopy_review", "Ectopy review", "identify and characterize ectopic beats"),
    x("morphology_review", "Morphology review", "describe P, QRS and T morphology by lead"),
    x("st_t_assessment", "ST-T assessment", "assess repolarization and ST-T changes"),
    x("differential_diagnosis", "Differential diagnosis", "weigh competing diagnoses against the findings"),
    x("diagnosis_justification", "Diagnosis justification", "justify the stated diagnosis from the evidence"),
    x("measurement_walkthrough", "Measurement walkthrough", "show how each key measurement is obtained"),
    x("lead_comparison", "Lead comparison", "compare findings across lead groups"),
    x("normal_variant_check", "Normal variant check", "decide whether findings fall within normal variation"),
    x("triage_assessment", "Triage assessment", "judge the urgency suggested by the tracing"),
    x("error_spotting", "Error spotting", "find and correct a mistaken interpretation"),
    x("hypothesis_testing", "Hypothesis testing", "test a proposed diagnosis against the measurements"),
    x("stepwise_interpretation", "Stepwise interpretation", "follow a systematic interpretation checklist"),
    x("key_findings_list", "Key findings list", "list the most important findings in order"),
    x("quantitative_summary", "Quantitative summary", "summarize the tracing with measured values only"),
    x("localization", "Localization", "localize abnormalities to anatomical territories"),
    x("risk_markers", "Risk markers", "point out markers associated with arrhythmic risk"),
    x("report_critique", "Report critique", "critique a draft report against the tracing"),
    x("follow_up_questions", "Follow-up questions", "answer successive questions that narrow the diagnosis"),
];

pub const AUDIENCES: [CatalogEntry; 10] = [
    e("clinician_to_clinician", "Clinician-to-clinician", "attending physician to fellow/resident"),
    e("clinician_to_patient", "Clinician to patient", "doctor explaining to a patient"),
    e("teaching_trainee", "Teaching trainee", "attending teaching a medical student or junior resident"),
    e("paramedic_handoff", "Paramedic handoff", "paramedic to ED physician handoff"),
    e("researcher_note", "Researcher note", "research annotation or case documentation"),
    x("nurse_briefing", "Nurse briefing", "cardiologist briefing a telemetry nurse"),
    x("consult_note", "Consult note", "cardiology consult answering a referring physician"),
    x("board_review", "Board review", "examiner quizzing a candidate for board certification"),
    x("family_member", "Family member", "clinician explaining findings to a relative"),
    x("peer_review", "Peer review", "colleague reviewing another reader's interpretation"),
];

pub const FORMATS: [CatalogEntry; 13] = [
    e("narrative", "Narrative", "free-form narrative text"),
    e("bullet_list", "Bullet list", "bulleted list of findings"),
    e("soap_note", "Soap note", "SOAP note structure"),
    e("impression_findings", "Impression findings", "findings then impression format"),
    e("short_answer_rationale", "Short answer rationale", "evidence and rationale followed by a brief answer"),
    x("table", "Table", "findings laid out as a feature/value table"),
    x("numbered_steps", "Numbered steps", "numbered reasoning steps ending in a conclusion"),
    x("question_answer_pairs", "Question answer pairs", "short paired questions and answers"),
    x("checklist", "Checklist", "systematic checklist with a verdict per item"),
    x("structured_fields", "Structured fields", "labelled fields such as rate, rhythm, intervals"),
    x("one_line_summary", "One line summary", "single sentence summary after brief reasoning"),
    x("compare_contrast", "Compare contrast", "findings contrasted with a normal reference"),
    x("teaching_points", "Teaching points", "numbered teaching points drawn from the tracing"),
];

pub const ARCS: [CatalogEntry; 13] = [
    e("direct_response", "Direct response", "human asks, GPT answers directly"),
    e(
        "context_volunteered",
        "Context volunteered",
        "human volunteers asks whether the diagnosis or explanation would change with additional clinical context",
    ),
    e("challenge_response", "Challenge response", "human challenges GPT's interpretation"),
    e("lay_translation", "Lay translation", "human asks for simpler explanation"),
    e("next_steps", "Next steps", "human asks about clinical next steps"),
    x("progressive_detail", "Progressive detail", "human asks for increasing levels of detail"),
    x("clarification", "Clarification", "human asks to clarify a term used in the answer"),
    x("summary_request", "Summary request", "human asks for a recap at the end"),
    x("focused_lead", "Focused lead", "human asks about one lead in particular"),
    x("what_if", "What if", "human asks how a changed measurement would alter the reading"),
    x("confidence_check", "Confidence check", "human asks how certain the interpretation is"),
    x("comparison_request", "Comparison request", "human asks how this differs from a normal tracing"),
    x("teach_back", "Teach back", "human restates the finding and GPT confirms or corrects"),
];

/// One entry from each catalog, by key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blueprint {
    pub task_type: String,
    pub audience: String,
    pub format: String,
    pub dialogue_arc: String,
}

fn find(catalog: &'static [CatalogEntry], field: &'static str, key: &str) -> Result<&'static CatalogEntry> {
    catalog
        .iter()
        .find(|c| c.key == key)
        .ok_or_else(|| Error::invalid(field, format!("{key:?} is not in the catalog")))
}

impl Blueprint {
    pub fn new(task_type: &str, audience: &str, format: &str, dialogue_arc: &str) -> Result<Self> {
        let b = Blueprint {
            task_type: task_type.into(),
            audience: audience.into(),
            format: format.into(),
            dialogue_arc: dialogue_arc.into(),
        };
        b.entries()?;
        Ok(b)
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        let pick = |c: &'static [CatalogEntry], rng: &mut dyn rand::RngCore| c[rng.gen_range(0..c.len())].key.to_string();
        Blueprint {
            task_type: pick(&TASK_TYPES, rng),
            audience: pick(&AUDIENCES, rng),
            format: pick(&FORMATS, rng),
            dialogue_arc: pick(&ARCS, rng),
        }
    }

    pub fn entries(&self) -> Result<[&'static CatalogEntry; 4]> {
        Ok([
            find(&TASK_TYPES, "task_type", &self.task_type)?,
            find(&AUDIENCES, "audience", &self.audience)?,
            find(&FORMATS, "format", &self.format)?,
            find(&ARCS, "dialogue_arc", &self.dialogue_arc)?,
        ])
    }

    pub fn uses_extension(&self) -> Result<bool> {
        Ok(self.entries()?.iter().any(|e| e.extension))
    }

    /// The `{blueprint_spec}` block of the dialogue prompt.
    pub fn spec(&self) -> Result<String> {
        let [t, a, f, d] = self.entries()?;
        Ok(format!(
            "Blueprint:\n- Task type ({}): {}: {}\n- Audience ({}): {}: {}\n- Format ({}): {}: {}\n- Dialogue arc ({}): {}: {}",
            t.key, t.label, t.description, a.key, a.label, a.description, f.key, f.label, f.description, d.key, d.label,
            d.description
        ))
    }
}
