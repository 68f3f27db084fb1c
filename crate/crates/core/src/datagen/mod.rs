//! Curriculum data: template question generation, prompt assembly for an
//! external LLM, a client with an offline mock, and conversation checks.

mod catalog;
pub mod client;
mod mock;
mod prompts;
mod templates;
mod validate;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use catalog::{Blueprint, CatalogEntry, ARCS, AUDIENCES, FORMATS, TASK_TYPES};
pub use client::{llm_generate, ClientConfig, LlmClient};
pub use mock::mock_generate;
pub use prompts::{
    build_stage4_prompt, build_stage5_prompt, fill_template, forecast_question, stats_string, StatsView,
    STAGE4_TEMPLATE, STAGE5_TEMPLATE,
};
pub use templates::{gen_stage2, gen_stage3, Stage2Spec};
pub use validate::{check_arithmetic, validate_conversation, validate_raw, Grounding, Unit, Violation, ViolationKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaFormat {
    MultipleChoice,
    ShortAnswer,
    StepByStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    BeatwiseRetrieval,
    TemporalAnomaly,
    Comparative,
    StepwiseComputation,
    Verification,
}

impl TaskType {
    pub const ALL: [TaskType; 5] = [
        TaskType::BeatwiseRetrieval,
        TaskType::TemporalAnomaly,
        TaskType::Comparative,
        TaskType::StepwiseComputation,
        TaskType::Verification,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::BeatwiseRetrieval => "beatwise_retrieval",
            TaskType::TemporalAnomaly => "temporal_anomaly",
            TaskType::Comparative => "comparative",
            TaskType::StepwiseComputation => "stepwise_computation",
            TaskType::Verification => "verification",
        }
    }
}

impl FromStr for TaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::invalid("task_type", format!("unknown task type {s:?}")))
    }
}

/// One generated question/answer pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub question: String,
    pub answer: String,
    pub format: QaFormat,
    /// `None` for Stage 2 classification items.
    pub task_type: Option<TaskType>,
    pub source_ids: Vec<String>,
    /// Every number the answer quotes with a unit, by field name.
    pub grounded_values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_index: Option<usize>,
}

impl QaItem {
    /// Two-turn conversation: question from the human, answer from gpt.
    pub fn to_conversation(&self) -> Conversation {
        Conversation {
            turns: vec![Turn::human(&self.question), Turn::gpt(&self.answer)],
            provenance: Provenance {
                source_ids: self.source_ids.clone(),
                task_type: self.task_type.map(|t| t.as_str().to_string()),
                ..Provenance::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Human,
    Gpt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub from: Speaker,
    pub value: String,
}

impl Turn {
    pub fn human(v: impl Into<String>) -> Self {
        Turn {
            from: Speaker::Human,
            value: v.into(),
        }
    }

    pub fn gpt(v: impl Into<String>) -> Self {
        Turn {
            from: Speaker::Gpt,
            value: v.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForecastLabel {
    #[serde(rename = "NORM")]
    Norm,
    #[serde(rename = "ABNORMAL")]
    Abnormal,
}

impl ForecastLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ForecastLabel::Norm => "NORM",
            ForecastLabel::Abnormal => "ABNORMAL",
        }
    }

    pub fn tag(self) -> String {
        format!("Forecast: {}", self.as_str())
    }
}

impl fmt::Display for ForecastLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ForecastLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NORM" => Ok(ForecastLabel::Norm),
            "ABNORMAL" => Ok(ForecastLabel::Abnormal),
            _ => Err(Error::invalid("label", format!("expected NORM or ABNORMAL, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub source_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blueprint: Option<Blueprint>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub catalog_extension: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forecast_label: Option<ForecastLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_s: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    #[serde(rename = "conversations")]
    pub turns: Vec<Turn>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl Conversation {
    /// Turns from an LLM reply: a JSON list of `{"from","value"}` objects,
    /// optionally inside a fenced code block.
    pub fn parse_turns(raw: &str) -> Result<Vec<Turn>> {
        let body = strip_fence(raw);
        serde_json::from_str(body).map_err(|e| Error::Parse {
            message: e.to_string(),
            excerpt: crate::error::excerpt(raw, 200),
        })
    }
}

pub(crate) fn strip_fence(raw: &str) -> &str {
    let t = raw.trim();
    match t.strip_prefix("```") {
        Some(rest) => {
            let rest = rest.trim_start_matches(|c: char| c.is_ascii_alphabetic());
            rest.strip_suffix("```").unwrap_or(rest).trim()
        }
        None => t,
    }
}

/// Integers print bare, anything else with two decimals.
pub fn fmt_num(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.2}")
    }
}
