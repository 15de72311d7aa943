//! Domain types shared by every stage of the pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{AdviceAction, ContextFeatures};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("task {0} has an empty prompt")]
    EmptyPrompt(String),
    #[error("unknown domain tag {0:?}")]
    UnknownDomainTag(String),
    #[error("task has an empty task_id")]
    EmptyTaskId,
    #[error("malformed task record: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    ReviewLength,
    ReviewLevel,
    MathSolutions,
    GlossaryTranslation,
}

impl DomainTag {
    pub const ALL: [DomainTag; 4] = [
        DomainTag::ReviewLength,
        DomainTag::ReviewLevel,
        DomainTag::MathSolutions,
        DomainTag::GlossaryTranslation,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::ReviewLength => "review_length",
            DomainTag::ReviewLevel => "review_level",
            DomainTag::MathSolutions => "math_solutions",
            DomainTag::GlossaryTranslation => "glossary_translation",
        }
    }

    pub fn onehot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self.index()] = 1.0;
        v
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DomainTag {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DomainTag::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| TaskError::UnknownDomainTag(s.to_string()))
    }
}

/// The five reading levels, ordered from youngest to most advanced audience.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadingLevel {
    Elementary,
    MiddleSchool,
    HighSchool,
    CollegeStudent,
    CollegeProfessor,
}

impl ReadingLevel {
    pub const ALL: [ReadingLevel; 5] = [
        ReadingLevel::Elementary,
        ReadingLevel::MiddleSchool,
        ReadingLevel::HighSchool,
        ReadingLevel::CollegeStudent,
        ReadingLevel::CollegeProfessor,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Phrase used in rendered advice and in student output markers.
    pub fn phrase(self) -> &'static str {
        match self {
            ReadingLevel::Elementary => "elementary school",
            ReadingLevel::MiddleSchool => "middle school",
            ReadingLevel::HighSchool => "high school",
            ReadingLevel::CollegeStudent => "college student",
            ReadingLevel::CollegeProfessor => "college professor",
        }
    }

    /// First level phrase occurring in `text` (case-insensitive), by position.
    pub fn find_in(text: &str) -> Option<Self> {
        let lower = text.to_lowercase();
        Self::ALL
            .into_iter()
            .filter_map(|l| lower.find(l.phrase()).map(|pos| (pos, l)))
            .min_by_key(|(pos, _)| *pos)
            .map(|(_, l)| l)
    }
}

/// One instance to be advised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskInstance {
    pub task_id: String,
    pub user_id: String,
    pub domain_tag: DomainTag,
    pub prompt_text: String,
    #[serde(default)]
    pub side_info: BTreeMap<String, String>,
}

pub fn validate_task(task: &TaskInstance) -> Result<(), TaskError> {
    if task.task_id.is_empty() {
        return Err(TaskError::EmptyTaskId);
    }
    if task.prompt_text.trim().is_empty() {
        return Err(TaskError::EmptyPrompt(task.task_id.clone()));
    }
    Ok(())
}

/// Parse and validate one JSONL task line. Unknown domain tags are reported
/// as [`TaskError::UnknownDomainTag`] rather than a generic parse failure.
pub fn parse_task_line(line: &str) -> Result<TaskInstance, TaskError> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| TaskError::Malformed(e.to_string()))?;
    if let Some(tag) = value.get("domain_tag").and_then(|t| t.as_str()) {
        tag.parse::<DomainTag>()?;
    }
    let task: TaskInstance =
        serde_json::from_value(value).map_err(|e| TaskError::Malformed(e.to_string()))?;
    validate_task(&task)?;
    Ok(task)
}

/// A user's unstated preference. Only environment code reads the payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HiddenLatent {
    pub user_id: String,
    pub latent: LatentPayload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LatentPayload {
    ReviewLength { preferred_length: u32 },
    ReviewLevel { preferred_level: ReadingLevel },
    MathSolutions { pref_questions: bool, pref_multi_methods: bool },
    GlossaryTranslation { gold_glossary_ids: BTreeSet<String> },
}

impl LatentPayload {
    pub fn kind(&self) -> DomainTag {
        match self {
            LatentPayload::ReviewLength { .. } => DomainTag::ReviewLength,
            LatentPayload::ReviewLevel { .. } => DomainTag::ReviewLevel,
            LatentPayload::MathSolutions { .. } => DomainTag::MathSolutions,
            LatentPayload::GlossaryTranslation { .. } => DomainTag::GlossaryTranslation,
        }
    }
}

impl HiddenLatent {
    pub fn kind(&self) -> DomainTag {
        self.latent.kind()
    }
}

/// One advisable glossary item: a source token and a proposed translation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlossaryEntry {
    pub entry_id: String,
    pub source_token: String,
    pub target_token: String,
}

/// Scalar reward in `[0, 1]` with an optional per-criterion breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reward {
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<BTreeMap<String, f64>>,
}

impl Reward {
    pub fn scalar(value: f64) -> Self {
        Reward {
            value,
            components: None,
        }
    }

    pub fn with_components(value: f64, components: BTreeMap<String, f64>) -> Self {
        Reward {
            value,
            components: Some(components),
        }
    }

    pub fn malformed() -> Self {
        Reward::with_components(0.0, BTreeMap::from([("malformed".to_string(), 1.0)]))
    }

    pub fn is_malformed(&self) -> bool {
        self.components
            .as_ref()
            .is_some_and(|c| c.contains_key("malformed"))
    }
}

/// One advised rollout: features, sampled advice, its log-probability at
/// sampling time and the (Monte Carlo averaged) reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub task_id: String,
    pub features: ContextFeatures,
    pub action: AdviceAction,
    pub old_log_prob: f64,
    pub reward: Reward,
    pub mc_samples: usize,
}

/// Opaque user ids mapped to dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserIndex {
    users: Vec<String>,
}

impl UserIndex {
    pub fn new<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut users: Vec<String> = Vec::new();
        for id in ids {
            let id = id.into();
            if !users.contains(&id) {
                users.push(id);
            }
        }
        UserIndex { users }
    }

    pub fn get(&self, user_id: &str) -> Option<usize> {
        self.users.iter().position(|u| u == user_id)
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.users
    }
}
