//! Black-box students. They only ever see the task and the advice *text*;
//! simulated students parse that text back into directives, while the HTTP
//! student forwards it to a chat-completions endpoint.

mod http;
mod parse;
mod simulated;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{build_chat_request, HttpStudent, HttpStudentConfig, TokenBucket, STUDENT_SYSTEM_PROMPT};
pub use parse::{parse_advice, Directives, GlossaryDirective};
pub use simulated::SimulatedStudent;

use crate::policy::MAX_LENGTH_WORDS;
use crate::rng::RngStream;
use crate::types::{DomainTag, ReadingLevel, TaskInstance};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StudentError {
    #[error("student endpoint unavailable: {0}")]
    HttpStudentUnavailable(String),
    #[error("malformed upstream response: {0}")]
    MalformedUpstreamResponse(String),
    #[error("invalid student spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentKind {
    Simulated,
    Http,
}

fn default_length() -> u32 {
    300
}

fn default_level() -> ReadingLevel {
    ReadingLevel::HighSchool
}

fn default_one() -> f64 {
    1.0
}

/// Behavioural parameters of a student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSpec {
    pub student_id: String,
    #[serde(default = "default_kind")]
    pub kind: StudentKind,
    /// Probability of obeying each parsed directive.
    #[serde(default = "default_one")]
    pub compliance: f64,
    /// Relative standard deviation of the length actually written.
    #[serde(default)]
    pub length_noise_sigma: f64,
    #[serde(default = "default_length")]
    pub default_length: u32,
    #[serde(default = "default_level")]
    pub default_level: ReadingLevel,
    #[serde(default)]
    pub default_questions: bool,
    #[serde(default)]
    pub default_multi_methods: bool,
    /// Probability a math solution is correct, whatever the advice.
    #[serde(default = "default_one")]
    pub base_correctness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http: Option<HttpStudentConfig>,
}

fn default_kind() -> StudentKind {
    StudentKind::Simulated
}

impl StudentSpec {
    pub fn simulated(student_id: &str, compliance: f64, length_noise_sigma: f64) -> Self {
        StudentSpec {
            student_id: student_id.to_string(),
            kind: StudentKind::Simulated,
            compliance,
            length_noise_sigma,
            default_length: default_length(),
            default_level: default_level(),
            default_questions: false,
            default_multi_methods: false,
            base_correctness: 1.0,
            http: None,
        }
    }

    pub fn validate(&self) -> Result<(), StudentError> {
        let bad = |m: String| Err(StudentError::InvalidSpec(m));
        if !(0.0..=1.0).contains(&self.compliance) {
            return bad(format!("compliance {} outside [0, 1]", self.compliance));
        }
        if !(0.0..=1.0).contains(&self.base_correctness) {
            return bad(format!("base_correctness {} outside [0, 1]", self.base_correctness));
        }
        if !(self.length_noise_sigma >= 0.0 && self.length_noise_sigma.is_finite()) {
            return bad(format!("length_noise_sigma {} must be >= 0", self.length_noise_sigma));
        }
        if self.default_length == 0 {
            return bad("default_length must be positive".into());
        }
        match (self.kind, &self.http) {
            (StudentKind::Http, None) => bad("http student without [http] settings".into()),
            (StudentKind::Simulated, Some(_)) => bad("[http] settings on a simulated student".into()),
            _ => Ok(()),
        }
    }
}

/// Fields measured from a response's text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub word_count: u32,
    pub declared_level: Option<ReadingLevel>,
    pub has_questions: bool,
    pub has_multi_methods: bool,
    pub is_correct: Option<bool>,
    pub translation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentResponse {
    pub text: String,
    pub measured: Measured,
}

/// Measurement rules shared by every student kind: whitespace-delimited word
/// count, the first reading-level phrase, `?` for questions, and
/// "alternatively"/"another method" for multiple methods. Translation tasks
/// take the whole trimmed text as the translation. Correctness cannot be
/// read off the text and is left unset.
pub fn measure_text(text: &str, domain: DomainTag) -> Measured {
    let lower = text.to_lowercase();
    Measured {
        word_count: text.split_whitespace().count() as u32,
        declared_level: ReadingLevel::find_in(text),
        has_questions: text.contains('?'),
        has_multi_methods: lower.contains("another method") || lower.contains("alternatively"),
        is_correct: None,
        translation: (domain == DomainTag::GlossaryTranslation).then(|| text.trim().to_string()),
    }
}

/// Normalized view of a first attempt, for three-step advising.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptSummary {
    pub word_count_normalized: f64,
    pub declared_level_normalized: f64,
    /// `[has_questions, has_multi_methods]`
    pub flags: [bool; 2],
}

impl AttemptSummary {
    pub fn to_features(&self) -> [f64; 3] {
        let bits = f64::from(u8::from(self.flags[0])) + 2.0 * f64::from(u8::from(self.flags[1]));
        [
            self.word_count_normalized,
            self.declared_level_normalized,
            bits / 3.0,
        ]
    }
}

pub fn summarize_attempt(response: &StudentResponse) -> AttemptSummary {
    let m = &response.measured;
    AttemptSummary {
        word_count_normalized: (f64::from(m.word_count) / MAX_LENGTH_WORDS).min(1.0),
        declared_level_normalized: m
            .declared_level
            .map(|l| l.index() as f64 / ReadingLevel::ALL.len() as f64)
            .unwrap_or(0.0),
        flags: [m.has_questions, m.has_multi_methods],
    }
}

/// A frozen model that turns a task (plus optional advice and first attempt)
/// into a response.
pub trait Student: Send + Sync {
    fn spec(&self) -> &StudentSpec;

    fn respond(
        &self,
        task: &TaskInstance,
        advice: Option<&str>,
        attempt: Option<&StudentResponse>,
        rng: &RngStream,
    ) -> Result<StudentResponse, StudentError>;
}

pub fn build_student(spec: &StudentSpec) -> Result<Box<dyn Student>, StudentError> {
    spec.validate()?;
    Ok(match spec.kind {
        StudentKind::Simulated => Box::new(SimulatedStudent::new(spec.clone())),
        StudentKind::Http => Box::new(HttpStudent::new(spec.clone())?),
    })
}
