//! Chat-completions student adapter.

use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{measure_text, Student, StudentError, StudentResponse, StudentSpec};
use crate::rng::RngStream;
use crate::types::{DomainTag, TaskInstance};

/// System message for review-writing students.
pub const STUDENT_SYSTEM_PROMPT: &str = "You are a review writer. Based on the prompt and advisor guidance, write a review that follows the guidance provided. Write a clear, well-structured review.";

const GENERIC_SYSTEM_PROMPT: &str = "You are a careful assistant. Based on the task and any advisor guidance, complete the task and follow the guidance provided.";

fn default_timeout() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    2
}

fn default_backoff_ms() -> u64 {
    250
}

fn default_temperature() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpStudentConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_ms: u64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Sustained requests per second; unlimited when unset.
    #[serde(default)]
    pub rate_limit_per_sec: Option<f64>,
    /// Bucket capacity, i.e. how many requests may start back to back.
    #[serde(default)]
    pub burst: Option<u32>,
}

/// Token bucket shared by every worker thread.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(rate_per_sec: f64, capacity: u32) -> Self {
        let capacity = f64::from(capacity.max(1));
        TokenBucket {
            rate: rate_per_sec,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Block until one token is available, then take it.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut guard = self.state.lock().unwrap_or_else(|p| p.into_inner());
                let (tokens, last) = &mut *guard;
                let now = Instant::now();
                *tokens = (*tokens + now.duration_since(*last).as_secs_f64() * self.rate).min(self.capacity);
                *last = now;
                if *tokens >= 1.0 {
                    *tokens -= 1.0;
                    return;
                }
                (1.0 - *tokens) / self.rate
            };
            thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

/// Two-message chat request: the system prompt, then the task, optional
/// first attempt and optional guidance block.
pub fn build_chat_request(
    config: &HttpStudentConfig,
    task: &TaskInstance,
    advice: Option<&str>,
    attempt: Option<&StudentResponse>,
) -> Value {
    let review = matches!(task.domain_tag, DomainTag::ReviewLength | DomainTag::ReviewLevel);
    let system = if review { STUDENT_SYSTEM_PROMPT } else { GENERIC_SYSTEM_PROMPT };
    let mut user = if review {
        format!("Review Prompt: {}\n", task.prompt_text)
    } else {
        format!("Task: {}\n", task.prompt_text)
    };
    if let Some(a) = attempt {
        user.push_str(&format!("Initial Attempt:\n{}\n", a.text));
    }
    match advice {
        Some(adv) => {
            user.push_str(&format!("Advisor Guidance:\n{adv}\n"));
            user.push_str(match (review, attempt.is_some()) {
                (_, true) => "Revise the initial attempt following the advisor's guidance.",
                (true, false) => "Write a review following the advisor's guidance.",
                (false, false) => "Complete the task following the advisor's guidance.",
            });
        }
        None => user.push_str(if review { "Write a review." } else { "Complete the task." }),
    }
    json!({
        "model": config.model,
        "messages": [
            {"role": "system", "content": system},
            {"role": "user", "content": user},
        ],
        "temperature": config.temperature,
    })
}

pub struct HttpStudent {
    spec: StudentSpec,
    config: HttpStudentConfig,
    client: reqwest::blocking::Client,
    bucket: Option<TokenBucket>,
}

impl HttpStudent {
    pub fn new(spec: StudentSpec) -> Result<Self, StudentError> {
        let config = spec
            .http
            .clone()
            .ok_or_else(|| StudentError::InvalidSpec("missing [http] settings".into()))?;
        if !(config.timeout_secs > 0.0 && config.timeout_secs.is_finite()) {
            return Err(StudentError::InvalidSpec("timeout_secs must be positive".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| StudentError::InvalidSpec(e.to_string()))?;
        let bucket = match config.rate_limit_per_sec {
            Some(rate) if rate > 0.0 => Some(TokenBucket::new(rate, config.burst.unwrap_or(1))),
            Some(_) => return Err(StudentError::InvalidSpec("rate_limit_per_sec must be positive".into())),
            None => None,
        };
        Ok(HttpStudent {
            spec,
            config,
            client,
            bucket,
        })
    }

    fn send_once(&self, body: &Value) -> Result<Value, String> {
        if let Some(b) = &self.bucket {
            b.acquire();
        }
        let mut req = self.client.post(&self.config.endpoint).json(body);
        if let Some(var) = &self.config.auth_token_env {
            if let Ok(token) = std::env::var(var) {
                req = req.bearer_auth(token);
            }
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("HTTP {status}"));
        }
        resp.json::<Value>().map_err(|e| format!("invalid JSON body: {e}"))
    }

    /// Send one request (with retries) and measure the returned text.
    pub fn http_respond(
        &self,
        task: &TaskInstance,
        advice: Option<&str>,
        attempt: Option<&StudentResponse>,
    ) -> Result<StudentResponse, StudentError> {
        let body = build_chat_request(&self.config, task, advice, attempt);
        let mut last_err = String::new();
        for attempt_no in 0..=self.config.retries {
            if attempt_no > 0 {
                thread::sleep(Duration::from_millis(self.config.retry_backoff_ms * u64::from(attempt_no)));
            }
            match self.send_once(&body) {
                Ok(value) => {
                    let text = value
                        .pointer("/choices/0/message/content")
                        .and_then(Value::as_str)
                        .ok_or_else(|| {
                            StudentError::MalformedUpstreamResponse("missing choices[0].message.content".into())
                        })?;
                    return Ok(StudentResponse {
                        measured: measure_text(text, task.domain_tag),
                        text: text.to_string(),
                    });
                }
                Err(e) => {
                    log::warn!("student {} request failed (try {}): {e}", self.spec.student_id, attempt_no + 1);
                    last_err = e;
                }
            }
        }
        Err(StudentError::HttpStudentUnavailable(format!(
            "{} after {} tries: {last_err}",
            self.config.endpoint,
            self.config.retries + 1
        )))
    }
}

impl Student for HttpStudent {
    fn spec(&self) -> &StudentSpec {
        &self.spec
    }

    fn respond(
        &self,
        task: &TaskInstance,
        advice: Option<&str>,
        attempt: Option<&StudentResponse>,
        _rng: &RngStream,
    ) -> Result<StudentResponse, StudentError> {
        self.http_respond(task, advice, attempt)
    }
}
