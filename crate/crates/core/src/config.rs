//! Run configuration files (TOML). Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environments::{import_dataset, shipped_users, ChrfConfig, EnvError, Environment, EnvironmentSpec};
use crate::grpo::{GrpoConfig, GrpoError};
use crate::orchestrator::{OrchestratorError, PipelineMode, TrainLoopConfig};
use crate::policy::{AdviceTemplates, InitMode, PolicyConfig, PolicyError};
use crate::students::{StudentError, StudentSpec};
use crate::types::{DomainTag, HiddenLatent, UserIndex};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSection {
    pub domain: DomainTag,
    #[serde(default = "default_train_tasks")]
    pub train_tasks: usize,
    #[serde(default = "default_eval_tasks")]
    pub eval_tasks: usize,
    /// Defaults to the shipped user set of `domain`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub users: Option<Vec<HiddenLatent>>,
    #[serde(default)]
    pub chrf: ChrfConfig,
    /// Load tasks and latents exported by `export-dataset` instead of
    /// generating them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_dir: Option<PathBuf>,
}

fn default_train_tasks() -> usize {
    450
}

fn default_eval_tasks() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    #[serde(default = "default_init_mode")]
    pub init_mode: InitMode,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub templates: AdviceTemplates,
}

fn default_init_mode() -> InitMode {
    InitMode::Strong
}

fn default_embed() -> usize {
    16
}

fn default_hidden() -> usize {
    32
}

fn default_init_scale() -> f64 {
    0.05
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            init_mode: default_init_mode(),
            embed_dim: default_embed(),
            hidden_dim: default_hidden(),
            init_scale: default_init_scale(),
            templates: AdviceTemplates::default(),
        }
    }
}

fn default_mode() -> PipelineMode {
    PipelineMode::TwoStep
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// The single source of randomness for the run.
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_mode")]
    pub mode: PipelineMode,
    pub environment: EnvironmentSection,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub grpo: GrpoConfig,
    #[serde(default)]
    pub train: TrainLoopConfig,
    /// The student used for training and default evaluation.
    pub student: StudentSpec,
    /// Extra students for transfer evaluation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transfer_students: Vec<StudentSpec>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if cfg.train.seed != 0 && cfg.train.seed != cfg.seed {
            return Err(ConfigError::Invalid(
                "train.seed differs from the top-level seed; set only `seed`".into(),
            ));
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path)
    }

    /// JSON form, as copied into run directories.
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("config.json"),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.environment_spec().validate().map_err(|e: EnvError| invalid(e.to_string()))?;
        self.grpo.validate().map_err(|e: GrpoError| invalid(e.to_string()))?;
        self.train.validate().map_err(|e: OrchestratorError| invalid(e.to_string()))?;
        self.policy_config().validate().map_err(|e: PolicyError| invalid(e.to_string()))?;
        for s in std::iter::once(&self.student).chain(&self.transfer_students) {
            s.validate().map_err(|e: StudentError| invalid(format!("student {}: {e}", s.student_id)))?;
        }
        Ok(())
    }

    pub fn environment_spec(&self) -> EnvironmentSpec {
        let e = &self.environment;
        EnvironmentSpec {
            domain_tag: e.domain,
            users: e.users.clone().unwrap_or_else(|| shipped_users(e.domain)),
            train_tasks: e.train_tasks,
            eval_tasks: e.eval_tasks,
            seed: self.seed,
            chrf: e.chrf.clone(),
        }
    }

    pub fn build_environment(&self) -> Result<Environment, ConfigError> {
        let env = match &self.environment.dataset_dir {
            Some(dir) => import_dataset(dir),
            None => Environment::build(self.environment_spec()),
        };
        env.map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Advisor architecture over this run's configured users and the full
    /// head set.
    pub fn policy_config(&self) -> PolicyConfig {
        let spec = self.environment_spec();
        self.policy_config_for(spec.users.iter().map(|u| u.user_id.as_str()))
    }

    /// As `policy_config`, over an explicit user list (for imported datasets).
    pub fn policy_config_for<'a>(&self, user_ids: impl IntoIterator<Item = &'a str>) -> PolicyConfig {
        let users = UserIndex::new(user_ids);
        let glossary = crate::environments::default_glossary();
        let p = &self.policy;
        PolicyConfig {
            embed_dim: p.embed_dim,
            hidden_dim: p.hidden_dim,
            init_scale: p.init_scale,
            ..PolicyConfig::new(users, p.templates.build_heads(&glossary), p.init_mode)
        }
    }

    /// Score calls a training run makes, for budget parity with baselines.
    pub fn training_score_calls(&self) -> u64 {
        let per_task = self.grpo.group_size as u64 * self.train.mc_samples as u64;
        self.train.epochs as u64 * self.environment.train_tasks as u64 * per_task
    }
}
