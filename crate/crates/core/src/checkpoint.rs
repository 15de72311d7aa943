//! Checkpoint files: JSON with flattened tensors and explicit shapes.
//!
//! Floats are written with shortest round-trip formatting, so a save/load
//! cycle reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::AdamState;
use crate::orchestrator::TrainState;
use crate::policy::{NamedTensor, PolicyConfig, PolicyParams};
use crate::rng::RngStream;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint {path} is corrupt: {reason}")]
    CheckpointCorrupt { path: String, reason: String },
    #[error("unsupported checkpoint format version {found} (expected {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("cannot write checkpoint {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamTensors {
    step: u64,
    m: Vec<NamedTensor>,
    v: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    policy: PolicyConfig,
    params: Vec<NamedTensor>,
    ref_params: Vec<NamedTensor>,
    adam: AdamTensors,
    update: u64,
    rng: RngStream,
}

/// A policy together with the training state needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub policy: PolicyConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let s = &self.state;
        let file = CheckpointFile {
            format_version: FORMAT_VERSION,
            policy: self.policy.clone(),
            params: s.params.to_tensors(),
            ref_params: s.ref_params.to_tensors(),
            adam: AdamTensors {
                step: s.adam.step,
                m: s.adam.m.to_tensors(),
                v: s.adam.v.to_tensors(),
            },
            update: s.update,
            rng: s.rng.clone(),
        };
        serde_json::to_string(&file).expect("checkpoint fields always serialize")
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self, CheckpointError> {
        let corrupt = |reason: String| CheckpointError::CheckpointCorrupt {
            path: origin.to_string(),
            reason,
        };
        let version: serde_json::Value = serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?;
        let found = version
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| corrupt("missing format_version".into()))?;
        if found != u64::from(FORMAT_VERSION) {
            return Err(CheckpointError::UnsupportedVersion { found: found as u32 });
        }
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?;
        file.policy.validate().map_err(|e| corrupt(e.to_string()))?;
        let load = |t: &[NamedTensor]| PolicyParams::from_tensors(&file.policy, t).map_err(|e| corrupt(e.to_string()));
        let state = TrainState {
            params: load(&file.params)?,
            ref_params: load(&file.ref_params)?,
            adam: AdamState {
                m: load(&file.adam.m)?,
                v: load(&file.adam.v)?,
                step: file.adam.step,
            },
            update: file.update,
            rng: file.rng,
        };
        if !state.params.is_finite() {
            return Err(corrupt("non-finite parameters".into()));
        }
        Ok(Checkpoint {
            policy: file.policy,
            state,
        })
    }

    /// Write atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let write_err = |source| CheckpointError::Write {
            path: path.display().to_string(),
            source,
        };
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, self.to_json()).map_err(write_err)?;
        fs::rename(&tmp, path).map_err(write_err)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path).map_err(|e| CheckpointError::CheckpointCorrupt {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text, &path.display().to_string())
    }
}
