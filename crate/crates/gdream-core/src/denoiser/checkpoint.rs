//! Checkpoint persistence: architecture config, named parameter tensors,
//! noise schedule with normalization statistics, and optional optimizer
//! state for exact training resumption.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DenoiserConfig, Params};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};

const CHECKPOINT_VERSION: &str = "gdream-checkpoint-v1";

/// A trained (or training) model snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub config: DenoiserConfig,
    pub schedule: NoiseSchedule,
    pub params: Params,
    /// Adam first moments, when training state is carried.
    pub opt_m: Option<Params>,
    /// Adam second moments.
    pub opt_v: Option<Params>,
    /// Training steps already taken.
    pub train_step: usize,
}

impl Checkpoint {
    pub fn new(config: DenoiserConfig, schedule: NoiseSchedule, params: Params) -> Self {
        Self {
            version: CHECKPOINT_VERSION.to_string(),
            config,
            schedule,
            params,
            opt_m: None,
            opt_v: None,
            train_step: 0,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("checkpoint {}: {e}", path.display())))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version '{}' does not match expected '{CHECKPOINT_VERSION}'",
                ckpt.version
            )));
        }
        ckpt.config.validate()?;
        Ok(ckpt)
    }
}
