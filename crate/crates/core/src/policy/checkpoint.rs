//! JSON checkpoint: architecture descriptor, flat parameters, normalizers,
//! training config and seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, Family, Mlp, Normalizer, Policy, TrainConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "legato-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub family: Family,
    pub condition_row: bool,
    pub action_norm: Normalizer,
    pub obs_norm: Normalizer,
    pub train_config: TrainConfig,
    pub seed: u64,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_policy(policy: &Policy, train_config: &TrainConfig) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            architecture: policy.arch.clone(),
            family: policy.family,
            condition_row: policy.condition_row,
            action_norm: policy.action_norm.clone(),
            obs_norm: policy.obs_norm.clone(),
            train_config: train_config.clone(),
            seed: train_config.seed,
            params: policy.net.params_flat(),
        }
    }

    pub fn to_policy(&self) -> Result<Policy> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut net = Mlp::zeros(&self.architecture.layer_sizes(), self.architecture.activation)?;
        net.set_params_flat(&self.params).map_err(|_| {
            Error::ArchitectureMismatch(format!(
                "descriptor implies {} parameters, file holds {}",
                net.param_count(),
                self.params.len()
            ))
        })?;
        Policy::new(
            self.architecture.clone(),
            net,
            self.action_norm.clone(),
            self.obs_norm.clone(),
            self.family,
            self.condition_row,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        ckpt.to_policy()?;
        Ok(ckpt)
    }

    /// Loads and rejects any checkpoint whose descriptor differs from `expected`.
    pub fn load_expecting(path: &Path, expected: &Architecture) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if &ckpt.architecture != expected {
            return Err(Error::ArchitectureMismatch(format!(
                "expected {expected:?}, file has {:?}",
                ckpt.architecture
            )));
        }
        Ok(ckpt)
    }
}
