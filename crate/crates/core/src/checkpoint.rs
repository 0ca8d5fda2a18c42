//! Versioned checkpoint: router parameters, feature statistics, optimizer
//! state, controller multiplier, and the rng seed. Stored as JSON; f64
//! values round-trip exactly through the shortest-representation encoding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adamw::AdamWState;
use crate::error::PipelineError;
use crate::features::FeatureStats;
use crate::params::{ArchConfig, ParamLayout, RouterParams};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub n_experts: usize,
    pub arch: ArchConfig,
    pub theta: Vec<f64>,
    pub feature_stats: FeatureStats,
    pub optimizer: AdamWState,
    pub lambda_def: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub tau_g: f64,
    pub tau_a: f64,
}

impl Checkpoint {
    pub fn params(&self) -> Result<RouterParams, PipelineError> {
        let layout = ParamLayout::new(self.arch, self.n_experts);
        if layout.total != self.theta.len() {
            return Err(PipelineError::CheckpointMismatch(format!(
                "theta has {} entries, layout expects {}",
                self.theta.len(),
                layout.total
            )));
        }
        Ok(RouterParams {
            layout,
            theta: self.theta.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(PipelineError::CheckpointMismatch(format!(
                "cannot write version {}",
                self.version
            )));
        }
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(PipelineError::CheckpointMismatch(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}
