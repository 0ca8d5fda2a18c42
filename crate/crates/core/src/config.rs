//! Run configuration: one structured TOML file with full defaults and
//! rejected unknown keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adamw::AdamWConfig;
use crate::cost::CostConfig;
use crate::error::ConfigError;
use crate::params::ArchConfig;
use crate::prior::PriorHyper;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub cohort: PathBuf,
    pub checkpoint: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            cohort: PathBuf::from("cohort.csv"),
            checkpoint: PathBuf::from("checkpoint.json"),
            report_dir: PathBuf::from("reports"),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub warmup_epochs: usize,
    pub patience: usize,
    /// Weight of the budget violation inside the validation selection score.
    pub violation_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            max_epochs: 150,
            warmup_epochs: 10,
            patience: 18,
            violation_weight: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub tau_g: f64,
    pub tau_a: f64,
    /// Geometric decay of the rank reference profile.
    pub varrho: f64,
    /// Slack margin of the rank activation check.
    pub margin: f64,
    /// Within-family probability clusters for grouping.
    pub n_clusters: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            tau_g: 1.0,
            tau_a: 1.0,
            varrho: 0.5,
            margin: 0.05,
            n_clusters: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepSeedMode {
    /// Every target trains with the run seed.
    Fixed,
    /// Target i trains with seed + i.
    Increment,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub seed_mode: SweepSeedMode,
    pub parallel: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            seed_mode: SweepSeedMode::Fixed,
            parallel: false,
        }
    }
}

/// The complete run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub train: TrainConfig,
    pub optimizer: AdamWConfig,
    pub cost: CostConfig,
    pub prior: PriorHyper,
    pub policy: PolicyConfig,
    pub arch: ArchConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.train.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be positive".into()));
        }
        if self.train.max_epochs == 0 {
            return Err(ConfigError::Invalid("max_epochs must be positive".into()));
        }
        if !(self.policy.tau_g > 0.0 && self.policy.tau_a > 0.0) {
            return Err(ConfigError::Invalid("temperatures must be positive".into()));
        }
        if !(self.policy.varrho > 0.0 && self.policy.varrho < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "varrho {} not in (0,1)",
                self.policy.varrho
            )));
        }
        if self.policy.margin < 0.0 {
            return Err(ConfigError::Invalid("margin must be nonnegative".into()));
        }
        if self.policy.n_clusters == 0 {
            return Err(ConfigError::Invalid("n_clusters must be positive".into()));
        }
        if self.optimizer.lr < 0.0 {
            return Err(ConfigError::Invalid("learning rate must be nonnegative".into()));
        }
        // kappa may still be empty here; it is sized to the cohort later
        if !self.cost.kappa.is_empty() {
            self.cost
                .validate(self.cost.kappa.len())
                .map_err(ConfigError::Invalid)?;
        }
        Ok(())
    }
}
