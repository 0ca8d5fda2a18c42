//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by the policy building blocks.
#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("gating logit at index {0} is not finite")]
    NonFiniteLogit(usize),
    #[error("masked allocation requires a nonempty feasible set")]
    EmptyFeasibleSet,
    #[error("conditional allocation denominator {0} below clamp; support is degenerate")]
    DegenerateSupport(f64),
    #[error("masked policy projection has zero feasible mass")]
    DegeneratePolicy,
}

/// Errors raised while ingesting or validating cohort data.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("row {id}: {msg}")]
    InvalidRow { id: String, msg: String },
    #[error("csv header mismatch: expected {expected}, found {found}")]
    HeaderMismatch { expected: String, found: String },
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("expert count mismatch: table has {table} experts, component expects {expected}")]
    ExpertCountMismatch { table: usize, expected: usize },
    #[error("split {0:?} has no rows")]
    EmptySplit(crate::state::Split),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Errors raised by cost accounting.
#[derive(Debug, Error)]
pub enum CostError {
    #[error("expert cost read at infeasible index {0}")]
    InfeasibleExpert(usize),
}

/// Errors raised during training.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss in epoch {epoch}; offending samples: {ids:?}")]
    NonFiniteLoss { epoch: usize, ids: Vec<String> },
    #[error("policy failure: {0}")]
    Policy(#[from] PolicyError),
    #[error("empty batch")]
    EmptyBatch,
}

/// Errors raised by the cohort simulator.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("ellipse annotation has zero disc vertical diameter")]
    ZeroDiscDiameter,
    #[error("evidence fit requires both classes present")]
    SingleClass,
    #[error("correctness constraint infeasible: P(K >= {k_min}) underflows")]
    InfeasibleConstraint { k_min: usize },
    #[error("generation spec invalid: {0}")]
    InvalidSpec(String),
}

/// Errors raised loading or validating run configuration.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(String),
    #[error("invalid value: {0}")]
    Invalid(String),
}

/// Top-level error for pipeline commands, mapped to process exit codes.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("checkpoint incompatible: {0}")]
    CheckpointMismatch(String),
}

impl PipelineError {
    /// Process exit code: 2 config, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Sim(SimError::InvalidSpec(_)) => 2,
            PipelineError::Data(_) | PipelineError::CheckpointMismatch(_) | PipelineError::Io(_) => 3,
            PipelineError::Serde(_) => 3,
            PipelineError::Sim(_) | PipelineError::Train(_) | PipelineError::Policy(_) => 4,
        }
    }
}
