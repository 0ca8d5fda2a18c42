//! Cost-sensitive multi-expert deferral routing.
//!
//! The crate implements a mask-aware dual-head routing policy (defer or
//! retain the AI decision, then allocate deferred mass over feasible human
//! experts), a constrained training objective with deferred-load
//! regularizers and an augmented-Lagrangian deferral budget, a synthetic
//! multi-expert cohort generator, and an evaluation/diagnostics suite.

pub mod adamw;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod error;
pub mod eval;
pub mod features;
pub mod groups;
pub mod mask;
pub mod net;
pub mod objective;
pub mod params;
pub mod penalties;
pub mod pipeline;
pub mod policy;
pub mod prior;
pub mod rng;
pub mod sim;
pub mod state;
pub mod train;

pub use error::PipelineError;
pub use mask::ExpertMask;
pub use state::{CohortTable, DecisionState, Split};
