//! Synthetic multi-expert cohort simulation.

pub mod ellipse;
pub mod evidence;
pub mod generate;
pub mod panel;
pub mod retrieval;

pub use ellipse::{structural_biomarkers, Biomarkers, Ellipse, EllipseAnnotation};
pub use evidence::{calibrate_temperature, fit_evidence_model, youden_threshold};
pub use generate::{generate_cohort, GenSpec, Generated};
pub use panel::{
    conditional_correctness_sampler, instantiate_expert_labels, operating_points,
    poisson_binomial_pmf, DifficultyGlobals, ExpertProfile,
};
pub use retrieval::{retrieve_pseudo_labels, EmbeddingPair, PoolRow};
