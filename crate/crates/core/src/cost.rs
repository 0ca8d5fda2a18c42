//! Asymmetric clinical costs and the per-sample routing loss.

use serde::{Deserialize, Serialize};

use crate::error::CostError;
use crate::policy::RoutingPolicy;
use crate::state::DecisionState;

/// All objective constants: clinical miss/false-referral costs, prior
/// badness costs, expert tier costs, regularizer weights, and the deferral
/// controller parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub c_fn: f64,
    pub c_fp: f64,
    pub c_fn_prior: f64,
    pub c_fp_prior: f64,
    /// Per-expert tier costs (kappa_j >= 0); the AI action costs zero.
    pub kappa: Vec<f64>,
    /// Tier-cost weight gamma >= 0.
    pub gamma_tier: f64,
    pub w_gsdp: f64,
    pub w_rank: f64,
    /// Soft deferral budget rho_def.
    pub rho_def: f64,
    /// Quadratic penalty strength mu.
    pub mu: f64,
    /// Multiplier ascent step eta_lambda.
    pub eta_lambda: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            c_fn: 2.0,
            c_fp: 1.5,
            c_fn_prior: 1.8,
            c_fp_prior: 1.2,
            kappa: Vec::new(),
            gamma_tier: 0.5,
            w_gsdp: 0.5,
            w_rank: 0.5,
            rho_def: 0.7,
            mu: 10.0,
            eta_lambda: 0.1,
        }
    }
}

impl CostConfig {
    /// Fills `kappa` with the default three-tier round-robin assignment
    /// (0.1 / 0.2 / 0.3) when it was left empty.
    pub fn with_default_tiers(mut self, n_experts: usize) -> Self {
        if self.kappa.is_empty() {
            const TIERS: [f64; 3] = [0.1, 0.2, 0.3];
            self.kappa = (0..n_experts).map(|j| TIERS[j % 3]).collect();
        }
        self
    }

    pub fn validate(&self, n_experts: usize) -> Result<(), String> {
        if !(self.c_fn > self.c_fp && self.c_fp > 0.0) {
            return Err(format!(
                "clinical costs must satisfy c_fn > c_fp > 0, got ({}, {})",
                self.c_fn, self.c_fp
            ));
        }
        if self.kappa.len() != n_experts {
            return Err(format!(
                "kappa has {} entries for {} experts",
                self.kappa.len(),
                n_experts
            ));
        }
        if self.kappa.iter().any(|&k| k < 0.0) {
            return Err("kappa entries must be nonnegative".into());
        }
        for (name, v) in [
            ("gamma_tier", self.gamma_tier),
            ("w_gsdp", self.w_gsdp),
            ("w_rank", self.w_rank),
            ("mu", self.mu),
            ("eta_lambda", self.eta_lambda),
        ] {
            if v < 0.0 {
                return Err(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.rho_def) {
            return Err(format!("rho_def must lie in [0,1], got {}", self.rho_def));
        }
        Ok(())
    }
}

/// Per-sample clinical costs: the AI branch scalar and the per-expert
/// entries defined only on the feasible set.
#[derive(Debug, Clone)]
pub struct ClinicalCosts {
    pub c_ai: f64,
    expert: Vec<Option<f64>>,
}

impl ClinicalCosts {
    pub fn expert(&self, j: usize) -> Result<f64, CostError> {
        self.expert[j].ok_or(CostError::InfeasibleExpert(j))
    }

    pub fn n_experts(&self) -> usize {
        self.expert.len()
    }
}

/// Expected AI-branch clinical cost and the realized per-expert costs.
pub fn clinical_costs(state: &DecisionState, cfg: &CostConfig) -> ClinicalCosts {
    let y = state.y as f64;
    let c_ai = cfg.c_fn * y * (1.0 - state.prob_1) + cfg.c_fp * (1.0 - y) * state.prob_1;
    let expert = state
        .expert_labels
        .iter()
        .map(|lab| {
            lab.as_u8().map(|yhat| {
                let fn_miss = (state.y == 1 && yhat == 0) as u8 as f64;
                let fp_refer = (state.y == 0 && yhat == 1) as u8 as f64;
                cfg.c_fn * fn_miss + cfg.c_fp * fp_refer
            })
        })
        .collect();
    ClinicalCosts { c_ai, expert }
}

/// Marginal cost of replacing the AI decision under allocation `q`:
/// `Delta = sum_j q_j (C_exp_j + gamma kappa_j) - C_ai`.
pub fn replacement_margin(
    q: &[f64],
    costs: &ClinicalCosts,
    cfg: &CostConfig,
) -> Result<f64, CostError> {
    let mut expert_side = 0.0;
    for (j, &qj) in q.iter().enumerate() {
        if qj > 0.0 {
            expert_side += qj * (costs.expert(j)? + cfg.gamma_tier * cfg.kappa[j]);
        }
    }
    Ok(expert_side - costs.c_ai)
}

/// Expected per-sample routing loss `L = C_ai + d * Delta(q)`.
pub fn routing_loss(
    policy: &RoutingPolicy,
    costs: &ClinicalCosts,
    cfg: &CostConfig,
) -> Result<f64, CostError> {
    if policy.defer_mass == 0.0 {
        return Ok(costs.c_ai);
    }
    let delta = replacement_margin(&policy.alloc, costs, cfg)?;
    Ok(costs.c_ai + policy.defer_mass * delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::ExpertMask;
    use crate::state::{ExpertLabel, Split};
    use approx::assert_relative_eq;

    fn state(y: u8, prob_1: f64, labels: Vec<ExpertLabel>) -> DecisionState {
        let bits = labels
            .iter()
            .map(|l| if matches!(l, ExpertLabel::Na) { 0 } else { 1 })
            .collect();
        DecisionState {
            id: "t".into(),
            cohort: "c".into(),
            y,
            logit_0: 0.0,
            logit_1: 0.0,
            prob_1,
            vim_risk_z: 0.0,
            quality_risk: 0.0,
            uncertainty: 1.0 - prob_1.max(1.0 - prob_1),
            vcdr: 0.5,
            acdr: 0.3,
            expert_labels: labels,
            mask: ExpertMask::new(bits),
            split: Split::Train,
        }
    }

    fn cfg(n: usize) -> CostConfig {
        CostConfig::default().with_default_tiers(n)
    }

    #[test]
    fn perfect_confidence_zero_cost() {
        let c = clinical_costs(&state(1, 1.0, vec![ExpertLabel::One]), &cfg(1));
        assert_eq!(c.c_ai, 0.0);
    }

    #[test]
    fn half_confidence_miss_cost() {
        let c = clinical_costs(&state(1, 0.5, vec![ExpertLabel::One]), &cfg(1));
        assert_relative_eq!(c.c_ai, 1.0);
    }

    #[test]
    fn expert_false_positive_cost() {
        let c = clinical_costs(&state(0, 0.5, vec![ExpertLabel::One]), &cfg(1));
        assert_relative_eq!(c.expert(0).unwrap(), 1.5);
    }

    #[test]
    fn infeasible_expert_read_is_contract_violation() {
        let c = clinical_costs(&state(1, 0.5, vec![ExpertLabel::Na]), &cfg(1));
        assert!(matches!(c.expert(0), Err(CostError::InfeasibleExpert(0))));
    }

    #[test]
    fn routing_loss_pure_branches() {
        let costs = ClinicalCosts {
            c_ai: 0.7,
            expert: vec![Some(0.3), Some(1.1)],
        };
        let cfg = CostConfig {
            kappa: vec![0.0, 0.0],
            ..CostConfig::default()
        };
        let ai_only = RoutingPolicy {
            defer_mass: 0.0,
            alloc: vec![0.0, 0.0],
            action_probs: vec![1.0, 0.0, 0.0],
        };
        assert_relative_eq!(routing_loss(&ai_only, &costs, &cfg).unwrap(), 0.7);

        let to_second = RoutingPolicy {
            defer_mass: 1.0,
            alloc: vec![0.0, 1.0],
            action_probs: vec![0.0, 0.0, 1.0],
        };
        assert_relative_eq!(routing_loss(&to_second, &costs, &cfg).unwrap(), 1.1);
    }

    #[test]
    fn routing_loss_mixed_example() {
        // C_ai = 1.0, d = 0.4, q = (0.5, 0.5), C_exp + gamma kappa = (0.2, 0.6)
        let costs = ClinicalCosts {
            c_ai: 1.0,
            expert: vec![Some(0.2), Some(0.6)],
        };
        let cfg = CostConfig {
            kappa: vec![0.0, 0.0],
            gamma_tier: 0.0,
            ..CostConfig::default()
        };
        let policy = RoutingPolicy {
            defer_mass: 0.4,
            alloc: vec![0.5, 0.5],
            action_probs: vec![0.6, 0.2, 0.2],
        };
        assert_relative_eq!(routing_loss(&policy, &costs, &cfg).unwrap(), 0.76);
    }

    #[test]
    fn cost_config_invariant() {
        let mut c = cfg(2);
        assert!(c.validate(2).is_ok());
        c.c_fp = 3.0;
        assert!(c.validate(2).is_err());
    }
}
