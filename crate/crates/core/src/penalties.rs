//! Deferred-load regularizers and the deferral-budget controller.
//!
//! Both regularizers act only on deferred mass: they are exactly zero when
//! no sample defers, and their per-sample weight is the soft deferral mass.

use serde::{Deserialize, Serialize};

use crate::cost::CostConfig;
use crate::groups::GroupId;
use crate::prior::{PriorTree, PRIOR_FLOOR};

/// Per-sample policy snapshot consumed by the penalties.
#[derive(Debug, Clone)]
pub struct PolicyView {
    pub d: f64,
    pub q: Vec<f64>,
    pub feasible: Vec<usize>,
    pub group: Option<GroupId>,
}

/// Gradient accumulators for a batch: one defer-mass slot per sample and
/// one allocation slot per (sample, expert).
pub struct PenaltyGrads<'a> {
    pub d: &'a mut [f64],
    pub q: &'a mut [Vec<f64>],
}

// ---------------------------------------------------------------------------
// GSDP
// ---------------------------------------------------------------------------

/// Group-specific distribution prior penalty over a batch, with optional
/// gradient accumulation (scaled by `weight`). Returns the penalty value
/// and the number of prior floor clamps applied.
pub fn gsdp_penalty(
    views: &[PolicyView],
    tree: &PriorTree,
    weight: f64,
    mut grads: Option<&mut PenaltyGrads<'_>>,
) -> (f64, usize) {
    let n_experts = tree.n_experts;
    let d_plus: f64 = views.iter().map(|v| v.d).sum();
    if d_plus <= 0.0 {
        return (0.0, 0);
    }
    // accumulate group deferred loads
    use std::collections::BTreeMap;
    let mut loads: BTreeMap<GroupId, (f64, Vec<f64>)> = BTreeMap::new();
    for v in views {
        if v.d <= 0.0 {
            continue;
        }
        let Some(g) = v.group else { continue };
        if tree.group_prior(g).is_none() {
            continue;
        }
        let entry = loads.entry(g).or_insert_with(|| (0.0, vec![0.0; n_experts]));
        entry.0 += v.d;
        for &j in &v.feasible {
            entry.1[j] += v.d * v.q[j];
        }
    }
    let mut clamps = 0usize;
    let mut value = 0.0;
    for (g, (d_g, q_load)) in &loads {
        if *d_g <= 0.0 {
            continue;
        }
        let prior = &tree.group_prior(*g).unwrap().probs;
        for j in 0..n_experts {
            let q_gj = q_load[j];
            if q_gj <= 0.0 {
                continue;
            }
            let mut p = prior[j];
            if p < PRIOR_FLOOR {
                p = PRIOR_FLOOR;
                clamps += 1;
            }
            value += q_gj * (q_gj / (d_g * p)).ln();
        }
    }
    value /= d_plus;

    if let Some(grads) = grads.as_deref_mut() {
        for (i, v) in views.iter().enumerate() {
            if v.d <= 0.0 {
                continue;
            }
            let Some(g) = v.group else { continue };
            let Some((d_g, q_load)) = loads.get(&g) else {
                continue;
            };
            let prior = &tree.group_prior(g).unwrap().probs;
            let mut inner = 0.0;
            for &j in &v.feasible {
                let q_gj = q_load[j];
                if q_gj <= 0.0 {
                    continue;
                }
                let p = prior[j].max(PRIOR_FLOOR);
                let log_ratio = (q_gj / (d_g * p)).ln();
                grads.q[i][j] += weight * v.d * (log_ratio + 1.0) / d_plus;
                inner += v.q[j] * log_ratio;
            }
            grads.d[i] += weight * (inner - value) / d_plus;
        }
    }
    (value, clamps)
}

// ---------------------------------------------------------------------------
// Rank-majorization JS
// ---------------------------------------------------------------------------

/// Truncated geometric reference profile over `k` ranks.
pub fn truncated_geometric(k: usize, varrho: f64) -> Vec<f64> {
    assert!(k >= 1);
    assert!(varrho > 0.0 && varrho < 1.0);
    let z = 1.0 - varrho.powi(k as i32);
    (0..k)
        .map(|t| (1.0 - varrho) * varrho.powi(t as i32) / z)
        .collect()
}

/// Activation check: true iff some cumulative prefix of the descending
/// profile exceeds the reference prefix by more than the margin. Both full
/// prefixes sum to one, so only strict prefixes are inspected; this also
/// keeps float round-off at the last rank from spuriously firing.
pub fn rank_activation(sorted_desc: &[f64], reference: &[f64], margin: f64) -> bool {
    let k = sorted_desc.len();
    let mut r_cum = 0.0;
    let mut g_cum = 0.0;
    let mut max_gap = f64::NEG_INFINITY;
    for t in 0..k.saturating_sub(1) {
        r_cum += sorted_desc[t];
        g_cum += reference[t];
        max_gap = max_gap.max(r_cum - g_cum);
    }
    max_gap > margin
}

/// Jensen-Shannon divergence between two rank profiles (natural log).
pub fn js_divergence(r: &[f64], g: &[f64]) -> f64 {
    assert_eq!(r.len(), g.len());
    let mut acc = 0.0;
    for (&ri, &gi) in r.iter().zip(g) {
        let b = 0.5 * (ri + gi);
        if ri > 0.0 {
            acc += 0.5 * ri * (ri / b).ln();
        }
        if gi > 0.0 {
            acc += 0.5 * gi * (gi / b).ln();
        }
    }
    acc
}

/// Deferred-mass-weighted rank-majorization JS penalty with optional
/// gradient accumulation. The activation indicator is treated as locally
/// constant.
pub fn rank_js_penalty(
    views: &[PolicyView],
    varrho: f64,
    margin: f64,
    weight: f64,
    mut grads: Option<&mut PenaltyGrads<'_>>,
) -> f64 {
    let d_plus: f64 = views.iter().map(|v| v.d).sum();
    if d_plus <= 0.0 {
        return 0.0;
    }
    struct Active {
        js: f64,
        order: Vec<usize>,
        sorted: Vec<f64>,
        reference: Vec<f64>,
    }
    let mut per_sample: Vec<Option<Active>> = Vec::with_capacity(views.len());
    let mut value = 0.0;
    for v in views {
        let k = v.feasible.len();
        if k == 0 || v.d <= 0.0 {
            per_sample.push(None);
            continue;
        }
        let mut order = v.feasible.clone();
        order.sort_by(|&a, &b| v.q[b].partial_cmp(&v.q[a]).unwrap().then(a.cmp(&b)));
        let sorted: Vec<f64> = order.iter().map(|&j| v.q[j]).collect();
        let reference = truncated_geometric(k, varrho);
        if !rank_activation(&sorted, &reference, margin) {
            per_sample.push(None);
            continue;
        }
        let js = js_divergence(&sorted, &reference);
        value += v.d * js;
        per_sample.push(Some(Active {
            js,
            order,
            sorted,
            reference,
        }));
    }
    value /= d_plus;

    if let Some(grads) = grads.as_deref_mut() {
        for (i, v) in views.iter().enumerate() {
            match &per_sample[i] {
                Some(active) => {
                    for (t, &j) in active.order.iter().enumerate() {
                        let r = active.sorted[t];
                        if r <= 0.0 {
                            continue;
                        }
                        let b = 0.5 * (r + active.reference[t]);
                        grads.q[i][j] += weight * v.d * 0.5 * (r / b).ln() / d_plus;
                    }
                    grads.d[i] += weight * (active.js - value) / d_plus;
                }
                None => {
                    if v.d > 0.0 && !v.feasible.is_empty() {
                        // inactive sample still shifts the D_+ normalizer
                        grads.d[i] += weight * (0.0 - value) / d_plus;
                    }
                }
            }
        }
    }
    value
}

// ---------------------------------------------------------------------------
// Augmented-Lagrangian deferral controller
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlRecord {
    pub epoch: usize,
    pub d_bar: f64,
    pub violation: f64,
}

/// Multiplier state for the one-sided soft deferral budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlState {
    pub lambda: f64,
    pub history: Vec<AlRecord>,
}

impl Default for AlState {
    fn default() -> Self {
        AlState {
            lambda: 0.0,
            history: Vec::new(),
        }
    }
}

impl AlState {
    /// Projected ascent at the epoch boundary:
    /// `lambda <- [lambda + eta * (d_bar - rho)]_+`.
    pub fn epoch_update(&mut self, epoch: usize, d_bar: f64, cfg: &CostConfig) {
        let violation = d_bar - cfg.rho_def;
        self.lambda = (self.lambda + cfg.eta_lambda * violation).max(0.0);
        self.history.push(AlRecord {
            epoch,
            d_bar,
            violation,
        });
    }
}

/// Controller penalty `lambda (d_bar - rho) + mu/2 [d_bar - rho]_+^2`.
pub fn al_penalty(d_bar: f64, lambda: f64, cfg: &CostConfig) -> f64 {
    let gap = d_bar - cfg.rho_def;
    lambda * gap + 0.5 * cfg.mu * gap.max(0.0).powi(2)
}

/// Derivative of the controller penalty w.r.t. the mean soft deferral.
pub fn al_penalty_ddbar(d_bar: f64, lambda: f64, cfg: &CostConfig) -> f64 {
    let gap = d_bar - cfg.rho_def;
    lambda + cfg.mu * gap.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostConfig;
    use crate::groups::GroupModel;
    use crate::mask::ExpertMask;
    use crate::prior::PriorHyper;
    use crate::state::{DecisionState, ExpertLabel, Split};
    use approx::assert_relative_eq;

    fn two_expert_tree(prior: [f64; 2]) -> (PriorTree, GroupId) {
        // Build a tree whose single group prior equals `prior` by direct
        // construction of the stored level.
        let mut rows = Vec::new();
        for i in 0..20 {
            let y = (i % 2) as u8;
            let lab = if y == 1 {
                ExpertLabel::One
            } else {
                ExpertLabel::Zero
            };
            rows.push(DecisionState {
                id: i.to_string(),
                cohort: "c".into(),
                y,
                logit_0: 0.0,
                logit_1: 0.0,
                prob_1: 0.5,
                vim_risk_z: 0.0,
                quality_risk: 0.0,
                uncertainty: 0.5,
                vcdr: 0.5,
                acdr: 0.3,
                expert_labels: vec![lab, lab],
                mask: ExpertMask::new(vec![1, 1]),
                split: Split::Train,
            });
        }
        let refs: Vec<&DecisionState> = rows.iter().collect();
        let model = GroupModel::fit(&refs, 1);
        let cfg = CostConfig::default().with_default_tiers(2);
        let mut tree = PriorTree::build(&refs, &model, &cfg, &PriorHyper::default());
        let gid = model.assign(&rows[0]).unwrap();
        let lp = tree.groups.get_mut(&gid).unwrap();
        lp.probs = prior.to_vec();
        (tree, gid)
    }

    fn view(d: f64, q: Vec<f64>, group: Option<GroupId>) -> PolicyView {
        let feasible = (0..q.len()).collect();
        PolicyView {
            d,
            q,
            feasible,
            group,
        }
    }

    #[test]
    fn gsdp_zero_on_matching_prior() {
        let (tree, gid) = two_expert_tree([0.5, 0.5]);
        let views = vec![view(0.7, vec![0.5, 0.5], Some(gid))];
        let (v, _) = gsdp_penalty(&views, &tree, 1.0, None);
        assert_relative_eq!(v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gsdp_zero_when_nothing_deferred() {
        let (tree, gid) = two_expert_tree([0.5, 0.5]);
        let views = vec![view(0.0, vec![0.8, 0.2], Some(gid))];
        let (v, _) = gsdp_penalty(&views, &tree, 1.0, None);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn gsdp_kl_closed_form() {
        let (tree, gid) = two_expert_tree([0.5, 0.5]);
        let views = vec![view(0.37, vec![0.8, 0.2], Some(gid))];
        let (v, _) = gsdp_penalty(&views, &tree, 1.0, None);
        let expect = 0.8 * (1.6f64).ln() + 0.2 * (0.4f64).ln();
        assert_relative_eq!(v, expect, epsilon = 1e-12);
        assert_relative_eq!(v, 0.192745, epsilon = 1e-6);
    }

    #[test]
    fn gsdp_groups_without_prior_contribute_zero() {
        let (tree, _) = two_expert_tree([0.5, 0.5]);
        let views = vec![view(0.9, vec![1.0, 0.0], None)];
        let (v, _) = gsdp_penalty(&views, &tree, 1.0, None);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn geometric_reference_k3() {
        let g = truncated_geometric(3, 0.5);
        assert_relative_eq!(g[0], 4.0 / 7.0, epsilon = 1e-12);
        assert_relative_eq!(g[1], 2.0 / 7.0, epsilon = 1e-12);
        assert_relative_eq!(g[2], 1.0 / 7.0, epsilon = 1e-12);
    }

    #[test]
    fn rank_activation_example() {
        let g = truncated_geometric(3, 0.5);
        let r = [0.9, 0.08, 0.02];
        assert!(rank_activation(&r, &g, 0.1));
        // prefix gap at t=1 is about 0.328571
        assert_relative_eq!(r[0] - g[0], 0.328571, epsilon = 1e-6);
    }

    #[test]
    fn rank_reference_profile_inactive() {
        let g = truncated_geometric(4, 0.5);
        assert!(!rank_activation(&g, &g, 0.0));
        let views = vec![view(0.9, vec![g[0], g[1], g[2], g[3]], None)];
        let v = rank_js_penalty(&views, 0.5, 0.05, 1.0, None);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn rank_singleton_support_inactive() {
        let views = vec![PolicyView {
            d: 0.8,
            q: vec![1.0, 0.0],
            feasible: vec![0],
            group: None,
        }];
        let v = rank_js_penalty(&views, 0.5, 0.0, 1.0, None);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn rank_penalty_value_matches_direct_js() {
        let r = vec![0.9, 0.08, 0.02];
        let g = truncated_geometric(3, 0.5);
        let views = vec![view(0.6, r.clone(), None)];
        let v = rank_js_penalty(&views, 0.5, 0.1, 1.0, None);
        // single active sample: value = d * JS / d
        assert_relative_eq!(v, js_divergence(&r, &g), epsilon = 1e-12);
    }

    #[test]
    fn rank_zero_when_nothing_deferred() {
        let views = vec![view(0.0, vec![1.0, 0.0, 0.0], None)];
        assert_eq!(rank_js_penalty(&views, 0.5, 0.05, 1.0, None), 0.0);
    }

    #[test]
    fn al_examples() {
        let cfg = CostConfig {
            rho_def: 0.5,
            mu: 10.0,
            eta_lambda: 0.1,
            kappa: vec![],
            ..CostConfig::default()
        };
        assert_relative_eq!(al_penalty(0.6, 0.5, &cfg), 0.10, epsilon = 1e-12);
        assert_relative_eq!(al_penalty(0.5, 0.3, &cfg), 0.0, epsilon = 1e-12);
        // quadratic side is one-sided
        assert!(al_penalty(0.4, 0.0, &cfg) == 0.0);

        let mut al = AlState::default();
        al.epoch_update(0, 0.4, &cfg);
        assert_eq!(al.lambda, 0.0);
        al.epoch_update(1, 0.8, &cfg);
        assert_relative_eq!(al.lambda, 0.03, epsilon = 1e-12);
        // lambda never goes negative over any update sequence
        for e in 2..200 {
            al.epoch_update(e, 0.0, &cfg);
            assert!(al.lambda >= 0.0);
        }
    }
}
