//! Mask-aware dual-head policy building blocks: stochastic support gating,
//! masked allocation, support repair, conditional allocation, policy
//! assembly, simplex projection, and hard-action extraction.
//!
//! All operations keep masked entries bit-exact zero for every temperature,
//! not merely small.

use crate::error::PolicyError;
use crate::mask::ExpertMask;

/// Logit clamp applied before sigmoid/exp so masking semantics stay exact
/// while gradients remain finite.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Denominator clamp for the conditional allocation.
pub const SUPPORT_EPS: f64 = 1e-8;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_logit(x: f64) -> f64 {
    x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

/// One stochastic support-selection draw.
///
/// `hard` is the Bernoulli gate, `soft` its Binary Concrete relaxation,
/// `st` the straight-through value (forward equals `hard`), and `noise`
/// the Logistic(0,1) draws. Masked entries are exactly zero in all of
/// `hard`, `soft`, `st`.
#[derive(Debug, Clone)]
pub struct GateSample {
    pub hard: Vec<u8>,
    pub soft: Vec<f64>,
    pub st: Vec<f64>,
    pub noise: Vec<f64>,
}

/// Masked softmax allocation over the feasible set.
#[derive(Debug, Clone)]
pub struct AllocationDist {
    pub probs: Vec<f64>,
}

/// Full action policy `(1 - d, d * q)` over the AI action plus `M` experts.
#[derive(Debug, Clone)]
pub struct RoutingPolicy {
    pub defer_mass: f64,
    pub alloc: Vec<f64>,
    pub action_probs: Vec<f64>,
}

/// Samples the masked Gumbel-sigmoid gate.
///
/// For feasible `j`: `hard_j = 1[gamma_j + eta_j >= 0]` and
/// `soft_j = sigmoid((gamma_j + eta_j) / tau_g)`. Masked entries get
/// hard = soft = st = 0 exactly; the noise entry is still recorded.
pub fn gumbel_sigmoid_gate(
    gamma: &[f64],
    mask: &ExpertMask,
    tau_g: f64,
    noise: &[f64],
) -> Result<GateSample, PolicyError> {
    assert!(tau_g > 0.0, "tau_g must be positive");
    assert_eq!(gamma.len(), mask.len());
    assert_eq!(noise.len(), mask.len());
    if let Some(j) = gamma.iter().position(|g| !g.is_finite()) {
        return Err(PolicyError::NonFiniteLogit(j));
    }
    let m = mask.len();
    let mut hard = vec![0u8; m];
    let mut soft = vec![0.0; m];
    let mut st = vec![0.0; m];
    for j in 0..m {
        if mask.feasible(j) {
            let pre = gamma[j] + noise[j];
            hard[j] = if pre >= 0.0 { 1 } else { 0 };
            soft[j] = sigmoid(clamp_logit(pre / tau_g));
            st[j] = hard[j] as f64;
        }
    }
    Ok(GateSample {
        hard,
        soft,
        st,
        noise: noise.to_vec(),
    })
}

/// Derivative of the relaxed gate w.r.t. its logit, zero at masked entries
/// and beyond the logit clamp.
pub fn gate_soft_derivative(gamma_j: f64, noise_j: f64, feasible: bool, tau_g: f64) -> f64 {
    if !feasible {
        return 0.0;
    }
    let pre = (gamma_j + noise_j) / tau_g;
    if pre.abs() >= LOGIT_CLAMP {
        return 0.0;
    }
    let s = sigmoid(pre);
    s * (1.0 - s) / tau_g
}

/// Falls back to the full feasible mask when the sampled support is empty.
pub fn repair_support(hard: &[u8], mask: &ExpertMask) -> Vec<u8> {
    debug_assert!(hard.iter().zip(mask.bits()).all(|(&h, &m)| h <= m));
    if hard.iter().any(|&h| h == 1) {
        hard.to_vec()
    } else {
        mask.bits().to_vec()
    }
}

/// Masked softmax of `beta / tau_a` over the feasible set, computed with
/// max-subtraction across feasible entries. Masked entries are exactly zero.
pub fn masked_allocation(
    beta: &[f64],
    mask: &ExpertMask,
    tau_a: f64,
) -> Result<AllocationDist, PolicyError> {
    assert!(tau_a > 0.0, "tau_a must be positive");
    assert_eq!(beta.len(), mask.len());
    let feasible = mask.feasible_set();
    if feasible.is_empty() {
        return Err(PolicyError::EmptyFeasibleSet);
    }
    let max = feasible
        .iter()
        .map(|&j| beta[j] / tau_a)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs = vec![0.0; mask.len()];
    let mut denom = 0.0;
    for &j in &feasible {
        let e = ((beta[j] / tau_a) - max).exp();
        probs[j] = e;
        denom += e;
    }
    for &j in &feasible {
        probs[j] /= denom;
    }
    Ok(AllocationDist { probs })
}

/// Renormalizes the masked allocation onto the selected support (Eq. for the
/// conditional expert policy). `support` entries are gate values; the hard
/// path passes 0/1, the relaxed path passes the soft gate.
pub fn conditional_allocation(
    alloc: &AllocationDist,
    support: &[f64],
) -> Result<Vec<f64>, PolicyError> {
    assert_eq!(alloc.probs.len(), support.len());
    let denom: f64 = alloc
        .probs
        .iter()
        .zip(support)
        .map(|(&a, &s)| a * s)
        .sum();
    if denom <= SUPPORT_EPS {
        return Err(PolicyError::DegenerateSupport(denom));
    }
    Ok(alloc
        .probs
        .iter()
        .zip(support)
        .map(|(&a, &s)| a * s / denom)
        .collect())
}

/// Assembles the full action policy. When the feasible set is empty the
/// defer mass is exactly zero and the policy is the pure AI action.
pub fn assemble_policy(defer_logit: f64, q: &[f64], mask: &ExpertMask) -> RoutingPolicy {
    let m = mask.len();
    assert_eq!(q.len(), m);
    let k = mask.cardinality();
    let defer_mass = if k == 0 {
        0.0
    } else {
        sigmoid(clamp_logit(defer_logit))
    };
    let mut action_probs = Vec::with_capacity(m + 1);
    action_probs.push(1.0 - defer_mass);
    let mut alloc = vec![0.0; m];
    for j in 0..m {
        let p = if k == 0 || !mask.feasible(j) {
            0.0
        } else {
            q[j]
        };
        alloc[j] = p;
        action_probs.push(defer_mass * p);
    }
    RoutingPolicy {
        defer_mass,
        alloc,
        action_probs,
    }
}

/// Projects a nonnegative vector onto the masked simplex by zeroing masked
/// actions and renormalizing. Idempotent.
pub fn project_masked_simplex(v: &[f64], action_mask: &[u8]) -> Result<Vec<f64>, PolicyError> {
    assert_eq!(v.len(), action_mask.len());
    let masked: Vec<f64> = v
        .iter()
        .zip(action_mask)
        .map(|(&x, &m)| if m == 1 { x } else { 0.0 })
        .collect();
    let total: f64 = masked.iter().sum();
    if total <= 0.0 {
        return Err(PolicyError::DegeneratePolicy);
    }
    Ok(masked.into_iter().map(|x| x / total).collect())
}

/// Deterministic hard action: argmax over the action probabilities with
/// ties broken in favor of the AI action, then the lowest expert index.
pub fn hard_action(policy: &RoutingPolicy) -> usize {
    let probs = &policy.action_probs;
    let mut best = 0usize;
    let mut best_p = probs[0];
    for (j, &p) in probs.iter().enumerate().skip(1) {
        if p > best_p {
            best = j;
            best_p = p;
        }
    }
    best
}
