//! Router forward pass with cached trace and the explicit reverse-mode
//! backward for the fixed architecture.
//!
//! The straight-through mode runs the hard repaired support in the forward
//! value and routes gradients through the Binary Concrete relaxation; the
//! relaxed mode keeps the soft gate in the forward value, which makes the
//! whole objective differentiable and finite-difference checkable.

use crate::error::PolicyError;
use crate::params::{affine, affine_backward, RouterParams};
use crate::policy::{
    assemble_policy, clamp_logit, conditional_allocation, gate_soft_derivative,
    gumbel_sigmoid_gate, masked_allocation, repair_support, sigmoid, AllocationDist, GateSample,
    RoutingPolicy, LOGIT_CLAMP,
};
use crate::state::DecisionState;

/// Gate handling during the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// Hard repaired support in the forward value (training default).
    Straight,
    /// Soft gate in the forward value (differentiable everywhere).
    Relaxed,
}

/// Cached intermediate activations; sufficient to reproduce all gradients
/// of the objective with respect to the router parameters.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mode: GateMode,
    pub k: usize,
    pub feasible: Vec<usize>,
    // branch inputs
    pub r_risk: [f64; 3],
    pub logits: [f64; 2],
    pub struct_in: [f64; 2],
    pub prob_1: f64,
    // structural scalar head
    pub t_struct: f64,
    pub p_struct: f64,
    pub r_str: [f64; 2],
    pub disagreement_sign: f64,
    // encoders / fusion / heads
    pub h_risk: Vec<f64>,
    pub h_str: Vec<f64>,
    pub h_ai: Vec<f64>,
    pub h_fused: Vec<f64>,
    pub t_def: f64,
    pub trunk: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    // gate / allocation / policy
    pub gate: GateSample,
    pub repair_fired: bool,
    pub support: Vec<f64>,
    pub alloc: AllocationDist,
    pub q: Vec<f64>,
    pub q_denom: f64,
    pub policy: RoutingPolicy,
    pub tau_g: f64,
    pub tau_a: f64,
}

fn tanh_vec(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v.tanh();
    }
}

/// Runs encoders, fusion, both heads, and the policy pipeline for one
/// standardized state. `noise` carries the sample's logistic gate draws.
pub fn policy_forward(
    state: &DecisionState,
    params: &RouterParams,
    tau_g: f64,
    tau_a: f64,
    noise: &[f64],
    mode: GateMode,
) -> Result<ForwardTrace, PolicyError> {
    let layout = &params.layout;
    let arch = layout.arch;
    let m = layout.n_experts;
    debug_assert_eq!(state.mask.len(), m);
    let k = state.mask.cardinality();
    let feasible = state.mask.feasible_set();

    let struct_in = [state.vcdr, state.acdr];
    let w_struct = params.seg(layout.w_struct_seg());
    let t_struct_pre = w_struct[0] * struct_in[0]
        + w_struct[1] * struct_in[1]
        + params.seg(layout.b_struct_seg())[0];
    let t_struct = clamp_logit(t_struct_pre);
    let p_struct = sigmoid(t_struct);
    let diff = state.prob_1 - p_struct;
    let r_str = [2.0 * p_struct - 1.0, diff.abs()];
    let disagreement_sign = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };

    let r_risk = [state.vim_risk_z, state.quality_risk, state.uncertainty];
    let logits = [state.logit_0, state.logit_1];

    let mut u = vec![0.0; arch.risk_hidden];
    affine(
        params.seg(layout.w_risk_seg()),
        params.seg(layout.b_risk_seg()),
        &r_risk,
        &mut u,
    );
    let mut h_risk = vec![0.0; arch.risk_hidden];
    tanh_vec(&u, &mut h_risk);

    let mut u = vec![0.0; arch.str_hidden];
    affine(
        params.seg(layout.w_str_enc_seg()),
        params.seg(layout.b_str_enc_seg()),
        &r_str,
        &mut u,
    );
    let mut h_str = vec![0.0; arch.str_hidden];
    tanh_vec(&u, &mut h_str);

    let mut u = vec![0.0; arch.ai_hidden];
    affine(
        params.seg(layout.w_ai_seg()),
        params.seg(layout.b_ai_seg()),
        &logits,
        &mut u,
    );
    let mut h_ai = vec![0.0; arch.ai_hidden];
    tanh_vec(&u, &mut h_ai);

    let mut concat = Vec::with_capacity(arch.risk_hidden + arch.str_hidden + arch.ai_hidden);
    concat.extend_from_slice(&h_risk);
    concat.extend_from_slice(&h_str);
    concat.extend_from_slice(&h_ai);
    let mut u = vec![0.0; arch.fuse_hidden];
    affine(
        params.seg(layout.w_fuse_seg()),
        params.seg(layout.b_fuse_seg()),
        &concat,
        &mut u,
    );
    let mut h_fused = vec![0.0; arch.fuse_hidden];
    tanh_vec(&u, &mut h_fused);

    let w_def = params.seg(layout.w_def_seg());
    let mut t_def = params.seg(layout.b_def_seg())[0];
    for (wv, hv) in w_def.iter().zip(&h_fused) {
        t_def += wv * hv;
    }

    let mut u = vec![0.0; arch.trunk_hidden];
    affine(
        params.seg(layout.w_trunk_seg()),
        params.seg(layout.b_trunk_seg()),
        &h_fused,
        &mut u,
    );
    let mut trunk = vec![0.0; arch.trunk_hidden];
    tanh_vec(&u, &mut trunk);

    let mut gamma = vec![0.0; m];
    affine(
        params.seg(layout.w_gate_seg()),
        params.seg(layout.c_gate_seg()),
        &trunk,
        &mut gamma,
    );
    let mut beta = vec![0.0; m];
    affine(
        params.seg(layout.w_alloc_seg()),
        params.seg(layout.c_alloc_seg()),
        &trunk,
        &mut beta,
    );

    let gate = gumbel_sigmoid_gate(&gamma, &state.mask, tau_g, noise)?;
    let (support, repair_fired, alloc, q, q_denom) = if k == 0 {
        (
            vec![0.0; m],
            false,
            AllocationDist { probs: vec![0.0; m] },
            vec![0.0; m],
            0.0,
        )
    } else {
        let (support, repair_fired) = match mode {
            GateMode::Straight => {
                let repaired = repair_support(&gate.hard, &state.mask);
                let fired = gate.hard.iter().all(|&h| h == 0);
                (repaired.iter().map(|&b| b as f64).collect::<Vec<f64>>(), fired)
            }
            GateMode::Relaxed => (gate.soft.clone(), false),
        };
        let alloc = masked_allocation(&beta, &state.mask, tau_a)?;
        let q = conditional_allocation(&alloc, &support)?;
        let q_denom: f64 = alloc
            .probs
            .iter()
            .zip(&support)
            .map(|(&a, &s)| a * s)
            .sum();
        (support, repair_fired, alloc, q, q_denom)
    };

    let policy = assemble_policy(t_def, &q, &state.mask);

    Ok(ForwardTrace {
        mode,
        k,
        feasible,
        r_risk,
        logits,
        struct_in,
        prob_1: state.prob_1,
        t_struct: t_struct_pre,
        p_struct,
        r_str,
        disagreement_sign,
        h_risk,
        h_str,
        h_ai,
        h_fused,
        t_def,
        trunk,
        gamma,
        beta,
        gate,
        repair_fired,
        support,
        alloc,
        q,
        q_denom,
        policy,
        tau_g,
        tau_a,
    })
}

/// Accumulates `d(objective)/d(theta)` for one sample into `grad`, given
/// the upstream partials w.r.t. the defer mass and the conditional
/// allocation. Masked experts receive exactly zero head-row gradient.
pub fn policy_backward(trace: &ForwardTrace, params: &RouterParams, g_d: f64, g_q: &[f64], grad: &mut [f64]) {
    let layout = &params.layout;
    let arch = layout.arch;
    let m = layout.n_experts;
    if trace.k == 0 {
        return;
    }

    // conditional allocation backward: q_j = a_j s_j / denom
    let mut dot = 0.0;
    for &j in &trace.feasible {
        dot += g_q[j] * trace.q[j];
    }
    let mut g_alloc = vec![0.0; m];
    let mut g_support = vec![0.0; m];
    for &j in &trace.feasible {
        let scale = (g_q[j] - dot) / trace.q_denom;
        g_alloc[j] = trace.support[j] * scale;
        g_support[j] = trace.alloc.probs[j] * scale;
    }

    // gate backward through the relaxation; the repair fallback is a
    // constant branch and passes no gradient
    let mut g_gamma = vec![0.0; m];
    if !(trace.mode == GateMode::Straight && trace.repair_fired) {
        for &j in &trace.feasible {
            let ds = gate_soft_derivative(trace.gamma[j], trace.gate.noise[j], true, trace.tau_g);
            g_gamma[j] = g_support[j] * ds;
        }
    }

    // masked softmax backward for the allocation head
    let mut dot_a = 0.0;
    for &j in &trace.feasible {
        dot_a += g_alloc[j] * trace.alloc.probs[j];
    }
    let mut g_beta = vec![0.0; m];
    for &j in &trace.feasible {
        g_beta[j] = trace.alloc.probs[j] * (g_alloc[j] - dot_a) / trace.tau_a;
    }

    // defer head pre-activation
    let d_raw = sigmoid(clamp_logit(trace.t_def));
    let g_t_def = if trace.t_def.abs() >= LOGIT_CLAMP {
        0.0
    } else {
        g_d * d_raw * (1.0 - d_raw)
    };

    // expert heads -> trunk
    let mut g_trunk_out = vec![0.0; arch.trunk_hidden];
    {
        let (g_wg, rest) = grad[layout.w_gate_seg().offset..].split_at_mut(layout.w_gate_seg().len);
        let g_cg = &mut rest[..m];
        affine_backward(
            params.seg(layout.w_gate_seg()),
            &trace.trunk,
            &g_gamma,
            g_wg,
            g_cg,
            Some(&mut g_trunk_out),
        );
    }
    {
        let (g_wa, rest) =
            grad[layout.w_alloc_seg().offset..].split_at_mut(layout.w_alloc_seg().len);
        let g_ca = &mut rest[..m];
        affine_backward(
            params.seg(layout.w_alloc_seg()),
            &trace.trunk,
            &g_beta,
            g_wa,
            g_ca,
            Some(&mut g_trunk_out),
        );
    }

    // trunk tanh -> fused representation
    let g_u_trunk: Vec<f64> = g_trunk_out
        .iter()
        .zip(&trace.trunk)
        .map(|(&g, &z)| g * (1.0 - z * z))
        .collect();
    let mut g_h = vec![0.0; arch.fuse_hidden];
    {
        let (g_wt, rest) =
            grad[layout.w_trunk_seg().offset..].split_at_mut(layout.w_trunk_seg().len);
        let g_bt = &mut rest[..arch.trunk_hidden];
        affine_backward(
            params.seg(layout.w_trunk_seg()),
            &trace.h_fused,
            &g_u_trunk,
            g_wt,
            g_bt,
            Some(&mut g_h),
        );
    }

    // defer head contribution to the fused representation
    let w_def = params.seg(layout.w_def_seg());
    for (gh, &wv) in g_h.iter_mut().zip(w_def) {
        *gh += g_t_def * wv;
    }
    {
        let g_wd = &mut grad[layout.w_def_seg().range()];
        for (g, &hv) in g_wd.iter_mut().zip(&trace.h_fused) {
            *g += g_t_def * hv;
        }
        grad[layout.b_def_seg().offset] += g_t_def;
    }

    // fusion tanh -> branch activations
    let g_u_fuse: Vec<f64> = g_h
        .iter()
        .zip(&trace.h_fused)
        .map(|(&g, &h)| g * (1.0 - h * h))
        .collect();
    let fuse_in = arch.risk_hidden + arch.str_hidden + arch.ai_hidden;
    let mut concat = Vec::with_capacity(fuse_in);
    concat.extend_from_slice(&trace.h_risk);
    concat.extend_from_slice(&trace.h_str);
    concat.extend_from_slice(&trace.h_ai);
    let mut g_concat = vec![0.0; fuse_in];
    {
        let (g_wf, rest) = grad[layout.w_fuse_seg().offset..].split_at_mut(layout.w_fuse_seg().len);
        let g_bf = &mut rest[..arch.fuse_hidden];
        affine_backward(
            params.seg(layout.w_fuse_seg()),
            &concat,
            &g_u_fuse,
            g_wf,
            g_bf,
            Some(&mut g_concat),
        );
    }
    let (g_h_risk, rest) = g_concat.split_at(arch.risk_hidden);
    let (g_h_str, g_h_ai) = rest.split_at(arch.str_hidden);

    // risk branch
    let g_u_risk: Vec<f64> = g_h_risk
        .iter()
        .zip(&trace.h_risk)
        .map(|(&g, &h)| g * (1.0 - h * h))
        .collect();
    {
        let (g_w, rest) = grad[layout.w_risk_seg().offset..].split_at_mut(layout.w_risk_seg().len);
        let g_b = &mut rest[..arch.risk_hidden];
        affine_backward(
            params.seg(layout.w_risk_seg()),
            &trace.r_risk,
            &g_u_risk,
            g_w,
            g_b,
            None,
        );
    }

    // ai branch
    let g_u_ai: Vec<f64> = g_h_ai
        .iter()
        .zip(&trace.h_ai)
        .map(|(&g, &h)| g * (1.0 - h * h))
        .collect();
    {
        let (g_w, rest) = grad[layout.w_ai_seg().offset..].split_at_mut(layout.w_ai_seg().len);
        let g_b = &mut rest[..arch.ai_hidden];
        affine_backward(
            params.seg(layout.w_ai_seg()),
            &trace.logits,
            &g_u_ai,
            g_w,
            g_b,
            None,
        );
    }

    // structural branch, then the scalar head underneath it
    let g_u_str: Vec<f64> = g_h_str
        .iter()
        .zip(&trace.h_str)
        .map(|(&g, &h)| g * (1.0 - h * h))
        .collect();
    let mut g_r_str = vec![0.0; 2];
    {
        let (g_w, rest) =
            grad[layout.w_str_enc_seg().offset..].split_at_mut(layout.w_str_enc_seg().len);
        let g_b = &mut rest[..arch.str_hidden];
        affine_backward(
            params.seg(layout.w_str_enc_seg()),
            &trace.r_str,
            &g_u_str,
            g_w,
            g_b,
            Some(&mut g_r_str),
        );
    }
    let g_p_struct = 2.0 * g_r_str[0] - trace.disagreement_sign * g_r_str[1];
    let g_t_struct = if trace.t_struct.abs() >= LOGIT_CLAMP {
        0.0
    } else {
        g_p_struct * trace.p_struct * (1.0 - trace.p_struct)
    };
    grad[layout.w_struct_seg().offset] += g_t_struct * trace.struct_in[0];
    grad[layout.w_struct_seg().offset + 1] += g_t_struct * trace.struct_in[1];
    grad[layout.b_struct_seg().offset] += g_t_struct;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::ExpertMask;
    use crate::params::ArchConfig;
    use crate::rng::{domain, NoiseStream};
    use crate::state::{ExpertLabel, Split};
    use approx::assert_relative_eq;

    fn demo_state(bits: Vec<u8>) -> DecisionState {
        let labels = bits
            .iter()
            .map(|&b| if b == 1 { ExpertLabel::One } else { ExpertLabel::Na })
            .collect();
        DecisionState {
            id: "s".into(),
            cohort: "c".into(),
            y: 1,
            logit_0: -0.3,
            logit_1: 0.4,
            prob_1: 0.668,
            vim_risk_z: 0.5,
            quality_risk: -0.2,
            uncertainty: 0.9,
            vcdr: 0.7,
            acdr: 0.45,
            expert_labels: labels,
            mask: ExpertMask::new(bits),
            split: Split::Train,
        }
    }

    fn setup(m: usize) -> (RouterParams, NoiseStream) {
        let stream = NoiseStream::new(91);
        let params = RouterParams::init(ArchConfig::default(), m, &stream);
        (params, stream)
    }

    #[test]
    fn empty_feasible_set_forces_pure_ai() {
        let (params, stream) = setup(3);
        let state = demo_state(vec![0, 0, 0]);
        let noise = stream.logistic_vec(domain::GATE_NOISE, 0, 0, 3);
        let t = policy_forward(&state, &params, 1.0, 1.0, &noise, GateMode::Straight).unwrap();
        assert_eq!(t.policy.defer_mass, 0.0);
        assert_eq!(t.policy.action_probs[0], 1.0);
        assert!(t.policy.action_probs[1..].iter().all(|&p| p == 0.0));
        // gradients are a no-op
        let mut grad = vec![0.0; params.layout.total];
        policy_backward(&t, &params, 1.0, &vec![1.0; 3], &mut grad);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn trace_is_deterministic_for_fixed_counters() {
        let (params, stream) = setup(4);
        let state = demo_state(vec![1, 1, 0, 1]);
        let noise = stream.logistic_vec(domain::GATE_NOISE, 5, 7, 4);
        let a = policy_forward(&state, &params, 1.0, 1.0, &noise, GateMode::Straight).unwrap();
        let b = policy_forward(&state, &params, 1.0, 1.0, &noise, GateMode::Straight).unwrap();
        assert_eq!(a.policy.action_probs, b.policy.action_probs);
        assert_eq!(a.q, b.q);
        assert_eq!(a.gate.hard, b.gate.hard);
    }

    #[test]
    fn policy_invariants_hold() {
        let (params, stream) = setup(5);
        for s in 0..50u64 {
            let bits = vec![
                (s % 2) as u8,
                ((s / 2) % 2) as u8,
                1,
                ((s / 4) % 2) as u8,
                ((s / 8) % 2) as u8,
            ];
            let state = demo_state(bits);
            let noise = stream.logistic_vec(domain::GATE_NOISE, 0, s, 5);
            for mode in [GateMode::Straight, GateMode::Relaxed] {
                let t = policy_forward(&state, &params, 0.7, 1.3, &noise, mode).unwrap();
                let total: f64 = t.policy.action_probs.iter().sum();
                assert!((total - 1.0).abs() < 1e-9);
                for j in 0..5 {
                    if !state.mask.feasible(j) {
                        assert_eq!(t.policy.action_probs[j + 1], 0.0);
                        assert_eq!(t.q[j], 0.0);
                    }
                }
                assert!(t.policy.action_probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    /// End-to-end finite-difference check of the backward wiring in relaxed
    /// mode against a fixed linear functional of (d, q).
    #[test]
    fn backward_matches_finite_differences() {
        let (params, stream) = setup(4);
        let state = demo_state(vec![1, 1, 0, 1]);
        let noise = stream.logistic_vec(domain::GATE_NOISE, 0, 3, 4);
        let coef = [0.8, -0.4, 0.0, 1.3];
        let eval = |p: &RouterParams| -> f64 {
            let t = policy_forward(&state, p, 0.9, 1.1, &noise, GateMode::Relaxed).unwrap();
            let mut v = 0.7 * t.policy.defer_mass;
            for j in 0..4 {
                v += coef[j] * t.q[j];
            }
            v
        };
        let trace = policy_forward(&state, &params, 0.9, 1.1, &noise, GateMode::Relaxed).unwrap();
        let mut grad = vec![0.0; params.layout.total];
        let g_q: Vec<f64> = coef.to_vec();
        policy_backward(&trace, &params, 0.7, &g_q, &mut grad);

        let h = 1e-6;
        let stride = (params.layout.total / 60).max(1);
        for idx in (0..params.layout.total).step_by(stride) {
            let mut hi = params.clone();
            hi.theta[idx] += h;
            let mut lo = params.clone();
            lo.theta[idx] -= h;
            let fd = (eval(&hi) - eval(&lo)) / (2.0 * h);
            let err = (grad[idx] - fd).abs();
            assert!(
                err <= 1e-6 + 1e-4 * fd.abs().max(grad[idx].abs()),
                "coordinate {idx}: analytic {} vs fd {}",
                grad[idx],
                fd
            );
        }
    }

    #[test]
    fn masked_expert_rows_receive_zero_gradient() {
        let (params, stream) = setup(4);
        let state = demo_state(vec![1, 0, 1, 1]);
        let noise = stream.logistic_vec(domain::GATE_NOISE, 0, 9, 4);
        let trace = policy_forward(&state, &params, 1.0, 1.0, &noise, GateMode::Relaxed).unwrap();
        let mut grad = vec![0.0; params.layout.total];
        policy_backward(&trace, &params, 0.5, &[1.0, 2.0, 3.0, 4.0], &mut grad);
        let th = params.layout.arch.trunk_hidden;
        let wg = params.layout.w_gate_seg();
        let wa = params.layout.w_alloc_seg();
        // expert index 1 is infeasible: its rows and biases stay zero
        assert!(grad[wg.offset + th..wg.offset + 2 * th].iter().all(|&g| g == 0.0));
        assert!(grad[wa.offset + th..wa.offset + 2 * th].iter().all(|&g| g == 0.0));
        assert_eq!(grad[params.layout.c_gate_seg().offset + 1], 0.0);
        assert_eq!(grad[params.layout.c_alloc_seg().offset + 1], 0.0);
        // feasible rows do receive gradient
        assert!(grad[wg.offset..wg.offset + th].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn relaxed_and_straight_share_forward_structure() {
        let (params, stream) = setup(3);
        let state = demo_state(vec![1, 1, 1]);
        let noise = stream.logistic_vec(domain::GATE_NOISE, 0, 1, 3);
        let st = policy_forward(&state, &params, 1.0, 1.0, &noise, GateMode::Straight).unwrap();
        for (j, &hard) in st.gate.hard.iter().enumerate() {
            if st.repair_fired {
                assert_relative_eq!(st.support[j], 1.0);
            } else {
                assert_eq!(st.support[j], hard as f64);
            }
        }
        let rel = policy_forward(&state, &params, 1.0, 1.0, &noise, GateMode::Relaxed).unwrap();
        assert_eq!(rel.support, rel.gate.soft);
    }
}
