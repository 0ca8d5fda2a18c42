//! Full training objective: mean routing loss plus the deferred-load
//! regularizers and the deferral-budget controller, with batch-level
//! reverse-mode gradients through every forward trace.

use crate::cost::{clinical_costs, replacement_margin, ClinicalCosts, CostConfig};
use crate::error::TrainError;
use crate::groups::GroupModel;
use crate::net::{policy_backward, ForwardTrace};
use crate::params::RouterParams;
use crate::penalties::{
    al_penalty, al_penalty_ddbar, gsdp_penalty, rank_js_penalty, PenaltyGrads, PolicyView,
};
use crate::prior::PriorTree;
use crate::state::DecisionState;

/// Everything fixed during one objective evaluation.
pub struct ObjectiveContext<'a> {
    pub cfg: &'a CostConfig,
    pub tree: &'a PriorTree,
    pub groups: &'a GroupModel,
    pub lambda: f64,
    pub varrho: f64,
    pub margin: f64,
}

/// Per-term decomposition of the batch objective.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ObjectiveBreakdown {
    pub total: f64,
    pub routing: f64,
    pub gsdp: f64,
    pub rank_js: f64,
    pub al: f64,
    pub d_bar: f64,
    pub prior_clamps: usize,
}

fn policy_views(states: &[&DecisionState], traces: &[ForwardTrace], groups: &GroupModel) -> Vec<PolicyView> {
    states
        .iter()
        .zip(traces)
        .map(|(s, t)| PolicyView {
            d: t.policy.defer_mass,
            q: t.q.clone(),
            feasible: t.feasible.clone(),
            group: groups.assign(s),
        })
        .collect()
}

fn non_finite_ids(states: &[&DecisionState], per_sample: &[f64]) -> Vec<String> {
    states
        .iter()
        .zip(per_sample)
        .filter(|(_, v)| !v.is_finite())
        .map(|(s, _)| s.id.clone())
        .collect()
}

/// Objective value only.
pub fn batch_objective(
    states: &[&DecisionState],
    traces: &[ForwardTrace],
    ctx: &ObjectiveContext<'_>,
) -> Result<ObjectiveBreakdown, TrainError> {
    evaluate(states, traces, ctx, None).map(|(b, _)| b)
}

/// Objective value plus the gradient w.r.t. the flat parameter vector.
pub fn batch_objective_with_grad(
    states: &[&DecisionState],
    traces: &[ForwardTrace],
    ctx: &ObjectiveContext<'_>,
    params: &RouterParams,
) -> Result<(ObjectiveBreakdown, Vec<f64>), TrainError> {
    let (breakdown, grads) = evaluate(states, traces, ctx, Some(params))?;
    Ok((breakdown, grads.expect("gradient requested")))
}

fn evaluate(
    states: &[&DecisionState],
    traces: &[ForwardTrace],
    ctx: &ObjectiveContext<'_>,
    params: Option<&RouterParams>,
) -> Result<(ObjectiveBreakdown, Option<Vec<f64>>), TrainError> {
    let n = states.len();
    if n == 0 {
        return Err(TrainError::EmptyBatch);
    }
    assert_eq!(traces.len(), n);
    let n_f = n as f64;
    let m = ctx.cfg.kappa.len();

    // per-sample clinical costs and replacement margins
    let mut costs: Vec<ClinicalCosts> = Vec::with_capacity(n);
    let mut margins: Vec<f64> = Vec::with_capacity(n);
    let mut per_sample_loss: Vec<f64> = Vec::with_capacity(n);
    for (state, trace) in states.iter().zip(traces) {
        let c = clinical_costs(state, ctx.cfg);
        let delta = if trace.k == 0 {
            0.0
        } else {
            replacement_margin(&trace.q, &c, ctx.cfg).expect("q supported on feasible set")
        };
        per_sample_loss.push(c.c_ai + trace.policy.defer_mass * delta);
        margins.push(delta);
        costs.push(c);
    }
    let routing: f64 = per_sample_loss.iter().sum::<f64>() / n_f;
    let d_bar: f64 = traces.iter().map(|t| t.policy.defer_mass).sum::<f64>() / n_f;

    let views = policy_views(states, traces, ctx.groups);

    let mut g_d = vec![0.0; n];
    let mut g_q: Vec<Vec<f64>> = vec![vec![0.0; m]; n];
    let want_grad = params.is_some();

    // zero-weight regularizers are disabled outright
    let (gsdp, prior_clamps, rank_js) = {
        let mut grads = PenaltyGrads {
            d: &mut g_d,
            q: &mut g_q,
        };
        let (gsdp, clamps) = if ctx.cfg.w_gsdp > 0.0 {
            gsdp_penalty(
                &views,
                ctx.tree,
                ctx.cfg.w_gsdp,
                want_grad.then_some(&mut grads),
            )
        } else {
            (0.0, 0)
        };
        let rank = if ctx.cfg.w_rank > 0.0 {
            rank_js_penalty(
                &views,
                ctx.varrho,
                ctx.margin,
                ctx.cfg.w_rank,
                want_grad.then_some(&mut grads),
            )
        } else {
            0.0
        };
        (gsdp, clamps, rank)
    };

    let al = al_penalty(d_bar, ctx.lambda, ctx.cfg);
    let total = routing + ctx.cfg.w_gsdp * gsdp + ctx.cfg.w_rank * rank_js + al;
    let breakdown = ObjectiveBreakdown {
        total,
        routing,
        gsdp,
        rank_js,
        al,
        d_bar,
        prior_clamps,
    };
    if !total.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            epoch: 0,
            ids: non_finite_ids(states, &per_sample_loss),
        });
    }

    let Some(params) = params else {
        return Ok((breakdown, None));
    };

    // routing-loss and controller partials
    let al_slope = al_penalty_ddbar(d_bar, ctx.lambda, ctx.cfg) / n_f;
    for i in 0..n {
        let trace = &traces[i];
        if trace.k == 0 {
            continue;
        }
        g_d[i] += margins[i] / n_f + al_slope;
        let d = trace.policy.defer_mass;
        for &j in &trace.feasible {
            let w = costs[i].expert(j).expect("feasible expert cost")
                + ctx.cfg.gamma_tier * ctx.cfg.kappa[j];
            g_q[i][j] += d * w / n_f;
        }
    }

    let mut grad = vec![0.0; params.layout.total];
    for i in 0..n {
        policy_backward(&traces[i], params, g_d[i], &g_q[i], &mut grad);
    }
    Ok((breakdown, Some(grad)))
}
