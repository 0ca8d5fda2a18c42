//! Training loop: minibatch AdamW on the straight-through objective with
//! the epoch-boundary multiplier update and constraint-aware early
//! stopping on the validation split.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::adamw::{AdamWConfig, AdamWState};
use crate::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use crate::config::RunConfig;
use crate::cost::CostConfig;
use crate::error::{PipelineError, TrainError};
use crate::features::FeatureStats;
use crate::groups::GroupModel;
use crate::net::{policy_forward, ForwardTrace, GateMode};
use crate::objective::{batch_objective, batch_objective_with_grad, ObjectiveBreakdown, ObjectiveContext};
use crate::params::RouterParams;
use crate::penalties::AlState;
use crate::prior::{PriorHyper, PriorTree};
use crate::rng::{domain, NoiseStream};
use crate::state::{CohortTable, DecisionState, Split};

/// One optimizer step over a batch. Samples are keyed by their stable
/// table index so the noise stream is independent of batch order.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    states: &[&DecisionState],
    sample_keys: &[u64],
    epoch: usize,
    params: &mut RouterParams,
    opt: &mut AdamWState,
    opt_cfg: &AdamWConfig,
    ctx: &ObjectiveContext<'_>,
    stream: &NoiseStream,
    tau_g: f64,
    tau_a: f64,
) -> Result<ObjectiveBreakdown, TrainError> {
    if states.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let m = params.layout.n_experts;
    let traces: Result<Vec<ForwardTrace>, _> = states
        .iter()
        .zip(sample_keys)
        .map(|(s, &key)| {
            let noise = stream.logistic_vec(domain::GATE_NOISE, epoch as u64, key, m);
            policy_forward(s, params, tau_g, tau_a, &noise, GateMode::Straight)
        })
        .collect();
    let traces = traces.map_err(TrainError::Policy)?;
    let (breakdown, grad) = batch_objective_with_grad(states, &traces, ctx, params)
        .map_err(|e| match e {
            TrainError::NonFiniteLoss { ids, .. } => TrainError::NonFiniteLoss { epoch, ids },
            other => other,
        })?;
    opt.step(&mut params.theta, &grad, opt_cfg);
    Ok(breakdown)
}

/// Full-split objective with the fixed validation noise stream.
pub fn split_objective(
    states: &[&DecisionState],
    sample_keys: &[u64],
    params: &RouterParams,
    ctx: &ObjectiveContext<'_>,
    stream: &NoiseStream,
    tau_g: f64,
    tau_a: f64,
) -> Result<ObjectiveBreakdown, TrainError> {
    let m = params.layout.n_experts;
    let traces: Result<Vec<ForwardTrace>, _> = states
        .iter()
        .zip(sample_keys)
        .map(|(s, &key)| {
            let noise = stream.logistic_vec(domain::VALIDATION_GATE, 0, key, m);
            policy_forward(s, params, tau_g, tau_a, &noise, GateMode::Straight)
        })
        .collect();
    batch_objective(states, &traces.map_err(TrainError::Policy)?, ctx)
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_total: f64,
    pub train_routing: f64,
    pub train_gsdp: f64,
    pub train_rank_js: f64,
    pub train_al: f64,
    pub train_d_bar: f64,
    pub lambda: f64,
    pub val_base: f64,
    pub val_d_bar: f64,
    pub val_violation: f64,
    pub val_score: f64,
    pub is_best: bool,
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub records: Vec<EpochRecord>,
    pub prior_report: String,
    pub feature_stats: FeatureStats,
}

fn sized_cost(cfg: &RunConfig, n_experts: usize) -> Result<CostConfig, PipelineError> {
    let cost = cfg.cost.clone().with_default_tiers(n_experts);
    cost.validate(n_experts)
        .map_err(crate::error::ConfigError::Invalid)?;
    Ok(cost)
}

/// Trains the router on the cohort's train split with early stopping on
/// the validation split; returns the best checkpoint and per-epoch logs.
pub fn train_router(table: &CohortTable, cfg: &RunConfig) -> Result<TrainOutput, PipelineError> {
    table.validate()?;
    let m = table.n_experts;
    let cost = sized_cost(cfg, m)?;
    let hyper: &PriorHyper = &cfg.prior;
    let stream = NoiseStream::new(cfg.seed);

    let stats = FeatureStats::fit(table);
    let std_table = stats.apply(table);
    let train_idx: Vec<usize> = (0..std_table.rows.len())
        .filter(|&i| std_table.rows[i].split == Split::Train)
        .collect();
    let val_idx: Vec<usize> = (0..std_table.rows.len())
        .filter(|&i| std_table.rows[i].split == Split::Val)
        .collect();
    if train_idx.is_empty() {
        return Err(crate::error::DataError::EmptySplit(Split::Train).into());
    }
    if val_idx.is_empty() {
        return Err(crate::error::DataError::EmptySplit(Split::Val).into());
    }
    let train_rows: Vec<&DecisionState> = train_idx.iter().map(|&i| &std_table.rows[i]).collect();
    let groups = GroupModel::fit(&train_rows, cfg.policy.n_clusters);
    let tree = PriorTree::build(&train_rows, &groups, &cost, hyper);
    let prior_report = tree.report();

    let mut params = RouterParams::init(cfg.arch, m, &stream);
    let mut opt = AdamWState::new(params.layout.total);
    let mut al = AlState::default();

    let val_rows: Vec<&DecisionState> = val_idx.iter().map(|&i| &std_table.rows[i]).collect();
    let val_keys: Vec<u64> = val_idx.iter().map(|&i| i as u64).collect();

    let mut records = Vec::new();
    let mut best_score = f64::INFINITY;
    let mut best_theta = params.theta.clone();
    let mut best_epoch = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 0..cfg.train.max_epochs {
        epochs_run = epoch + 1;
        let mut order = train_idx.clone();
        order.shuffle(&mut stream.rng(domain::SHUFFLE, epoch as u64, 0));

        let mut sum_total = 0.0;
        let mut sum_routing = 0.0;
        let mut sum_gsdp = 0.0;
        let mut sum_rank = 0.0;
        let mut sum_al = 0.0;
        let mut sum_d = 0.0;
        let mut n_batches = 0.0;
        for chunk in order.chunks(cfg.train.batch_size) {
            let states: Vec<&DecisionState> = chunk.iter().map(|&i| &std_table.rows[i]).collect();
            let keys: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
            let ctx = ObjectiveContext {
                cfg: &cost,
                tree: &tree,
                groups: &groups,
                lambda: al.lambda,
                varrho: cfg.policy.varrho,
                margin: cfg.policy.margin,
            };
            let b = train_step(
                &states,
                &keys,
                epoch,
                &mut params,
                &mut opt,
                &cfg.optimizer,
                &ctx,
                &stream,
                cfg.policy.tau_g,
                cfg.policy.tau_a,
            )?;
            sum_total += b.total;
            sum_routing += b.routing;
            sum_gsdp += b.gsdp;
            sum_rank += b.rank_js;
            sum_al += b.al;
            sum_d += b.d_bar * chunk.len() as f64;
            n_batches += 1.0;
        }
        let train_d_bar = sum_d / train_idx.len() as f64;
        al.epoch_update(epoch, train_d_bar, &cost);

        let ctx = ObjectiveContext {
            cfg: &cost,
            tree: &tree,
            groups: &groups,
            lambda: al.lambda,
            varrho: cfg.policy.varrho,
            margin: cfg.policy.margin,
        };
        let val = split_objective(
            &val_rows,
            &val_keys,
            &params,
            &ctx,
            &stream,
            cfg.policy.tau_g,
            cfg.policy.tau_a,
        )
        .map_err(|e| match e {
            TrainError::NonFiniteLoss { ids, .. } => TrainError::NonFiniteLoss { epoch, ids },
            other => other,
        })?;
        let val_base = val.routing + cost.w_gsdp * val.gsdp + cost.w_rank * val.rank_js;
        let val_violation = (val.d_bar - cost.rho_def).max(0.0);
        let val_score = val_base + cfg.train.violation_weight * val_violation;

        let mut is_best = false;
        if epoch >= cfg.train.warmup_epochs && val_score < best_score {
            best_score = val_score;
            best_theta = params.theta.clone();
            best_epoch = epoch;
            is_best = true;
        }
        records.push(EpochRecord {
            epoch,
            train_total: sum_total / n_batches,
            train_routing: sum_routing / n_batches,
            train_gsdp: sum_gsdp / n_batches,
            train_rank_js: sum_rank / n_batches,
            train_al: sum_al / n_batches,
            train_d_bar,
            lambda: al.lambda,
            val_base,
            val_d_bar: val.d_bar,
            val_violation,
            val_score,
            is_best,
        });

        if epoch > cfg.train.warmup_epochs && epoch - best_epoch >= cfg.train.patience {
            break;
        }
    }

    // restore the best validation checkpoint
    if best_score.is_infinite() {
        // no epoch cleared warmup: keep the final parameters
        best_theta = params.theta.clone();
        best_epoch = epochs_run.saturating_sub(1);
    }
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        seed: cfg.seed,
        n_experts: m,
        arch: cfg.arch,
        theta: best_theta,
        feature_stats: stats.clone(),
        optimizer: opt,
        lambda_def: al.lambda,
        best_epoch,
        epochs_run,
        tau_g: cfg.policy.tau_g,
        tau_a: cfg.policy.tau_a,
    };
    Ok(TrainOutput {
        checkpoint,
        records,
        prior_report,
        feature_stats: stats,
    })
}
