//! High-level commands behind the CLI: simulate, train, evaluate, sweep.
//! Every command is deterministic given (config, seed) and writes a
//! manifest embedding the hashes of its inputs.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, SweepSeedMode};
use crate::cost::CostConfig;
use crate::error::PipelineError;
use crate::eval::{
    ai_only_outcomes, method_report, risk_stratified_costs, uniform_defer_outcomes, MethodReport,
    RiskAxis, RoutedOutcome,
};
use crate::net::{policy_forward, GateMode};
use crate::policy::{hard_action, project_masked_simplex};
use crate::rng::{domain, NoiseStream};
use crate::sim::generate::{generate_cohort, GenSpec};
use crate::state::{CohortTable, DecisionState, Split};
use crate::train::train_router;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct SimulateManifest {
    pub schema_version: u32,
    pub spec_sha256: String,
    pub seed: u64,
    pub n: usize,
    pub n_experts: usize,
    pub rows_per_split: std::collections::BTreeMap<String, usize>,
    pub rows_per_cohort: std::collections::BTreeMap<String, usize>,
    pub evidence_ridge_fallback: bool,
    pub temperature: f64,
    pub youden_tau: f64,
    pub cohort_sha256: String,
}

/// Generates a cohort CSV (plus the optional embeddings sidecar) and its
/// manifest. The same (spec, seed) always produces byte-identical files.
pub fn simulate_cmd(
    spec_path: &Path,
    out_path: &Path,
    seed: u64,
) -> Result<SimulateManifest, PipelineError> {
    let spec_text = std::fs::read_to_string(spec_path)
        .map_err(crate::error::ConfigError::Io)?;
    let spec: GenSpec = toml::from_str(&spec_text)
        .map_err(|e| crate::error::ConfigError::Parse(e.to_string()))?;
    let generated = generate_cohort(&spec, seed)?;
    let mut csv_bytes = Vec::new();
    generated.table.write_csv(&mut csv_bytes)?;
    std::fs::write(out_path, &csv_bytes)?;
    if let Some(embeddings) = &generated.embeddings {
        let sidecar = out_path.with_extension("embeddings.csv");
        let mut f = std::fs::File::create(&sidecar)?;
        let dim = embeddings.first().map(|(_, a, _)| a.len()).unwrap_or(0);
        let mut header = vec!["id".to_string()];
        header.extend((0..dim).map(|i| format!("a_{i}")));
        header.extend((0..dim).map(|i| format!("b_{i}")));
        writeln!(f, "{}", header.join(","))?;
        for (id, a, b) in embeddings {
            let mut rec = vec![id.clone()];
            rec.extend(a.iter().map(|v| format!("{v}")));
            rec.extend(b.iter().map(|v| format!("{v}")));
            writeln!(f, "{}", rec.join(","))?;
        }
    }
    let manifest = SimulateManifest {
        schema_version: 1,
        spec_sha256: sha256_hex(spec_text.as_bytes()),
        seed,
        n: generated.summary.n,
        n_experts: generated.summary.n_experts,
        rows_per_split: generated.summary.rows_per_split.clone(),
        rows_per_cohort: generated.summary.rows_per_cohort.clone(),
        evidence_ridge_fallback: generated.summary.evidence_ridge_fallback,
        temperature: generated.summary.temperature,
        youden_tau: generated.summary.youden_tau,
        cohort_sha256: sha256_hex(&csv_bytes),
    };
    let manifest_path = out_path.with_extension("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct TrainManifest {
    pub schema_version: u32,
    pub config_sha256: String,
    pub cohort_sha256: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub lambda_def: f64,
    pub checkpoint_sha256: String,
}

pub struct TrainArtifacts {
    pub manifest: TrainManifest,
    pub checkpoint_path: PathBuf,
}

/// Trains per the config, writes the checkpoint, line-delimited epoch log,
/// prior-tree audit report, and a manifest.
pub fn train_cmd(config: &RunConfig) -> Result<TrainArtifacts, PipelineError> {
    let cohort_bytes = std::fs::read(&config.paths.cohort)?;
    let table = CohortTable::read_csv(&cohort_bytes[..])?;
    let out = train_router(&table, config)?;

    let ckpt_path = config.paths.checkpoint.clone();
    if let Some(parent) = ckpt_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    out.checkpoint.save(&ckpt_path)?;

    std::fs::create_dir_all(&config.paths.report_dir)?;
    let log_path = config.paths.report_dir.join("train_log.jsonl");
    let mut log = std::fs::File::create(&log_path)?;
    for rec in &out.records {
        writeln!(log, "{}", serde_json::to_string(rec)?)?;
    }
    std::fs::write(
        config.paths.report_dir.join("prior_tree.txt"),
        &out.prior_report,
    )?;

    let ckpt_bytes = std::fs::read(&ckpt_path)?;
    let manifest = TrainManifest {
        schema_version: 1,
        config_sha256: sha256_hex(config.to_toml().as_bytes()),
        cohort_sha256: sha256_hex(&cohort_bytes),
        seed: config.seed,
        best_epoch: out.checkpoint.best_epoch,
        epochs_run: out.checkpoint.epochs_run,
        lambda_def: out.checkpoint.lambda_def,
        checkpoint_sha256: sha256_hex(&ckpt_bytes),
    };
    std::fs::write(
        config.paths.report_dir.join("train_manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(TrainArtifacts {
        manifest,
        checkpoint_path: ckpt_path,
    })
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Routes one split with the trained policy. Gate noise is keyed by the
/// row's position in the full table, so reports are deterministic.
pub fn route_split(
    ckpt: &Checkpoint,
    table: &CohortTable,
    split: Split,
) -> Result<Vec<RoutedOutcome>, PipelineError> {
    if table.n_experts != ckpt.n_experts {
        return Err(PipelineError::CheckpointMismatch(format!(
            "cohort has {} experts, checkpoint {}",
            table.n_experts, ckpt.n_experts
        )));
    }
    let params = ckpt.params()?;
    let std_table = ckpt.feature_stats.apply(table);
    let stream = NoiseStream::new(ckpt.seed);
    let mut outcomes = Vec::new();
    for (idx, std_row) in std_table.rows.iter().enumerate() {
        if std_row.split != split {
            continue;
        }
        let raw_row = &table.rows[idx];
        let noise = stream.logistic_vec(domain::EVAL_GATE, 0, idx as u64, table.n_experts);
        let trace = policy_forward(
            std_row,
            &params,
            ckpt.tau_g,
            ckpt.tau_a,
            &noise,
            GateMode::Straight,
        )
        .map_err(crate::error::TrainError::Policy)?;
        // final safety layer: masked-simplex projection of the policy
        let mut action_mask = vec![1u8];
        action_mask.extend_from_slice(raw_row.mask.bits());
        let pi = project_masked_simplex(&trace.policy.action_probs, &action_mask)
            .map_err(crate::error::TrainError::Policy)?;
        let projected = crate::policy::RoutingPolicy {
            defer_mass: trace.policy.defer_mass,
            alloc: trace.policy.alloc.clone(),
            action_probs: pi.clone(),
        };
        let act = hard_action(&projected);
        let final_pred = if act == 0 {
            (raw_row.prob_1 >= 0.5) as u8
        } else {
            raw_row.expert_labels[act - 1]
                .as_u8()
                .expect("hard action is feasible")
        };
        outcomes.push(RoutedOutcome {
            id: raw_row.id.clone(),
            cohort: raw_row.cohort.clone(),
            y: raw_row.y,
            hard_action: act,
            final_pred,
            defer_soft: trace.policy.defer_mass,
            pi,
            vcdr: raw_row.vcdr,
            acdr: raw_row.acdr,
            vim_risk_z: raw_row.vim_risk_z,
            uncertainty: raw_row.uncertainty,
        });
    }
    Ok(outcomes)
}

#[derive(Debug, Serialize)]
pub struct RiskRow {
    pub method: String,
    pub axis: String,
    pub bin: usize,
    pub n: usize,
    pub mean_clinical_cost: f64,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub split: String,
    pub seed: u64,
    pub n_experts: usize,
    pub checkpoint_sha256: String,
    pub methods: Vec<MethodReport>,
    pub risk: Vec<RiskRow>,
}

pub fn evaluate_split(
    ckpt: &Checkpoint,
    table: &CohortTable,
    split: Split,
    cost: &CostConfig,
    checkpoint_hash: String,
) -> Result<EvalReport, PipelineError> {
    let m = table.n_experts;
    let router = route_split(ckpt, table, split)?;
    if router.is_empty() {
        return Err(crate::error::DataError::EmptySplit(split).into());
    }
    let rows: Vec<&DecisionState> = table.rows.iter().filter(|r| r.split == split).collect();
    let ai = ai_only_outcomes(&rows, m);
    let router_hard_rate = router
        .iter()
        .filter(|o| o.hard_action != 0)
        .count() as f64
        / router.len() as f64;
    let uniform = uniform_defer_outcomes(&rows, m, router_hard_rate, &NoiseStream::new(ckpt.seed));

    let mut risk = Vec::new();
    for (name, outcomes) in [
        ("router", &router),
        ("ai_only", &ai),
        ("uniform_defer", &uniform),
    ] {
        for axis in [RiskAxis::Structural, RiskAxis::Reliability] {
            let (bins, _) = risk_stratified_costs(outcomes, axis, 5, cost);
            for b in bins {
                risk.push(RiskRow {
                    method: name.to_string(),
                    axis: axis.to_string(),
                    bin: b.bin,
                    n: b.n,
                    mean_clinical_cost: b.mean_clinical_cost,
                });
            }
        }
    }

    Ok(EvalReport {
        schema_version: 1,
        split: split.to_string(),
        seed: ckpt.seed,
        n_experts: m,
        checkpoint_sha256: checkpoint_hash,
        methods: vec![
            method_report("router", &router, m, cost),
            method_report("ai_only", &ai, m, cost),
            method_report("uniform_defer", &uniform, m, cost),
        ],
        risk,
    })
}

fn flat_csv(report: &EvalReport) -> String {
    let mut out = String::from(
        "method,scope,n,accuracy,precision,recall,specificity,f1,mcc,clinical_cost,expert_cost,total_cost,defer_soft,defer_hard,routed_n,top1_hard,top2_hard,entropy_collapse_hard,n_eff_hard,gini_norm_hard,hhi_norm_hard\n",
    );
    for m in &report.methods {
        let hard = m.collapse.hard.as_ref();
        let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},overall,{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            m.method,
            m.n,
            m.classification.accuracy,
            m.classification.precision,
            m.classification.recall,
            m.classification.specificity,
            m.classification.f1,
            m.classification.mcc,
            m.costs.clinical,
            m.costs.expert,
            m.costs.total,
            m.deferral.defer_soft,
            m.deferral.defer_hard,
            m.collapse.routed_n,
            fmt_opt(hard.map(|h| h.top1)),
            fmt_opt(hard.map(|h| h.top2)),
            fmt_opt(hard.map(|h| h.entropy_collapse)),
            fmt_opt(hard.map(|h| h.n_eff)),
            fmt_opt(hard.map(|h| h.gini_norm)),
        ));
        // trailing field kept aligned with the header
        out.pop();
        out.push_str(&format!(",{}\n", fmt_opt(hard.map(|h| h.hhi_norm))));
        for (tag, c) in &m.per_cohort {
            out.push_str(&format!(
                "{},cohort:{},{},{},{},{},{},{},{},{},{},{},{},{},,,,,,,\n",
                m.method,
                tag,
                c.n,
                c.classification.accuracy,
                c.classification.precision,
                c.classification.recall,
                c.classification.specificity,
                c.classification.f1,
                c.classification.mcc,
                c.costs.clinical,
                c.costs.expert,
                c.costs.total,
                c.defer_soft,
                c.defer_hard,
            ));
        }
    }
    out
}

fn risk_csv(report: &EvalReport) -> String {
    let mut out = String::from("method,axis,bin,n,mean_clinical_cost\n");
    for r in &report.risk {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method, r.axis, r.bin, r.n, r.mean_clinical_cost
        ));
    }
    out
}

/// Evaluates a checkpoint on one split and writes report.json, the flat
/// CSV, and the risk-stratified long CSV into the report directory.
pub fn evaluate_cmd(
    config: &RunConfig,
    split: Split,
) -> Result<EvalReport, PipelineError> {
    let ckpt = Checkpoint::load(&config.paths.checkpoint)?;
    let ckpt_hash = sha256_hex(&std::fs::read(&config.paths.checkpoint)?);
    let table = CohortTable::read_csv_path(&config.paths.cohort)?;
    table.validate()?;
    let cost = config
        .cost
        .clone()
        .with_default_tiers(table.n_experts);
    cost.validate(table.n_experts)
        .map_err(crate::error::ConfigError::Invalid)?;
    let report = evaluate_split(&ckpt, &table, split, &cost, ckpt_hash)?;
    std::fs::create_dir_all(&config.paths.report_dir)?;
    std::fs::write(
        config.paths.report_dir.join(format!("report_{split}.json")),
        serde_json::to_string_pretty(&report)?,
    )?;
    std::fs::write(
        config.paths.report_dir.join(format!("report_{split}.csv")),
        flat_csv(&report),
    )?;
    std::fs::write(
        config
            .paths
            .report_dir
            .join(format!("risk_stratified_{split}.csv")),
        risk_csv(&report),
    )?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub target: f64,
    pub seed: u64,
    pub defer_soft: f64,
    pub defer_hard: f64,
    pub gap_soft: f64,
    pub gap_hard: f64,
    pub clinical_cost: f64,
    pub total_cost: f64,
}

/// Trains one run per deferral target and reports realized deferral and
/// gaps on the evaluation split.
pub fn sweep_cmd(
    config: &RunConfig,
    targets: &[f64],
    split: Split,
) -> Result<Vec<SweepRow>, PipelineError> {
    let table = CohortTable::read_csv_path(&config.paths.cohort)?;
    table.validate()?;
    let run_one = |(i, &target): (usize, &f64)| -> Result<SweepRow, PipelineError> {
        let mut cfg = config.clone();
        cfg.cost.rho_def = target;
        cfg.seed = match config.sweep.seed_mode {
            SweepSeedMode::Fixed => config.seed,
            SweepSeedMode::Increment => config.seed + i as u64,
        };
        let out = train_router(&table, &cfg)?;
        let cost = cfg.cost.clone().with_default_tiers(table.n_experts);
        let report = evaluate_split(&out.checkpoint, &table, split, &cost, String::new())?;
        let router = &report.methods[0];
        Ok(SweepRow {
            target,
            seed: cfg.seed,
            defer_soft: router.deferral.defer_soft,
            defer_hard: router.deferral.defer_hard,
            gap_soft: router.deferral.defer_soft - target,
            gap_hard: router.deferral.defer_hard - target,
            clinical_cost: router.costs.clinical,
            total_cost: router.costs.total,
        })
    };

    let rows: Result<Vec<SweepRow>, PipelineError> = if config.sweep.parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = targets
                .iter()
                .enumerate()
                .map(|item| scope.spawn(move || run_one(item)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep thread panicked"))
                .collect()
        })
    } else {
        targets.iter().enumerate().map(run_one).collect()
    };
    let rows = rows?;

    std::fs::create_dir_all(&config.paths.report_dir)?;
    let mut csv = String::from(
        "target,seed,defer_soft,defer_hard,gap_soft,gap_hard,clinical_cost,total_cost\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.target,
            r.seed,
            r.defer_soft,
            r.defer_hard,
            r.gap_soft,
            r.gap_hard,
            r.clinical_cost,
            r.total_cost
        ));
    }
    std::fs::write(config.paths.report_dir.join("sweep_gaps.csv"), csv)?;
    std::fs::write(
        config.paths.report_dir.join("sweep_gaps.json"),
        serde_json::to_string_pretty(&rows)?,
    )?;
    Ok(rows)
}
