//! Operator CLI: cohort simulation, constrained training, evaluation, and
//! deferral-budget sweeps.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use triage_router::config::RunConfig;
use triage_router::pipeline;
use triage_router::sim::generate::GenSpec;
use triage_router::state::Split;
use triage_router::PipelineError;

#[derive(Parser)]
#[command(
    name = "triage-router",
    about = "Cost-sensitive multi-expert deferral router",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML). Missing keys take documented defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the cohort CSV path.
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// Override the checkpoint path.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Override the report directory.
    #[arg(long)]
    report_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_path(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(cohort) = &self.cohort {
            cfg.paths.cohort = cohort.clone();
        }
        if let Some(ckpt) = &self.checkpoint {
            cfg.paths.checkpoint = ckpt.clone();
        }
        if let Some(dir) = &self.report_dir {
            cfg.paths.report_dir = dir.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort CSV from a generation spec.
    Simulate {
        /// Generation spec (TOML).
        #[arg(long)]
        spec: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train the router with the constrained objective.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint and write report JSON/CSV files.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Split to evaluate: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train once per deferral target and tabulate realized gaps.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated deferral targets, e.g. 0.25,0.40,0.60.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<f64>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Run targets concurrently (independent runs, no shared state).
        #[arg(long)]
        parallel: bool,
    },
    /// Print the full default configuration as TOML.
    PrintConfig {
        /// Print the cohort generation spec instead of the run config.
        #[arg(long)]
        gen: bool,
    },
}

fn parse_split(s: &str) -> Result<Split, PipelineError> {
    s.parse::<Split>()
        .map_err(|e| triage_router::error::ConfigError::Invalid(e).into())
}

fn run() -> Result<(), PipelineError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { spec, out, seed } => {
            let manifest = pipeline::simulate_cmd(&spec, &out, seed)?;
            println!("{}", serde_json::to_string_pretty(&manifest)?);
        }
        Command::Train { config } => {
            let cfg = config.load()?;
            let artifacts = pipeline::train_cmd(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&artifacts.manifest)?);
        }
        Command::Evaluate { config, split } => {
            let cfg = config.load()?;
            let split = parse_split(&split)?;
            let report = pipeline::evaluate_cmd(&cfg, split)?;
            let router = &report.methods[0];
            println!(
                "{}",
                serde_json::json!({
                    "split": report.split,
                    "n": router.n,
                    "accuracy": router.classification.accuracy,
                    "mcc": router.classification.mcc,
                    "clinical_cost": router.costs.clinical,
                    "expert_cost": router.costs.expert,
                    "total_cost": router.costs.total,
                    "defer_soft": router.deferral.defer_soft,
                    "defer_hard": router.deferral.defer_hard,
                    "report_dir": cfg.paths.report_dir,
                })
            );
        }
        Command::Sweep {
            config,
            targets,
            split,
            parallel,
        } => {
            if targets.is_empty() {
                return Err(triage_router::error::ConfigError::Invalid(
                    "sweep requires at least one target".into(),
                )
                .into());
            }
            let mut cfg = config.load()?;
            if parallel {
                cfg.sweep.parallel = true;
            }
            let split = parse_split(&split)?;
            let rows = pipeline::sweep_cmd(&cfg, &targets, split)?;
            println!("{}", serde_json::to_string_pretty(&rows)?);
        }
        Command::PrintConfig { gen } => {
            if gen {
                let spec = GenSpec::default();
                print!("{}", toml::to_string_pretty(&spec).expect("spec serializes"));
            } else {
                print!("{}", RunConfig::default().to_toml());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
