//! Command-line front end: resolves the TOML config plus flag overrides and
//! dispatches to the runner. Exit codes: 0 success, 2 config error, 3 data
//! error, 4 numerical failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use covshift::runner::{self, ExperimentConfig, IntervalMode, RunManifest};
use covshift::{Error, Result};

#[derive(Parser)]
#[command(name = "covshift", version, about = "Covariate-shift correction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full family-by-correction report grid on the configured data.
    Replicate(CommonArgs),
    /// One fit per family, evaluated on rebalanced test priors.
    PriorShift(CommonArgs),
    /// Report grid against a test set with labels redrawn independently of X.
    ConceptShift(CommonArgs),
    /// Oracle-anchored synthetic benchmark reports.
    Synthetic(CommonArgs),
    /// Estimate and dump importance weights, one CSV per estimator.
    Ratios(CommonArgs),
    /// Mean-|phi| Shapley summaries per family and correction.
    Explain(CommonArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum IntervalArg {
    Bootstrap,
    Seeds,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Interval mode override.
    #[arg(long, value_enum)]
    interval: Option<IntervalArg>,
    /// Worker thread budget (recorded in the manifest).
    #[arg(long)]
    threads: Option<usize>,
}

fn resolve(args: &CommonArgs) -> Result<(ExperimentConfig, usize)> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.experiment.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.experiment.out = out.clone();
    }
    if let Some(interval) = args.interval {
        cfg.experiment.interval = match interval {
            IntervalArg::Bootstrap => IntervalMode::Bootstrap,
            IntervalArg::Seeds => IntervalMode::Seeds,
        };
    }
    let threads = match args.threads {
        Some(0) => return Err(Error::Config("--threads must be positive".into())),
        Some(t) => t,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    cfg.validate()?;
    Ok((cfg, threads))
}

fn dispatch(command: &Command) -> Result<RunManifest> {
    let (run, args): (fn(&ExperimentConfig, usize) -> Result<RunManifest>, &CommonArgs) =
        match command {
            Command::Replicate(a) => (runner::run_replication, a),
            Command::PriorShift(a) => (runner::run_prior_shift, a),
            Command::ConceptShift(a) => (runner::run_concept_shift, a),
            Command::Synthetic(a) => (runner::run_synthetic_benchmark, a),
            Command::Ratios(a) => (runner::run_ratios, a),
            Command::Explain(a) => (runner::run_explain, a),
        };
    let (cfg, threads) = resolve(args)?;
    run(&cfg, threads)
}

fn main() {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(manifest) => {
            for artifact in &manifest.artifacts {
                println!("{}\t{}", artifact.name, artifact.path.display());
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
