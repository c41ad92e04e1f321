//! Batch front door: simulate, fit, predict, cross-validate and summarize
//! occupancy-model runs from a single JSON configuration.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical
//! failure.

mod commands;
mod config;
mod fitfile;

use clap::{Parser, Subcommand};
use config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "occulgm",
    version,
    about = "Bayesian occupancy models over sparse latent Gaussian fields"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Path to the JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the configured thread count (or OCCULGM_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a data set from the configured generative model.
    Simulate,
    /// Fit the model and write fit.json, summary.csv and scores.csv.
    Fit,
    /// Posterior probability surfaces (and SVC significance labels).
    Predict,
    /// Leave-group-out cross-validation scores per observation.
    Cv,
    /// Print a human-readable recap of a fit.
    Summary,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

fn classify(err: &anyhow::Error) -> u8 {
    use occulgm_core::Error as E;
    if let Some(core) = err.downcast_ref::<E>() {
        return match core {
            E::MissingColumn(_)
            | E::NonNumeric { .. }
            | E::YExceedsK { .. }
            | E::ZeroVisits { .. }
            | E::DuplicateSitePeriod { .. }
            | E::ZeroVariance(_)
            | E::UnknownCovariate(_)
            | E::UnmappedSite(_)
            | E::EmptyGraph
            | E::Io(_)
            | E::Csv(_) => EXIT_DATA,
            E::NonConvergence { .. }
            | E::NotPositiveDefinite(_)
            | E::OptimFailure(_)
            | E::DimensionTooLarge(..) => EXIT_NUMERICAL,
            _ => EXIT_CONFIG,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return EXIT_DATA;
    }
    EXIT_CONFIG
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let config_path = cli
        .config
        .ok_or_else(|| anyhow::anyhow!("--config <path> is required"))?;
    let mut cfg = RunConfig::load(&config_path).map_err(|e| anyhow::anyhow!(e))?;
    if let Some(seed) = cli.seed {
        cfg.inference.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.paths.output = out;
    }
    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("OCCULGM_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(cfg.inference.threads);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .ok();

    match cli.command {
        Command::Simulate => commands::cmd_simulate(&cfg),
        Command::Fit => commands::cmd_fit(&cfg),
        Command::Predict => commands::cmd_predict(&cfg),
        Command::Cv => commands::cmd_cv(&cfg),
        Command::Summary => commands::cmd_summary(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            log::error!("{err:#}");
            ExitCode::from(classify(&err))
        }
    }
}
