//! `moranlab`: run, compare and export Moran-process mean-field
//! experiments.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;
use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "moranlab", version, about = "Moran-process mean-field experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory (default: config `output_dir`, then $MORANLAB_OUT, then ./moranlab-out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Comma-separated resolutions.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Number of replicas.
    #[arg(long)]
    ensemble_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one chain at one resolution and write its trajectory.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Number of steps.
        #[arg(long)]
        k: Option<usize>,
        /// Fixed population size (needs --selection-weight).
        #[arg(long)]
        population: Option<u64>,
        /// Fixed selection weight (needs --population).
        #[arg(long)]
        selection_weight: Option<f64>,
        /// Random stream of the chain.
        #[arg(long)]
        stream: Option<u64>,
    },
    /// Compare chain ensembles with the replicator pushforward across resolutions.
    Converge {
        #[command(flatten)]
        common: Common,
        /// Validate and print the schedule table without computing.
        #[arg(long)]
        dry_run: bool,
        /// Run the regime study instead (any positive exponents).
        #[arg(long)]
        regime: bool,
    },
    /// Ensemble displacement for arbitrary scaling exponents.
    Regimes {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dry_run: bool,
    },
    /// Weak-form residual against the standard test family.
    Residual {
        #[command(flatten)]
        common: Common,
    },
    /// Fast invariant suite.
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

fn overrides(c: &Common) -> Overrides {
    Overrides {
        seed: c.seed,
        out: c.out.clone(),
        ks: c.ks.clone(),
        ensemble_size: c.ensemble_size,
        alpha: c.alpha,
        beta: c.beta,
        ..Default::default()
    }
}

fn setup(c: &Common, ov: Overrides) -> Result<RunConfig, CliError> {
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(CliError::Config("flag --threads: need at least 1 thread".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    RunConfig::load(c.config.as_deref(), &ov).map_err(CliError::Config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { common, k, population, selection_weight, stream } => {
            let ov = Overrides { k, population, selection_weight, stream, ..overrides(&common) };
            commands::simulate(&setup(&common, ov)?)
        }
        Command::Converge { common, dry_run, regime } => {
            commands::converge(&setup(&common, overrides(&common))?, dry_run, regime)
        }
        Command::Regimes { common, dry_run } => commands::regimes(&setup(&common, overrides(&common))?, dry_run),
        Command::Residual { common } => commands::residual(&setup(&common, overrides(&common))?),
        Command::Validate { common } => {
            let cfg = setup(&common, overrides(&common))?;
            commands::validate(cfg.seed)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
