//! Command-line front end: configured Monte Carlo campaigns over random
//! composite media, parameter sweeps, allocation planning and library
//! inspection.

mod config;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("io: {0}")]
    Io(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] qphom::Error),
}

#[derive(Parser)]
#[command(name = "qphom", about = "apparent homogenisation campaigns on random media", version)]
struct Cli {
    /// TOML configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides config and QPHOM_SEED)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (overrides config and QPHOM_THREADS)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (overrides config and QPHOM_OUT)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one estimation campaign
    Run,
    /// Run once per value of a config key; artifacts per value plus a merged CSV
    Sweep {
        /// Dotted config key, e.g. solver.epsilon
        #[arg(long)]
        param: String,
        /// Comma-separated values
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Compute a sample allocation from pilot statistics without solving
    Plan {
        /// JSON file with pilot statistics
        #[arg(long)]
        stats: PathBuf,
    },
    /// Summarise a saved modes library
    InspectLibrary {
        /// Path to a library JSON file
        #[arg(long)]
        library: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
    let mut cfg = RunConfig::from_path(path)?;
    cfg.apply_env()?;
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.run.threads = threads;
    }
    if let Some(out) = &cli.out {
        cfg.run.out_dir = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Run => {
            let cfg = load_config(&cli)?;
            let outcome = runner::run(cfg)?;
            println!("{}", serde_json::to_string_pretty(&outcome.summary).unwrap());
            Ok(())
        }
        Command::Sweep { param, values } => {
            let cfg = load_config(&cli)?;
            runner::sweep(cfg, param, values)
        }
        Command::Plan { stats } => {
            let cfg = load_config(&cli)?;
            let plan = runner::plan(&cfg, stats)?;
            println!("{}", serde_json::to_string_pretty(&plan).unwrap());
            Ok(())
        }
        Command::InspectLibrary { library } => {
            let info = runner::inspect_library(library)?;
            println!("{}", serde_json::to_string_pretty(&info).unwrap());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
