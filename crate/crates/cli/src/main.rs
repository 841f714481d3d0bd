//! `plaquenet`: config-driven simulations of aggregation kinetics with
//! clearance, on single regions or connectomes, plus dosing optimisation.
//!
//! ```text
//! plaquenet simulate --config run.toml --out results/
//! plaquenet analyze  --config run.toml --out results/
//! plaquenet network  --config run.toml --out results/ --threads 4
//! plaquenet optimize --config run.toml --out results/
//! ```
//!
//! Exit codes: 0 success, 2 configuration error, 3 solver failure,
//! 4 infeasible optimisation target, 1 anything else (I/O).

mod analyze;
mod config;
mod network;
mod optimize;
mod output;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "plaquenet", version, about = "Aggregation kinetics, network spread and dosing sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a single homogeneous region.
    Simulate(RunArgs),
    /// Closed-form analysis: halftimes, thresholds, fixed points.
    Analyze(RunArgs),
    /// Reaction-transport on a connectome with invasion ranking.
    Network(RunArgs),
    /// Dosing sweep and exposure-constrained optimum.
    Optimize(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML config, or JSON when the name ends in `.json`.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Infeasible(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<plaquenet::Error> for CliError {
    fn from(e: plaquenet::Error) -> Self {
        use plaquenet::Error as E;
        let msg = e.to_string();
        match e {
            E::Infeasible { .. } => CliError::Infeasible(msg),
            E::Io(_) => CliError::Io(msg),
            E::NoFixedPoint(_) | E::NonMonotone(_) => CliError::Solver(msg),
            ref other if other.is_solver_failure() => CliError::Solver(msg),
            _ => CliError::Config(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (command, args) = match &cli.command {
        Command::Simulate(a) => ("simulate", a),
        Command::Analyze(a) => ("analyze", a),
        Command::Network(a) => ("network", a),
        Command::Optimize(a) => ("optimize", a),
    };
    let loaded = config::load(&args.config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    std::fs::create_dir_all(&args.out)?;
    pool.install(|| match command {
        "simulate" => simulate::run(&loaded, &args.out),
        "analyze" => analyze::run(&loaded, &args.out),
        "network" => network::run(&loaded, &args.out),
        _ => optimize::run(&loaded, &args.out),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("plaquenet: {e}");
            ExitCode::from(e.code())
        }
    }
}
