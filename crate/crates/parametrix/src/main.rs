//! Command-line front end: parses arguments, loads the experiment
//! configuration, and dispatches to the experiment drivers. Exit codes:
//! 0 = run passed, 1 = run completed but failed its numerical check,
//! 2 = usage or configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use parametrix::config::ExperimentConfig;
use parametrix::experiments;

#[derive(Parser)]
#[command(
    version,
    about = "Markov-chain vs diffusion transition-density experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the configured model against the standing assumptions.
    Validate(RunArgs),
    /// Tabulate series, chain, and frozen densities on a line of targets.
    Density(RunArgs),
    /// Tabulate one chain marginal on its default grid.
    ChainDensity(RunArgs),
    /// Fit the weighted chain-vs-series error rate across step counts.
    Rate(RunArgs),
    /// Decompose the chain-vs-diffusion gap into h/2 correction terms.
    Correct(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Existing directory that receives the CSV/JSON outputs and manifest.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::Validate(a) => ("validate", a),
        Command::Density(a) => ("density", a),
        Command::ChainDensity(a) => ("chain-density", a),
        Command::Rate(a) => ("rate", a),
        Command::Correct(a) => ("correct", a),
    };
    let config = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(err) => {
            eprintln!("{name}: config error: {err}");
            return ExitCode::from(2);
        }
    };
    let run = match name {
        "validate" => experiments::run_validate(&config, &args.out),
        "density" => experiments::run_density(&config, &args.out),
        "chain-density" => experiments::run_chain_density(&config, &args.out),
        "rate" => experiments::run_rate(&config, &args.out),
        _ => experiments::run_correct(&config, &args.out),
    };
    match run {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("{name}: {err}");
            ExitCode::from(u8::try_from(experiments::error_exit_code(&err)).unwrap_or(1))
        }
    }
}
