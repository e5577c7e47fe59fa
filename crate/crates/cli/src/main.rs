use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use madmm_harness::{ExperimentConfig, HarnessError, PreprocessConfig};

/// Private distributed ERM with time-varying penalties.
#[derive(Parser)]
#[command(name = "madmm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean, encode and scale a raw census-style table.
    Preprocess(Flags),
    /// Run a seeded multi-run experiment.
    Run(Flags),
    /// Contraction certificate, rate bounds and optimality residuals.
    Analyze(Flags),
    /// Reconstruction attack on one node's first sample.
    Attack(Flags),
}

#[derive(Args)]
struct Flags {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn load(flags: &Flags) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::load(&flags.config)?;
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<serde_json::Value, HarnessError> {
    let value = match cli.command {
        Command::Preprocess(flags) => {
            let report = madmm_harness::preprocess(&PreprocessConfig::load(&flags.config)?, &flags.out)?;
            for d in &report.deviations {
                eprintln!("warning: {d}");
            }
            serde_json::to_value(report)?
        }
        Command::Run(flags) => {
            let cfg = load(&flags)?;
            for w in cfg.prepare()?.warnings {
                eprintln!("warning: {w}");
            }
            serde_json::to_value(madmm_harness::run_experiment(&cfg, &flags.out)?)?
        }
        Command::Analyze(flags) => serde_json::to_value(madmm_harness::analyze(&load(&flags)?, &flags.out)?)?,
        Command::Attack(flags) => serde_json::to_value(madmm_harness::attack(&load(&flags)?, &flags.out)?)?,
    };
    Ok(value)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
