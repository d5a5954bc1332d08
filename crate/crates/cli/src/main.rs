use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "psemix",
    version,
    about = "Pseudo-bag mixing for multiple instance learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Dataset manifest.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Model checkpoint for `eval`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen,
    /// Divide every bag into pseudo-bags and time the division.
    Divide,
    /// Write PseMix samples drawn from the training split.
    Augment,
    /// Train the attention MIL model.
    Train,
    /// Run the evaluation protocols on a checkpoint.
    Eval,
    /// Benchmark division scaling and method speed.
    Bench,
}

fn run(cli: Cli) -> Result<()> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.resolve(Overrides {
        seed: cli.seed,
        out: cli.out,
        threads: cli.threads,
        data: cli.data,
        checkpoint: cli.checkpoint,
    })?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    log::info!("resolved config:\n{}", cfg.to_toml()?);
    match cli.command {
        Command::Gen => commands::gen(&cfg),
        Command::Divide => commands::divide(&cfg),
        Command::Augment => commands::augment(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::evaluate(&cfg),
        Command::Bench => commands::bench(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
