mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Ctx;
use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Adversarial-training experiments with robustness feature adapters.
#[derive(Parser)]
#[command(name = "rfa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Standard-train a backbone and save its checkpoint.
    Pretrain(Opts),
    /// Train an adapter (fb, ub) or the adversarially trained baseline (at_pgd_baseline).
    Train(Opts),
    /// Clean and robust accuracy of the backbone, with and without the adapter.
    Eval(Opts),
    /// Loss change under matched feature-space budgets at several splits.
    Prop1(Opts),
    /// Fit and evaluate the adversarial-example detector.
    Detect(Opts),
    /// Feature-space step sizes matched to an input-space budget.
    Calibrate(Opts),
}

#[derive(clap::Args)]
struct Opts {
    /// JSON experiment config; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

type Handler = fn(&Ctx) -> Result<(), CliError>;

fn init_threads() -> Result<(), CliError> {
    let n = match std::env::var("RFA_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("RFA_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let (name, opts, cmd): (&'static str, &Opts, Handler) = match &cli.command {
        Command::Pretrain(o) => ("pretrain", o, commands::pretrain),
        Command::Train(o) => ("train", o, commands::train),
        Command::Eval(o) => ("eval", o, commands::eval),
        Command::Prop1(o) => ("prop1", o, commands::prop1),
        Command::Detect(o) => ("detect", o, commands::detect),
        Command::Calibrate(o) => ("calibrate", o, commands::calibrate),
    };
    let mut cfg = match &opts.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(o) = &opts.out {
        cfg.output_dir = o.clone();
    }
    cmd(&Ctx::new(cfg, name)?)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
