mod blocks;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::CliError;
use crate::config::Config;

#[derive(Parser)]
#[command(
    name = "icaf",
    version,
    about = "Fusion-neck detection harness: synthesize data, check gradients, train, evaluate, ablate"
)]
struct Cli {
    /// key=value config file layered over built-in defaults
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Base RNG seed
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Neck variant: fpn-baseline | ica-only | afw-only | ica-afw-no-aff | full
    #[arg(long, global = true, value_name = "NAME")]
    variant: Option<String>,

    /// Artifact directory (config echo, traces, checkpoints, reports)
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Floating-point width in bits
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (images, annotations, manifest)
    Synth,
    /// Finite-difference check of every differentiable block (64-bit)
    Gradcheck {
        /// Corrupt one analytic gradient to prove the check trips
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Train a detector, writing a loss trace and checkpoint
    Train,
    /// Evaluate a checkpoint, writing predictions, report, and FROC curve
    Eval,
    /// Train and evaluate each variant row across seeds, reporting medians
    Ablate,
}

fn resolve_config(cli: &Cli) -> Result<Config, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(variant) = &cli.variant {
        cfg.set("variant", variant)?;
    }
    if let Some(out) = &cli.out {
        cfg.set("out", &out.display().to_string())?;
    }
    if let Some(precision) = &cli.precision {
        cfg.set("precision", precision)?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    cfg.write_echo(&cfg.out_dir())?;
    let wide = cfg.precision_bits()? == 64;
    match cli.command {
        Command::Synth => commands::cmd_synth(&cfg),
        Command::Gradcheck { inject_fault } => commands::cmd_gradcheck(&cfg, inject_fault),
        Command::Train if wide => commands::cmd_train::<f64>(&cfg),
        Command::Train => commands::cmd_train::<f32>(&cfg),
        Command::Eval if wide => commands::cmd_eval::<f64>(&cfg),
        Command::Eval => commands::cmd_eval::<f32>(&cfg),
        Command::Ablate if wide => commands::cmd_ablate::<f64>(&cfg),
        Command::Ablate => commands::cmd_ablate::<f32>(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
