//! `mhe`: dataset generation, training, fine-tuning, evaluation, gradient
//! checks and transfer benchmarks.
//!
//! Every subcommand reads an optional TOML file (`--config`) layered over
//! built-in defaults, then `--set key.path=value` overrides. The resolved
//! config is written to the output directory as `config.toml`.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Layers;
use error::CliError;

#[derive(Parser)]
#[command(name = "mhe", version, about = "Monocular height estimation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config file.
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set scene.density=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set out=DIR`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Gen(Common),
    /// Train a model from scratch or from a checkpoint.
    Train(Common),
    /// Fine-tune a checkpoint on a few-shot subset of a target dataset.
    Finetune(Common),
    /// Evaluate a predictor on a dataset split.
    Eval(Common),
    /// Run every finite-difference gradient suite.
    Gradcheck(Common),
    /// Run a full transfer experiment plan.
    Bench(Common),
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("MHE_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::config(format!("MHE_THREADS must be a positive integer, got `{v}`")))?;
        mhe_core::par::configure_threads(n);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<String, CliError> {
    configure_threads()?;
    let (common, cmd): (&Common, fn(&Layers) -> Result<String, CliError>) = match &cli.command {
        Command::Gen(c) => (c, commands::gen),
        Command::Train(c) => (c, commands::train_cmd),
        Command::Finetune(c) => (c, commands::finetune),
        Command::Eval(c) => (c, commands::eval),
        Command::Gradcheck(c) => (c, commands::gradcheck),
        Command::Bench(c) => (c, commands::bench),
    };
    let mut sets = common.set.clone();
    if let Some(out) = &common.out {
        sets.push(format!("out={}", toml::Value::String(out.display().to_string())));
    }
    let layers = Layers::load(common.config.as_deref(), &sets)?;
    cmd(&layers)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments");
            let err = CliError::config(first.trim_start_matches("error: "));
            eprintln!("{err}");
            return ExitCode::from(err.class.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.class.exit_code() as u8)
        }
    }
}
