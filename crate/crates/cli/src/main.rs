use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use icuda::harness::{cmd_describe, cmd_gen, cmd_run, cmd_verify, Algorithm, ExperimentConfig};
use icuda::Error;

#[derive(Parser)]
#[command(name = "icuda", version, about = "Domain adaptation references and the transformers that implement them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace the seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the algorithm: iwl, dann or icuda.
    #[arg(long, global = true)]
    algo: Option<Algorithm>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write datasets and a manifest.
    Gen,
    /// Run reference algorithms and report accuracies.
    Run,
    /// Build transformers and check them against the references.
    Verify,
    /// Summarise the transformer that would be built.
    Describe,
}

fn load(cli: &Cli) -> icuda::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(a) = cli.algo {
        cfg.algorithm = a;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn usage_error(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_))
}

fn execute(cli: &Cli) -> icuda::Result<bool> {
    let cfg = load(cli)?;
    let json = match cli.command {
        Command::Gen => serde_json::to_string_pretty(&cmd_gen(&cfg)?)?,
        Command::Run => serde_json::to_string_pretty(&cmd_run(&cfg)?.summary)?,
        Command::Describe => serde_json::to_string_pretty(&cmd_describe(&cfg)?)?,
        Command::Verify => {
            let report = cmd_verify(&cfg)?;
            emit(&serde_json::to_string_pretty(&report)?);
            return Ok(report.all_pass);
        }
    };
    emit(&json);
    Ok(true)
}

/// Print to stdout, ignoring a closed pipe.
fn emit(s: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{s}");
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if usage_error(&e) { 2 } else { 1 })
        }
    }
}
