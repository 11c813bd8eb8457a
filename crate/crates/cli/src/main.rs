mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Device, ExperimentConfig, Overrides};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numeric(String),
}

impl From<prognosis::Error> for CliError {
    fn from(e: prognosis::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numeric(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "prognosis", version, about = "Fundus-image survival prognosis experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Overrides every seed in the config
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config's out_dir, under $PROGNOSIS_OUT_ROOT if set)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    device: Option<Device>,
}

#[derive(Debug, clap::Args)]
struct Folded {
    #[command(flatten)]
    common: Common,
    /// Restrict to one cross-validation fold (0-based)
    #[arg(long)]
    fold: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort under <out>/data
    Synth(Common),
    /// Stage 1: train backbone and prototypes per fold
    Pretrain(Folded),
    /// Stage 2: train the fusion survival model per fold
    Train(Folded),
    /// Held-out risks, C-index and AUC per fold
    Eval(Folded),
    /// Model-variant ablation table
    Ablate(Common),
    /// Risk-group biomarker table and Kaplan-Meier curves
    Biomarker(Common),
    /// Stage-1 embeddings of every image as CSV
    ExportEmbeddings(Folded),
}

fn resolve(c: &Common) -> Result<ExperimentConfig, CliError> {
    ExperimentConfig::load(&c.config)?.resolve(&Overrides { seed: c.seed, out: c.out.clone(), device: c.device })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(c) => commands::synth(&resolve(&c)?),
        Command::Pretrain(f) => commands::pretrain(&resolve(&f.common)?, f.fold),
        Command::Train(f) => commands::train(&resolve(&f.common)?, f.fold),
        Command::Eval(f) => commands::eval(&resolve(&f.common)?, f.fold),
        Command::Ablate(c) => commands::ablate(&resolve(&c)?),
        Command::Biomarker(c) => commands::biomarker(&resolve(&c)?),
        Command::ExportEmbeddings(f) => commands::export(&resolve(&f.common)?, f.fold),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
