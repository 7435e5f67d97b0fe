use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flowcc::config::{parse_lambda, parse_original, ConfigError, RunConfig};
use flowcc::pipeline::{run_all, run_stage, PipelineError, Stage};

/// Two-stage concept customization of a toy rectified-flow model.
#[derive(Parser, Debug)]
#[command(name = "flowcc", version)]
struct Cli {
    /// Run configuration (`key = value` lines). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run_dir`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `adaptive` or `fixed:<value>`.
    #[arg(long, global = true)]
    lambda_mode: Option<String>,
    /// `theta2` or `theta3`.
    #[arg(long, global = true)]
    original_mode: Option<String>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    eta: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the base model on the synthetic scene.
    Pretrain,
    /// Draw the reference set and train the representation extractor.
    Extract,
    /// Stage-two customization; writes custom.pcck and trace.csv.
    Customize,
    /// Write per-context sample sets for both models.
    Sample,
    /// Compute drift, fidelity and consistency.
    Eval,
    /// Aggregate metrics and training curves into report.csv and curves.csv.
    Report,
    /// All stages in order.
    Run,
    /// Print the fully resolved configuration.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &cli.run_dir {
        cfg.run_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &cli.lambda_mode {
        cfg.customize.lambda_mode =
            parse_lambda(mode).map_err(|m| ConfigError::Invalid(format!("--lambda-mode: {m}")))?;
    }
    if let Some(mode) = &cli.original_mode {
        cfg.customize.original_mode = parse_original(mode)
            .map_err(|m| ConfigError::Invalid(format!("--original-mode: {m}")))?;
    }
    if let Some(eta) = cli.eta {
        cfg.customize.eta = eta;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = load_config(cli)?;
    let stage = match cli.command {
        Command::Pretrain => Stage::Pretrain,
        Command::Extract => Stage::Extract,
        Command::Customize => Stage::Customize,
        Command::Sample => Stage::Sample,
        Command::Eval => Stage::Eval,
        Command::Report => Stage::Report,
        Command::Run => return run_all(&cfg),
        Command::ShowConfig => {
            print!("{}", cfg.resolved().to_text());
            return Ok(());
        }
    };
    run_stage(&cfg, stage)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flowcc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
