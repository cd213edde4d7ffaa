use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::{Parser, Subcommand};
use emdt_cli::config::{extract_overrides, PipelineConfig};
use emdt_cli::error::{exit_code, EXIT_USAGE};
use emdt_cli::stages::{self, RunOptions};
use emdt_cli::workspace::Workspace;
use emdt_cli::{evaluate, pipeline};
use log::{error, info};

/// Cluster-guided diffusion oversampling for fraud detection.
///
/// Any config field can be overridden with `--section.field value`.
#[derive(Debug, Parser)]
#[command(name = "emdt", version)]
struct Cli {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Rebuild stages whose inputs are unchanged.
    #[arg(long, global = true)]
    force: bool,
    /// Omit wall-clock timings so reports are byte-reproducible.
    #[arg(long, global = true)]
    canonical: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split the raw CSV and standardize Amount.
    Preprocess,
    /// Cluster the training frauds.
    Cluster,
    /// Train one denoiser per cluster (and the global ablation model).
    Train,
    /// Sample synthetic frauds from the trained models.
    Generate,
    /// Score every method arm over the evaluation seeds.
    Evaluate,
    /// One-factor-at-a-time hyperparameter sweep.
    Sweep,
    /// Run preprocess, cluster, train, generate and evaluate.
    Pipeline,
    /// Print the effective configuration as TOML.
    PrintConfig,
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    let opts = RunOptions {
        force: cli.force,
        canonical: cli.canonical,
    };
    let ws = Workspace::new(&cfg.output.dir);
    let start = Instant::now();
    match cli.command {
        Command::Preprocess => {
            stages::preprocess(&cfg, &ws, opts)?;
        }
        Command::Cluster => {
            stages::cluster(&cfg, &ws, opts)?;
        }
        Command::Train => {
            stages::train(&cfg, &ws, opts)?;
        }
        Command::Generate => {
            stages::generate(&cfg, &ws, opts)?;
        }
        Command::Evaluate => {
            let mut report = evaluate::evaluate(&cfg, &ws)?;
            if !opts.canonical {
                report.stage_seconds =
                    Some([("evaluate".to_string(), start.elapsed().as_secs_f64())].into());
                evaluate::write_report(&ws, &report)?;
            }
        }
        Command::Sweep => {
            evaluate::sweep(&cfg, &ws)?;
        }
        Command::Pipeline => {
            pipeline(&cfg, opts)?;
        }
        Command::PrintConfig => {
            print!("{}", cfg.to_toml());
            return Ok(());
        }
    }
    info!("done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let (rest, overrides) = match extract_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            let code = exit_code(&e);
            ExitCode::from(code as u8)
        }
    }
}

