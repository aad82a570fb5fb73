//! `xmodal` — cross-modality label association from the command line:
//! generate synthetic two-modality data, train the two-stage pipeline,
//! evaluate cross-modality retrieval, summarize runs, and self-test the
//! numeric core against built-in oracles.

mod commands;
mod config;
mod selftest;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use xmodal::eval::Direction;

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "xmodal",
    version,
    about = "Cross-modality label association: synthetic data, two-stage training, retrieval evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Configuration file of flat `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset applied before the config file.
    #[arg(long, value_parser = ["paper", "desk"])]
    preset: Option<String>,
    /// Output directory (default: config `data_dir` for generate,
    /// `report_dir` otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-modality dataset.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Cluster pseudo-labels and run both training stages.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Stop after stage 1; skips assignment, refinement, and stage 2.
        #[arg(long)]
        stage1_only: bool,
    },
    /// Evaluate a checkpoint on cross-modality retrieval.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Retrieval direction; both when omitted.
        #[arg(long, value_parser = parse_direction)]
        direction: Option<Direction>,
    },
    /// Summarize the artifacts of a finished run directory.
    Report {
        /// Run directory holding epochs.csv and friends.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in oracle and invariant suites.
    Selftest {
        /// Zero one analytic gradient coordinate so the check must trip.
        #[arg(long, hide = true)]
        sabotage_grad: bool,
    },
}

fn parse_direction(s: &str) -> Result<Direction, String> {
    Direction::parse(s).map_err(|e| e.to_string())
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(preset) = &common.preset {
        cfg.apply_preset(preset)?;
    }
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_text(&text)
            .with_context(|| format!("in config {}", path.display()))?;
    }
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { common } => {
            let cfg = load_config(&common)?;
            let out = common.out.unwrap_or_else(|| cfg.data_dir.clone());
            commands::generate(&cfg, &out)
        }
        Command::Train { common, stage1_only } => {
            let cfg = load_config(&common)?;
            let out = common.out.unwrap_or_else(|| cfg.report_dir.clone());
            commands::train(&cfg, &out, stage1_only)
        }
        Command::Evaluate { common, direction } => {
            let cfg = load_config(&common)?;
            let out = common.out.unwrap_or_else(|| cfg.report_dir.clone());
            commands::evaluate(&cfg, &out, direction)
        }
        Command::Report { out } => commands::report(&out),
        Command::Selftest { sabotage_grad } => selftest::run(sabotage_grad),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
