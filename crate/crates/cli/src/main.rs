//! `emoq`: command-line driver for the toy pipeline.
//!
//! Every command that produces files writes `manifest.json` next to them.
//! Failures print one JSON object on stderr and exit with status 2;
//! `grad-check` exits with status 1 when the tolerance is exceeded.

mod commands;
mod error;
mod frames;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "emoq", version, about = "Hybrid-compressor toy pipeline")]
pub struct Cli {
    /// Run configuration (key = value with [section] headers). Defaults apply
    /// when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic dataset as JSON lines.
    GenData,
    /// Write a freshly initialized checkpoint.
    Init,
    /// Run one pre-training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        /// Starting checkpoint; a fresh model when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset file from `gen-data`; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train one LoRA adapter set on emotion-domain data.
    Finetune {
        #[arg(long)]
        adapter: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Recall metrics (and gate weights for the hybrid projector).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Append masked face tokens to emotion-domain inputs.
        #[arg(long)]
        fec: bool,
    },
    /// Mean gate weights per domain.
    GateReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        fec: bool,
    },
    /// Finite-difference check of every block over random instances.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = emoq_core::gradcheck::SUITE_EPS)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Select key frames, mask faces and write the composed sequence.
    FecExtract {
        /// Directory holding `frames.tsv` and the PNG files it lists.
        #[arg(long)]
        frames: PathBuf,
        /// Observation sidecar (JSON lines).
        #[arg(long)]
        observations: PathBuf,
        /// Confidence threshold; the config value when omitted.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Print a checkpoint's manifest and tensor table.
    Inspect { checkpoint: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&msg).trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(first.to_string()).to_line());
            return ExitCode::from(2);
        }
    };
    match commands::run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(2)
        }
    }
}
