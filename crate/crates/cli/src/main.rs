//! `femto`: fold, train, eval, energy and cost commands.
//!
//! Exit codes: 0 ok, 1 bad input, 2 verification failed, 3 numeric failure.

mod boxes;
mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use femtodet::FemtoError;

#[derive(Parser)]
#[command(name = "femto", version, about = "FemtoDet toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScheduleKind {
    Recwr,
    Flat,
}

#[derive(Subcommand)]
enum Cmd {
    /// Rewrite IBE modules and batch norms into plain convolutions.
    Fold {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Compare folded and original outputs on random probes.
        #[arg(long)]
        verify: bool,
        #[arg(long, default_value_t = 4)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on the synthetic shapes dataset.
    Train {
        /// Run config (TOML); defaults are used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "recwr")]
        schedule: ScheduleKind,
        /// Total epochs; split evenly over the stages for `recwr`.
        #[arg(long, default_value_t = 8)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average precision of a model or of a detections file.
    Eval {
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        model: Option<PathBuf>,
        /// CSV `image,class,score,x1,y1,x2,y2`.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Toy dataset config (TOML); its validation split is used.
        #[arg(long, conflicts_with = "gt", required_unless_present = "gt")]
        dataset: Option<PathBuf>,
        /// CSV `image,class,x1,y1,x2,y2`.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Power and mEPT from energy traces.
    Energy {
        #[arg(long)]
        trace: PathBuf,
        /// Trace of the empty (one channel per layer) model.
        #[arg(long)]
        baseline: PathBuf,
        /// A number, or a file with one value per line.
        #[arg(long)]
        perf: String,
    },
    /// Analytical MAC / activation-traffic estimate.
    Cost {
        /// Model config (TOML); the default detector when absent.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Failure classes, one per non-zero exit code.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Verify(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Verify(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<FemtoError> for CliError {
    fn from(e: FemtoError) -> Self {
        match e {
            FemtoError::NonFinite(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Verify(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Fold { model, out, verify, probes, seed } => commands::fold(&model, &out, verify, probes, seed),
        Cmd::Train { config, schedule, epochs, seed, out } => {
            commands::train(config.as_deref(), schedule, epochs, seed, &out)
        }
        Cmd::Eval { model, predictions, dataset, gt, iou } => commands::eval(
            model.as_deref(),
            predictions.as_deref(),
            dataset.as_deref(),
            gt.as_deref(),
            iou,
        ),
        Cmd::Energy { trace, baseline, perf } => commands::energy(&trace, &baseline, &perf),
        Cmd::Cost { config } => commands::cost(config.as_deref()),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
