//! `rnode` command-line entry point.

mod commands;
mod config;
mod report;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<rnode::Error> for CliError {
    fn from(e: rnode::Error) -> Self {
        CliError {
            code: if e.is_numerical() { 3 } else { 2 },
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            code: 1,
            message: format!("i/o error: {e}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "rnode",
    version,
    about = "Recurrent neural ODE classifiers for timed event sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory receiving all outputs.
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Dotted-key override such as `model.hidden_width=32`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and evaluate it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Labeled JSONL dataset (overrides `data.path`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on a labeled dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Which part of the configured split to score.
        #[arg(long, value_enum, default_value = "all")]
        split: commands::SplitSelector,
        /// Export per-class ROC tables.
        #[arg(long)]
        roc: bool,
        /// Export per-position hidden states.
        #[arg(long)]
        traces: bool,
    },
    /// Label every post of an unlabeled JSONL file.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Generate a synthetic gap-task dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of sequences.
        #[arg(long)]
        n: Option<usize>,
        /// Posts per sequence.
        #[arg(long)]
        len: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        /// Gap threshold; defaults to the median gap.
        #[arg(long)]
        gamma: Option<f64>,
        /// Label flip probability.
        #[arg(long)]
        noise: Option<f64>,
        /// Output file; defaults to `<out-dir>/synthetic.jsonl`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train several architectures on one dataset and tabulate them.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated architecture names, in table order.
        #[arg(long, value_delimiter = ',', required = true)]
        archs: Vec<rnode::Arch>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common, data } => commands::train(&common, data),
        Command::Evaluate {
            common,
            checkpoint,
            data,
            split,
            roc,
            traces,
        } => commands::evaluate(&common, &checkpoint, &data, split, roc, traces),
        Command::Predict {
            common,
            checkpoint,
            input,
        } => commands::predict(&common, &checkpoint, &input),
        Command::Synth {
            common,
            n,
            len,
            width,
            gamma,
            noise,
            output,
        } => commands::synth(
            &common,
            commands::SynthFlags {
                n,
                len,
                width,
                gamma,
                noise,
            },
            output,
        ),
        Command::Compare {
            common,
            archs,
            data,
        } => commands::compare(&common, &archs, data),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
