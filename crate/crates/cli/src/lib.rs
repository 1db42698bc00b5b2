//! Subcommands of the `r2n2` tool. Exit codes: 0 success, 1 usage, 2 runtime.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
mod commands;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::Method;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys or missing inputs.
    Usage(String),
    Runtime(r2n2_core::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<r2n2_core::Error> for CliError {
    fn from(e: r2n2_core::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "r2n2", version, about = "Sequence-based deformable 2D registration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// TOML file with settings for this subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override any setting, e.g. `--set train.lambda=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long, short)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a set of synthetic cases with ground-truth fields and landmarks.
    Synth(SynthArgs),
    /// Train the recurrent network; resumes from the checkpoint in the output
    /// directory if one exists.
    Train(TrainArgs),
    /// Register one image pair.
    Register(RegisterArgs),
    /// Compare the network with the B-spline baseline on a case set.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Image side length [default: 64]
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Number of cases [default: 20]
    #[arg(long)]
    pub count: Option<usize>,
    /// Peak displacement in normalized units [default: 0.08]
    #[arg(long)]
    pub deform_scale: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Use the reduced network: default channel counts divided by this.
    #[arg(long, value_name = "DIVISOR")]
    pub toy: Option<usize>,
    /// Network input and training image size [default: 256]
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Image series manifest; synthetic pairs are used when absent.
    #[arg(long)]
    pub series: Option<PathBuf>,
    /// [default: 2000]
    #[arg(long)]
    pub iterations: Option<u64>,
    /// [default: 1e-4]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Sequence length T [default: 25]
    #[arg(long)]
    pub steps: Option<usize>,
    /// TV weight [default: 0.1]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Turn off weight noise and dropconnect.
    #[arg(long)]
    pub no_noise: bool,
}

#[derive(Args, Debug)]
pub struct RegisterArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub fixed: Option<PathBuf>,
    #[arg(long)]
    pub moving: Option<PathBuf>,
    /// [default: r2n2]
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Trained network, required for `r2n2`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sequence length T [default: 25]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Use the 16/32/64 baseline schedule instead of 64/128/256.
    #[arg(long)]
    pub scaled_baseline: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Case set manifest, a directory holding one, or a single case directory.
    #[arg(long)]
    pub cases: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sequence length T [default: 25]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Timed repetitions per method and case [default: 5]
    #[arg(long)]
    pub timing_runs: Option<usize>,
    /// Millimetres per pixel; adds mm columns to the report.
    #[arg(long)]
    pub pixel_spacing_mm: Option<f64>,
    /// Use RMS instead of mean landmark distance as the headline TRE.
    #[arg(long)]
    pub rms: bool,
    /// Use the 16/32/64 baseline schedule instead of 64/128/256.
    #[arg(long)]
    pub scaled_baseline: bool,
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Register(a) => commands::register(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
