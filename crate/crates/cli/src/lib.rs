//! The `dwad` command line: argument definitions and subcommand dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dwad_core::{Error, ErrorCategory, Result};

pub mod commands;
pub mod io;

#[derive(Parser, Debug)]
#[command(name = "dwad", version, about = "Density-weighted average derivatives: estimation, truths, expansions, simulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Moment report for a product kernel.
    KernelCheck(KernelCheckArgs),
    /// Point estimate, standard errors and intervals from a data file.
    Estimate(EstimateArgs),
    /// Population constants of a preset design.
    Truth(TruthArgs),
    /// Evaluate Φ and the three expansions on a grid.
    Edgeworth(EdgeworthArgs),
    /// Monte Carlo coverage and distribution study.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
pub struct KernelCheckArgs {
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub order: u32,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    /// CSV with header y,x1,...,xd
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub order: u32,
    #[arg(long)]
    pub bandwidth: f64,
    /// Comma-separated direction; repeat for several. Defaults to the coordinate axes.
    #[arg(long = "direction", allow_hyphen_values = true)]
    pub directions: Vec<String>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TruthArgs {
    #[arg(long)]
    pub dgp: String,
    #[arg(long)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub order: u32,
    #[arg(long, allow_hyphen_values = true)]
    pub direction: Option<String>,
    /// Noise standard deviation.
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// Also report ω̃_v² and r_n at this sample size (needs --bandwidth).
    #[arg(long, requires = "bandwidth")]
    pub n: Option<usize>,
    #[arg(long, requires = "n")]
    pub bandwidth: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EdgeworthArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Experiment file; `n` and `bandwidth` may list several values.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Process exit status for an error category.
pub fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Configuration => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numerical => 4,
        ErrorCategory::AssumptionViolation => 5,
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::KernelCheck(a) => commands::kernel_check(&a),
        Command::Estimate(a) => commands::estimate(&a),
        Command::Truth(a) => commands::truth(&a),
        Command::Edgeworth(a) => commands::edgeworth(&a),
        Command::Simulate(a) => commands::simulate(&a),
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    execute(cli)
}
