use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "degentaxis", version, about = "Doubly degenerate chemotaxis-consumption simulator")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Seed for randomized initial data; overrides the config's seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker count for concurrent jobs (default: available parallelism)
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate one configuration and write a run directory
    Run(RunArgs),
    /// Evaluate every lemma check on a finished run
    Verify(VerifyArgs),
    /// Build and solve the time-rescaled problem for a finished run
    Rescale(RescaleArgs),
    /// Run a list of parameter tuples and summarize them
    Sweep(SweepArgs),
    /// Emit plot-ready CSV bundles for a finished run
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory; overrides the config's `output`
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    pub run_dir: PathBuf,
    /// Directory for the reports (default: RUN_DIR/reports)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Start of the window for the Harnack infimum
    #[arg(long, default_value_t = degentaxis_core::monitors::DEFAULT_BURN_IN)]
    pub burn_in: f64,
}

#[derive(Debug, Args)]
pub struct RescaleArgs {
    pub run_dir: PathBuf,
    /// Directory for the artifacts (default: RUN_DIR/rescale)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write every N-th tau node's coefficients
    #[arg(long, default_value_t = degentaxis_core::rescale::DEFAULT_COEFFICIENT_STRIDE)]
    pub stride: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub run_dir: PathBuf,
    /// Directory for the CSV bundle (default: RUN_DIR/report)
    #[arg(long)]
    pub out: Option<PathBuf>,
}
