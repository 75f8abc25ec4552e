use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod io;

#[derive(Parser)]
#[command(name = "npmix", version, about = "Finite mixtures of Dirichlet process mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sampler on a data CSV and write a snapshot file and run log.
    Fit(FitArgs),
    /// Draw a synthetic data set with its truth manifest.
    Simulate(SimulateArgs),
    /// Posterior density bands, weight table and CDF grid from a snapshot file.
    Summarize(SummarizeArgs),
    /// Split a two-component 1-D sample with the Hermite estimator.
    HermiteSplit(HermiteArgs),
    /// Check the separation condition on a truth manifest or snapshot file.
    CheckSeparation(SeparationArgs),
}

#[derive(Args)]
pub struct FitArgs {
    /// Headered CSV, one row per observation.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of components.
    #[arg(short, long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 runs sequentially, 0 uses every core.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Override any configuration key, e.g. `--set tau=2.0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Built-in design: two-gaussians, three-shapes, circle-pair, hermite-pair, scale-pair.
    #[arg(long, conflicts_with = "truth", required_unless_present = "truth")]
    pub design: Option<String>,
    /// JSON truth (as written in a manifest) instead of a built-in design.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(short, long)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub snapshots: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Grid points per axis (default 512 in 1-D, 101 otherwise).
    #[arg(long)]
    pub grid_points: Option<usize>,
    /// Lower grid limit per axis; defaults to the data minimum less three sds.
    #[arg(long, num_args = 1.., allow_negative_numbers = true)]
    pub lo: Vec<f64>,
    #[arg(long, num_args = 1.., allow_negative_numbers = true)]
    pub hi: Vec<f64>,
    /// Pointwise credible level of the density bands.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Credible level of the weight intervals.
    #[arg(long, default_value_t = npmix::summary::WEIGHT_LEVEL)]
    pub weight_level: f64,
    /// Also write the posterior-mean CDF.
    #[arg(long)]
    pub cdf: bool,
}

#[derive(Args)]
pub struct HermiteArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// 1-based data column.
    #[arg(long, default_value_t = 1)]
    pub column: usize,
    #[arg(long, allow_negative_numbers = true)]
    pub c1: f64,
    #[arg(long, allow_negative_numbers = true)]
    pub c2: f64,
    #[arg(long)]
    pub sigma: f64,
    /// Halfwidth of the first mixing support.
    #[arg(long)]
    pub halfwidth1: f64,
    /// Halfwidth of the second mixing support; defaults to the first.
    #[arg(long)]
    pub halfwidth2: Option<f64>,
    /// Expansion length.
    #[arg(long, conflicts_with = "epsilon")]
    pub ell: Option<usize>,
    /// Target accuracy used to choose the expansion length (default n^(-2/5)).
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// KDE bandwidth (default: Silverman's rule).
    #[arg(long)]
    pub bandwidth: Option<f64>,
    #[arg(long, default_value_t = 4001)]
    pub grid_points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SeparationArgs {
    #[arg(long, conflicts_with = "snapshots", required_unless_present = "snapshots")]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub snapshots: Option<PathBuf>,
    /// Connectivity threshold for splitting a support into connected pieces.
    #[arg(long)]
    pub gap: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Fit(a) => commands::fit(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Summarize(a) => commands::summarize(&a),
        Command::HermiteSplit(a) => commands::hermite_split(&a),
        Command::CheckSeparation(a) => commands::check_separation(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
