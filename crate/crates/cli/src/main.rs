//! `rll`: train small ReLU classifiers on half-moons and analyse their
//! piecewise-affine structure, uncertainty surfaces and scaling limits.

mod check;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Exit code 1: a check or assertion failed. Exit code 2: bad usage or config.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failure(String),
}

impl From<rll_core::Error> for CliError {
    fn from(e: rll_core::Error) -> Self {
        use rll_core::Error as E;
        match e {
            E::TrainingDiverged { .. } | E::AucUndefined => CliError::Failure(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "rll", version, about = "ReLU linearization, uncertainty surfaces and scaling-limit probes")]
struct Cli {
    /// Worker threads for grid and probe evaluation (default: all cores).
    /// The RLL_THREADS environment variable takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a noisy half-moons dataset as CSV.
    Generate(GenerateArgs),
    /// Train a single net, ensemble, anchored ensemble or MC-dropout set.
    Train(TrainArgs),
    /// Evaluate metrics and gradient norms on a grid.
    Grid(GridArgs),
    /// Run one scaling probe and verify the limit behaviour.
    Probe(ProbeArgs),
    /// Self-test a checkpoint.
    Check(CheckArgs),
    /// Run many seeded probes and aggregate convergence rates.
    BatchProbe(BatchProbeArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 750)]
    pub n: usize,
    #[arg(long, default_value_t = 0.125, allow_hyphen_values = true)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum KindArg {
    Single,
    Ensemble,
    Anchored,
    #[value(name = "mcdropout", alias = "mc-dropout")]
    Mcdropout,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum PresetArg {
    Nn,
    #[value(name = "mcdropout")]
    McDropout,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// TrainConfig JSON. Defaults to the built-in preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in hyperparameters used when --config is absent.
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    /// Dataset CSV (x0,x1,label).
    #[arg(long)]
    pub data: PathBuf,
    /// Separate validation CSV.
    #[arg(long, conflicts_with = "val_frac")]
    pub val: Option<PathBuf>,
    /// Fraction of --data held out for validation (default 1/3).
    #[arg(long)]
    pub val_frac: Option<f64>,
    /// Seed for the train/validation shuffle.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long, value_enum, default_value_t = KindArg::Single)]
    pub kind: KindArg,
    /// Number of instances (default 1, 5 for ensembles, 50 for mcdropout).
    #[arg(long)]
    pub k: Option<usize>,
    /// Overrides the config's anchored.prior_std.
    #[arg(long)]
    pub prior_std: Option<f64>,
    /// Training seed (first member's seed for ensembles). Defaults to the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed for the frozen dropout masks.
    #[arg(long, default_value_t = 0)]
    pub mask_seed: u64,
    /// Fit a temperature on the validation split.
    #[arg(long)]
    pub temperature: bool,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Report path (default: <out>.report.json).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct GridArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `xlo:xhi,ylo:yhi`.
    #[arg(long, default_value = "-2:3,-1.5:2", allow_hyphen_values = true)]
    pub window: String,
    #[arg(long, default_value_t = 200)]
    pub res: usize,
    /// Comma-separated metric names to export (default: all four).
    #[arg(long)]
    pub metrics: Option<String>,
    /// Surface CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Summary JSON path (default: <out>.summary.json).
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Base point, comma-separated.
    #[arg(long, allow_hyphen_values = true)]
    pub x: String,
    #[arg(long)]
    pub dim: usize,
    /// `+` or `-`.
    #[arg(long, default_value = "+", allow_hyphen_values = true)]
    pub direction: String,
    /// `geom:base:count` or a comma-separated list.
    #[arg(long, default_value = "geom:2:21")]
    pub schedule: String,
    #[arg(long, default_value_t = rll_core::probe::DEFAULT_TAIL)]
    pub tail: usize,
    #[arg(long, default_value_t = rll_core::probe::DEFAULT_GRAD_TOL)]
    pub grad_tol: f64,
    #[arg(long, default_value_t = rll_core::probe::DEFAULT_DRIFT_TOL)]
    pub drift_tol: f64,
    /// Trace CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Verdict JSON path (default: <out>.verdict.json).
    #[arg(long)]
    pub verdict: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct CheckArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Random test points per check.
    #[arg(long, default_value_t = 200)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct BatchProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sampling box `lo:hi,lo:hi`, one range per input dimension.
    #[arg(long = "box", default_value = "-3:3,-3:3", allow_hyphen_values = true)]
    pub sample_box: String,
    /// Fixed scaled dimension (default: drawn per probe).
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, default_value = "+", allow_hyphen_values = true)]
    pub direction: String,
    #[arg(long, default_value = "geom:2:21")]
    pub schedule: String,
    #[arg(long, default_value_t = rll_core::probe::DEFAULT_TAIL)]
    pub tail: usize,
    #[arg(long, default_value_t = rll_core::probe::DEFAULT_GRAD_TOL)]
    pub grad_tol: f64,
    #[arg(long, default_value_t = rll_core::probe::DEFAULT_DRIFT_TOL)]
    pub drift_tol: f64,
    /// Report JSON path.
    #[arg(long)]
    pub out: PathBuf,
}

fn resolve_threads(flag: Option<usize>) -> CliResult<Option<usize>> {
    match std::env::var("RLL_THREADS") {
        Ok(v) if !v.trim().is_empty() => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("RLL_THREADS must be a positive integer, got `{v}`"))),
        },
        _ => match flag {
            Some(0) => Err(CliError::Usage("--threads must be >= 1".into())),
            other => Ok(other),
        },
    }
}

fn run(cli: Cli) -> CliResult {
    let threads = resolve_threads(cli.threads)?;
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Grid(a) => commands::grid(&a),
        Command::Probe(a) => commands::probe(&a),
        Command::Check(a) => check::run(&a),
        Command::BatchProbe(a) => commands::batch_probe(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Failure(msg)) => {
            eprintln!("rll: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("rll: {msg}");
            ExitCode::from(2)
        }
    }
}
