//! `loadrec`: generate scenarios, simulate measurements, recover, evaluate
//! and plot. Stages talk to each other only through files.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use loadrec::io::IoError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Model(#[from] loadrec::Error),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{0}")]
    NotConverged(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Model(_) => 2,
            CliError::NotConverged(_) => 3,
            CliError::Io(IoError::Io { .. } | IoError::Missing { .. }) => 4,
            CliError::Io(_) => 2,
        }
    }
}

#[derive(Parser)]
#[command(name = "loadrec", version, about = "Minute-level load recovery from interval meters and a feeder sensor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a ground-truth scenario bundle.
    Synth(SynthArgs),
    /// Draw noisy meter and feeder readings from a scenario.
    Simulate(SimulateArgs),
    /// Recover the load matrix from measurements (or from a scenario, simulating first).
    Recover(RecoverArgs),
    /// Score a recovery against its ground truth.
    Eval(EvalArgs),
    /// Write plot data (and optionally SVG) for one figure.
    Plot(PlotArgs),
}

#[derive(Args)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads for batches of seeds or inputs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// winter-day, winter-night, summer-day or random.
    #[arg(long)]
    pub case: Option<String>,
    /// One seed, a range `1-10` or a list `1,4,9`. Several seeds write one
    /// bundle per seed under `--out`.
    #[arg(long)]
    pub seed: Option<String>,
    /// Rank of the random case.
    #[arg(long, default_value_t = 2)]
    pub rank: usize,
    /// Fraction of nonzero changes in the random case.
    #[arg(long, default_value_t = 0.01)]
    pub sparsity: f64,
    #[arg(long)]
    pub n_houses: Option<usize>,
    #[arg(long)]
    pub n_pv: Option<usize>,
    #[arg(long)]
    pub n_ev: Option<usize>,
    #[arg(long)]
    pub n_hvac: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub meter_factor: Option<usize>,
    /// Enable HVAC cycling (always on for summer-day).
    #[arg(long)]
    pub hvac: bool,
}

#[derive(Args)]
pub struct NoiseArgs {
    #[arg(long)]
    pub meter_accuracy: Option<f64>,
    #[arg(long)]
    pub pmu_accuracy: Option<f64>,
    #[arg(long)]
    pub noise_seed: Option<u64>,
    #[arg(long)]
    pub bound_slack: Option<f64>,
}

#[derive(Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Scenario bundle directory.
    #[arg(long)]
    pub scenario: PathBuf,
    #[command(flatten)]
    pub noise: NoiseArgs,
}

#[derive(Args)]
pub struct RecoverArgs {
    #[command(flatten)]
    pub common: Common,
    /// Measurement or scenario bundle; repeat for a batch (one output
    /// directory per input, named after it).
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub eps_abs: Option<f64>,
    #[arg(long)]
    pub eps_rel: Option<f64>,
    #[arg(long)]
    pub feas_tol: Option<f64>,
    /// Stop after the first stage.
    #[arg(long)]
    pub skip_postprocess: bool,
    #[command(flatten)]
    pub noise: NoiseArgs,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory of `recover`.
    #[arg(long)]
    pub recovered: PathBuf,
    /// Scenario bundle with the ground truth.
    #[arg(long)]
    pub truth: PathBuf,
    /// Also sweep detection thresholds and write roc.csv.
    #[arg(long)]
    pub roc: bool,
    /// Rating the thresholds are fractions of, in kW.
    #[arg(long)]
    pub rating: Option<f64>,
    /// Threshold fractions as start:stop:count.
    #[arg(long)]
    pub thresholds: Option<String>,
    /// Largest time offset, in minutes, for a detection to match an event.
    #[arg(long)]
    pub window: Option<usize>,
    /// ev, hvac, other or all.
    #[arg(long)]
    pub kind: Option<String>,
}

#[derive(Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Figure id; run with an unknown id to list them.
    #[arg(long)]
    pub figure: String,
    /// Output directory of `recover`.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Scenario bundle.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Output directories of `eval`, one ROC series each.
    #[arg(long = "eval")]
    pub evals: Vec<PathBuf>,
    /// House number, 1-based.
    #[arg(long, default_value_t = 1)]
    pub house: usize,
    /// Also render an SVG.
    #[arg(long)]
    pub svg: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Recover(a) => commands::recover(a),
        Command::Eval(a) => commands::eval(a),
        Command::Plot(a) => plot::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
