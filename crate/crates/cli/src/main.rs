//! `dynotf`: generate synthetic benchmarks, train G-block networks, evaluate them
//! and check their gradients.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<dynotf::Error> for CliError {
    fn from(e: dynotf::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "dynotf", version, about = "Differentiable transfer-function networks: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (train/test CSV) and its ground truth.
    Generate(GenerateArgs),
    /// Fit a model to a CSV dataset; writes model, loss trace and report.
    Train(TrainArgs),
    /// Score a fitted model on a CSV dataset by open-loop simulation.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    /// White-noise input, WH truth, colored output noise.
    WhColored,
    /// Multisine input, parallel WH truth, binned output.
    PwhQuantized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossArg {
    Pem,
    Quantized,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchArg {
    Wh,
    Pwh,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateArgs {
    /// JSON file with any of these settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: Option<DataKind>,
    /// Samples per record [default: 20000 for wh-colored, 4096 for pwh-quantized].
    #[arg(long = "T")]
    #[serde(rename = "T")]
    pub samples: Option<usize>,
    /// [default: 1]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [default: .].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output noise std [default: 0.1 (colored, wh) or 0.05 (white, pwh)].
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Held-out record length [default: same as --T].
    #[arg(long = "test-T")]
    #[serde(rename = "test_T")]
    pub test_samples: Option<usize>,
    /// Input std for wh-colored [default: 1].
    #[arg(long)]
    pub input_std: Option<f64>,
    /// Multisine rms levels for pwh-quantized [default: 0.1,0.325,0.55,0.775,1].
    #[arg(long, value_delimiter = ',')]
    pub rms_levels: Option<Vec<f64>>,
    /// Phase realizations per rms level [default: 4].
    #[arg(long)]
    pub realizations: Option<usize>,
    /// Held-out realizations per rms level [default: 1].
    #[arg(long)]
    pub test_realizations: Option<usize>,
    /// Multisine band edge in cycles/sample [default: 0.25].
    #[arg(long)]
    pub band: Option<f64>,
    /// Number of multisine tones [default: every DFT bin in the band].
    #[arg(long)]
    pub tones: Option<usize>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    /// JSON file with any of these settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Training CSV (t,u,y or t,u,z).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out CSV; without it the last --holdout fraction of the data is held out.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Output directory [default: .].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// [default: pem, or quantized when the data has a z column]
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// [default: pwh for quantized, wh otherwise]
    #[arg(long, value_enum)]
    pub arch: Option<ArchArg>,
    /// Numerator order per G-block [default: 8 (wh), 12 (pwh)].
    #[arg(long)]
    pub n_b: Option<usize>,
    /// Denominator order per G-block [default: 8 (wh), 12 (pwh)].
    #[arg(long)]
    pub n_a: Option<usize>,
    /// Input delay of the first pwh G-block [default: 1].
    #[arg(long)]
    pub n_k: Option<usize>,
    /// Hidden neurons per MLP [default: 10].
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Parallel branches (pwh) [default: 2].
    #[arg(long)]
    pub branches: Option<usize>,
    /// Adam learning rate [default: 1e-4, or 1e-3 for quantized].
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 40000, or 4000 for quantized]
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Seeds initialization and minibatch sampling [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-channel zero-mean unit-variance scaling [default: true].
    #[arg(long, action = clap::ArgAction::Set)]
    pub normalize: Option<bool>,
    /// Noise-model numerator order (pem) [default: 2].
    #[arg(long)]
    pub noise_n_b: Option<usize>,
    /// Noise-model denominator order (pem) [default: 2].
    #[arg(long)]
    pub noise_n_a: Option<usize>,
    /// Quantizer thresholds in output units, including both outer edges
    /// [default: 13 equally spaced points on [-1, 1]].
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    /// Initial noise std for quantized training, in output units [default: 0.1].
    #[arg(long)]
    pub sigma_e_init: Option<f64>,
    /// Sequences per step [default: all].
    #[arg(long)]
    pub minibatch: Option<usize>,
    /// Fraction of the data held out when no --test file is given [default: 0.2].
    #[arg(long)]
    pub holdout: Option<f64>,
    /// Stop once the best loss improved by at most --plateau-tol (relative) over this many iterations.
    #[arg(long)]
    pub plateau_window: Option<usize>,
    /// [default: 1e-6]
    #[arg(long)]
    pub plateau_tol: Option<f64>,
    /// Log progress every this many iterations, 0 for never [default: 1000].
    #[arg(long)]
    pub log_every: Option<usize>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    /// JSON file with any of these settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Model JSON written by `train`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// CSV with t,u,y (or t,u,z, scored against bin centers).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Write the metrics JSON here as well as to stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write the simulated output as CSV (t,u,y).
    #[arg(long)]
    pub simulation: Option<PathBuf>,
    /// Write the noise-model magnitude response as CSV (needs a PEM model).
    #[arg(long)]
    pub bode: Option<PathBuf>,
    /// Ground-truth metadata from `generate`; adds the true noise response to --bode.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Bode grid points, log-spaced over [1e-3, 0.5] [default: 200].
    #[arg(long)]
    pub bode_points: Option<usize>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckArgs {
    /// JSON file with any of these settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Random filters in the G-block suites [default: 200].
    #[arg(long)]
    pub cases: Option<usize>,
    /// Sequence length of the network-level suites [default: 64].
    #[arg(long = "T")]
    #[serde(rename = "T")]
    pub samples: Option<usize>,
    /// Largest accepted relative error [default: 1e-5].
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Write the table as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Negative control: perturbs every analytic gradient before comparing.
    #[arg(long, hide = true, num_args = 0..=1, default_missing_value = "true")]
    pub corrupt_gradient: Option<bool>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dynotf: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
