mod commands;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spgp::{ModelKind, Scenario};

use crate::exit::CliError;

/// Sparse pseudo-input Gaussian process regression.
#[derive(Debug, Parser)]
#[command(name = "spgp", version, about)]
struct Cli {
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model to a CSV file and save it.
    Train(TrainArgs),
    /// Predict with a saved model.
    Predict(PredictArgs),
    /// Score models on held-out data.
    Evaluate(EvaluateArgs),
    /// Write a synthetic dataset.
    Sample(SampleArgs),
    /// Compare analytic and finite-difference gradients on a random instance.
    Gradcheck(GradcheckArgs),
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: spgp::Error| e.to_string())
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e: spgp::Error| e.to_string())
}

/// Model shape and optimizer flags shared by `train` and `evaluate`.
#[derive(Debug, Args)]
struct FitArgs {
    /// Number of pseudo-inputs (sparse variants).
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    m: Option<u32>,
    /// Projected dimension (spgp-dr and spgp-dr-hs only).
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    g: Option<u32>,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(1..))]
    restarts: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Iteration limit per restart.
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u32).range(1..))]
    max_iter: u32,
    /// Model log(y + a) instead of y.
    #[arg(long, value_name = "A", allow_negative_numbers = true)]
    log_target_offset: Option<f64>,
    /// Train on raw inputs and targets instead of standardised ones.
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "y")]
    target_col: String,
    #[arg(long, value_parser = parse_kind)]
    variant: ModelKind,
    #[command(flatten)]
    fit: FitArgs,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Run log to append to [default: <out>.log].
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Score a saved model on --test.
    #[arg(long, conflicts_with_all = ["variant", "train", "data"])]
    model: Option<PathBuf>,
    /// Variants to train and score, comma separated.
    #[arg(long, value_parser = parse_kind, value_delimiter = ',')]
    variant: Vec<ModelKind>,
    #[arg(long, requires = "test", conflicts_with = "data")]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Single file to split into train and test sets.
    #[arg(long, conflicts_with = "test")]
    data: Option<PathBuf>,
    /// Fraction of --data used for training.
    #[arg(long, conflicts_with = "holdout")]
    split: Option<f64>,
    /// Number of --data rows held out for testing.
    #[arg(long)]
    holdout: Option<usize>,
    /// Random splits of --data to average over.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    trials: u32,
    /// Target column [default: the model's target, or y].
    #[arg(long)]
    target_col: Option<String>,
    #[command(flatten)]
    fit: FitArgs,
    /// Report file [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// sampled, smooth-varying or wide.
    #[arg(long, value_parser = parse_scenario)]
    scenario: Scenario,
    /// Input dimension of the wide scenario.
    #[arg(long, default_value_t = 20)]
    dim: usize,
    /// Multiplies the noise level of the smooth-varying and wide scenarios.
    #[arg(long, default_value_t = 1.0)]
    noise_scale: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, value_parser = parse_kind)]
    variant: ModelKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 25, value_parser = clap::value_parser!(u32).range(1..))]
    n: u32,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    m: u32,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
    d: u32,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(1..))]
    g: u32,
    /// Central-difference step in log/unconstrained coordinates.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Perturbs one analytic gradient coordinate (for testing the checker).
    #[arg(long, hide = true)]
    inject_fault: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Sample(a) => commands::sample(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError { code, msg }) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
