//! `metatpp` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use metatpp_core::eval::{DEFAULT_RESAMPLES, DEFAULT_SAMPLES};
use metatpp_core::Variant;

use config::Overrides;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, config or input data.
    Usage(String),
    /// Failures while running: I/O on outputs, divergence, numerics.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<metatpp_core::Error> for CliError {
    fn from(e: metatpp_core::Error) -> Self {
        use metatpp_core::Error as E;
        match e {
            E::Data(_) | E::Config(_) | E::Checkpoint(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<metatpp_core::DataError> for CliError {
    fn from(e: metatpp_core::DataError) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "metatpp",
    version,
    about = "Neural temporal point processes as neural processes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate(GenerateArgs),
    /// Train one variant on a dataset split 60/20/20.
    Train(TrainArgs),
    /// Train every (lr, weight_decay) pair and keep the best on validation.
    GridSearch(GridArgs),
    /// Evaluate a checkpoint with bootstrap confidence.
    Evaluate(EvalArgs),
    /// Running-median baseline.
    Naive(NaiveArgs),
    /// Predict randomly dropped events from the remaining ones.
    Impute(ImputeArgs),
    /// Evaluate one checkpoint on several datasets.
    Drift(DriftArgs),
    /// Histogram of target and predicted event times.
    ExportPlot(PlotArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Kind {
    Sinusoidal,
    Poisson,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value = "sinusoidal")]
    pub kind: Kind,
    /// Number of sequences.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
    /// Phase shift of the sinusoidal intensity.
    #[arg(long, default_value_t = 0.0)]
    pub phase: f64,
    /// Observation window length (default 32 pi for sinusoidal, 50 for poisson).
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Rate of the Poisson generator.
    #[arg(long, default_value_t = 1.0)]
    pub rate: f64,
    /// Number of marks of the Poisson generator.
    #[arg(long, default_value_t = 1)]
    pub marks: usize,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: metatpp_core::Error| e.to_string())
}

/// Flags mirroring the config file keys.
#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// Flat key=value config file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Latent samples per training step.
    #[arg(long)]
    pub train_samples: Option<usize>,
    /// Latent samples for validation NLL.
    #[arg(long)]
    pub val_samples: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Include the survival term of the last interval in the likelihood.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub survival: Option<bool>,
}

impl ConfigArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            variant: self.variant,
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            train_samples: self.train_samples,
            val_samples: self.val_samples,
            eval_samples: None,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            survival: self.survival,
        }
    }
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args)]
pub struct GridArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Comma-separated learning rates.
    #[arg(long, value_delimiter = ',')]
    pub lrs: Vec<f64>,
    /// Comma-separated weight decays.
    #[arg(long, value_delimiter = ',')]
    pub wds: Vec<f64>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

/// Options shared by commands that run a checkpoint.
#[derive(Args)]
pub struct EvalCommon {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, help = format!("Latent samples per prediction [default: {DEFAULT_SAMPLES}]"))]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl EvalCommon {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            eval_samples: self.samples,
            seed: self.seed,
            ..Default::default()
        }
    }
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Bootstrap resamples.
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    pub bootstrap: usize,
    #[command(flatten)]
    pub common: EvalCommon,
}

#[derive(Args)]
pub struct NaiveArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    pub bootstrap: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_ratio(s: &str) -> Result<f64, String> {
    let r: f64 = s.parse().map_err(|_| format!("invalid number '{s}'"))?;
    if r > 0.0 && r < 1.0 {
        Ok(r)
    } else {
        Err(format!("drop ratio {r} must lie strictly between 0 and 1"))
    }
}

#[derive(Args)]
pub struct ImputeArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Fraction of events dropped, in (0, 1).
    #[arg(long, value_parser = parse_ratio)]
    pub drop: f64,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    pub bootstrap: usize,
    #[command(flatten)]
    pub common: EvalCommon,
}

#[derive(Args)]
pub struct DriftArgs {
    /// Datasets to evaluate, in order.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    pub bootstrap: usize,
    #[command(flatten)]
    pub common: EvalCommon,
}

fn parse_width(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(w) if w > 0.0 && w.is_finite() => Ok(w),
        _ => Err(format!("bin width '{s}' must be a positive number")),
    }
}

#[derive(Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1.0, value_parser = parse_width)]
    pub bin_width: f64,
    #[command(flatten)]
    pub common: EvalCommon,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let args: Vec<String> = std::env::args().skip(1).collect();
    let res = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a, &args),
        Command::GridSearch(a) => commands::grid_search(&a, &args),
        Command::Evaluate(a) => commands::evaluate(&a, &args),
        Command::Naive(a) => commands::naive(&a, &args),
        Command::Impute(a) => commands::impute(&a, &args),
        Command::Drift(a) => commands::drift(&a, &args),
        Command::ExportPlot(a) => commands::export_plot(&a, &args),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
