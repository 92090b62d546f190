//! `wxadapt` command-line front end. Each subcommand writes its outputs and a
//! `run.json` provenance record under the directory it is given.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;
use wxadapt_core::CoreError;

mod commands;
pub mod provenance;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Seed used when `--seed` is absent.
pub const SEED_ENV: &str = "WXADAPT_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    /// A check ran to completion and reported failures.
    #[error("{0}")]
    Check(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn io(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            msg: err.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Check(_) => EXIT_USAGE,
            CliError::Io { .. } => EXIT_IO,
            CliError::Core(CoreError::Diverged { .. }) => EXIT_DIVERGED,
            CliError::Core(CoreError::Io { .. } | CoreError::Format(_)) => EXIT_IO,
            CliError::Core(_) => EXIT_USAGE,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "wxadapt", version, about = "Weather-prior domain-adaptive detection on synthetic imagery")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Only errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a clean-source / degraded-target dataset.
    Synth(SynthArgs),
    /// Estimate weather priors for an image or a dataset split.
    Prior(PriorArgs),
    /// Train a detector.
    Train(TrainArgs),
    /// Evaluate a trained run on the validation split.
    Eval(EvalArgs),
    /// Train every ablation mode over several seeds, or sweep lambda.
    Ablate(AblateArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Export prior heatmaps and the loss curve of a run.
    Export(ExportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum WeatherArg {
    Haze,
    Rain,
    Snow,
}

impl From<WeatherArg> for wxadapt_core::weathersim::Weather {
    fn from(w: WeatherArg) -> Self {
        use wxadapt_core::weathersim::Weather;
        match w {
            WeatherArg::Haze => Weather::Haze,
            WeatherArg::Rain => Weather::Rain,
            WeatherArg::Snow => Weather::Snow,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Haze,
    Rain,
    Snow,
    Generic,
}

impl From<KindArg> for wxadapt_core::priors::PriorKind {
    fn from(k: KindArg) -> Self {
        use wxadapt_core::priors::PriorKind;
        match k {
            KindArg::Haze => PriorKind::Haze,
            KindArg::Rain => PriorKind::Rain,
            KindArg::Snow => PriorKind::Snow,
            KindArg::Generic => PriorKind::Generic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    TrainSource,
    TrainTarget,
    ValTarget,
}

impl From<SplitArg> for wxadapt_core::weathersim::Split {
    fn from(s: SplitArg) -> Self {
        use wxadapt_core::weathersim::Split;
        match s {
            SplitArg::TrainSource => Split::TrainSource,
            SplitArg::TrainTarget => Split::TrainTarget,
            SplitArg::ValTarget => Split::ValTarget,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML synthesis config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub weather: Option<WeatherArg>,
    /// Samples in each of the three splits.
    #[arg(long)]
    pub n: Option<usize>,
    /// Rain streak angle range in degrees.
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"], allow_negative_numbers = true)]
    pub angle_range: Option<Vec<f32>>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PriorArgs {
    /// A PNG image, or a dataset directory / manifest.
    pub input: PathBuf,
    /// Prior kind; defaults to the dataset weather, or haze for an image.
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    /// Split to process when the input is a dataset.
    #[arg(long, value_enum, default_value = "train-target")]
    pub split: SplitArg,
    /// Process at most this many samples of the split.
    #[arg(long)]
    pub limit: Option<usize>,
    /// TOML estimator config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub omega: Option<f32>,
    #[arg(long)]
    pub patch: Option<usize>,
    /// Skip guided-filter refinement of the transmission.
    #[arg(long)]
    pub no_refine: bool,
    /// Report Pearson r against ground truth.
    #[arg(long)]
    pub compare_gt: bool,
    /// Ground-truth PRI1 file for a single image.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// TOML training config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// frcnn, d5, d5r5, p5r5, p45r45, d45 or p45.
    #[arg(long)]
    pub mode: Option<String>,
    /// Weight of the recovery-block regularizer.
    #[arg(long = "lambda")]
    pub lambda: Option<f32>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    pub run: PathBuf,
    /// Dataset directory; defaults to the one recorded by `train`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; defaults to `<run>/eval`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV to append to; defaults to `<out>/evals.csv`.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of seeds, counted up from the base seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    /// Concurrent training runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Comma-separated modes; defaults to the five-row ladder.
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<String>>,
    /// Comma-separated lambda values; runs a sweep instead of the ladder.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f32>>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// Perturb the backward pass of one op (test fixture).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
    /// Directory for the report and run record.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Run directory written by `train`.
    pub run: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation samples to export.
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Resolves the seed: flag, then `WXADAPT_SEED`, then `fallback`.
pub fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(fallback),
    }
}

pub fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    match cli.command {
        Command::Synth(a) => commands::synth(a, argv),
        Command::Prior(a) => commands::prior(a, argv),
        Command::Train(a) => commands::train(a, argv),
        Command::Eval(a) => commands::eval(a, argv),
        Command::Ablate(a) => commands::ablate(a, argv),
        Command::Gradcheck(a) => commands::gradcheck(a, argv),
        Command::Export(a) => commands::export(a, argv),
    }
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        (false, 2) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .try_init();
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose, cli.quiet);
    match run(cli, argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
