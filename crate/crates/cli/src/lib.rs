//! `hemoseg` command line: synthesis, fold splitting, training, prediction,
//! ensembling, evaluation and reporting. Subcommands exchange data only
//! through files under their `--out` directories.

mod commands;
pub mod config;
mod run_manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use hemoseg::preprocessing::StrategyKind;

pub use config::PipelineConfig;
pub use run_manifest::RunManifest;

/// Exit code for bad arguments or configuration.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for failures while running.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<hemoseg::Error> for CliError {
    fn from(e: hemoseg::Error) -> Self {
        match e {
            hemoseg::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "hemoseg",
    version,
    about = "Slice-wise hemorrhage segmentation on head CT"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic image/label pairs and a manifest.
    Synth(SynthArgs),
    /// Assign manifest cases to k folds.
    Split(SplitArgs),
    /// Train one fold.
    Train(TrainArgs),
    /// Train every fold for every configured input strategy.
    CrossValidate(CrossValidateArgs),
    /// Predict probability maps and masks with one checkpoint.
    Predict(PredictArgs),
    /// Mean-ensemble several checkpoints into one probability map and mask per case.
    Ensemble(EnsembleArgs),
    /// Score predicted masks against ground truth.
    Evaluate(EvaluateArgs),
    /// Summarise cross-validation and evaluation reports.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Pipeline config (JSON, or YAML with a .yaml/.yml extension).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Threads for per-case work.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub cases: usize,
    /// Seed of the first case; case `i` uses `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Volume shape as H,W,S.
    #[arg(long, value_delimiter = ',')]
    pub shape: Option<Vec<usize>>,
    #[arg(long)]
    pub lesions: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Flags that override the `train` section of the config.
#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub init_filters: Option<usize>,
    /// Square training patch size.
    #[arg(long)]
    pub crop_size: Option<usize>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// 1-based epochs that keep an extra checkpoint.
    #[arg(long, value_delimiter = ',')]
    pub snapshot_epochs: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum StrategyArg {
    AdjacentSlices,
    MultiWindow,
    Combined,
}

impl From<StrategyArg> for StrategyKind {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::AdjacentSlices => StrategyKind::AdjacentSlices,
            StrategyArg::MultiWindow => StrategyKind::MultiWindow,
            StrategyArg::Combined => StrategyKind::Combined,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainOverrides,
    /// Fold assignment from `split`; derived from the config when absent.
    #[arg(long)]
    pub folds: Option<PathBuf>,
    #[arg(long)]
    pub fold: usize,
}

#[derive(Debug, Args)]
pub struct CrossValidateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainOverrides,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CaseSelection {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Cases to process (all manifest cases when omitted).
    #[arg(long = "case", value_delimiter = ',')]
    pub cases: Vec<String>,
    /// Individual NIfTI images instead of manifest cases.
    #[arg(long = "image", value_delimiter = ',')]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub select: CaseSelection,
    #[arg(long)]
    pub threshold: Option<f32>,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    #[command(flatten)]
    pub common: Common,
    /// Member checkpoints, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[command(flatten)]
    pub select: CaseSelection,
    #[arg(long)]
    pub threshold: Option<f32>,
    /// Probability-map cache directory.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory of predicted masks (`<case>.nii.gz` or `<case>_mask.nii.gz`).
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth masks named `<case>.nii[.gz]`.
    #[arg(long)]
    pub gt: PathBuf,
    /// NSD tolerance in mm.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub hd_percentile: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// `cv_report.json` or `metrics_report.json` files.
    #[arg(long = "input", value_delimiter = ',', required = true)]
    pub inputs: Vec<PathBuf>,
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit code; failures print one diagnostic line to standard error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::run(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            EXIT_RUNTIME
        }
    }
}
