//! Command-line front end: one binary, one subcommand per pipeline stage.

pub mod commands;
pub mod config;
pub mod error;
pub mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "ssmecg", version, about = "Self-supervised ECG representations with state-space models")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; overrides the config file and SSMECG_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log to the run directory only, not to stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a dataset directory from single-column CSV exports.
    Import(ImportArgs),
    /// Quality gate, filtering, normalization and windowing.
    Preprocess(PreprocessArgs),
    /// Write augmented copies of a few windows with their targets.
    AugmentPreview(AugmentPreviewArgs),
    /// Self-supervised transform-prediction training.
    Pretrain(PretrainArgs),
    /// Cross-validated downstream training.
    Finetune(FinetuneArgs),
    /// Metrics from fine-tuning predictions.
    Evaluate(EvaluateArgs),
    /// Export backbone embeddings of every window.
    Embed(EmbedArgs),
    /// Distance analysis of exported embeddings.
    Distances(DistancesArgs),
    /// Generate a labelled synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// One sample per line; repeat for several records.
    #[arg(long = "from-csv", required = true)]
    pub from_csv: Vec<PathBuf>,
    #[arg(long)]
    pub subject: String,
    #[arg(long)]
    pub rate: f64,
    #[arg(long, default_value = "imported")]
    pub dataset_name: String,
    #[arg(long)]
    pub session: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Dataset directory (or its manifest.jsonl).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AugmentPreviewArgs {
    /// Preprocessed directory.
    #[arg(long)]
    pub windows: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Preprocessed directory.
    #[arg(long, alias = "manifest")]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Preprocessed directory.
    #[arg(long, alias = "manifest")]
    pub data: PathBuf,
    /// Pretrained checkpoint; omitted means a randomly initialised backbone.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    /// full | projector
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// subject-agnostic | mixed-subject
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Fine-tuning output directory.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Fails unless the predictions are for this task.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Preprocessed directory.
    #[arg(long, alias = "manifest")]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DistancesArgs {
    /// Directory written by `embed`.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub windows_per_subject: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match commands::run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            1
        }
    }
}
