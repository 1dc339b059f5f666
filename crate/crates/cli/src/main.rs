mod commands;
mod error;
mod out;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "dmsl", version, about = "Multi-spectral facial landmark workflow")]
pub struct Cli {
    /// Directory for all artifacts.
    #[arg(long, global = true, default_value = "dmsl-out")]
    pub out: PathBuf,
    /// Seed for every random choice (overrides the seed in --hp files).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite existing artifacts.
    #[arg(long, global = true)]
    pub force: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pair VIS/TH files under a directory into a manifest.
    Ingest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = dmsl_core::dataset::DEFAULT_NAME_PATTERN)]
        name_pattern: String,
    },
    /// Generate a synthetic paired dataset with exact annotations.
    Synth {
        #[arg(long)]
        subjects: u32,
        #[arg(long, default_value_t = 160)]
        width: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        /// Comma-separated variation codes to render (default: all 21).
        #[arg(long, value_delimiter = ',')]
        variations: Vec<dmsl_core::Variation>,
    },
    /// Crop, resize and mirror annotated records into network-ready pairs.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        /// Skip the mirrored copies.
        #[arg(long)]
        no_mirror: bool,
    },
    /// Auto-annotate VIS images and transfer landmarks to TH.
    Annotate {
        #[arg(long)]
        root: PathBuf,
        /// `template` or `cmd:PROGRAM [ARGS]`.
        #[arg(long, default_value = "template")]
        detector: String,
        /// Manifest to annotate (default: ROOT/manifest.jsonl, or a scan of ROOT).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Also import the result into this record store.
        #[arg(long)]
        db: Option<PathBuf>,
    },
    /// Run the annotation HTTP API.
    Serve {
        #[arg(long, default_value_t = 8731)]
        port: u16,
        #[arg(long)]
        db: PathBuf,
        /// Import these records into the store before serving.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory image paths are relative to (default: the manifest's).
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, default_value = "template")]
        detector: String,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Write target masks as PNGs for inspection.
    Masks {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        kind: MaskKind,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train one fold.
    Train(TrainArgs),
    /// Evaluate checkpoints or stored predictions.
    Eval {
        #[arg(long, required_unless_present = "predictions")]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Evaluate only this fold's test subjects.
        #[arg(long)]
        fold: Option<usize>,
        /// JSON Lines of {record_id, spectrum, landmarks} to score instead
        /// of running a model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[command(flatten)]
        metric: MetricArgs,
    },
    /// Ten-fold cross-validation.
    Cv {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        hp: Option<PathBuf>,
        /// Folds trained in parallel worker processes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        metric: MetricArgs,
    },
    /// One cross-validation fold (used by `cv --jobs`).
    #[command(hide = true)]
    CvFold {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        hp: Option<PathBuf>,
        #[arg(long)]
        fold: usize,
        #[command(flatten)]
        metric: MetricArgs,
    },
    /// Detect landmarks on one image.
    Infer {
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        spectrum: dmsl_core::Spectrum,
    },
}

#[derive(Args, Debug, Clone)]
pub struct MetricArgs {
    /// Use the norm of the whole coordinate difference vector.
    #[arg(long)]
    pub nme_vector_norm: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub fold: usize,
    #[arg(long, value_enum, default_value = "all")]
    pub stage: StageSel,
    #[arg(long, value_enum, default_value = "all")]
    pub model: ModelSel,
    #[arg(long)]
    pub hp: Option<PathBuf>,
    /// Stage-1 checkpoints to continue from (default: OUT/stage1).
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Cut landmark-model inputs with predicted boxes (needs the boundary
    /// model's checkpoint).
    #[arg(long)]
    pub train_with_predicted_boxes: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Landmark,
    Boundary,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSel {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSel {
    Boundary,
    Landmark,
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn report(e: &CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.exit_code() as u8)
}
