//! Command-line surface. Exit codes: 0 success, 1 usage or config error,
//! 2 data or contract error, 3 refinement backend or network error.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::ffcl::FfclError;
use crate::metrics::MetricsError;
use crate::model::{CheckpointError, ModelError};
use crate::patchflow::{PatchError, Split};
use crate::phantom::PhantomError;
use crate::raster::RasterError;
use crate::refinement::{Backend, RefineError, ENDPOINT_ENV};

pub use commands::{ImagePredictions, PatchPrediction, PredictionFile};
pub use config::{PredictConfig, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Backend(_) => 3,
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(
    std::io::Error,
    serde_json::Error,
    FfclError,
    MetricsError,
    CheckpointError,
    ModelError,
    PatchError,
    PhantomError,
    RasterError
);

impl From<RefineError> for CliError {
    fn from(e: RefineError) -> Self {
        match e {
            RefineError::Backend { .. } => CliError::Backend(e.to_string()),
            RefineError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "margin", version, about = "Patch classification, coarse masks and mask refinement for specimen radiographs")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// JSON run config; flags and --set override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config field, e.g. `--set train.epochs=3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads for per-image and per-patch parallel work.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthetic phantom datasets.
    Phantom {
        #[command(subcommand)]
        action: PhantomCmd,
    },
    /// Patch extraction.
    Patches {
        #[command(subcommand)]
        action: PatchesCmd,
    },
    /// One training stage; stages chain through checkpoints.
    Train(TrainArgs),
    /// Per-patch probabilities and labels for one split.
    Predict(PredictArgs),
    /// Coarse masks from patch predictions.
    Reconstruct(ReconstructArgs),
    /// Box and mask prompted refinement of coarse masks.
    Refine(RefineArgs),
    /// Mask metrics, or patch metrics with `eval patches`.
    Eval(EvalArgs),
    /// Loss ablations.
    Ablate {
        #[command(subcommand)]
        action: AblateCmd,
    },
}

#[derive(Subcommand, Debug)]
pub enum PhantomCmd {
    /// Writes images, label masks and a manifest.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
pub enum PatchesCmd {
    /// Extracts labelled windows of one split into a patch cache.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Local,
    Global,
    Finetune,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(value_enum)]
    pub stage: StageArg,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Starting checkpoint; a fresh model is built when absent.
    #[arg(long = "in", value_name = "CKPT")]
    pub input: Option<PathBuf>,
    #[arg(long, value_name = "CKPT")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    pub split: Split,
    /// Predict every window on this grid instead of the labelled windows.
    #[arg(long)]
    pub grid_stride: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Morphological,
    Remote,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    /// Bridge URL; the environment variable takes precedence.
    #[arg(long, env = ENDPOINT_ENV)]
    pub endpoint: Option<String>,
    /// Directory of coarse mask PNGs.
    #[arg(long)]
    pub masks: PathBuf,
    /// Directory holding `<id>.png` for every mask.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_conflicts_with_subcommands = true)]
pub struct EvalArgs {
    #[command(subcommand)]
    pub patches: Option<EvalCmd>,
    /// Directory of predicted binary masks.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Directory of ground-truth label masks with matching file names.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Truth labels counted as foreground.
    #[arg(long, value_delimiter = ',', default_value = "3")]
    pub labels: Vec<u8>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum EvalCmd {
    /// Classification metrics and ROC of a predictions file.
    Patches {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        roc: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum AblateCmd {
    /// Fine-tunes once per (alpha, gamma) and writes one ROC CSV each.
    Focal {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        gammas: Vec<f64>,
        /// Shared starting checkpoint, e.g. a pretrained one.
        #[arg(long = "in", value_name = "CKPT")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse()
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Morphological => Backend::Morphological,
            BackendArg::Remote => Backend::Remote,
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(j) = cli.global.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be >= 1");
            return 1;
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
