use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sst_core::models::{self, ModelDescriptor};

mod eval;
mod selfcheck;
mod serve;
mod train;
mod video;
mod view;

/// Exit status of the `sst` binary.
pub const EXIT_ENVIRONMENT: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Failure::new(EXIT_CONFIG, message)
    }
}

impl From<sst_core::Error> for Failure {
    fn from(err: sst_core::Error) -> Self {
        use sst_core::Error::*;
        let code = match &err {
            Argument(_) | Config(_) | Dimension(_) | Untrained => EXIT_CONFIG,
            Format(_) | MissingGroundTruth(_) | Load(_) | Image(_) => EXIT_DATA,
            Io { .. } | Numeric(_) | Training(_) => EXIT_ENVIRONMENT,
        };
        Failure::new(code, err.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

#[derive(Parser)]
#[command(name = "sst", version, about = "Street segmentation with patch-based neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test which components work in this environment
    Selfcheck(SelfcheckArgs),
    /// Train a network on a KITTI-layout dataset
    Train(TrainArgs),
    /// Evaluate a trained network on a photograph or dataset and render overlays
    Eval(EvalArgs),
    /// Show everything about a model
    View(ViewArgs),
    /// Render overlays for a directory of frames
    Video(VideoArgs),
    /// Serve images and overlays over HTTP
    Serve(ServeArgs),
}

#[derive(Args, Clone, Debug)]
pub struct OutArg {
    /// Output directory [default: $SST_HOME/<command>]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct SelfcheckArgs {
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Clone, Debug)]
pub struct ModelArgs {
    /// Model descriptor file
    #[arg(long, conflicts_with = "builtin")]
    pub model: Option<PathBuf>,
    /// Built-in topology
    #[arg(long, value_parser = ["classification", "regression"])]
    pub builtin: Option<String>,
}

#[derive(Args, Clone, Debug)]
pub struct TrainArgs {
    /// Dataset root (KITTI layout)
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Spacing of training patch centers [default: 10 for center classifiers, the patch size for regressors]
    #[arg(long)]
    pub train_stride: Option<usize>,
    /// Must match the model's patch size when given
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seed for the split, the initialization and the patch order
    #[arg(long)]
    pub seed: Option<u64>,
    /// Downscale images by two before training
    #[arg(long)]
    pub half_size: bool,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Clone, Debug)]
pub struct EvalArgs {
    /// Trained model descriptor
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset root; evaluates the test ids of the model's split manifest when present
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    pub dataset: Option<PathBuf>,
    /// A single photograph
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Evaluate every image of the dataset, ignoring the split manifest
    #[arg(long)]
    pub all: bool,
    /// Spacing of evaluated patch centers [default: 10 for center classifiers, the patch size for regressors]
    #[arg(long)]
    pub eval_stride: Option<usize>,
    #[arg(long)]
    pub half_size: bool,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Clone, Debug)]
pub struct ViewArgs {
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Clone, Debug)]
pub struct VideoArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of frames, processed in lexicographic order
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub eval_stride: Option<usize>,
    #[arg(long)]
    pub half_size: bool,
    /// Frame rate recorded in the manifest
    #[arg(long, default_value_t = 10)]
    pub fps: u32,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Clone, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Image root: a KITTI-layout dataset or a directory of photographs
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Stride used when a request gives none
    #[arg(long)]
    pub eval_stride: Option<usize>,
    #[arg(long)]
    pub half_size: bool,
    /// Overlay cache directory [default: $SST_HOME/cache]
    #[command(flatten)]
    pub out: OutArg,
}

/// Root of default output directories: `$SST_HOME` or `./sst-output`.
pub fn sst_home() -> PathBuf {
    std::env::var_os("SST_HOME").map_or_else(|| PathBuf::from("sst-output"), PathBuf::from)
}

/// Creates and returns the output directory of a command.
pub fn output_dir(out: &OutArg, command: &str) -> CliResult<PathBuf> {
    let dir = out.out.clone().unwrap_or_else(|| sst_home().join(command));
    std::fs::create_dir_all(&dir)
        .map_err(|e| Failure::new(EXIT_ENVIRONMENT, format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

pub fn resolve_model(args: &ModelArgs) -> CliResult<ModelDescriptor> {
    match (&args.model, &args.builtin) {
        (Some(path), None) => load_model(path),
        (None, Some(name)) => Ok(models::builtin(name)?),
        _ => Err(Failure::config("give exactly one of --model and --builtin")),
    }
}

/// Loads a descriptor; a missing file is an environment failure.
pub fn load_model(path: &Path) -> CliResult<ModelDescriptor> {
    if !path.is_file() {
        return Err(Failure::new(EXIT_ENVIRONMENT, format!("model file {} not found", path.display())));
    }
    Ok(ModelDescriptor::load(path)?)
}

/// Default evaluation and training stride of a model.
pub fn default_stride(model: &ModelDescriptor) -> usize {
    if model.fully {
        model.patch_size
    } else {
        10.min(model.patch_size)
    }
}

pub fn check_stride(model: &ModelDescriptor, stride: usize) -> CliResult<usize> {
    if stride == 0 || stride > model.patch_size {
        return Err(Failure::config(format!(
            "stride must lie in [1, {}], got {stride}",
            model.patch_size
        )));
    }
    Ok(stride)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n")
        .map_err(|e| Failure::new(EXIT_ENVIRONMENT, format!("cannot write {}: {e}", path.display())))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Selfcheck(args) => selfcheck::run(&args),
        Command::Train(args) => train::run(&args),
        Command::Eval(args) => eval::run(&args),
        Command::View(args) => view::run(&args),
        Command::Video(args) => video::run(&args),
        Command::Serve(args) => serve::run(&args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
