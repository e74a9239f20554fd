mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use irnet_core::data::UpsampleMethod;
use irnet_core::postprocess::{CONF_THRESHOLD, NMS_IOU_THRESHOLD};

/// Infrared small-target detector: synthesize data, train, evaluate, benchmark.
#[derive(Parser, Debug)]
#[command(name = "irnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (PGM images, VOC labels, manifest).
    Synth(SynthArgs),
    /// Train a detector on a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
    /// Measure inference frames per second.
    Bench(BenchArgs),
    /// Run a checkpoint on PGM images.
    Detect(DetectArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Upsample {
    None,
    Nearest,
    Bilinear,
    Bicubic,
}

impl Upsample {
    fn method(self) -> Option<UpsampleMethod> {
        match self {
            Upsample::None => None,
            Upsample::Nearest => Some(UpsampleMethod::Nearest),
            Upsample::Bilinear => Some(UpsampleMethod::Bilinear),
            Upsample::Bicubic => Some(UpsampleMethod::Bicubic),
        }
    }
}

/// Model shape flags shared by commands that build a fresh network.
#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Model config file (key=value lines); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of detection scales; the network has exactly two (strides 8 and 16).
    #[arg(long)]
    scales: Option<usize>,
    #[arg(long)]
    dyhead_blocks: Option<usize>,
    /// Multiplier on the reference stage widths.
    #[arg(long)]
    width: Option<f64>,
    /// Bottlenecks per CSP stage.
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes.
    #[arg(long, short = 'n', default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    image_width: usize,
    #[arg(long, default_value_t = 256)]
    image_height: usize,
    #[arg(long, default_value_t = 1)]
    min_targets: usize,
    #[arg(long, default_value_t = 3)]
    max_targets: usize,
    /// Smallest target FWHM in pixels.
    #[arg(long, default_value_t = 2.0)]
    min_size: f64,
    #[arg(long, default_value_t = 6.0)]
    max_size: f64,
    /// Most likely target FWHM.
    #[arg(long, default_value_t = 3.0)]
    mode_size: f64,
    /// Write the scenes already upsampled 4x with this method.
    #[arg(long, value_enum, default_value_t = Upsample::None)]
    upsample: Upsample,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training manifest (image<TAB>label per line).
    #[arg(long)]
    manifest: PathBuf,
    /// Validation manifest; the best checkpoint follows its mAP@0.5.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = NMS_IOU_THRESHOLD)]
    nms_iou: f64,
    #[arg(long, value_enum, default_value_t = Upsample::None)]
    upsample: Upsample,
    /// Apply random flips, translations, scaling, brightness and noise.
    #[arg(long)]
    augment: bool,
    /// Evaluate mAP every N epochs (0 disables periodic evaluation).
    #[arg(long, default_value_t = 10)]
    eval_every: usize,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Re-estimate anchors by k-means over the training boxes.
    #[arg(long)]
    kmeans_anchors: bool,
    /// Comma-separated class names, in label order.
    #[arg(long, default_value = "target")]
    classes: String,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Model config the checkpoint must match.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Operating confidence for precision/recall and overlays.
    #[arg(long, default_value_t = CONF_THRESHOLD)]
    conf: f64,
    #[arg(long, default_value_t = NMS_IOU_THRESHOLD)]
    nms_iou: f64,
    #[arg(long, value_enum, default_value_t = Upsample::None)]
    upsample: Upsample,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value = "target")]
    classes: String,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Checkpoint to time; without it a fresh model is built from the model flags.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Input side in pixels.
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 30)]
    iterations: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input PGM images.
    #[arg(required = true)]
    images: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = CONF_THRESHOLD)]
    conf: f64,
    #[arg(long, default_value_t = NMS_IOU_THRESHOLD)]
    nms_iou: f64,
    #[arg(long, value_enum, default_value_t = Upsample::None)]
    upsample: Upsample,
}

/// Failure classes with stable exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<irnet_core::Error> for CliError {
    fn from(e: irnet_core::Error) -> Self {
        match e {
            irnet_core::Error::NonFinite { .. } => CliError::Numeric(e.to_string()),
            irnet_core::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("IRNET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("IRNET_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("IRNET_THREADS: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Bench(a) => commands::bench(a),
        Command::Detect(a) => commands::detect(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("irnet: {e}");
            ExitCode::from(e.code())
        }
    }
}
