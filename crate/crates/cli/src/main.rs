//! Command line front end: synthetic data generation, training, whole-cloud
//! upsampling, metric evaluation, and self-diagnostics.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

mod checks;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use puflow::diffcore::DiffError;
use puflow::geometry::GeometryError;
use puflow::iodata::IoError;
use puflow::losses::LossError;
use puflow::model::ModelError;
use puflow::pipeline::PipelineError;
use puflow::training::TrainError;

/// Failure category; the variant picks the process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DiffError> for CliError {
    fn from(e: DiffError) -> Self {
        match e {
            DiffError::ShapeMismatch { .. } | DiffError::BadIndex { .. } => {
                CliError::Data(e.to_string())
            }
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::NonFiniteCost { .. } => CliError::Numeric(e.to_string()),
            LossError::Diff(d) => d.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config { .. } => CliError::Data(e.to_string()),
            ModelError::Geometry(g) => g.into(),
            ModelError::Diff(d) => d.into(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Loss(l) => l.into(),
            TrainError::Diff(d) => d.into(),
            TrainError::Geometry(g) => g.into(),
            TrainError::Io(i) => i.into(),
            TrainError::Data { .. } => CliError::Data(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config { .. } => CliError::Data(e.to_string()),
            PipelineError::Geometry(g) => g.into(),
            // Patch failures are usually config/data mismatches; numeric
            // failures inside a patch carry their own wording.
            PipelineError::Patch { .. } => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "puflow",
    version,
    about = "Point cloud upsampling via an invertible conditional flow"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SampleMethod {
    /// Area-uniform random surface samples.
    Uniform,
    /// Dart throwing with a minimum-distance guarantee.
    Poisson,
}

#[derive(Args)]
pub struct SampleArgs {
    /// Built-in shape: sphere, torus, cube, bumpy-sphere, saddle.
    #[arg(long, conflicts_with = "mesh")]
    pub shape: Option<String>,
    /// Triangle mesh file (.off or ascii .ply) to sample instead.
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    /// Number of points to draw.
    #[arg(long)]
    pub count: usize,
    /// Sampling method.
    #[arg(long, value_enum, default_value = "uniform")]
    pub method: SampleMethod,
    /// Tessellation density for built-in shapes.
    #[arg(long, default_value_t = 24)]
    pub resolution: usize,
    /// Output point file (.xyz or .ply).
    #[arg(long)]
    pub out: PathBuf,
    /// RNG seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Directory of <stem>.sparse.xyz / <stem>.dense.xyz cloud pairs.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Where to write the best checkpoint.
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    /// Loss log file [default: the checkpoint path with extension .log].
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Optional "key = value" config file; explicit flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training epochs; 0 writes a freshly initialized checkpoint [default: 30].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Patch pairs per parameter update [default: 32].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate [default: 1e-3].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Reconstruction loss weight [default: 1e-4].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Prior loss weight [default: 5e-2].
    #[arg(long)]
    pub beta: Option<f64>,
    /// Global gradient norm clip [default: 5.0].
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Fraction of pairs held out for validation [default: 0.1].
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Sigma of the sparse-patch jitter augmentation [default: 0.005].
    #[arg(long)]
    pub jitter_sigma: Option<f64>,
    /// Apply a shared random rotation to each pair [default: true].
    #[arg(long)]
    pub augment_rotate: Option<bool>,
    /// Apply Gaussian jitter to sparse patches [default: true].
    #[arg(long)]
    pub augment_jitter: Option<bool>,
    /// Total patch pairs to cut from the data [default: 2000].
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Points per sparse patch [default: 64].
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Upsampling factor [default: 4].
    #[arg(long)]
    pub ratio: Option<usize>,
    /// Neighborhood size for feature extraction and interpolation [default: 16].
    #[arg(long)]
    pub knn: Option<usize>,
    /// Flow depth in blocks [default: 8].
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Conditioning feature width [default: 32].
    #[arg(long)]
    pub cond_width: Option<usize>,
    /// Hidden width of the per-block nets [default: 64].
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Model variant: full, no_embedding, coordinate_interpolation [default: full].
    #[arg(long)]
    pub variant: Option<String>,
    /// RNG seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct UpsampleArgs {
    /// Input point file (.xyz, .ply, or .off vertices).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Expected upsampling factor; must match the checkpoint if given.
    #[arg(long)]
    pub ratio: Option<usize>,
    /// Points per patch [default: the checkpoint's training patch size, else 64].
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Patch coverage factor.
    #[arg(long, default_value_t = 3.0)]
    pub coverage: f64,
    /// Worker threads for the patch map.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// RNG seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output point file (.xyz or .ply).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Predicted point file.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth point file.
    #[arg(long)]
    pub gt: PathBuf,
    /// Optional reference mesh for the point-to-surface metric.
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    /// Optional report file; metrics always print to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CheckArgs {
    /// Checkpoint to diagnose [default: a fresh default-config model].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// RNG seed for the probe data.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a point cloud from a built-in shape or a mesh file.
    Sample(SampleArgs),
    /// Train a model on cloud pairs and write the best checkpoint.
    Train(TrainArgs),
    /// Upsample a point cloud through a trained checkpoint.
    Upsample(UpsampleArgs),
    /// Compare a predicted cloud against ground truth.
    Eval(EvalArgs),
    /// Run the numeric invariant suite and report pass/fail.
    Check(CheckArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sample(args) => commands::sample(&args),
        Command::Train(args) => commands::train(&args),
        Command::Upsample(args) => commands::upsample(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Check(args) => checks::run(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
