mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sclle::imageio::BrightnessMode;
use sclle::trainer::{FeatureBackendKind, SegBackendKind};

#[derive(Debug, Parser)]
#[command(name = "scl-lle", version, about = "Train, apply and evaluate a curve-based low-light enhancer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an enhancer on a dataset directory.
    Train(TrainArgs),
    /// Enhance every image of a directory with a checkpoint.
    Enhance(EnhanceArgs),
    /// Score a directory of images and write report.csv and report.json.
    Eval(EvalArgs),
    /// Gamma-darken every image of a directory.
    Darken(DarkenArgs),
    /// Derive and run one ablated training configuration per switch.
    Ablate(AblateArgs),
    /// Compare analytic loss gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Fit a NIQE pristine model to a directory of clean images.
    FitNiqe(FitNiqeArgs),
    /// Run the built-in invariant suite and the gradient check.
    Selftest(SelftestArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SegKind {
    Oracle,
    Tinycnn,
    Deeplab,
}

impl From<SegKind> for SegBackendKind {
    fn from(k: SegKind) -> Self {
        match k {
            SegKind::Oracle => SegBackendKind::Oracle,
            SegKind::Tinycnn => SegBackendKind::Tinycnn,
            SegKind::Deeplab => SegBackendKind::Deeplab,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FeatureKind {
    Reference,
    Vgg16,
}

impl From<FeatureKind> for FeatureBackendKind {
    fn from(k: FeatureKind) -> Self {
        match k {
            FeatureKind::Reference => FeatureBackendKind::Reference,
            FeatureKind::Vgg16 => FeatureBackendKind::Vgg16,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Brightness {
    ChannelMean,
    Luma601,
}

impl From<Brightness> for BrightnessMode {
    fn from(b: Brightness) -> Self {
        match b {
            Brightness::ChannelMean => BrightnessMode::ChannelMean,
            Brightness::Luma601 => BrightnessMode::Luma601,
        }
    }
}

/// Training configuration: a JSON file whose keys mirror the trainer
/// configuration, then these flags on top of it.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON training configuration; defaults apply for missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Side of the square training resolution.
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Fraction of inputs gamma-darkened per epoch.
    #[arg(long)]
    pub augment_fraction: Option<f64>,
    #[arg(long, value_enum)]
    pub segmenter: Option<SegKind>,
    #[arg(long)]
    pub segmenter_weights: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub features: Option<FeatureKind>,
    #[arg(long)]
    pub features_weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub data_root: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "in")]
    pub in_dir: PathBuf,
    #[arg(long = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Comma-separated subset of psnr, ssim, niqe, miou.
    #[arg(long)]
    pub metrics: String,
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference images, required by psnr and ssim.
    #[arg(long = "ref")]
    pub ref_dir: Option<PathBuf>,
    /// Ground-truth label maps, required by miou.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Pristine model from `fit-niqe`, required by niqe.
    #[arg(long)]
    pub niqe_model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "tinycnn")]
    pub segmenter: SegKind,
    #[arg(long)]
    pub segmenter_weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub segmenter_seed: u64,
    #[arg(long, default_value_t = sclle::segmenter::DEFAULT_NUM_CLASSES)]
    pub num_classes: usize,
    #[arg(long, value_enum, default_value = "channel-mean")]
    pub brightness: Brightness,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DarkenArgs {
    /// Exponent applied to every channel; 1 copies files unchanged.
    #[arg(long)]
    pub gamma: f64,
    #[arg(long = "in")]
    pub in_dir: PathBuf,
    #[arg(long = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub data_root: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Comma-separated switches: no-lc, no-lsc, no-lfr, no-neg, no-over, no-under.
    #[arg(long, value_delimiter = ',', default_value = "no-lc,no-lsc,no-lfr,no-neg,no-over,no-under")]
    pub switches: Vec<String>,
    /// Also train the unmodified configuration under `full/`.
    #[arg(long)]
    pub baseline: bool,
    /// Write the derived configurations and manifests without training.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "tinycnn")]
    pub segmenter: SegKind,
    /// Directory for gradcheck.json and the run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitNiqeArgs {
    #[arg(long = "in")]
    pub in_dir: PathBuf,
    /// Directory receiving niqe_model.scla and the run manifest.
    #[arg(long = "out")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = sclle::metrics::NIQE_PATCH_SIZE)]
    pub patch_size: usize,
    #[arg(long, default_value_t = sclle::metrics::NIQE_SHARPNESS_THRESHOLD)]
    pub sharpness_threshold: f64,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Also write the full report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(f) = commands::configure_threads() {
        return f.report();
    }
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Enhance(a) => commands::enhance(a),
        Command::Eval(a) => commands::eval(a),
        Command::Darken(a) => commands::darken(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::FitNiqe(a) => commands::fit_niqe(a),
        Command::Selftest(a) => commands::selftest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
