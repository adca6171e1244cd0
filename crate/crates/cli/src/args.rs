use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "percsim", version, about = "Learned image codec, perceptual metric and loss-network experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON config for the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print errors as JSON on stderr.
    #[arg(long, global = true)]
    pub json_errors: bool,
    /// Root that relative dataset and manifest paths resolve against.
    #[arg(long, global = true, env = "PERCSIM_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one phase of the codec (classifier pre-training, joint, or hyperprior fine-tuning).
    Train(TrainArgs),
    /// Fit the metric's channel weights on 2AFC judgments.
    Calibrate(CalibrateArgs),
    /// CPIPS distance between two images.
    Distance(DistanceArgs),
    /// Score metrics against 2AFC judgments.
    #[command(name = "eval-2afc")]
    Eval2afc(Eval2afcArgs),
    /// Rate-distortion points of trained codecs over an image set.
    RdCurve(RdCurveArgs),
    /// Bjontegaard deltas between two curves.
    Bd(BdArgs),
    /// Encode a PNG to a CPIP stream.
    Compress(CompressArgs),
    /// Decode a CPIP stream to a PNG.
    Decompress(DecompressArgs),
    /// Style transfer by direct image optimization.
    Style(StyleArgs),
    /// Train a 4x super-resolution generator with the perceptual loss.
    SrTrain(SrTrainArgs),
    /// Upscale an image with a trained generator.
    SrInfer(SrInferArgs),
    /// Run an experiment plan.
    RunPlan(RunPlanArgs),
    /// Convert a results table between formats.
    ExportTables(ExportTablesArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub phase: Option<String>,
    /// Starting checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub quality: Option<u8>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Codec checkpoint whose analysis transform provides the taps.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "twoafc_csv")]
    pub kind: String,
}

#[derive(Debug, Args)]
pub struct DistanceArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct Eval2afcArgs {
    /// Codec checkpoints to score with CPIPS; repeatable.
    #[arg(long)]
    pub model: Vec<PathBuf>,
    /// Reference metrics to score as well: psnr, ssim.
    #[arg(long)]
    pub baseline: Vec<String>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "twoafc_csv")]
    pub kind: String,
}

#[derive(Debug, Args)]
pub struct RdCurveArgs {
    /// Codec checkpoints, one per quality point.
    #[arg(long, required = true)]
    pub model: Vec<PathBuf>,
    /// Directory of PNG images.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, default_value = "learned")]
    pub label: String,
}

#[derive(Debug, Args)]
pub struct BdArgs {
    /// RD CSV (`label,bpp,psnr`) holding the curves.
    #[arg(long)]
    pub curves: PathBuf,
    #[arg(long)]
    pub anchor: String,
    #[arg(long)]
    pub test: String,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub quality: u8,
}

#[derive(Debug, Args)]
pub struct DecompressArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct StyleArgs {
    #[arg(long)]
    pub content: PathBuf,
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct SrTrainArgs {}

#[derive(Debug, Args)]
pub struct SrInferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunPlanArgs {
    /// Plan file, or `cross-quality` for the canned study (inputs from --config).
    pub plan: String,
}

#[derive(Debug, Args)]
pub struct ExportTablesArgs {
    /// Table files (json, txt or csv by extension).
    #[arg(long = "in", required = true)]
    pub input: Vec<PathBuf>,
    /// json, text or csv.
    #[arg(long, default_value = "text")]
    pub format: String,
}
