//! Command-line grammar.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pvvae_core::model::PaddingStrategy;
use pvvae_core::trainer::{Preset, Stage};

#[derive(Debug, Parser)]
#[command(name = "pvvae", version, about = "Predictive video VAE: data, training, evaluation")]
pub struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides PVVAE_SEED and the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Checkpoint directory to continue training from.
    #[arg(long, global = true)]
    pub resume: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic moving-shapes corpus.
    GenerateData(GenerateArgs),
    /// Train the autoencoder (all stages of a preset, or one stage).
    Train(TrainArgs),
    /// Decoder fine-tuning with a frozen encoder.
    FinetuneDecoder(FinetuneArgs),
    /// Fit a rectified-flow model on autoencoder latents.
    TrainFlow(TrainFlowArgs),
    /// PSNR and SSIM of reconstructions on the validation split.
    EvalRecon(EvalReconArgs),
    /// LTD profile, dropped-frame prediction error and flow-probe EPE.
    EvalLatent(EvalLatentArgs),
    /// Frechet proxy of generated clips, or an ablation table.
    EvalGen(EvalGenArgs),
    /// PCA and optical-flow visualizations.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Number of clips.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    /// Frames per clip (1 + T).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub frames: Option<u64>,
    /// Square resolution in pixels.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub res: Option<u64>,
    /// Largest velocity component in pixels per frame.
    #[arg(long, value_parser = clap::value_parser!(u64))]
    pub max_speed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Run a single stage instead of the whole plan.
    #[arg(long)]
    pub stage: Option<Stage>,
    /// Ablation preset applied to the video stage.
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Start from the weights of this checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint after predictive video training.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<Preset>,
}

#[derive(Debug, Args)]
pub struct TrainFlowArgs {
    /// Autoencoder checkpoint whose latents are modeled.
    #[arg(long)]
    pub latents_from: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalReconArgs {
    #[arg(long, required_unless_present = "self_eval")]
    pub vae: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Score every clip against itself (checks the metric ceiling).
    #[arg(long)]
    pub self_eval: bool,
}

#[derive(Debug, Args)]
pub struct EvalLatentArgs {
    #[arg(long)]
    pub vae: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalGenArgs {
    /// Autoencoder checkpoint. In ablation mode this is the starting point
    /// every row is trained from.
    #[arg(long)]
    pub vae: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Trained flow checkpoint (not used in ablation mode).
    #[arg(long)]
    pub flow: Option<PathBuf>,
    /// Generated clips; defaults to `eval.n_generated`.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: Option<u64>,
    /// Report path; defaults to `<out>/report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Preset rows of the incremental ladder.
    #[arg(long, value_delimiter = ',')]
    pub ablate_preset: Vec<Preset>,
    /// Maximum dropping ratios, one row each.
    #[arg(long, value_delimiter = ',', value_parser = parse_ratio)]
    pub ablate_drop_ratio: Vec<f64>,
    /// Padding strategies, one row each.
    #[arg(long, value_delimiter = ',')]
    pub ablate_padding: Vec<PaddingStrategy>,
    /// Preset the ratio and padding rows start from.
    #[arg(long, default_value = "pr_motion")]
    pub preset: Preset,
}

impl EvalGenArgs {
    pub fn is_ablation(&self) -> bool {
        !(self.ablate_preset.is_empty() && self.ablate_drop_ratio.is_empty() && self.ablate_padding.is_empty())
    }
}

fn parse_ratio(s: &str) -> Result<f64, String> {
    let r: f64 = s.trim().parse().map_err(|e| format!("`{s}`: {e}"))?;
    if (0.0..=1.0).contains(&r) {
        Ok(r)
    } else {
        Err(format!("drop ratio {r} is outside [0, 1]"))
    }
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub vae: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Latent PCA rendered as RGB.
    #[arg(long)]
    pub pca: bool,
    /// Ground-truth and probe-predicted optical flow.
    #[arg(long)]
    pub flow: bool,
}
