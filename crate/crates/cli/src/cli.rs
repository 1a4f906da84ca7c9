//! Command-line syntax.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use flora::train::TrainMode;

#[derive(Debug, Parser)]
#[command(name = "flora", version = crate::manifest::VERSION, about = "Fusion low-rank adapters on synthetic device-directed speech data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/test JSONL splits and a Bayes-oracle calibration report.
    GenData(GenDataArgs),
    /// Pre-train a text-only backbone on a synthetic denoising task.
    Pretrain(PretrainArgs),
    /// Train FLoRA adapters, a fully fine-tuned model, or a unimodal baseline.
    Train(TrainArgs),
    /// Score a test split and report EER, FA@10, scores and DET points.
    Eval(EvalArgs),
    /// Frozen and trainable parameter counts per mode.
    ParamsReport(ParamsReportArgs),
    /// Pre-train, train and evaluate a list of model sizes.
    ScaleSweep(ScaleSweepArgs),
    /// Run a declarative experiment spec.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// TOML run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub p_missing_audio: Option<f64>,
    #[arg(long)]
    pub p_missing_video: Option<f64>,
    /// Training samples.
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Test samples.
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Monte-Carlo draws for the Bayes oracle.
    #[arg(long, default_value_t = 200_000)]
    pub n_mc: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_ratio: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Sequences in the synthetic pre-training corpus.
    #[arg(long)]
    pub corpus_size: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// flora, fft, unimodal-text, unimodal-audio or unimodal-video.
    #[arg(long)]
    pub mode: Option<TrainMode>,
    /// Adapters to train, e.g. `a,v,t` (flora only; defaults to every
    /// modality present in the data).
    #[arg(long)]
    pub modalities: Option<String>,
    /// Adapter rank.
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_ratio: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Run every adapter on every sample instead of only present modalities.
    #[arg(long)]
    pub no_adapter_dropout: bool,
    /// Training split (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Pre-trained backbone (FLBB); required except for feature probes.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Output directory of a `train` run.
    #[arg(long)]
    pub model: PathBuf,
    /// Backbone the adapters were trained on (adapter modes only).
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Test split (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Modalities presented to the model; only their adapters are loaded.
    #[arg(long, default_value = "a,v,t")]
    pub modalities: String,
    /// Seed recorded in the metrics report (defaults to the training seed).
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct ParamsReportArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Read the model config from a checkpoint instead.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// Comma-separated ranks to report, e.g. `1,2,4,8`.
    #[arg(long)]
    pub ranks: Option<String>,
    /// Also write params.csv and a manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ScaleSweepArgs {
    /// Sweep spec (TOML).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report parameter counts only; skip training.
    #[arg(long)]
    pub params_only: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment spec (TOML).
    #[arg(long)]
    pub spec: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}
