use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "inilora",
    version,
    about = "Low-rank weight approximation, adapter initialization and toy-scale experiments"
)]
pub struct Cli {
    /// Base seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for machine-readable outputs.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Approximation cache root (default: <out>/cache).
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    /// JSON config file; explicit flags take precedence over its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer mean/std and their global averages.
    Stats(StatsArgs),
    /// Pre-factorize targeted layers into the cache.
    Approx(ApproxArgs),
    /// Initialize an adapter for one layer and save it.
    Init(InitArgs),
    /// Fine-tune adapters on a synthetic task.
    Train(TrainArgs),
    /// Fine-tune from approximation checkpoints.
    SweepApprox(SweepApproxArgs),
    /// Fine-tune from normal factors of increasing std.
    SweepSigma(SweepSigmaArgs),
    /// Fine-tune from each init distribution.
    SweepDist(SweepDistArgs),
    /// Summarize one or more sweep row files.
    Report(ReportArgs),
    /// Write a random model (weights + manifest) to --out.
    MakeToy(MakeToyArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Stats(_) => "stats",
            Command::Approx(_) => "approx",
            Command::Init(_) => "init",
            Command::Train(_) => "train",
            Command::SweepApprox(_) => "sweep-approx",
            Command::SweepSigma(_) => "sweep-sigma",
            Command::SweepDist(_) => "sweep-dist",
            Command::Report(_) => "report",
            Command::MakeToy(_) => "make-toy",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Roles or layer names, comma separated; "all" selects every layer.
    #[arg(long)]
    pub targets: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct ApproxArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub targets: Option<String>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub step_size: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    #[arg(long)]
    pub init_mu: Option<f64>,
    /// Defaults to the average std of the targeted layers.
    #[arg(long)]
    pub init_sigma: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub checkpoint_steps: Option<Vec<usize>>,
    #[arg(long)]
    pub trajectory_stride: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct InitArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub layer: Option<String>,
    /// Layers whose average std sets the normal strategies' sigma.
    #[arg(long)]
    pub targets: Option<String>,
    /// lora, inilora, inilora-alpha, inilora-beta-kn, inilora-beta-ku,
    /// inilora-iter0; `name:sigma` overrides the normal std.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub alpha_sigma: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub scaling: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub keep_residual: Option<bool>,
    #[arg(long)]
    pub approx_steps: Option<usize>,
    #[arg(long)]
    pub approx_lr: Option<f64>,
    #[arg(long)]
    pub approx_step_size: Option<usize>,
    #[arg(long)]
    pub approx_gamma: Option<f64>,
    /// Random inputs used to check output preservation.
    #[arg(long)]
    pub probe_inputs: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct ToyArgs {
    /// regression or classification.
    #[arg(long)]
    pub task: Option<String>,
    /// Output width of the head (targets or classes).
    #[arg(long)]
    pub outputs: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_eval: Option<usize>,
    #[arg(long)]
    pub delta_rank: Option<usize>,
    #[arg(long)]
    pub delta_scale: Option<f64>,
    #[arg(long)]
    pub task_seed: Option<u64>,
    #[arg(long)]
    pub model_seed: Option<u64>,
    /// tanh or identity.
    #[arg(long)]
    pub nonlinearity: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainingArgs {
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub scaling: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub keep_residual: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub train_head: Option<bool>,
    #[arg(long)]
    pub approx_steps: Option<usize>,
    #[arg(long)]
    pub approx_lr: Option<f64>,
    #[arg(long)]
    pub approx_step_size: Option<usize>,
    #[arg(long)]
    pub approx_gamma: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub toy: ToyArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub training: TrainingArgs,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub alpha_sigma: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub toy: ToyArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub training: TrainingArgs,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub concurrency: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepApproxArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub sweep: SweepArgs,
    #[arg(long, value_delimiter = ',')]
    pub checkpoint_steps: Option<Vec<usize>>,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepSigmaArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub sweep: SweepArgs,
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepDistArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub sweep: SweepArgs,
    /// normal-sigma-bar, normal-0.5, kaiming-normal, kaiming-uniform, lora.
    #[arg(long, value_delimiter = ',')]
    pub distributions: Option<Vec<String>>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// rows.csv files or the sweep directories holding them.
    #[arg(long, value_delimiter = ',')]
    pub inputs: Option<Vec<PathBuf>>,
}

#[derive(Debug, Args, Serialize)]
pub struct MakeToyArgs {
    #[arg(long)]
    pub model_id: Option<String>,
    /// Number of layers; roles alternate query, value.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long)]
    pub std: Option<f64>,
}
