use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "kfg", version, about = "Parameter audits, gradient checks, evaluation, benchmarking and toy training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-module parameter table for one model variant.
    Audit(AuditArgs),
    /// Finite-difference gradient checks in 64-bit.
    Gradcheck(GradcheckArgs),
    /// Score trained weights on a labeled image directory.
    Eval(EvalArgs),
    /// Single-stream latency of forward, decode and NMS.
    Bench(BenchArgs),
    /// Overfit synthetic fixtures and save the weights.
    TrainToy(TrainToyArgs),
    /// Expand a dataset with random crops, stretches and noise.
    Augment(AugmentArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Variant name such as v8n, v8n+fdpn+gsdhead or kfg.
    #[arg(long, conflicts_with = "config")]
    pub variant: Option<String>,
    /// Model config file (key=value lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of classes; overrides the config file.
    #[arg(long)]
    pub nc: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Name components used to group rows.
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// all, ops, blocks, kw, fdpn or gsd.
    #[arg(long, default_value = "all")]
    pub module: String,
    /// Flip the sign of one op's backward rule (negative control).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Directory of .ppm images.
    #[arg(long)]
    pub images: PathBuf,
    /// Directory of YOLO .txt labels with matching stems.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    pub conf: f32,
    /// NMS IoU threshold.
    #[arg(long, default_value_t = 0.45)]
    pub iou: f32,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Variants to time; the first is the reference for relative FPS.
    #[arg(long, num_args = 1.., default_values = ["v8n", "kfg"])]
    pub variant: Vec<String>,
    #[arg(long, default_value_t = 320)]
    pub imgsz: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    #[arg(long, default_value_t = 3)]
    pub nc: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// Number of synthetic images.
    #[arg(long, default_value_t = 8)]
    pub fixtures: usize,
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Weight file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "kfg")]
    pub variant: String,
    /// Where the fixtures are written for `eval`; defaults to
    /// `<out>.fixtures/`.
    #[arg(long)]
    pub fixtures_dir: Option<PathBuf>,
    /// Print a progress line every this many steps (0 for none).
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Dataset root containing images/ and labels/.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output root; images/ and labels/ are created.
    #[arg(long)]
    pub out: PathBuf,
    /// Augmentation spec file (key=value lines).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output images per input image, the original included.
    #[arg(long, default_value_t = 5)]
    pub factor: usize,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 3)]
    pub nc: usize,
}
