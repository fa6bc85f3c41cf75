//! `lemul`: train a single-view 3d decomposition model on multi-image
//! collections, then decompose, score, and re-render images with it.

mod commands;
mod settings;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "lemul", version, about = "unsupervised single-view 3d decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-view dataset with ground-truth depth
    Generate(GenerateArgs),
    /// Train the decomposition networks on a dataset
    Train(TrainArgs),
    /// Adapt albedo, lighting, and confidence to single images; geometry stays frozen
    Refine(RefineArgs),
    /// Decompose one image into depth, albedo, lighting, and pose
    Infer(InferArgs),
    /// Score a checkpoint against ground-truth depth, next to the baselines
    Eval(EvalArgs),
    /// Re-render a decomposed image from new viewpoints, with and without texture
    Render(RenderArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Dataset root to create
    #[arg(long)]
    pub out: PathBuf,
    /// Flat JSON config file with dotted keys
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of instances
    #[arg(long)]
    pub count: Option<usize>,
    /// Views per instance
    #[arg(long = "m-views")]
    pub m_views: Option<usize>,
    /// Square image size (a power of two)
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Mirror-symmetric objects, one view each, laid out flat
    #[arg(long)]
    pub flip_pairs: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset root
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoints and logs
    #[arg(long)]
    pub out: PathBuf,
    /// Flat JSON config file with dotted keys
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Resume from this checkpoint
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total steps to reach (including any resumed progress)
    #[arg(long)]
    pub steps: Option<usize>,
    /// Views drawn per instance each epoch
    #[arg(long = "m-views")]
    pub m_views: Option<usize>,
    /// Treat each image as one view of a mirror pair
    #[arg(long)]
    pub flip_pairs: bool,
}

#[derive(Args)]
pub struct RefineArgs {
    /// Directory of single images to adapt to
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to start from
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args)]
pub struct InferArgs {
    /// Checkpoint to decompose with
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Input image
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to score
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset root with ground truth
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// The dataset is laid out as flip pairs
    #[arg(long)]
    pub flip_pairs: bool,
}

#[derive(Args)]
pub struct RenderArgs {
    /// Checkpoint to decompose with
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Input image
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn run() -> Result<()> {
    if let Ok(v) = std::env::var("LEMUL_NUM_WORKERS") {
        let n: usize = v
            .parse()
            .context("LEMUL_NUM_WORKERS must be a positive integer")?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match Cli::parse().command {
        Command::Generate(args) => commands::cmd_generate(&args),
        Command::Train(args) => commands::cmd_train(&args),
        Command::Refine(args) => commands::cmd_refine(&args),
        Command::Infer(args) => commands::cmd_infer(&args),
        Command::Eval(args) => commands::cmd_eval(&args),
        Command::Render(args) => commands::cmd_render(&args),
    }
}

fn main() {
    if let Err(e) = run() {
        // One line, cause chain included, easy to grep.
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
