//! `avatar`: synthesize datasets, train, render, evaluate and check gradients.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub const BUILD_ID: &str = concat!("avatar-cli ", env!("CARGO_PKG_VERSION"), " (", env!("AVATAR_BUILD_ID"), ")");

#[derive(Debug, Parser)]
#[command(name = "avatar", version, about = "Gaussian-splat avatars conditioned on motion history")]
pub struct Cli {
    /// Seed overriding the one in the config or script.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON run configuration for `train`; missing keys take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bake a synthetic multi-view dataset.
    Synth(SynthArgs),
    /// Train an avatar on a dataset.
    Train(TrainArgs),
    /// Render a checkpoint for a pose track and cameras.
    Render(RenderArgs),
    /// PSNR/SSIM between two directories of PNGs.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Name of a shipped script (spinstop, tiny).
    #[arg(long, conflicts_with = "script")]
    pub builtin: Option<String>,
    /// Path of a JSON generator script.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (overrides `data.dir`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (overrides `output`).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Start from a shipped configuration (spinstop, tiny).
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub iters: Option<u64>,
    /// Remove a component: no_lstm, no_clothes_latent, no_part_segmentation.
    #[arg(long = "ablate")]
    pub ablate: Vec<String>,
    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Render the frames and cameras of a dataset, with per-frame appearance latents.
    #[arg(long, conflicts_with_all = ["poses", "cameras"])]
    pub data: Option<PathBuf>,
    /// Pose track JSON; every frame is treated as unseen.
    #[arg(long, requires = "cameras")]
    pub poses: Option<PathBuf>,
    /// Camera list JSON.
    #[arg(long, requires = "poses")]
    pub cameras: Option<PathBuf>,
    /// Only these cameras (by name).
    #[arg(long = "camera")]
    pub camera: Vec<String>,
    /// Half-open frame range `START:END` within the track.
    #[arg(long)]
    pub frames: Option<String>,
    /// Use the mean appearance latent even for dataset frames.
    #[arg(long)]
    pub mean_latent: bool,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Write the JSON report here instead of stdout.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

/// Failure classes with stable exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numeric(String),
    Version(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Numeric(_) => 3,
            Failure::Version(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Numeric(m) | Failure::Version(m) | Failure::Other(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(&cli, a),
        Command::Train(a) => commands::train(&cli, a),
        Command::Render(a) => commands::render(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck => commands::gradcheck(cli.seed.unwrap_or(0)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
