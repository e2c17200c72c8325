mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use duosplat_core::EvalViews;

/// Two-image human Gaussian reconstruction.
#[derive(Debug, Parser)]
#[command(name = "duosplat", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation, network initialization and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for checkpoints, logs, reports and rendered files.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Square image resolution for data and networks.
    #[arg(long, global = true)]
    pub resolution: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Device::Cpu)]
    pub device: Device,
    /// Dataset root.
    #[arg(long, global = true, env = "DUOSPLAT_DATA_ROOT", default_value = "data")]
    pub data: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Device {
    Cpu,
    GpuIfAvailable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ViewsArg {
    Canonical,
    Novel,
    All,
}

impl From<ViewsArg> for EvalViews {
    fn from(v: ViewsArg) -> Self {
        match v {
            ViewsArg::Canonical => EvalViews::Canonical,
            ViewsArg::Novel => EvalViews::Novel,
            ViewsArg::All => EvalViews::All,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExportKind {
    Gaussians,
    Points,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic subjects into the dataset root.
    GenData {
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        novel_views: Option<usize>,
    },
    /// Train the pointmap network; writes `stage1.ckpt`.
    TrainStage1 {
        #[arg(long)]
        iterations: Option<usize>,
        /// Use only the first N subjects.
        #[arg(long)]
        subjects: Option<usize>,
    },
    /// Train the Gaussian regressor on a frozen pointmap network; writes `model.ckpt`.
    TrainStage2 {
        /// Stage-1 checkpoint; defaults to `<out>/stage1.ckpt`.
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        subjects: Option<usize>,
    },
    /// Reconstruct Gaussians from a front and back image with their masks.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        front: PathBuf,
        #[arg(long)]
        front_mask: PathBuf,
        #[arg(long)]
        back: PathBuf,
        #[arg(long)]
        back_mask: PathBuf,
    },
    /// Render a Gaussian PLY from cameras given in the front-camera frame.
    Render {
        #[arg(long)]
        ply: PathBuf,
        /// Camera JSON file; repeatable.
        #[arg(long)]
        camera: Vec<PathBuf>,
        /// Rig azimuth in degrees relative to the front camera; repeatable.
        #[arg(long, allow_negative_numbers = true)]
        azimuth: Vec<f64>,
    },
    /// Score reconstructions of every dataset subject; writes `eval.csv` and `eval_summary.json`.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ViewsArg::Novel)]
        views: ViewsArg,
    },
    /// Reconstruct one dataset subject and write its Gaussians or fused points as PLY.
    ExportPly {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Subject id; defaults to the first subject.
        #[arg(long)]
        subject: Option<String>,
        #[arg(long, value_enum, default_value_t = ExportKind::Gaussians)]
        kind: ExportKind,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("duosplat: {}: {e}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}
