//! Command-line front end: file formats, renders and the `fbev` commands.

pub mod checkpoint;
pub mod commands;
pub mod export;
pub mod fsutil;
pub mod rig;
pub mod tensor_io;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fbev_core::lift::LiftMode;
use fbev_core::pool::{PoolStrategy, Reduce};
use fbev_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fbev", version, about = "Bird's-eye-view semantic mapping from fisheye cameras")]
pub struct Cli {
    /// Worker threads for internal parallelism; defaults to all cores.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct OutDir {
    /// Directory receiving every output file.
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Dense,
    NonZero,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ReduceArg {
    Sum,
    Max,
    Mean,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Lift per-camera feature and depth tensors into the grid.
    Project {
        #[arg(long)]
        rig: PathBuf,
        /// Directory with `<camera>.features.fbvt` and `<camera>.depth.fbvt`.
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long, value_enum, default_value = "dense")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "sum")]
        reduce: ReduceArg,
        #[command(flatten)]
        out: OutDir,
    },
    /// Merge per-camera grids with a pooling strategy.
    Pool {
        #[arg(long)]
        grids: PathBuf,
        #[arg(long)]
        counts: PathBuf,
        /// sum, max, mean, weighted-sum, per-cell-sensor or intrinsic-embed.
        #[arg(long, default_value = "sum")]
        strategy: String,
        /// Checkpoint directory written by `fbev train`.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Rig file, needed for intrinsic-embed.
        #[arg(long)]
        rig: Option<PathBuf>,
        /// Also write PPM/PGM renders.
        #[arg(long)]
        render: bool,
        #[command(flatten)]
        out: OutDir,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long, required_unless_present = "scores")]
        pred_classes: Option<PathBuf>,
        #[arg(long, required_unless_present = "scores")]
        pred_occlusion: Option<PathBuf>,
        #[arg(long, required_unless_present = "scores")]
        gt_classes: Option<PathBuf>,
        #[arg(long, required_unless_present = "scores")]
        gt_occlusion: Option<PathBuf>,
        /// Average precomputed IoUs: occlusion, vehicles, markings, street, background.
        #[arg(long, value_delimiter = ',', conflicts_with_all = ["pred_classes", "pred_occlusion", "gt_classes", "gt_occlusion"])]
        scores: Option<Vec<f64>>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Generate a scene and run the full pipeline on it.
    Demo {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// TOML demo configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Resample images onto a cylinder before lifting.
        #[arg(long)]
        rectify: bool,
        #[command(flatten)]
        out: OutDir,
    },
    /// Train pooling parameters and a linear head on generated scenes.
    Train {
        /// TOML training configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured scene seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        out: OutDir,
    },
}

fn dispatch(command: Command) -> anyhow::Result<String> {
    match command {
        Command::Project { rig, inputs, mode, reduce, out } => commands::project(&commands::ProjectArgs {
            rig,
            inputs,
            mode: match mode {
                ModeArg::Dense => LiftMode::Dense,
                ModeArg::NonZero => LiftMode::NonZero,
            },
            reduce: match reduce {
                ReduceArg::Sum => Reduce::Sum,
                ReduceArg::Max => Reduce::Max,
                ReduceArg::Mean => Reduce::Mean,
            },
            out_dir: out.out_dir,
        }),
        Command::Pool { grids, counts, strategy, params, rig, render, out } => {
            let strategy: PoolStrategy = strategy.parse()?;
            commands::pool_cmd(&commands::PoolArgs {
                grids,
                counts,
                strategy,
                params,
                rig,
                render,
                out_dir: out.out_dir,
            })
        }
        Command::Eval { pred_classes, pred_occlusion, gt_classes, gt_occlusion, scores, out } => {
            let args = match (scores, pred_classes, pred_occlusion, gt_classes, gt_occlusion) {
                (Some(s), ..) => commands::EvalArgs::Scores(
                    s.try_into()
                        .map_err(|_| Error::Usage("--scores takes exactly five values".into()))?,
                ),
                (None, Some(pc), Some(po), Some(gc), Some(go)) => commands::EvalArgs::Files {
                    pred_classes: pc,
                    pred_occlusion: po,
                    gt_classes: gc,
                    gt_occlusion: go,
                    out_dir: out.out_dir,
                },
                _ => return Err(Error::Usage("eval needs four tensor files or --scores".into()).into()),
            };
            commands::eval(&args)
        }
        Command::Demo { seed, config, rectify, out } => commands::demo(&commands::DemoArgs {
            seed,
            config,
            rectify,
            out_dir: out.out_dir,
        }),
        Command::Train { config, seed, resume, out } => commands::train(&commands::TrainArgs {
            config,
            seed,
            resume,
            out_dir: out.out_dir,
        }),
    }
}

/// Runs a parsed command line and returns what it printed.
pub fn run(cli: Cli) -> anyhow::Result<String> {
    match cli.workers {
        None => dispatch(cli.command),
        Some(0) => Err(Error::Usage("--workers must be at least 1".into()).into()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            pool.install(|| dispatch(cli.command))
        }
    }
}

/// Exit status for a failed command: 2 for invalid input, 3 for numerical
/// breakdown, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_numeric() => EXIT_NUMERIC,
        Some(Error::Io(_)) | None => EXIT_FAILURE,
        Some(_) => EXIT_VALIDATION,
    }
}
