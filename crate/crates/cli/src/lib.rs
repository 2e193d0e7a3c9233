//! Command-line orchestration of the dynasfm stages: `generate`, `segment`,
//! `sfm`, `fuse`, `evaluate` and `pipeline`.

pub mod commands;
pub mod config;
mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dynasfm::io::read_tracks;
use dynasfm::metrics::Alignment;
use dynasfm::sfm::SfmPoint;
use dynasfm::synthetic::SceneConfig;

pub use commands::Artifacts;
pub use config::{MetricsOptions, PipelineConfig};
pub use error::CliError;

use commands::{load_camera, load_trajectory, load_tracks, stage_evaluate, stage_fuse, stage_segment, stage_sfm};
use config::{read_json, required};

#[derive(Debug, Parser)]
#[command(name = "dynasfm", version, about = "Dynamic-aware global structure from motion on long-term point tracks")]
pub struct Cli {
    /// JSON config: a scene config for `generate`, a pipeline config otherwise.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 picks the number of cores.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Treat every track as static (skips motion segmentation).
    #[arg(long, global = true)]
    pub no_segmentation: bool,
    /// Trajectory alignment for evaluation: sim3, se3 or none.
    #[arg(long, global = true)]
    pub align: Option<Alignment>,
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrackInputs {
    #[arg(long)]
    pub tracks: Option<PathBuf>,
    #[arg(long)]
    pub depth_dir: Option<PathBuf>,
    #[arg(long)]
    pub intrinsics: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic scene with ground truth and a pipeline config.
    Generate,
    /// Label tracks static or dynamic.
    Segment(TrackInputs),
    /// Estimate camera poses and static points from labeled tracks.
    Sfm(TrackInputs),
    /// Calibrate per-frame depth and fuse the labeled point cloud.
    Fuse {
        #[command(flatten)]
        inputs: TrackInputs,
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long)]
        points: Option<PathBuf>,
    },
    /// Compare a trajectory (and optionally labels) against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, requires = "gt_tracks")]
        pred_tracks: Option<PathBuf>,
        #[arg(long, requires = "pred_tracks")]
        gt_tracks: Option<PathBuf>,
    },
    /// segment, sfm, fuse, and evaluate when ground truth is configured.
    Pipeline,
}

fn merge(config: &mut PipelineConfig, inputs: &TrackInputs) {
    for (slot, flag) in [
        (&mut config.tracks, &inputs.tracks),
        (&mut config.depth_dir, &inputs.depth_dir),
        (&mut config.intrinsics, &inputs.intrinsics),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
}

fn pipeline_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(align) = cli.align {
        config.metrics.alignment = align;
    }
    if cli.output.is_some() {
        config.output.clone_from(&cli.output);
    }
    Ok(config)
}

/// Runs one parsed command; outputs are written only if every stage succeeds.
pub fn execute(cli: &Cli) -> Result<Artifacts, CliError> {
    if let Command::Generate = cli.command {
        let mut scene: SceneConfig = match &cli.config {
            Some(path) => read_json(path)?,
            None => SceneConfig::default(),
        };
        if let Some(seed) = cli.seed {
            scene.seed = seed;
        }
        let output = cli.output.clone().ok_or_else(|| CliError::validation("no output directory given"))?;
        let artifacts = commands::cmd_generate(&scene)?;
        artifacts.write(&output)?;
        return Ok(artifacts);
    }

    let mut config = pipeline_config(cli)?;
    let mut out = Artifacts::default();
    match &cli.command {
        Command::Generate => unreachable!("handled above"),
        Command::Segment(inputs) | Command::Sfm(inputs) | Command::Fuse { inputs, .. } => {
            merge(&mut config, inputs);
            config.validate()?;
            let camera = load_camera(required("intrinsics", &config.intrinsics)?)?;
            let tracks = load_tracks(required("tracks", &config.tracks)?, config.depth_dir.as_deref())?;
            match &cli.command {
                Command::Segment(_) => {
                    stage_segment(&tracks, &camera, &config.segmentation, &mut out)?;
                }
                Command::Sfm(_) => {
                    stage_sfm(&tracks, &camera, &config.seeded_sfm(), cli.no_segmentation, &mut out)?;
                }
                Command::Fuse { trajectory, points, .. } => {
                    let trajectory = trajectory.as_deref().ok_or_else(|| CliError::validation("no trajectory path given"))?;
                    let points = points.as_deref().ok_or_else(|| CliError::validation("no points path given"))?;
                    let poses = load_trajectory(trajectory)?;
                    let points: Vec<SfmPoint> = read_json(points)?;
                    stage_fuse(&tracks, &camera, &poses, &points, &config.fusion, &mut out)?;
                }
                _ => unreachable!(),
            }
        }
        Command::Evaluate { pred, gt, pred_tracks, gt_tracks } => {
            config.validate()?;
            let pred_poses = load_trajectory(pred)?;
            let gt_poses = load_trajectory(gt)?;
            let labels = match (pred_tracks, gt_tracks) {
                (Some(p), Some(g)) => Some((read_tracks(p)?, read_tracks(g)?)),
                _ => None,
            };
            stage_evaluate(&pred_poses, &gt_poses, labels.as_ref().map(|(p, g)| (p, g)), &config.metrics, &mut out)?;
        }
        Command::Pipeline => {
            out = commands::cmd_pipeline(&config, cli.no_segmentation)?.0;
        }
    }
    let output = required("output", &config.output)?;
    out.write(output)?;
    Ok(out)
}

/// Parses arguments, runs on a pool of `--threads` workers, and returns the
/// process exit code.
pub fn main_with(args: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 1;
        }
    };
    match pool.install(|| execute(&cli)) {
        Ok(artifacts) => {
            for line in &artifacts.summary {
                println!("{line}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
