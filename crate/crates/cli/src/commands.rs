use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dynasfm::fusion::{calibrate_frames, fuse, CalibrationTable, FusionConfig, FusionReport};
use dynasfm::io::{
    depth_frame_path, encode_depth_pfm, format_trajectory_tum, parse_trajectory_tum, read_depth_dir, read_tracks, read_tracks_from,
    read_trajectory_tum, sample_depth, write_ply_to, write_tracks_to,
};
use dynasfm::metrics::{per_frame_csv, seg_metrics_tracks, track_losses, MetricsReport, PredictedTrack, PROBABILITY_EPS};
use dynasfm::segmentation::{segment_tracks, SegmentationConfig, SegmentationReport};
use dynasfm::sfm::{run_global_sfm, SfmConfig, SfmDiagnostics, SfmPoint};
use dynasfm::synthetic::{generate_scene, strip_labels, SceneConfig};
use dynasfm::{CameraModel, PoseSE3, ScenePointCloud, TrackSet};
use serde::Serialize;

use crate::config::{read_json, MetricsOptions, PipelineConfig};
use crate::CliError;

pub const SEGMENTED_TRACKS: &str = "segmented_tracks.jsonl";
pub const SEGMENTATION_REPORT: &str = "segmentation_report.json";
pub const TRAJECTORY: &str = "trajectory.tum";
pub const SFM_POINTS: &str = "sfm_points.json";
pub const SFM_CLOUD: &str = "sfm_points.ply";
pub const SFM_DIAGNOSTICS: &str = "sfm_diagnostics.json";
pub const CALIBRATION: &str = "depth_calibration.json";
pub const FUSED_CLOUD: &str = "fused.ply";
pub const FUSION_REPORT: &str = "fusion_report.json";
pub const METRICS: &str = "metrics.json";
pub const PER_FRAME: &str = "per_frame_errors.csv";
pub const REPORT: &str = "report.json";

/// Files produced by a command, held in memory until the command succeeds.
#[derive(Debug, Default)]
pub struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
    pub summary: Vec<String>,
}

impl Artifacts {
    pub fn add(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), bytes.into()));
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| CliError::validation(format!("{}: {e}", parent.display())))?;
            }
            std::fs::write(&path, bytes).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes") + "\n"
}

fn tracks_bytes(tracks: &TrackSet) -> Vec<u8> {
    let mut out = Vec::new();
    write_tracks_to(tracks, &mut out).expect("writing to memory");
    out
}

fn ply_bytes(cloud: &ScenePointCloud) -> Vec<u8> {
    let mut out = Vec::new();
    write_ply_to(cloud, &mut out).expect("writing to memory");
    out
}

pub fn load_camera(path: &Path) -> Result<CameraModel, CliError> {
    read_json(path)
}

/// Reads tracks and, when they carry no depth, samples it from the PFM frames.
pub fn load_tracks(path: &Path, depth_dir: Option<&Path>) -> Result<TrackSet, CliError> {
    let mut tracks = read_tracks(path)?;
    if tracks.has_depth() {
        return Ok(tracks);
    }
    let Some(dir) = depth_dir else { return Ok(tracks) };
    let frames = read_depth_dir(dir)?;
    let by_index: BTreeMap<usize, _> = frames.iter().map(|f| (f.frame, f)).collect();
    if let Some(missing) = (0..tracks.num_frames()).find(|f| !by_index.contains_key(f)) {
        return Err(CliError::validation(format!("{}: no depth frame {missing}", depth_frame_path(dir, missing).display())));
    }
    tracks
        .update(|t| {
            if t.depth.is_none() {
                let start = t.start;
                t.depth = Some(t.points.iter().enumerate().map(|(i, p)| sample_depth(by_index[&(start + i)], p)).collect());
            }
        })
        .map_err(CliError::validation)?;
    Ok(tracks)
}

fn clear_labels(tracks: &TrackSet) -> TrackSet {
    let mut out = tracks.clone();
    out.update(|t| t.set_dynamic(false)).expect("relabeling keeps tracks valid");
    out
}

pub fn stage_segment(
    tracks: &TrackSet,
    camera: &CameraModel,
    config: &SegmentationConfig,
    out: &mut Artifacts,
) -> Result<(TrackSet, SegmentationReport), CliError> {
    let (labeled, report) = segment_tracks(tracks, camera, config)?;
    out.add(SEGMENTED_TRACKS, tracks_bytes(&labeled));
    out.add(SEGMENTATION_REPORT, json(&report));
    out.summary.push(format!(
        "segment: {} dynamic, {} static tracks, {} frame pairs fitted",
        report.dynamic_tracks, report.static_tracks, report.pairs_fitted
    ));
    // Downstream stages read the labels back exactly as written.
    let labeled = read_tracks_from(out.get(SEGMENTED_TRACKS).expect("just added"), SEGMENTED_TRACKS)?;
    Ok((labeled, report))
}

pub fn stage_sfm(
    tracks: &TrackSet,
    camera: &CameraModel,
    config: &SfmConfig,
    no_segmentation: bool,
    out: &mut Artifacts,
) -> Result<(Vec<PoseSE3>, Vec<SfmPoint>, SfmDiagnostics), CliError> {
    let input = if no_segmentation {
        clear_labels(tracks)
    } else if tracks.iter().all(|t| t.dynamic.is_none()) {
        return Err(CliError::validation("tracks carry no dynamic labels; run segment first or pass --no-segmentation"));
    } else {
        tracks.clone()
    };
    let result = run_global_sfm(&input, camera, config)?;
    let tum = format_trajectory_tum(&result.poses, None);
    let cloud = ScenePointCloud {
        points: result
            .points
            .iter()
            .map(|p| dynasfm::CloudPoint::new(p.position, dynasfm::PointLabel::StaticSfm, -1))
            .collect(),
    };
    out.add(TRAJECTORY, tum.clone());
    out.add(SFM_POINTS, json(&result.points));
    out.add(SFM_CLOUD, ply_bytes(&cloud));
    out.add(SFM_DIAGNOSTICS, result.diagnostics_json());
    let ba = &result.diagnostics.bundle;
    out.summary.push(format!(
        "sfm: {} poses, {} points, bundle adjustment {} iterations, rms {:.3e} px",
        result.poses.len(),
        result.points.len(),
        ba.iterations,
        ba.final_rms_px
    ));
    let poses = parse_trajectory_tum(&tum, TRAJECTORY)?.into_iter().map(|p| p.pose).collect();
    let points = serde_json::from_slice(out.get(SFM_POINTS).expect("just added")).expect("points round trip");
    Ok((poses, points, result.diagnostics))
}

pub fn stage_fuse(
    tracks: &TrackSet,
    camera: &CameraModel,
    poses: &[PoseSE3],
    points: &[SfmPoint],
    config: &FusionConfig,
    out: &mut Artifacts,
) -> Result<(CalibrationTable, FusionReport), CliError> {
    if poses.len() != tracks.num_frames() {
        return Err(CliError::validation(format!(
            "trajectory has {} poses but tracks span {} frames",
            poses.len(),
            tracks.num_frames()
        )));
    }
    let table = calibrate_frames(tracks, poses, points, config)?;
    let (cloud, report) = fuse(tracks, camera, poses, points, &table, config)?;
    out.add(CALIBRATION, table.to_json() + "\n");
    out.add(FUSED_CLOUD, ply_bytes(&cloud));
    out.add(FUSION_REPORT, json(&report));
    out.summary.push(format!(
        "fuse: {} of {} frames calibrated, {} points ({} dynamic)",
        table.calibrated(),
        poses.len(),
        cloud.len(),
        report.dynamic_depth
    ));
    Ok((table, report))
}

pub fn stage_evaluate(
    pred: &[PoseSE3],
    gt: &[PoseSE3],
    labels: Option<(&TrackSet, &TrackSet)>,
    options: &MetricsOptions,
    out: &mut Artifacts,
) -> Result<MetricsReport, CliError> {
    let mut report = MetricsReport::trajectory(pred, gt, options.alignment, options.rpe_delta)?;
    if let Some((pred_tracks, gt_tracks)) = labels {
        report.seg = Some(seg_metrics_tracks(pred_tracks, gt_tracks)?);
        let predicted: Vec<PredictedTrack> = pred_tracks.iter().map(PredictedTrack::from_track).collect();
        report.losses = Some(track_losses(&predicted, gt_tracks, &options.weights, PROBABILITY_EPS)?);
    }
    out.add(METRICS, report.to_json());
    out.add(PER_FRAME, per_frame_csv(pred, gt, options.alignment)?);
    let mut line = format!(
        "evaluate: ATE {:.6e} ({}), RPE {:.6e} / {:.6e} deg",
        report.ate_rmse, options.alignment, report.rpe_trans, report.rpe_rot
    );
    if let Some(seg) = &report.seg {
        line += &format!(", segmentation precision {:.4} recall {:.4}", seg.precision, seg.recall);
    }
    out.summary.push(line);
    Ok(report)
}

pub fn load_trajectory(path: &Path) -> Result<Vec<PoseSE3>, CliError> {
    Ok(read_trajectory_tum(path)?.into_iter().map(|p| p.pose).collect())
}

/// Synthetic scene with ground truth and a ready-to-run pipeline config.
pub fn cmd_generate(scene: &SceneConfig) -> Result<Artifacts, CliError> {
    let (truth, tracks, depth) = generate_scene(scene)?;
    let mut out = Artifacts::default();
    out.add("tracks.jsonl", tracks_bytes(&strip_labels(&tracks)));
    out.add("gt_tracks.jsonl", tracks_bytes(&tracks));
    out.add("gt_trajectory.tum", format_trajectory_tum(&truth.poses, None));
    out.add("intrinsics.json", json(truth.camera()));
    out.add("scene_config.json", json(scene));
    let disguise: BTreeMap<String, [f64; 2]> =
        truth.disguise.iter().enumerate().map(|(f, &(a, b))| (format!("{f:06}"), [a, b])).collect();
    out.add("gt_disguise.json", json(&disguise));
    let pipeline = PipelineConfig {
        tracks: Some("tracks.jsonl".into()),
        depth_dir: (!depth.is_empty()).then(|| PathBuf::from("depth")),
        intrinsics: Some("intrinsics.json".into()),
        gt_trajectory: Some("gt_trajectory.tum".into()),
        gt_tracks: Some("gt_tracks.jsonl".into()),
        seed: scene.seed,
        ..PipelineConfig::default()
    };
    out.add("pipeline.json", json(&pipeline));
    for frame in &depth {
        out.add(&format!("depth/frame_{:06}.pfm", frame.frame), encode_depth_pfm(frame));
    }
    out.summary.push(format!(
        "generate: {} frames, {} tracks ({} dynamic), span {:.3}",
        scene.num_frames,
        tracks.len(),
        scene.num_dynamic(),
        truth.trajectory_span()
    ));
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub frames: usize,
    pub tracks: usize,
    pub segmentation: Option<SegmentationReport>,
    pub sfm: SfmDiagnostics,
    pub calibrated_frames: usize,
    pub fusion: FusionReport,
    pub metrics: Option<MetricsReport>,
}

/// segment, sfm, fuse and (with ground truth) evaluate.
pub fn cmd_pipeline(config: &PipelineConfig, no_segmentation: bool) -> Result<(Artifacts, PipelineReport), CliError> {
    config.validate()?;
    let tracks_path = crate::config::required("tracks", &config.tracks)?;
    let camera = load_camera(crate::config::required("intrinsics", &config.intrinsics)?)?;
    let tracks = load_tracks(tracks_path, config.depth_dir.as_deref())?;
    let gt = config.gt_trajectory.as_deref().map(load_trajectory).transpose()?;
    let gt_tracks = config.gt_tracks.as_deref().map(read_tracks).transpose()?;

    let mut out = Artifacts::default();
    let (labeled, segmentation) = if no_segmentation {
        out.summary.push("segment: skipped".into());
        (tracks.clone(), None)
    } else {
        let (labeled, report) = stage_segment(&tracks, &camera, &config.segmentation, &mut out)?;
        (labeled, Some(report))
    };
    let (poses, points, sfm) = stage_sfm(&labeled, &camera, &config.seeded_sfm(), no_segmentation, &mut out)?;
    let fuse_tracks = if no_segmentation { clear_labels(&labeled) } else { labeled.clone() };
    let (table, fusion) = stage_fuse(&fuse_tracks, &camera, &poses, &points, &config.fusion, &mut out)?;
    let metrics = match &gt {
        Some(gt) => {
            let labels = match (&gt_tracks, no_segmentation) {
                (Some(g), false) => Some((&labeled, g)),
                _ => None,
            };
            Some(stage_evaluate(&poses, gt, labels, &config.metrics, &mut out)?)
        }
        None => None,
    };
    let report = PipelineReport {
        seed: config.seed,
        frames: tracks.num_frames(),
        tracks: tracks.len(),
        segmentation,
        sfm,
        calibrated_frames: table.calibrated(),
        fusion,
        metrics,
    };
    out.add(REPORT, json(&report));
    Ok((out, report))
}
