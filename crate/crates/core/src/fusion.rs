//! Per-frame depth calibration against the SfM reconstruction and fusion of
//! back-projected depth samples into one labeled cloud.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{CloudPoint, PointLabel, ScenePointCloud};
use crate::geometry::{CameraModel, PoseSE3};
use crate::io::TrackSet;
use crate::robust::{huber_weight, median, robust_scale};
use crate::sfm::SfmPoint;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("frame {frame}: {found} depth anchors, need at least {needed}")]
    TooFewAnchors { frame: usize, found: usize, needed: usize },
    #[error("frame {frame}: anchor depths are all equal, scale is undetermined")]
    DegenerateAnchors { frame: usize },
    #[error("frame {frame}: calibrated depth scale {scale} is not positive")]
    NegativeScale { frame: usize, scale: f64 },
    #[error("frame {frame} contributes depth samples but has no calibration")]
    MissingCalibration { frame: usize },
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
    #[error("malformed calibration table: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub min_anchors: usize,
    /// Huber threshold in units of the robust residual sigma.
    pub huber_k: f64,
    /// Anchors beyond this many robust sigmas get zero weight.
    pub rejection_k: f64,
    pub max_iterations: usize,
    /// Stop once both parameters move less than this (relative).
    pub tolerance: f64,
    /// Also back-project the depth samples of static tracks.
    pub include_static_depth: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { min_anchors: 3, huber_k: 1.345, rejection_k: 4.0, max_iterations: 100, tolerance: 1e-12, include_static_depth: false }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.min_anchors < 2 {
            return Err(FusionError::InvalidConfig("min_anchors must be at least 2".into()));
        }
        if !(self.rejection_k > self.huber_k) {
            return Err(FusionError::InvalidConfig("rejection_k must exceed huber_k".into()));
        }
        if !(self.huber_k > 0.0) || !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(FusionError::InvalidConfig("huber_k, tolerance and max_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Affine map from relative depth to SfM camera depth, `z = scale * d + shift`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthCalibration {
    pub scale: f64,
    pub shift: f64,
    pub anchors: usize,
    pub iterations: usize,
}

impl DepthCalibration {
    pub fn apply(&self, relative: f64) -> f64 {
        self.scale * relative + self.shift
    }
}

/// Outcome per frame: a calibration, or the reason the frame is skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationTable {
    pub frames: BTreeMap<usize, Result<DepthCalibration, FusionError>>,
}

impl CalibrationTable {
    pub fn get(&self, frame: usize) -> Option<&DepthCalibration> {
        self.frames.get(&frame).and_then(|r| r.as_ref().ok())
    }

    pub fn calibrated(&self) -> usize {
        self.frames.values().filter(|r| r.is_ok()).count()
    }

    /// `{"frame": [a, b]}`; skipped frames map to `null`.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<String, Option<[f64; 2]>> = self
            .frames
            .iter()
            .map(|(f, r)| (format!("{f:06}"), r.as_ref().ok().map(|c| [c.scale, c.shift])))
            .collect();
        serde_json::to_string_pretty(&map).expect("calibration table serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, FusionError> {
        let map: BTreeMap<String, Option<[f64; 2]>> =
            serde_json::from_str(text).map_err(|e| FusionError::Format(e.to_string()))?;
        let mut frames = BTreeMap::new();
        for (key, value) in map {
            let frame: usize = key.parse().map_err(|_| FusionError::Format(format!("bad frame key {key:?}")))?;
            let entry = match value {
                Some([scale, shift]) if scale > 0.0 && scale.is_finite() && shift.is_finite() => {
                    Ok(DepthCalibration { scale, shift, anchors: 0, iterations: 0 })
                }
                Some([scale, _]) => Err(FusionError::NegativeScale { frame, scale }),
                None => Err(FusionError::TooFewAnchors { frame, found: 0, needed: 0 }),
            };
            frames.insert(frame, entry);
        }
        Ok(Self { frames })
    }
}

/// Weighted least-squares line `z = a d + b`.
fn weighted_line(samples: &[(f64, f64)], weights: &[f64]) -> Option<(f64, f64)> {
    let mut normal = Matrix2::zeros();
    let mut rhs = Vector2::zeros();
    for (&(d, z), &w) in samples.iter().zip(weights) {
        let row = Vector2::new(d, 1.0);
        normal += row * row.transpose() * w;
        rhs += row * (w * z);
    }
    let det = normal.determinant();
    if det.abs() <= 1e-14 * normal.norm_squared() {
        return None;
    }
    normal.try_inverse().map(|inv| {
        let p = inv * rhs;
        (p[0], p[1])
    })
}

const REPEATED_MEDIAN_MAX: usize = 512;

/// Siegel repeated-median line, used as a high-breakdown starting point.
fn repeated_median_line(samples: &[(f64, f64)]) -> Option<(f64, f64)> {
    let stride = samples.len().div_ceil(REPEATED_MEDIAN_MAX);
    let subset: Vec<(f64, f64)> = samples.iter().step_by(stride).copied().collect();
    let per_point: Vec<f64> = subset
        .iter()
        .filter_map(|&(di, zi)| {
            let slopes: Vec<f64> = subset
                .iter()
                .filter(|&&(dj, _)| dj != di)
                .map(|&(dj, zj)| (zj - zi) / (dj - di))
                .collect();
            median(&slopes)
        })
        .collect();
    let slope = median(&per_point)?;
    let intercepts: Vec<f64> = samples.iter().map(|&(d, z)| z - slope * d).collect();
    Some((slope, median(&intercepts)?))
}

/// Huber IRLS fit of `z = a d + b` over `(d, z)` anchor pairs, started from a
/// repeated-median line; anchors past `rejection_k` sigmas are dropped.
pub fn fit_depth_affine(
    frame: usize,
    samples: &[(f64, f64)],
    config: &FusionConfig,
) -> Result<DepthCalibration, FusionError> {
    if samples.len() < config.min_anchors {
        return Err(FusionError::TooFewAnchors { frame, found: samples.len(), needed: config.min_anchors });
    }
    let mut weights = vec![1.0; samples.len()];
    weighted_line(samples, &weights).ok_or(FusionError::DegenerateAnchors { frame })?;
    let (mut a, mut b) = repeated_median_line(samples).ok_or(FusionError::DegenerateAnchors { frame })?;
    let magnitude = samples.iter().map(|s| s.1.abs()).sum::<f64>() / samples.len() as f64;
    let floor = 1e-12 * magnitude.max(f64::MIN_POSITIVE);
    let mut iterations = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        let residuals: Vec<f64> = samples.iter().map(|&(d, z)| z - (a * d + b)).collect();
        let sigma = robust_scale(&residuals).max(floor);
        for (w, r) in weights.iter_mut().zip(&residuals) {
            *w = if r.abs() > config.rejection_k * sigma { 0.0 } else { huber_weight(*r, config.huber_k * sigma) };
        }
        let (na, nb) = weighted_line(samples, &weights).ok_or(FusionError::DegenerateAnchors { frame })?;
        let moved = (na - a).abs() <= config.tolerance * na.abs().max(1.0)
            && (nb - b).abs() <= config.tolerance * nb.abs().max(magnitude);
        (a, b) = (na, nb);
        if moved {
            break;
        }
    }
    if !(a > 0.0) {
        return Err(FusionError::NegativeScale { frame, scale: a });
    }
    Ok(DepthCalibration { scale: a, shift: b, anchors: samples.len(), iterations })
}

/// Anchor pairs `(relative depth, SfM camera depth)` of frame `t`: static
/// tracks visible there with a depth sample and a triangulated point.
pub fn depth_anchors(frame: usize, tracks: &TrackSet, pose: &PoseSE3, points: &BTreeMap<u64, Vector3<f64>>) -> Vec<(f64, f64)> {
    tracks
        .iter()
        .filter(|t| !t.is_dynamic() && t.is_visible(frame))
        .filter_map(|t| {
            let d = t.depth_at(frame)?;
            let x = points.get(&t.id)?;
            let z = pose.to_camera(x).z;
            (z > 0.0).then_some((d, z))
        })
        .collect()
}

pub fn align_depth_frame(
    frame: usize,
    tracks: &TrackSet,
    poses: &[PoseSE3],
    points: &BTreeMap<u64, Vector3<f64>>,
    config: &FusionConfig,
) -> Result<DepthCalibration, FusionError> {
    let anchors = depth_anchors(frame, tracks, &poses[frame], points);
    fit_depth_affine(frame, &anchors, config)
}

pub fn point_index(points: &[SfmPoint]) -> BTreeMap<u64, Vector3<f64>> {
    points.iter().map(|p| (p.track_id, p.position)).collect()
}

/// Calibrates every frame independently; failures are kept in the table.
pub fn calibrate_frames(
    tracks: &TrackSet,
    poses: &[PoseSE3],
    points: &[SfmPoint],
    config: &FusionConfig,
) -> Result<CalibrationTable, FusionError> {
    config.validate()?;
    let index = point_index(points);
    let frames = 0..poses.len().min(tracks.num_frames());
    let one = |f: usize| (f, align_depth_frame(f, tracks, poses, &index, config));
    #[cfg(feature = "parallel")]
    let frames: BTreeMap<_, _> = {
        use rayon::prelude::*;
        frames.into_par_iter().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let frames: BTreeMap<_, _> = frames.map(one).collect();
    Ok(CalibrationTable { frames })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub static_sfm: usize,
    pub static_depth: usize,
    pub dynamic_depth: usize,
    /// Frames whose calibration failed; their samples are left out.
    pub skipped_frames: Vec<usize>,
    /// Samples whose calibrated depth was not positive.
    pub non_positive_depth: usize,
}

/// Triangulated points first, then per frame in order the back-projected
/// dynamic (and optionally static) depth samples.
pub fn fuse(
    tracks: &TrackSet,
    camera: &CameraModel,
    poses: &[PoseSE3],
    points: &[SfmPoint],
    calibrations: &CalibrationTable,
    config: &FusionConfig,
) -> Result<(ScenePointCloud, FusionReport), FusionError> {
    let mut cloud = ScenePointCloud::new();
    let mut report = FusionReport::default();
    for p in points {
        cloud.push(CloudPoint::new(p.position, PointLabel::StaticSfm, -1));
    }
    report.static_sfm = points.len();

    for (frame, pose) in poses.iter().enumerate().take(tracks.num_frames()) {
        let contributing: Vec<(PointLabel, Vector2<f64>, f64)> = tracks
            .iter()
            .filter(|t| t.is_dynamic() || config.include_static_depth)
            .filter_map(|t| {
                let pixel = t.position(frame).filter(|_| t.is_visible(frame))?;
                let d = t.depth_at(frame)?;
                let label = if t.is_dynamic() { PointLabel::DynamicDepth } else { PointLabel::StaticDepth };
                Some((label, pixel, d))
            })
            .collect();
        if contributing.is_empty() {
            continue;
        }
        let calibration = match calibrations.frames.get(&frame) {
            None => return Err(FusionError::MissingCalibration { frame }),
            Some(Err(_)) => {
                report.skipped_frames.push(frame);
                continue;
            }
            Some(Ok(c)) => c,
        };
        for (label, pixel, d) in contributing {
            let depth = calibration.apply(d);
            if !(depth > 0.0) {
                report.non_positive_depth += 1;
                continue;
            }
            let world = camera.back_project(pose, &pixel, depth).expect("depth is positive");
            cloud.push(CloudPoint::new(world, label, frame as i64));
            match label {
                PointLabel::DynamicDepth => report.dynamic_depth += 1,
                _ => report.static_depth += 1,
            }
        }
    }
    Ok((cloud, report))
}
