//! Depth-aware trajectory motion segmentation.
//!
//! Every visible track sample is lifted to 3D using per-frame min-max
//! normalized depth. For each consecutive frame pair a robust similarity
//! (plus an optional per-frame depth shift) is fitted to the co-visible
//! samples; tracks whose residuals exceed a multiple of the robust residual
//! scale in enough pairs are labeled dynamic.

mod background;
mod features;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use background::{estimate_depth_shifts, fit_pairwise_background, pair_samples, PairFit, PairSamples};
pub use features::{
    build_features, build_track_features, normalize_depth, normalize_depth_frame, normalized_track_depths,
    TrackFeatureWindow, FEATURE_COLUMNS,
};

use std::collections::BTreeMap;

use crate::geometry::{CameraModel, GeometryError};
use crate::io::TrackSet;
use crate::robust::{median, MAD_TO_SIGMA};
use crate::synthetic::SyntheticScene;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SegmentationError {
    #[error("empty input")]
    EmptyInput,
    #[error("track {id} has no depth samples")]
    MissingDepth { id: u64 },
    #[error("track {id}: longest visible run {len} is shorter than window {window}")]
    WindowTooShort { id: u64, len: usize, window: usize },
    #[error("frame pair ({frame}, {}): {found} co-visible tracks, need {required}", frame + 1)]
    TooFewCovisible { frame: usize, found: usize, required: usize },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("ground truth missing for track {id}")]
    MissingGroundTruth { id: u64 },
    #[error("invalid segmentation config: {0}")]
    InvalidConfig(String),
}

impl From<GeometryError> for SegmentationError {
    fn from(e: GeometryError) -> Self {
        SegmentationError::DegenerateConfiguration(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    /// Feature window length L.
    pub window: usize,
    /// Residual threshold multiplier, in units of the per-pair robust scale.
    pub kappa: f64,
    /// Fraction of flagged pairs at which a track becomes dynamic.
    pub theta: f64,
    pub min_covisible: usize,
    pub fit_iterations: usize,
    /// Clamp for normalized depth.
    pub depth_eps: f64,
    /// Estimate a per-frame shift of normalized depth alongside the similarity.
    pub depth_shift: bool,
    /// Frame gap used to estimate each frame's depth shift.
    pub shift_baseline: usize,
    /// Residuals below this are never flagged.
    pub residual_floor: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            window: 12,
            kappa: 3.0,
            theta: 0.5,
            min_covisible: 8,
            fit_iterations: 10,
            depth_eps: 1e-3,
            depth_shift: true,
            shift_baseline: 8,
            residual_floor: 1e-6,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<(), SegmentationError> {
        let fail = |m: &str| Err(SegmentationError::InvalidConfig(m.into()));
        if self.window < 2 {
            return fail("window must be at least 2");
        }
        if !(self.kappa > 0.0) {
            return fail("kappa must be positive");
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return fail("theta must be in (0, 1]");
        }
        if self.min_covisible < 3 {
            return fail("min_covisible must be at least 3");
        }
        if !(self.depth_eps >= 0.0 && self.depth_eps < 0.5) {
            return fail("depth_eps must be in [0, 0.5)");
        }
        if !(self.residual_floor >= 0.0) {
            return fail("residual_floor must be non-negative");
        }
        Ok(())
    }
}

/// Per-track outcome of classification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackVerdict {
    pub flagged: usize,
    pub pairs: usize,
    pub score: f64,
    pub dynamic: bool,
}

/// Flags per-pair residuals whose robust z-score within that pair exceeds
/// `kappa`, aggregates per track and writes `dyn` and `score`.
pub fn classify_tracks(
    tracks: &TrackSet,
    fits: &[PairFit],
    config: &SegmentationConfig,
) -> Result<(TrackSet, BTreeMap<u64, TrackVerdict>), SegmentationError> {
    config.validate()?;
    let mut counts: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for fit in fits {
        let threshold = pair_threshold(&fit.residuals, config);
        for (id, r) in fit.ids.iter().zip(&fit.residuals) {
            let e = counts.entry(*id).or_default();
            e.1 += 1;
            if *r > threshold {
                e.0 += 1;
            }
        }
    }
    let mut verdicts = BTreeMap::new();
    for t in tracks {
        let (flagged, pairs) = if t.visible_count() < 2 { (0, 0) } else { counts.get(&t.id).copied().unwrap_or_default() };
        let score = if pairs == 0 { 0.0 } else { flagged as f64 / pairs as f64 };
        verdicts.insert(t.id, TrackVerdict { flagged, pairs, score, dynamic: pairs > 0 && score >= config.theta });
    }
    let mut out = tracks.clone();
    out.update(|t| {
        let v = verdicts[&t.id];
        t.set_dynamic(v.dynamic);
        t.score = Some(v.score);
    })
    .map_err(SegmentationError::DegenerateConfiguration)?;
    Ok((out, verdicts))
}

/// `median + kappa * 1.4826 * MAD`, never below the configured floor.
fn pair_threshold(residuals: &[f64], config: &SegmentationConfig) -> f64 {
    let Some(med) = median(residuals) else { return f64::INFINITY };
    let deviations: Vec<f64> = residuals.iter().map(|r| (r - med).abs()).collect();
    let mad = median(&deviations).unwrap_or(0.0);
    (med + config.kappa * MAD_TO_SIGMA * mad).max(config.residual_floor)
}

/// Diagnostics of a segmentation run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub pairs_fitted: usize,
    /// Pairs skipped for lack of co-visible tracks.
    pub pairs_skipped: Vec<usize>,
    pub dynamic_tracks: usize,
    pub static_tracks: usize,
}

/// Full segmentation: normalize, lift, fit every consecutive pair, classify.
pub fn segment_tracks(
    tracks: &TrackSet,
    camera: &CameraModel,
    config: &SegmentationConfig,
) -> Result<(TrackSet, SegmentationReport), SegmentationError> {
    config.validate()?;
    if tracks.is_empty() {
        return Err(SegmentationError::EmptyInput);
    }
    if let Some(t) = tracks.iter().find(|t| t.depth.is_none()) {
        return Err(SegmentationError::MissingDepth { id: t.id });
    }
    let normalized = normalized_track_depths(tracks, config.depth_eps)?;
    let shifts = if config.depth_shift {
        estimate_depth_shifts(tracks, &normalized, camera, config)
    } else {
        vec![Some(0.0); tracks.num_frames()]
    };
    let frames: Vec<usize> = (0..tracks.num_frames().saturating_sub(1)).collect();
    let fit_one = |&frame: &usize| -> Result<Option<PairFit>, SegmentationError> {
        let mut samples = pair_samples(tracks, &normalized, camera, frame, frame + 1, config.depth_eps);
        samples.src_shift = shifts[frame];
        samples.dst_shift = shifts[frame + 1].filter(|_| shifts[frame].is_some());
        match fit_pairwise_background(&samples, config) {
            Ok(fit) => Ok(Some(fit)),
            Err(SegmentationError::TooFewCovisible { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    #[cfg(feature = "parallel")]
    let results: Vec<_> = {
        use rayon::prelude::*;
        frames.par_iter().map(fit_one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = frames.iter().map(fit_one).collect();

    let mut fits = Vec::new();
    let mut report = SegmentationReport::default();
    for (frame, r) in frames.iter().zip(results) {
        match r? {
            Some(fit) => fits.push(fit),
            None => report.pairs_skipped.push(*frame),
        }
    }
    report.pairs_fitted = fits.len();
    let (labeled, verdicts) = classify_tracks(tracks, &fits, config)?;
    report.dynamic_tracks = verdicts.values().filter(|v| v.dynamic).count();
    report.static_tracks = verdicts.len() - report.dynamic_tracks;
    Ok((labeled, report))
}

/// Reference labels from ground-truth motion: a track is dynamic when its true
/// image motion departs from the motion a static point at the same place would
/// have by more than `threshold_px` on at least `theta` of its visible pairs.
pub fn gt_labels_from_flow(
    scene: &SyntheticScene,
    tracks: &TrackSet,
    threshold_px: f64,
    theta: f64,
) -> Result<BTreeMap<u64, bool>, SegmentationError> {
    let cam = scene.camera();
    let mut labels = BTreeMap::new();
    for t in tracks {
        let gt = scene.point(t.id).ok_or(SegmentationError::MissingGroundTruth { id: t.id })?;
        let mut pairs = 0usize;
        let mut moving = 0usize;
        for f in t.start..t.end().saturating_sub(1) {
            if !(t.is_visible(f) && t.is_visible(f + 1)) {
                continue;
            }
            let pose = &scene.poses[f + 1];
            let (Ok(actual), Ok(rigid)) = (cam.project(pose, &gt.world[f + 1]), cam.project(pose, &gt.world[f])) else {
                continue;
            };
            pairs += 1;
            if (actual - rigid).norm() > threshold_px {
                moving += 1;
            }
        }
        labels.insert(t.id, pairs > 0 && moving as f64 >= theta * pairs as f64);
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::Track;
    use crate::synthetic::{generate_scene, SceneConfig};
    use nalgebra::Vector2;

    fn fit_with(ids: Vec<u64>, residuals: Vec<f64>) -> PairFit {
        PairFit { frame: 0, ids, residuals, transform: crate::geometry::Sim3::identity(), shift: (0.0, 0.0) }
    }

    fn plain_track(id: u64, len: usize) -> Track {
        Track {
            id,
            start: 0,
            points: vec![Vector2::zeros(); len],
            visible: vec![true; len],
            depth: Some(vec![1.0; len]),
            dynamic: None,
            score: None,
        }
    }

    #[test]
    fn zero_residuals_classify_static() {
        let tracks = TrackSet::new((0..5).map(|i| plain_track(i, 4)).collect(), 4).unwrap();
        let fits: Vec<_> = (0..3).map(|_| fit_with((0..5).collect(), vec![0.0; 5])).collect();
        let (out, _) = classify_tracks(&tracks, &fits, &SegmentationConfig::default()).unwrap();
        for t in &out {
            assert!(!t.is_dynamic());
            assert_eq!(t.score, Some(0.0));
        }
    }

    #[test]
    fn six_of_ten_flagged_is_dynamic() {
        let tracks = TrackSet::new((0..10).map(|i| plain_track(i, 11)).collect(), 11).unwrap();
        // track 0 is huge in 6 pairs; the other nine sit at 1.0
        let fits: Vec<_> = (0..10)
            .map(|k| {
                let mut r = vec![1.0; 10];
                if k < 6 {
                    r[0] = 100.0;
                }
                fit_with((0..10).collect(), r)
            })
            .collect();
        let (out, verdicts) = classify_tracks(&tracks, &fits, &SegmentationConfig::default()).unwrap();
        assert_eq!(verdicts[&0].flagged, 6);
        assert_eq!(out.get(0).unwrap().score, Some(0.6));
        assert!(out.get(0).unwrap().is_dynamic());
        assert!(!out.get(1).unwrap().is_dynamic());
    }

    #[test]
    fn single_visible_frame_defaults_static() {
        let mut t = plain_track(3, 3);
        t.visible = vec![true, false, false];
        let tracks = TrackSet::new(vec![t], 3).unwrap();
        let fits = vec![fit_with(vec![3], vec![50.0])];
        let (out, _) = classify_tracks(&tracks, &fits, &SegmentationConfig::default()).unwrap();
        assert!(!out.get(3).unwrap().is_dynamic());
        assert_eq!(out.get(3).unwrap().score, Some(0.0));
    }

    #[test]
    fn static_noiseless_scene_has_no_dynamic_tracks() {
        let cfg = SceneConfig { dynamic_fraction: 0.0, render_depth: false, num_tracks: 200, ..SceneConfig::default() };
        let (scene, tracks, _) = generate_scene(&cfg).unwrap();
        let (out, report) = segment_tracks(&tracks, scene.camera(), &SegmentationConfig::default()).unwrap();
        assert_eq!(report.dynamic_tracks, 0);
        assert!(out.iter().all(|t| !t.is_dynamic()));
    }

    #[test]
    fn flow_labels_agree_with_generator_at_zero_noise() {
        let cfg = SceneConfig { render_depth: false, num_tracks: 200, ..SceneConfig::default() };
        let (scene, tracks, _) = generate_scene(&cfg).unwrap();
        let labels = gt_labels_from_flow(&scene, &tracks, 1.0, 0.5).unwrap();
        for p in &scene.points {
            let t = tracks.get(p.id).unwrap();
            if t.visible_count() >= 2 {
                assert_eq!(labels[&p.id], p.dynamic, "track {}", p.id);
            }
        }
    }

    #[test]
    fn missing_gt_is_an_error() {
        let cfg = SceneConfig { render_depth: false, num_tracks: 40, num_frames: 3, ..SceneConfig::default() };
        let (scene, _, _) = generate_scene(&cfg).unwrap();
        let other = TrackSet::new(vec![plain_track(999, 3)], 3).unwrap();
        assert_eq!(
            gt_labels_from_flow(&scene, &other, 1.0, 0.5),
            Err(SegmentationError::MissingGroundTruth { id: 999 })
        );
    }

    #[test]
    fn bad_config_rejected() {
        for cfg in [
            SegmentationConfig { window: 1, ..Default::default() },
            SegmentationConfig { kappa: 0.0, ..Default::default() },
            SegmentationConfig { theta: 0.0, ..Default::default() },
            SegmentationConfig { theta: 1.5, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
