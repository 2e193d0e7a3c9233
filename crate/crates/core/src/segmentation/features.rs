use nalgebra::{DMatrix, Vector2, Vector3};

use super::{SegmentationConfig, SegmentationError};
use crate::geometry::CameraModel;
use crate::io::{DepthFrame, Track, TrackSet};

/// `[u, v, X, Y, Z, du, dv, dX, dY, dZ]`
pub const FEATURE_COLUMNS: usize = 10;

/// Min-max normalization into `[eps, 1 - eps]`; a flat input maps to 0.5.
pub fn normalize_depth(values: &[f64], eps: f64) -> Result<Vec<f64>, SegmentationError> {
    if values.is_empty() {
        return Err(SegmentationError::EmptyInput);
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range < 1e-12 {
        return Ok(vec![0.5; values.len()]);
    }
    Ok(values.iter().map(|v| ((v - lo) / range).clamp(eps, 1.0 - eps)).collect())
}

pub fn normalize_depth_frame(frame: &DepthFrame, eps: f64) -> Vec<f64> {
    let values: Vec<f64> = frame.data.iter().map(|&v| v as f64).collect();
    normalize_depth(&values, eps).expect("depth frames are never empty")
}

/// Per-frame normalization over the visible samples of all tracks. The result
/// is aligned with `tracks.tracks()` and each track's local frame index; `None`
/// marks invisible frames.
pub fn normalized_track_depths(tracks: &TrackSet, eps: f64) -> Result<Vec<Vec<Option<f64>>>, SegmentationError> {
    let mut out: Vec<Vec<Option<f64>>> = tracks.iter().map(|t| vec![None; t.len()]).collect();
    for frame in 0..tracks.num_frames() {
        let mut slots = Vec::new();
        let mut values = Vec::new();
        for (k, t) in tracks.iter().enumerate() {
            if !t.is_visible(frame) {
                continue;
            }
            let d = t.depth_at(frame).ok_or(SegmentationError::MissingDepth { id: t.id })?;
            slots.push((k, frame - t.start));
            values.push(d);
        }
        if values.is_empty() {
            continue;
        }
        for ((k, i), n) in slots.into_iter().zip(normalize_depth(&values, eps)?) {
            out[k][i] = Some(n);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackFeatureWindow {
    pub track_id: u64,
    pub start: usize,
    pub rows: Vec<[f64; FEATURE_COLUMNS]>,
}

impl TrackFeatureWindow {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), FEATURE_COLUMNS, |i, j| self.rows[i][j])
    }
}

/// Back-projection of a pixel using normalized depth as the camera-frame z.
pub(crate) fn lift(camera: &CameraModel, pixel: &Vector2<f64>, normalized: f64) -> Vector3<f64> {
    camera.unproject(pixel) * normalized
}

/// Maximal runs `[a, b)` of consecutive visible frames, in local indices.
fn visible_runs(normalized: &[Option<f64>]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, n) in normalized.iter().enumerate() {
        match (n.is_some(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, normalized.len()));
    }
    runs
}

/// Windows of exactly `window` rows covering each visible run; a run whose
/// length is not a multiple of `window` gets a last window aligned to its end.
pub fn build_track_features(
    track: &Track,
    normalized: &[Option<f64>],
    camera: &CameraModel,
    window: usize,
) -> Result<Vec<TrackFeatureWindow>, SegmentationError> {
    let runs = visible_runs(normalized);
    let longest = runs.iter().map(|(a, b)| b - a).max().unwrap_or(0);
    if longest < window {
        return Err(SegmentationError::WindowTooShort { id: track.id, len: longest, window });
    }
    let mut out = Vec::new();
    for (a, b) in runs {
        if b - a < window {
            continue;
        }
        let mut starts: Vec<usize> = (a..=b - window).step_by(window).collect();
        if (b - a) % window != 0 {
            starts.push(b - window);
        }
        for s in starts {
            let lifted: Vec<(Vector2<f64>, Vector3<f64>)> = (s..s + window)
                .map(|i| {
                    let px = track.points[i];
                    (px, lift(camera, &px, normalized[i].expect("inside a visible run")))
                })
                .collect();
            let rows = (0..window)
                .map(|i| {
                    let (px, x) = lifted[i];
                    let (dp, dx) = if i + 1 < window {
                        (lifted[i + 1].0 - px, lifted[i + 1].1 - x)
                    } else {
                        (Vector2::zeros(), Vector3::zeros())
                    };
                    [px.x, px.y, x.x, x.y, x.z, dp.x, dp.y, dx.x, dx.y, dx.z]
                })
                .collect();
            out.push(TrackFeatureWindow { track_id: track.id, start: track.start + s, rows });
        }
    }
    Ok(out)
}

/// Feature windows of every track that has a visible run of at least
/// `config.window` frames. Shorter tracks are skipped.
pub fn build_features(
    tracks: &TrackSet,
    camera: &CameraModel,
    config: &SegmentationConfig,
) -> Result<Vec<TrackFeatureWindow>, SegmentationError> {
    config.validate()?;
    if let Some(t) = tracks.iter().find(|t| t.depth.is_none()) {
        return Err(SegmentationError::MissingDepth { id: t.id });
    }
    let normalized = normalized_track_depths(tracks, config.depth_eps)?;
    let mut out = Vec::new();
    for (t, n) in tracks.iter().zip(&normalized) {
        match build_track_features(t, n, camera, config.window) {
            Ok(w) => out.extend(w),
            Err(SegmentationError::WindowTooShort { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_camera() -> CameraModel {
        CameraModel { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, width: 100, height: 100 }
    }

    fn track(points: Vec<Vector2<f64>>, visible: Vec<bool>) -> Track {
        let n = points.len();
        Track { id: 1, start: 0, points, visible, depth: Some(vec![1.0; n]), dynamic: None, score: None }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_depth(&[2.0, 4.0, 6.0], 1e-3).unwrap(), vec![0.001, 0.5, 0.999]);
        assert_eq!(normalize_depth(&[5.0, 5.0, 5.0], 1e-3).unwrap(), vec![0.5; 3]);
        assert_eq!(normalize_depth(&[], 1e-3), Err(SegmentationError::EmptyInput));
    }

    #[test]
    fn raster_normalization() {
        let f = DepthFrame::new(0, 2, 1, vec![1.0, 3.0]);
        assert_eq!(normalize_depth_frame(&f, 0.01), vec![0.01, 0.99]);
    }

    #[test]
    fn window_shape() {
        let t = track(vec![Vector2::new(1.0, 2.0); 8], vec![true; 8]);
        let w = build_track_features(&t, &[Some(0.5); 8], &unit_camera(), 8).unwrap();
        assert_eq!(w.len(), 1);
        let m = w[0].matrix();
        assert_eq!((m.nrows(), m.ncols()), (8, 10));
    }

    #[test]
    fn static_point_has_zero_motion() {
        let t = track(vec![Vector2::new(3.0, 4.0); 6], vec![true; 6]);
        let w = build_track_features(&t, &[Some(0.7); 6], &unit_camera(), 6).unwrap();
        for row in &w[0].rows {
            assert!(row[5..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn translating_point_motion_columns() {
        let pts = (0..5).map(|i| Vector2::new(i as f64, 2.0)).collect();
        let t = track(pts, vec![true; 5]);
        let w = build_track_features(&t, &[Some(0.5); 5], &unit_camera(), 5).unwrap();
        for row in &w[0].rows[..4] {
            assert_eq!(row[5], 1.0);
            assert_eq!(row[6], 0.0);
            assert_eq!(row[7], 0.5);
            assert_eq!(row[8], 0.0);
            assert_eq!(row[9], 0.0);
        }
        assert!(w[0].rows[4][5..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invisible_frames_split_windows() {
        let vis = vec![true, true, true, false, true, true, true, true];
        let norm: Vec<Option<f64>> = vis.iter().map(|&v| v.then_some(0.5)).collect();
        let t = track(vec![Vector2::zeros(); 8], vis);
        let w = build_track_features(&t, &norm, &unit_camera(), 3).unwrap();
        let starts: Vec<usize> = w.iter().map(|w| w.start).collect();
        assert_eq!(starts, vec![0, 4, 5]);
        assert!(matches!(
            build_track_features(&t, &norm, &unit_camera(), 5),
            Err(SegmentationError::WindowTooShort { len: 4, .. })
        ));
    }

    #[test]
    fn missing_depth_reported() {
        let mut t = track(vec![Vector2::zeros(); 3], vec![true; 3]);
        t.depth = None;
        let set = TrackSet::new(vec![t], 3).unwrap();
        let r = build_features(&set, &unit_camera(), &SegmentationConfig { window: 2, ..Default::default() });
        assert_eq!(r, Err(SegmentationError::MissingDepth { id: 1 }));
    }

    proptest! {
        #[test]
        fn normalized_values_stay_in_range(values in prop::collection::vec(1e-3f64..1e3, 1..50), eps in 0.0f64..0.1) {
            for v in normalize_depth(&values, eps).unwrap() {
                prop_assert!(v >= eps && v <= 1.0 - eps);
            }
        }

        #[test]
        fn normalization_absorbs_positive_affine_maps(
            values in prop::collection::vec(1e-2f64..1e2, 2..40),
            scale in 0.1f64..10.0,
            shift in 0.0f64..5.0,
        ) {
            let mapped: Vec<f64> = values.iter().map(|v| scale * v + shift).collect();
            let a = normalize_depth(&values, 1e-3).unwrap();
            let b = normalize_depth(&mapped, 1e-3).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
