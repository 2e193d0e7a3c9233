use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{SfmConfig, StaticTrack};
use crate::geometry::{triangulate, CameraModel, GeometryError, Observation, PoseSE3, TriangulationConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfmPoint {
    pub track_id: u64,
    pub position: Vector3<f64>,
    /// Largest reprojection error over the track's views, in pixels.
    pub max_reprojection_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TriangulationReport {
    pub attempted: usize,
    pub kept: usize,
    pub rejected_reprojection: usize,
    pub rejected_angle: usize,
    pub failed: usize,
}

enum Outcome {
    Kept(SfmPoint),
    Reprojection,
    Angle,
    Failed,
}

fn triangulate_one(track: &StaticTrack, camera: &CameraModel, poses: &[PoseSE3], config: &SfmConfig) -> Outcome {
    let observations: Vec<Observation> = track
        .observations
        .iter()
        .map(|&(f, pixel)| Observation { camera: *camera, pose: poses[f], pixel })
        .collect();
    let tri = TriangulationConfig { min_angle_deg: config.min_triangulation_angle_deg, ..TriangulationConfig::default() };
    match triangulate(&observations, &tri) {
        Ok(t) if t.max_reprojection_error > config.max_reprojection_px => Outcome::Reprojection,
        Ok(t) => Outcome::Kept(SfmPoint {
            track_id: track.id,
            position: t.point,
            max_reprojection_error: t.max_reprojection_error,
        }),
        Err(GeometryError::DegenerateGeometry(_)) => Outcome::Angle,
        Err(_) => Outcome::Failed,
    }
}

/// Triangulates every track over all its views; rejected tracks are counted
/// in the report and left out of the point list.
pub fn triangulate_tracks(
    tracks: &[StaticTrack],
    camera: &CameraModel,
    poses: &[PoseSE3],
    config: &SfmConfig,
) -> (Vec<SfmPoint>, TriangulationReport) {
    #[cfg(feature = "parallel")]
    let outcomes: Vec<Outcome> = {
        use rayon::prelude::*;
        tracks.par_iter().map(|t| triangulate_one(t, camera, poses, config)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<Outcome> = tracks.iter().map(|t| triangulate_one(t, camera, poses, config)).collect();

    let mut report = TriangulationReport { attempted: tracks.len(), ..Default::default() };
    let mut points = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Kept(p) => points.push(p),
            Outcome::Reprojection => report.rejected_reprojection += 1,
            Outcome::Angle => report.rejected_angle += 1,
            Outcome::Failed => report.failed += 1,
        }
    }
    report.kept = points.len();
    (points, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;

    #[test]
    fn report_counts_each_outcome() {
        let camera = CameraModel::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let poses = vec![PoseSE3::identity(), PoseSE3::new(Default::default(), Vector3::new(1.0, 0.0, 0.0))];
        let x = Vector3::new(0.3, 0.2, 5.0);
        let good = StaticTrack {
            id: 1,
            observations: vec![(0, camera.project(&poses[0], &x).unwrap()), (1, camera.project(&poses[1], &x).unwrap())],
        };
        let mut bad = good.clone();
        bad.id = 2;
        bad.observations[1].1 += Vector2::new(0.0, 30.0);
        let far = Vector3::new(0.0, 0.0, 1e4);
        let flat = StaticTrack {
            id: 3,
            observations: vec![(0, camera.project(&poses[0], &far).unwrap()), (1, camera.project(&poses[1], &far).unwrap())],
        };
        let (points, report) = triangulate_tracks(&[good, bad, flat], &camera, &poses, &SfmConfig::default());
        assert_eq!(points.len(), 1);
        assert!((points[0].position - x).norm() < 1e-9);
        assert_eq!(report, TriangulationReport { attempted: 3, kept: 1, rejected_reprojection: 1, rejected_angle: 1, failed: 0 });
    }
}
