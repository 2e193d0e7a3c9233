//! Multi-view point triangulation: linear DLT on normalized rays followed by
//! Gauss-Newton refinement of the reprojection error.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{CameraModel, GeometryError, PoseSE3};

/// One view of a point.
#[derive(Debug, Clone, Copy)]
pub struct Observation {
    pub camera: CameraModel,
    pub pose: PoseSE3,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriangulationConfig {
    /// Minimum triangulation angle in degrees (largest pairwise ray angle).
    pub min_angle_deg: f64,
    /// Maximum Gauss-Newton iterations after the linear solve.
    pub refine_iterations: usize,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        Self { min_angle_deg: 1.0, refine_iterations: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulated {
    pub point: Vector3<f64>,
    /// Largest reprojection error over the views, in pixels.
    pub max_reprojection_error: f64,
    /// Smallest angle between any two viewing rays, in degrees.
    pub min_pair_angle_deg: f64,
    /// Largest angle between any two viewing rays, in degrees.
    pub max_pair_angle_deg: f64,
}

const CENTER_EPS: f64 = 1e-9;

pub fn triangulate(observations: &[Observation], config: &TriangulationConfig) -> Result<Triangulated, GeometryError> {
    if observations.len() < 2 {
        return Err(GeometryError::TooFewObservations(observations.len()));
    }

    let centers: Vec<Vector3<f64>> = observations.iter().map(|o| o.pose.center()).collect();
    let mean_center = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let spread = centers.iter().map(|c| (c - mean_center).norm()).fold(0.0, f64::max);
    if spread < CENTER_EPS {
        return Err(GeometryError::DegenerateGeometry("all camera centers coincide".into()));
    }

    let mut point = linear_solve(observations, &mean_center, spread)?;
    check_cheirality(observations, &point)?;

    for _ in 0..config.refine_iterations {
        let step = gauss_newton_step(observations, &point);
        let Some(step) = step else { break };
        point += step;
        if step.norm() <= 1e-15 * point.norm().max(1.0) {
            break;
        }
    }
    check_cheirality(observations, &point)?;

    let max_reprojection_error = observations
        .iter()
        .map(|o| o.camera.project(&o.pose, &point).map(|px| (px - o.pixel).norm()))
        .try_fold(0.0_f64, |acc, e| e.map(|e| acc.max(e)))?;

    let (min_pair_angle_deg, max_pair_angle_deg) = pair_angles(&centers, &point);
    if max_pair_angle_deg < config.min_angle_deg {
        return Err(GeometryError::DegenerateGeometry(format!(
            "triangulation angle {max_pair_angle_deg:.4} deg below {} deg",
            config.min_angle_deg
        )));
    }

    Ok(Triangulated { point, max_reprojection_error, min_pair_angle_deg, max_pair_angle_deg })
}

/// Smallest right singular vector of the stacked `[ray]_x (X_cam)` constraints,
/// solved in a frame centered on the cameras for conditioning.
fn linear_solve(observations: &[Observation], origin: &Vector3<f64>, scale: f64) -> Result<Vector3<f64>, GeometryError> {
    let n = observations.len();
    let rows = (3 * n).max(4);
    let mut a = DMatrix::<f64>::zeros(rows, 4);
    for (k, o) in observations.iter().enumerate() {
        let ray = o.camera.unproject(&o.pixel).normalize();
        let r_t = o.pose.rotation_matrix().transpose();
        let m: Matrix3<f64> = super::skew(&ray) * r_t;
        let offset = m * (origin - o.pose.center());
        for i in 0..3 {
            for j in 0..3 {
                a[(3 * k + i, j)] = m[(i, j)] * scale;
            }
            a[(3 * k + i, 3)] = offset[i];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| GeometryError::DegenerateGeometry("svd failed".into()))?;
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("four singular values");
    let h = v_t.row(idx);
    if h[3].abs() < 1e-14 * h.norm() {
        return Err(GeometryError::DegenerateGeometry("point at infinity".into()));
    }
    let y = Vector3::new(h[0], h[1], h[2]) / h[3];
    Ok(origin + y * scale)
}

fn gauss_newton_step(observations: &[Observation], point: &Vector3<f64>) -> Option<Vector3<f64>> {
    let mut h = Matrix3::zeros();
    let mut g = Vector3::zeros();
    for o in observations {
        let p_cam = o.pose.to_camera(point);
        let px = o.camera.project_camera(&p_cam).ok()?;
        let r = px - o.pixel;
        let j = o.camera.projection_jacobian(&p_cam) * o.pose.rotation_matrix().transpose();
        h += j.transpose() * j;
        g += j.transpose() * r;
    }
    h.cholesky().map(|c| -c.solve(&g))
}

fn check_cheirality(observations: &[Observation], point: &Vector3<f64>) -> Result<(), GeometryError> {
    for (view, o) in observations.iter().enumerate() {
        if o.pose.to_camera(point).z <= super::camera::MIN_DEPTH {
            return Err(GeometryError::BehindCamera { view });
        }
    }
    Ok(())
}

fn pair_angles(centers: &[Vector3<f64>], point: &Vector3<f64>) -> (f64, f64) {
    let rays: Vec<Vector3<f64>> = centers.iter().map(|c| (point - c).normalize()).collect();
    let mut lo = f64::INFINITY;
    let mut hi = 0.0_f64;
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            let angle = rays[i].dot(&rays[j]).clamp(-1.0, 1.0).acos().to_degrees();
            lo = lo.min(angle);
            hi = hi.max(angle);
        }
    }
    (lo, hi)
}

/// Sum of squared reprojection errors of `point` over the observations.
pub fn reprojection_cost(observations: &[Observation], point: &Vector3<f64>) -> f64 {
    observations
        .iter()
        .map(|o| match o.camera.project(&o.pose, point) {
            Ok(px) => (px - o.pixel).norm_squared(),
            Err(_) => f64::INFINITY,
        })
        .sum()
}
