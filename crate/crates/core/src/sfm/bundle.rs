use nalgebra::{Cholesky, DMatrix, DVector, Matrix2x3, Matrix2x6, Matrix3, Matrix3x6, Matrix6, Matrix6x3, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::SfmError;
use crate::geometry::{skew, CameraModel, PoseSE3};
use crate::robust::{huber_cost, huber_weight};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BundleConfig {
    pub max_iterations: usize,
    /// Huber threshold on the reprojection error norm, in pixels.
    pub huber_px: f64,
    pub lambda0: f64,
    pub cost_tolerance: f64,
    pub gradient_tolerance: f64,
    pub max_lambda: f64,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            huber_px: 2.0,
            lambda0: 1e-4,
            cost_tolerance: 1e-10,
            gradient_tolerance: 1e-10,
            max_lambda: 1e12,
        }
    }
}

impl BundleConfig {
    pub fn validate(&self) -> Result<(), SfmError> {
        let positive = [self.huber_px, self.lambda0, self.max_lambda];
        if positive.iter().any(|v| !(*v > 0.0)) || self.lambda0 > self.max_lambda {
            return Err(SfmError::InvalidConfig("bundle huber_px, lambda0 and max_lambda must be positive".into()));
        }
        if !(self.cost_tolerance >= 0.0) || !(self.gradient_tolerance >= 0.0) {
            return Err(SfmError::InvalidConfig("bundle tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BundleObservation {
    pub frame: usize,
    pub point: usize,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    CostTolerance,
    GradientTolerance,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleDiagnostics {
    /// Accepted steps.
    pub iterations: usize,
    pub rejected_steps: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub final_rms_px: f64,
    /// Robust cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub final_lambda: f64,
    pub termination: Termination,
}

const MIN_DEPTH: f64 = 1e-9;
const MIN_LAMBDA: f64 = 1e-12;

/// Reprojection residual of one observation with its Jacobians with respect
/// to the right-perturbation tangent `[rho, phi]` of the pose and to the
/// world point. `None` when the point is not in front of the camera.
pub fn residual_and_jacobians(
    camera: &CameraModel,
    pose: &PoseSE3,
    point: &Vector3<f64>,
    pixel: &Vector2<f64>,
) -> Option<(Vector2<f64>, Matrix2x6<f64>, Matrix2x3<f64>)> {
    let p = pose.to_camera(point);
    if p.z <= MIN_DEPTH {
        return None;
    }
    let residual = camera.project_camera(&p).ok()? - pixel;
    let proj = camera.projection_jacobian(&p);
    let mut dp = Matrix3x6::zeros();
    dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&-Matrix3::identity());
    dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&p));
    Some((residual, proj * dp, proj * pose.rotation_matrix().transpose()))
}

/// Huber cost summed over all observations; infinite if any point is behind
/// its camera.
pub fn total_cost(
    camera: &CameraModel,
    poses: &[PoseSE3],
    points: &[Vector3<f64>],
    observations: &[BundleObservation],
    huber_px: f64,
) -> f64 {
    observations
        .iter()
        .map(|o| {
            let p = poses[o.frame].to_camera(&points[o.point]);
            if p.z <= MIN_DEPTH {
                return f64::INFINITY;
            }
            camera.project_camera(&p).map_or(f64::INFINITY, |px| huber_cost((px - o.pixel).norm(), huber_px))
        })
        .sum()
}

struct Linearization {
    pose_blocks: Vec<Matrix6<f64>>,
    point_blocks: Vec<Matrix3<f64>>,
    cross: Vec<Matrix6x3<f64>>,
    pose_grad: Vec<Vector6<f64>>,
    point_grad: Vec<Vector3<f64>>,
}

fn linearize(
    camera: &CameraModel,
    poses: &[PoseSE3],
    points: &[Vector3<f64>],
    observations: &[BundleObservation],
    huber_px: f64,
) -> Result<Linearization, SfmError> {
    let mut lin = Linearization {
        pose_blocks: vec![Matrix6::zeros(); poses.len()],
        point_blocks: vec![Matrix3::zeros(); points.len()],
        cross: Vec::with_capacity(observations.len()),
        pose_grad: vec![Vector6::zeros(); poses.len()],
        point_grad: vec![Vector3::zeros(); points.len()],
    };
    for o in observations {
        let (r, jp, jx) = residual_and_jacobians(camera, &poses[o.frame], &points[o.point], &o.pixel)
            .ok_or_else(|| SfmError::NumericalFailure(format!("point {} is behind camera {}", o.point, o.frame)))?;
        let w = huber_weight(r.norm(), huber_px);
        let jpw = jp.transpose() * w;
        let jxw = jx.transpose() * w;
        lin.pose_blocks[o.frame] += jpw * jp;
        lin.point_blocks[o.point] += jxw * jx;
        lin.cross.push(jpw * jx);
        lin.pose_grad[o.frame] += jpw * r;
        lin.point_grad[o.point] += jxw * r;
    }
    Ok(lin)
}

enum Solve {
    Step(Vec<Vector6<f64>>, Vec<Vector3<f64>>),
    NotPositiveDefinite,
}

/// Damped Gauss-Newton step with the points eliminated by a Schur complement.
fn solve_step(lin: &Linearization, observations: &[BundleObservation], by_point: &[Vec<usize>], lambda: f64) -> Solve {
    let n_free = lin.pose_blocks.len() - 1;
    let damp6 = |m: &Matrix6<f64>| {
        let mut d = *m;
        for k in 0..6 {
            d[(k, k)] += lambda * m[(k, k)].max(1e-12);
        }
        d
    };
    let mut point_inv = Vec::with_capacity(lin.point_blocks.len());
    for m in &lin.point_blocks {
        let mut d = *m;
        for k in 0..3 {
            d[(k, k)] += lambda * m[(k, k)].max(1e-12);
        }
        match Cholesky::new(d) {
            Some(c) => point_inv.push(c.inverse()),
            None => return Solve::NotPositiveDefinite,
        }
    }

    let mut schur = DMatrix::<f64>::zeros(6 * n_free, 6 * n_free);
    let mut rhs = DVector::<f64>::zeros(6 * n_free);
    for f in 1..=n_free {
        schur.fixed_view_mut::<6, 6>(6 * (f - 1), 6 * (f - 1)).copy_from(&damp6(&lin.pose_blocks[f]));
        rhs.fixed_rows_mut::<6>(6 * (f - 1)).copy_from(&-lin.pose_grad[f]);
    }
    for (pt, obs) in by_point.iter().enumerate() {
        let inv = &point_inv[pt];
        let scaled: Vec<(usize, Matrix6x3<f64>)> = obs
            .iter()
            .filter(|&&k| observations[k].frame > 0)
            .map(|&k| (observations[k].frame, lin.cross[k] * inv))
            .collect();
        for &(fa, ref wa) in &scaled {
            let mut r = rhs.fixed_rows_mut::<6>(6 * (fa - 1));
            r += wa * lin.point_grad[pt];
            for &k in obs.iter().filter(|&&k| observations[k].frame > 0) {
                let fb = observations[k].frame;
                let mut block = schur.fixed_view_mut::<6, 6>(6 * (fa - 1), 6 * (fb - 1));
                block -= wa * lin.cross[k].transpose();
            }
        }
    }
    let pose_step = if n_free == 0 {
        DVector::zeros(0)
    } else {
        match Cholesky::new(schur) {
            Some(c) => c.solve(&rhs),
            None => return Solve::NotPositiveDefinite,
        }
    };
    let pose_deltas: Vec<Vector6<f64>> = std::iter::once(Vector6::zeros())
        .chain((0..n_free).map(|f| pose_step.fixed_rows::<6>(6 * f).into_owned()))
        .collect();
    let point_deltas = by_point
        .iter()
        .enumerate()
        .map(|(pt, obs)| {
            let mut b = -lin.point_grad[pt];
            for &k in obs {
                b -= lin.cross[k].transpose() * pose_deltas[observations[k].frame];
            }
            point_inv[pt] * b
        })
        .collect();
    Solve::Step(pose_deltas, point_deltas)
}

/// Levenberg-Marquardt over every pose except the first and every point.
/// On success `poses` and `points` hold the refined estimate.
pub fn bundle_adjust(
    camera: &CameraModel,
    poses: &mut [PoseSE3],
    points: &mut [Vector3<f64>],
    observations: &[BundleObservation],
    config: &BundleConfig,
) -> Result<BundleDiagnostics, SfmError> {
    config.validate()?;
    let mut by_point = vec![Vec::new(); points.len()];
    for (k, o) in observations.iter().enumerate() {
        if o.frame >= poses.len() || o.point >= points.len() {
            return Err(SfmError::InvalidConfig(format!("observation {k} indexes outside the problem")));
        }
        by_point[o.point].push(k);
    }
    if let Some(pt) = by_point.iter().position(|o| o.len() < 2) {
        return Err(SfmError::NumericalFailure(format!("point {pt} is observed in fewer than two views")));
    }

    let mut cost = total_cost(camera, poses, points, observations, config.huber_px);
    if !cost.is_finite() {
        return Err(SfmError::NumericalFailure("initial cost is not finite".into()));
    }
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut lambda = config.lambda0;
    let mut iterations = 0;
    let mut rejected = 0;

    let termination = 'outer: loop {
        let lin = linearize(camera, poses, points, observations, config.huber_px)?;
        let gradient = lin.pose_grad[1..]
            .iter()
            .flat_map(|g| g.iter())
            .chain(lin.point_grad.iter().flat_map(|g| g.iter()))
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        if gradient < config.gradient_tolerance {
            break Termination::GradientTolerance;
        }
        if iterations >= config.max_iterations {
            break Termination::MaxIterations;
        }
        loop {
            let (pose_deltas, point_deltas) = match solve_step(&lin, observations, &by_point, lambda) {
                Solve::Step(p, x) => (p, x),
                Solve::NotPositiveDefinite => {
                    lambda *= 10.0;
                    if lambda > config.max_lambda {
                        return Err(SfmError::NumericalFailure("normal equations are not positive definite".into()));
                    }
                    continue;
                }
            };
            let trial_poses: Vec<PoseSE3> = poses.iter().zip(&pose_deltas).map(|(p, d)| p.retract(d)).collect();
            let trial_points: Vec<Vector3<f64>> = points.iter().zip(&point_deltas).map(|(x, d)| x + d).collect();
            let trial = total_cost(camera, &trial_poses, &trial_points, observations, config.huber_px);
            if trial < cost {
                let relative = (cost - trial) / cost;
                poses.copy_from_slice(&trial_poses);
                points.copy_from_slice(&trial_points);
                cost = trial;
                history.push(cost);
                iterations += 1;
                lambda = (lambda / 10.0).max(MIN_LAMBDA);
                if relative < config.cost_tolerance {
                    break 'outer Termination::CostTolerance;
                }
                break;
            }
            rejected += 1;
            if trial.is_finite() && (trial - cost) <= config.cost_tolerance * cost {
                break 'outer Termination::CostTolerance;
            }
            lambda *= 10.0;
            if lambda > config.max_lambda {
                return Err(SfmError::SolverDiverged { lambda });
            }
        }
    };

    let squared: f64 = observations
        .iter()
        .map(|o| camera.project(&poses[o.frame], &points[o.point]).map_or(f64::INFINITY, |px| (px - o.pixel).norm_squared()))
        .sum();
    Ok(BundleDiagnostics {
        iterations,
        rejected_steps: rejected,
        initial_cost,
        final_cost: cost,
        final_rms_px: (squared / observations.len().max(1) as f64).sqrt(),
        cost_history: history,
        final_lambda: lambda,
        termination,
    })
}
