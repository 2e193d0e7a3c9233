use nalgebra::{Matrix2, Matrix3, Matrix4, Matrix5, SMatrix, SVector, UnitQuaternion, Vector2, Vector3, Vector4, Vector5};

use super::features::lift;
use super::{SegmentationConfig, SegmentationError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{
    estimate_relative_pose, skew, two_view_depths, umeyama_weighted, CameraModel, RansacConfig, Sim3,
};
use crate::io::TrackSet;
use crate::robust::{huber_weight, median, robust_scale, tukey_weight};

/// Co-visible samples of two frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSamples {
    pub frame: usize,
    pub other: usize,
    pub ids: Vec<u64>,
    /// Normalized depth and unit-z viewing ray at `frame`.
    pub src_depth: Vec<f64>,
    pub src_ray: Vec<Vector3<f64>>,
    /// Same at `other`.
    pub dst_depth: Vec<f64>,
    pub dst_ray: Vec<Vector3<f64>>,
    /// Known depth shift of `frame`; when absent and shifts are enabled both
    /// shifts are estimated.
    pub src_shift: Option<f64>,
    /// Starting value for the shift of `other`.
    pub dst_shift: Option<f64>,
}

impl PairSamples {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn points(&self, shift: (f64, f64)) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
        let src = self.src_ray.iter().zip(&self.src_depth).map(|(r, n)| r * (n - shift.0)).collect();
        let dst = self.dst_ray.iter().zip(&self.dst_depth).map(|(r, n)| r * (n - shift.1)).collect();
        (src, dst)
    }
}

/// Gathers tracks visible at both `frame` and `other`. `normalized` comes from
/// [`super::normalized_track_depths`]. Samples pinned to the clamp bounds
/// `eps` or `1 - eps` are left out.
pub fn pair_samples(
    tracks: &TrackSet,
    normalized: &[Vec<Option<f64>>],
    camera: &CameraModel,
    frame: usize,
    other: usize,
    eps: f64,
) -> PairSamples {
    let clamped = |n: f64| n <= eps || n >= 1.0 - eps;
    let mut s = PairSamples {
        frame,
        other,
        ids: Vec::new(),
        src_depth: Vec::new(),
        src_ray: Vec::new(),
        dst_depth: Vec::new(),
        dst_ray: Vec::new(),
        src_shift: None,
        dst_shift: None,
    };
    for (t, n) in tracks.iter().zip(normalized) {
        if frame.min(other) < t.start || frame.max(other) >= t.end() {
            continue;
        }
        let (i, j) = (frame - t.start, other - t.start);
        let (Some(a), Some(b)) = (n[i], n[j]) else { continue };
        if clamped(a) || clamped(b) {
            continue;
        }
        s.ids.push(t.id);
        s.src_depth.push(a);
        s.src_ray.push(lift(camera, &t.points[i], 1.0));
        s.dst_depth.push(b);
        s.dst_ray.push(lift(camera, &t.points[j], 1.0));
    }
    s
}

/// Robust background motion between two frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFit {
    pub frame: usize,
    pub ids: Vec<u64>,
    /// `‖T(X_t) - X_{t+1}‖` per co-visible track.
    pub residuals: Vec<f64>,
    pub transform: Sim3,
    /// Normalized-depth shifts subtracted at `frame` and `other`.
    pub shift: (f64, f64),
}

const GN_STEPS: usize = 3;
const MAX_ALTERNATIONS: usize = 200;
const SHIFT_TOLERANCE: f64 = 1e-13;
const SHIFT_GRID: usize = 20;
const GRID_ROUNDS: usize = 6;

/// Huber-reweighted similarity fit of the background.
///
/// Normalized depth is affine in true depth, so each frame's lifted points
/// are a similarity of the true ones only after subtracting a per-frame shift.
/// With `depth_shift` enabled and `src_shift` known, every round alternates
/// the closed-form similarity with a linear solve for translation and the
/// shift of the second frame until the shift settles. Without a known shift both shifts are estimated
/// (see [`estimate_depth_shifts`]).
pub fn fit_pairwise_background(samples: &PairSamples, config: &SegmentationConfig) -> Result<PairFit, SegmentationError> {
    if samples.len() < config.min_covisible {
        return Err(SegmentationError::TooFewCovisible {
            frame: samples.frame,
            found: samples.len(),
            required: config.min_covisible,
        });
    }
    if config.depth_shift && samples.src_shift.is_none() {
        return fit_free_shifts(samples, config);
    }
    let mut weights = vec![1.0; samples.len()];
    let src_shift = samples.src_shift.unwrap_or(0.0);
    let mut shift = (src_shift, samples.dst_shift.unwrap_or(src_shift));
    let mut transform = Sim3::identity();
    let mut residuals = Vec::new();
    let iterations = config.fit_iterations.max(1);
    for iteration in 0..iterations {
        let rounds = if config.depth_shift { MAX_ALTERNATIONS } else { 1 };
        for _ in 0..rounds {
            let (src, dst) = samples.points(shift);
            transform = umeyama_weighted(&src, &dst, Some(&weights), true)?;
            if config.depth_shift {
                let Some((t, s)) = solve_shift(samples, &transform, &weights, Some(shift.0)) else { break };
                transform.translation = t;
                let settled = (s.1 - shift.1).abs() < SHIFT_TOLERANCE;
                shift = s;
                if settled {
                    break;
                }
            }
        }
        residuals = pair_residuals(samples, &transform, shift);
        reweight(&mut weights, &residuals, config.depth_shift && 2 * iteration >= iterations);
    }
    Ok(PairFit { frame: samples.frame, ids: samples.ids.clone(), residuals, transform, shift })
}

/// Huber weights while a fit settles, then Tukey so that points on moving
/// objects stop pulling on the background.
fn reweight(weights: &mut [f64], residuals: &[f64], redescend: bool) {
    let sigma = robust_scale(residuals).max(1e-12);
    for (w, r) in weights.iter_mut().zip(residuals) {
        *w = if redescend { tukey_weight(*r, 4.685 * sigma) } else { huber_weight(*r, 1.345 * sigma) };
    }
}

/// Joint fit of the similarity and both shifts: grid search over the common
/// shift, then Levenberg-Marquardt under Huber and finally Tukey weights.
fn fit_free_shifts(samples: &PairSamples, config: &SegmentationConfig) -> Result<PairFit, SegmentationError> {
    let (mut transform, mut shift, mut weights) = initial_shift(samples)?;
    let mut residuals = Vec::new();
    let iterations = config.fit_iterations.max(1);
    for iteration in 0..iterations {
        for _ in 0..GN_STEPS {
            match gauss_newton_step(samples, &transform, shift, &weights) {
                Some((t, s)) => {
                    transform = t;
                    shift = s;
                }
                None => break,
            }
        }
        residuals = pair_residuals(samples, &transform, shift);
        reweight(&mut weights, &residuals, 2 * iteration >= iterations);
    }
    Ok(PairFit { frame: samples.frame, ids: samples.ids.clone(), residuals, transform, shift })
}

/// Depth shift of every frame, estimated against a partner `baseline` frames
/// away where parallax pins it down; the baseline halves until enough tracks
/// are co-visible. `None` when no partner qualifies.
pub fn estimate_depth_shifts(
    tracks: &TrackSet,
    normalized: &[Vec<Option<f64>>],
    camera: &CameraModel,
    config: &SegmentationConfig,
) -> Vec<Option<f64>> {
    let n = tracks.num_frames();
    let one = |&frame: &usize| -> Option<f64> {
        let mut k = config.shift_baseline.max(1);
        loop {
            let partner = if frame + k < n { Some(frame + k) } else { frame.checked_sub(k) };
            if let Some(other) = partner {
                let samples = pair_samples(tracks, normalized, camera, frame, other, config.depth_eps);
                if samples.len() >= config.min_covisible {
                    if let Some(shift) = epipolar_shift(&samples, camera, config) {
                        return Some(shift);
                    }
                    if let Ok(fit) = fit_free_shifts(&samples, config) {
                        return Some(fit.shift.0);
                    }
                }
            }
            if k == 1 {
                return None;
            }
            k /= 2;
        }
    };
    let frames: Vec<usize> = (0..n).collect();
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        frames.par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    frames.iter().map(one).collect()
}

const MIN_PARALLAX_DEG: f64 = 1.0;

/// Shift of `samples.frame` from depths triangulated with the two-view
/// geometry: regressing those depths on normalized depth gives the shift as
/// the normalized depth at zero range. `None` without enough parallax.
fn epipolar_shift(samples: &PairSamples, camera: &CameraModel, config: &SegmentationConfig) -> Option<f64> {
    let src: Vec<Vector2<f64>> = samples.src_ray.iter().map(|r| r.xy()).collect();
    let dst: Vec<Vector2<f64>> = samples.dst_ray.iter().map(|r| r.xy()).collect();
    let ransac = RansacConfig { threshold: 1.0 / camera.focal(), ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(((samples.frame as u64) << 32) | samples.other as u64);
    let geometry = estimate_relative_pose(&src, &dst, &ransac, &mut rng).ok()?;
    let min_cos = MIN_PARALLAX_DEG.to_radians().cos();
    let mut depth = Vec::new();
    let mut normalized = Vec::new();
    for i in (0..samples.len()).filter(|&i| geometry.inliers[i]) {
        let Some((z, zd)) = two_view_depths(&geometry.rotation, &geometry.translation, &src[i], &dst[i]) else {
            continue;
        };
        let p = samples.dst_ray[i] * zd;
        let from_src = p - geometry.translation;
        if z > 0.0 && zd > 0.0 && p.dot(&from_src) < min_cos * p.norm() * from_src.norm() {
            depth.push(z);
            normalized.push(samples.src_depth[i]);
        }
    }
    if depth.len() < config.min_covisible.max(3) {
        return None;
    }
    let mut weights = vec![1.0; depth.len()];
    let mut line = (0.0, 0.0);
    for iteration in 0..2 * config.fit_iterations {
        let mut m = Matrix2::zeros();
        let mut b = Vector2::zeros();
        for ((&z, &n), &w) in depth.iter().zip(&normalized).zip(&weights) {
            let row = Vector2::new(n, 1.0) / z;
            m += w * row * row.transpose();
            b += w * row;
        }
        let solved = m.try_inverse()? * b;
        line = (solved.x, solved.y);
        let residuals: Vec<f64> = depth.iter().zip(&normalized).map(|(z, n)| ((line.0 * n + line.1) / z - 1.0).abs()).collect();
        reweight(&mut weights, &residuals, iteration >= config.fit_iterations);
    }
    (line.0 > 0.0).then(|| -line.1 / line.0)
}

fn pair_residuals(samples: &PairSamples, transform: &Sim3, shift: (f64, f64)) -> Vec<f64> {
    let (src, dst) = samples.points(shift);
    src.iter().zip(&dst).map(|(a, b)| (transform.apply(a) - b).norm()).collect()
}

/// With scale and rotation fixed the residual
/// `sR(n_s - b_s) r_s + T - (n_d - b_d) r_d` is linear in `(T, b_s, b_d)`.
/// `fixed_src` pins `b_s`.
fn solve_shift(
    samples: &PairSamples,
    transform: &Sim3,
    weights: &[f64],
    fixed_src: Option<f64>,
) -> Option<(Vector3<f64>, (f64, f64))> {
    let sr: Matrix3<f64> = transform.rotation_matrix() * transform.scale;
    let mut lhs = Matrix5::<f64>::zeros();
    let mut rhs = Vector5::<f64>::zeros();
    for i in 0..samples.len() {
        let a = sr * samples.src_ray[i];
        let b = samples.dst_ray[i];
        let c = a * samples.src_depth[i] - b * samples.dst_depth[i];
        let w = weights[i];
        for k in 0..3 {
            // row k of J = [e_k, -a_k, b_k]
            let mut row = Vector5::zeros();
            row[k] = 1.0;
            row[3] = -a[k];
            row[4] = b[k];
            lhs += row * row.transpose() * w;
            rhs -= row * (c[k] * w);
        }
    }
    let ridge = 1e-12 * lhs.trace().max(1.0);
    for k in 3..5 {
        lhs[(k, k)] += ridge;
    }
    if let Some(b_s) = fixed_src {
        let idx = [0usize, 1, 2, 4];
        let sub = Matrix4::from_fn(|i, j| lhs[(idx[i], idx[j])]);
        let sub_rhs = Vector4::from_fn(|i, _| rhs[idx[i]] - lhs[(idx[i], 3)] * b_s);
        let u = sub.cholesky()?.solve(&sub_rhs);
        if !u.iter().all(|v| v.is_finite()) {
            return None;
        }
        return Some((Vector3::new(u[0], u[1], u[2]), (b_s, u[3])));
    }
    let u = lhs.cholesky()?.solve(&rhs);
    if !u.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some((Vector3::new(u[0], u[1], u[2]), (u[3], u[4])))
}

/// Common depth shift with the smallest relative median residual over a grid.
/// The shift is parametrized by the near/far depth ratio `rho` through
/// `-rho / (1 - rho)`, which covers every positive depth range.
fn initial_shift(samples: &PairSamples) -> Result<(Sim3, (f64, f64), Vec<f64>), SegmentationError> {
    let mut best = (f64::INFINITY, Sim3::identity(), (0.0, 0.0), Vec::new());
    for k in 0..SHIFT_GRID {
        let rho = k as f64 / SHIFT_GRID as f64;
        let c = -rho / (1.0 - rho);
        let mut shift = (c, c);
        let mut weights = vec![1.0; samples.len()];
        let mut transform = Sim3::identity();
        for _ in 0..GRID_ROUNDS {
            let (src, dst) = samples.points(shift);
            transform = umeyama_weighted(&src, &dst, Some(&weights), true)?;
            if let Some((t, s)) = solve_shift(samples, &transform, &weights, Some(c)) {
                transform.translation = t;
                shift = s;
            }
            let r = pair_residuals(samples, &transform, shift);
            let sigma = robust_scale(&r).max(1e-12);
            for (w, r) in weights.iter_mut().zip(&r) {
                *w = tukey_weight(*r, 4.685 * sigma);
            }
        }
        let r = pair_residuals(samples, &transform, shift);
        let size: Vec<f64> = samples.points(shift).1.iter().map(|p| p.norm()).collect();
        let score = median(&r).unwrap_or(f64::INFINITY) / median(&size).unwrap_or(1.0).max(1e-12);
        if score < best.0 {
            best = (score, transform, shift, weights);
        }
    }
    Ok((best.1, best.2, best.3))
}

fn weighted_cost(samples: &PairSamples, transform: &Sim3, shift: (f64, f64), weights: &[f64]) -> f64 {
    pair_residuals(samples, transform, shift).iter().zip(weights).map(|(r, w)| w * r * r).sum()
}

/// One Levenberg-Marquardt step on `(scale, rotation, translation, shifts)`.
/// Returns `None` when no damping level lowers the weighted cost.
fn gauss_newton_step(
    samples: &PairSamples,
    transform: &Sim3,
    shift: (f64, f64),
    weights: &[f64],
) -> Option<(Sim3, (f64, f64))> {
    let rot = transform.rotation_matrix();
    let mut lhs = SMatrix::<f64, 9, 9>::zeros();
    let mut rhs = SVector::<f64, 9>::zeros();
    for i in 0..samples.len() {
        let x_src = samples.src_ray[i] * (samples.src_depth[i] - shift.0);
        let x_dst = samples.dst_ray[i] * (samples.dst_depth[i] - shift.1);
        let rx = rot * x_src;
        let e = rx * transform.scale + transform.translation - x_dst;
        let mut jac = SMatrix::<f64, 3, 9>::zeros();
        jac.fixed_view_mut::<3, 1>(0, 0).copy_from(&rx);
        jac.fixed_view_mut::<3, 3>(0, 1).copy_from(&(-skew(&rx) * transform.scale));
        jac.fixed_view_mut::<3, 3>(0, 4).copy_from(&Matrix3::identity());
        jac.fixed_view_mut::<3, 1>(0, 7).copy_from(&(-(rot * samples.src_ray[i]) * transform.scale));
        jac.fixed_view_mut::<3, 1>(0, 8).copy_from(&samples.dst_ray[i]);
        lhs += jac.transpose() * jac * weights[i];
        rhs -= jac.transpose() * e * weights[i];
    }
    let before = weighted_cost(samples, transform, shift, weights);
    let mut lambda = 1e-9;
    while lambda < 1e3 {
        let mut damped = lhs;
        for k in 0..9 {
            damped[(k, k)] += lambda * lhs[(k, k)] + 1e-15;
        }
        if let Some(chol) = damped.cholesky() {
            let step = chol.solve(&rhs);
            let scale = transform.scale + step[0];
            if step.iter().all(|v| v.is_finite()) && scale > 0.0 {
                let rotation = UnitQuaternion::from_scaled_axis(Vector3::new(step[1], step[2], step[3])) * transform.rotation;
                let candidate = Sim3::new(scale, rotation, transform.translation + Vector3::new(step[4], step[5], step[6]));
                let candidate_shift = (shift.0 + step[7], shift.1 + step[8]);
                if weighted_cost(samples, &candidate, candidate_shift, weights) < before {
                    return Some((candidate, candidate_shift));
                }
            }
        }
        lambda *= 10.0;
    }
    None
}
