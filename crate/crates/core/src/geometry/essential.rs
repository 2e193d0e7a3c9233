//! Two-view relative pose from calibrated correspondences.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3, SVD};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::GeometryError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Sampson distance threshold in normalized image units.
    pub threshold: f64,
    /// Success probability used for adaptive termination.
    pub confidence: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { iterations: 2000, threshold: 1.0 / 500.0, confidence: 0.9999 }
    }
}

/// `x_dst ~ rotation * x_src + translation`, with a unit-norm translation.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewGeometry {
    pub essential: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub inliers: Vec<bool>,
}

impl TwoViewGeometry {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

const MIN_POINTS: usize = 8;

fn homogeneous(p: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(p.x, p.y, 1.0)
}

fn conditioning(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vector2<f64>>() / n;
    let spread = points.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    let s = if spread > 1e-15 { std::f64::consts::SQRT_2 / spread } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0)
}

/// Normalized eight-point estimate projected onto the essential manifold.
pub fn eight_point(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Result<Matrix3<f64>, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::LengthMismatch { left: src.len(), right: dst.len() });
    }
    if src.len() < MIN_POINTS {
        return Err(GeometryError::TooFewPoints(src.len()));
    }
    let ts = conditioning(src);
    let td = conditioning(dst);
    let mut a = DMatrix::zeros(src.len().max(9), 9);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let s = ts * homogeneous(s);
        let d = td * homogeneous(d);
        for r in 0..3 {
            for c in 0..3 {
                a[(i, 3 * r + c)] = d[r] * s[c];
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| GeometryError::DegenerateConfiguration("svd failed".into()))?;
    let (k, _) = svd.singular_values.iter().enumerate().fold((0, f64::INFINITY), |best, (i, &s)| {
        if s < best.1 {
            (i, s)
        } else {
            best
        }
    });
    let e = v_t.row(k);
    let conditioned = Matrix3::from_row_slice(&[e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8]]);
    let raw = td.transpose() * conditioned * ts;
    project_essential(&raw)
}

fn project_essential(m: &Matrix3<f64>) -> Result<Matrix3<f64>, GeometryError> {
    let svd = SVD::new(*m, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v)) => (u, v),
        _ => return Err(GeometryError::DegenerateConfiguration("svd failed".into())),
    };
    let s = &svd.singular_values;
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let mean = 0.5 * (s[idx[0]] + s[idx[1]]);
    if mean < 1e-15 {
        return Err(GeometryError::DegenerateConfiguration("rank-deficient essential matrix".into()));
    }
    let mut d = Matrix3::zeros();
    d[(idx[0], idx[0])] = 1.0;
    d[(idx[1], idx[1])] = 1.0;
    let e = u * d * v_t;
    Ok(e / e.norm())
}

/// First-order geometric distance of a correspondence to the epipolar
/// constraint, in the units of the input coordinates.
pub fn sampson_distance(essential: &Matrix3<f64>, src: &Vector2<f64>, dst: &Vector2<f64>) -> f64 {
    let s = homogeneous(src);
    let d = homogeneous(dst);
    let es = essential * s;
    let etd = essential.transpose() * d;
    let num = d.dot(&es);
    let den = es.x * es.x + es.y * es.y + etd.x * etd.x + etd.y * etd.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    num.abs() / den.sqrt()
}

/// Depths `(z_src, z_dst)` of a correspondence under a relative pose, from the
/// least-squares solution of `z_dst x_dst = z_src R x_src + t`.
pub fn two_view_depths(
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
    src: &Vector2<f64>,
    dst: &Vector2<f64>,
) -> Option<(f64, f64)> {
    let a = rotation * homogeneous(src);
    let b = homogeneous(dst);
    let (aa, ab, bb) = (a.dot(&a), a.dot(&b), b.dot(&b));
    let det = ab * ab - aa * bb;
    if det.abs() < 1e-14 * aa * bb {
        return None;
    }
    let (at, bt) = (a.dot(translation), b.dot(translation));
    let z_src = (bb * at - ab * bt) / det;
    let z_dst = (ab * at - aa * bt) / det;
    Some((z_src, z_dst))
}

fn candidate_poses(essential: &Matrix3<f64>) -> Result<[(Matrix3<f64>, Vector3<f64>); 4], GeometryError> {
    let svd = SVD::new(*essential, true, true);
    let (mut u, mut v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v)) => (u, v),
        _ => return Err(GeometryError::DegenerateConfiguration("svd failed".into())),
    };
    let s = &svd.singular_values;
    let null = (0..3).min_by(|&i, &j| s[i].total_cmp(&s[j])).unwrap_or(2);
    if null != 2 {
        u.swap_columns(null, 2);
        v_t.swap_rows(null, 2);
    }
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t: Vector3<f64> = u.column(2).into();
    Ok([(r1, t), (r1, -t), (r2, t), (r2, -t)])
}

/// The decomposition of `essential` that puts the most inliers in front of
/// both cameras.
pub fn decompose_essential(
    essential: &Matrix3<f64>,
    src: &[Vector2<f64>],
    dst: &[Vector2<f64>],
    inliers: &[bool],
) -> Result<(Matrix3<f64>, Vector3<f64>), GeometryError> {
    let mut best = None;
    let mut best_count = 0;
    for (r, t) in candidate_poses(essential)? {
        let count = src
            .iter()
            .zip(dst)
            .zip(inliers)
            .filter(|(_, &keep)| keep)
            .filter(|((s, d), _)| matches!(two_view_depths(&r, &t, s, d), Some((a, b)) if a > 0.0 && b > 0.0))
            .count();
        if count > best_count {
            best_count = count;
            best = Some((r, t));
        }
    }
    best.ok_or_else(|| GeometryError::DegenerateConfiguration("no decomposition passes cheirality".into()))
}

fn required_iterations(inlier_ratio: f64, confidence: f64) -> f64 {
    let good = inlier_ratio.powi(MIN_POINTS as i32);
    if good >= 1.0 - 1e-12 {
        return 0.0;
    }
    let denom = (-good).ln_1p();
    if denom >= 0.0 {
        return f64::INFINITY;
    }
    (1.0 - confidence).ln() / denom
}

/// Correspondences within this multiple of the inlier threshold enter the
/// nonlinear refinement.
const REFINE_BAND: f64 = 3.0;
const REFINE_ITERATIONS: usize = 30;

fn skew3(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn signed_sampson(essential: &Matrix3<f64>, src: &Vector2<f64>, dst: &Vector2<f64>) -> f64 {
    let s = homogeneous(src);
    let d = homogeneous(dst);
    let es = essential * s;
    let etd = essential.transpose() * d;
    let den = es.x * es.x + es.y * es.y + etd.x * etd.x + etd.y * etd.y;
    d.dot(&es) / den.max(1e-300).sqrt()
}

/// Orthonormal basis of the plane orthogonal to a unit vector.
fn tangent_basis(t: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let seed = if t.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let a = t.cross(&seed).normalize();
    (a, t.cross(&a))
}

fn perturb(rotation: &Matrix3<f64>, translation: &Vector3<f64>, delta: &[f64; 5]) -> (Matrix3<f64>, Vector3<f64>) {
    let w = Vector3::new(delta[0], delta[1], delta[2]);
    let r = nalgebra::Rotation3::from_scaled_axis(w).into_inner() * rotation;
    let (a, b) = tangent_basis(translation);
    (r, (translation + a * delta[3] + b * delta[4]).normalize())
}

/// Levenberg-Marquardt on Huber-weighted signed Sampson distances over the
/// rotation and the unit translation.
pub fn refine_relative_pose(
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
    src: &[Vector2<f64>],
    dst: &[Vector2<f64>],
    huber: f64,
) -> (Matrix3<f64>, Vector3<f64>) {
    let residuals = |r: &Matrix3<f64>, t: &Vector3<f64>| -> Vec<f64> {
        let e = skew3(t) * r;
        src.iter().zip(dst).map(|(s, d)| signed_sampson(&e, s, d)).collect()
    };
    let cost = |res: &[f64]| res.iter().map(|v| crate::robust::huber_cost(*v, huber)).sum::<f64>();
    let (mut r, mut t) = (*rotation, *translation);
    let mut current = residuals(&r, &t);
    let mut current_cost = cost(&current);
    let mut lambda = 1e-3;
    const H: f64 = 1e-7;
    for _ in 0..REFINE_ITERATIONS {
        let m = current.len();
        let mut jac = DMatrix::<f64>::zeros(m, 5);
        for k in 0..5 {
            let mut plus = [0.0; 5];
            plus[k] = H;
            let mut minus = [0.0; 5];
            minus[k] = -H;
            let (rp, tp) = perturb(&r, &t, &plus);
            let (rm, tm) = perturb(&r, &t, &minus);
            let (fp, fm) = (residuals(&rp, &tp), residuals(&rm, &tm));
            for i in 0..m {
                jac[(i, k)] = (fp[i] - fm[i]) / (2.0 * H);
            }
        }
        let weights: Vec<f64> = current.iter().map(|v| crate::robust::huber_weight(*v, huber)).collect();
        let mut jtj = nalgebra::Matrix5::<f64>::zeros();
        let mut jtr = nalgebra::Vector5::<f64>::zeros();
        for i in 0..m {
            let row = jac.row(i).transpose();
            let row = nalgebra::Vector5::from_iterator(row.iter().copied());
            jtj += row * row.transpose() * weights[i];
            jtr += row * (weights[i] * current[i]);
        }
        let mut improved = false;
        while lambda < 1e10 {
            let mut damped = jtj;
            for k in 0..5 {
                damped[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let (rn, tn) = perturb(&r, &t, &[step[0], step[1], step[2], step[3], step[4]]);
            let trial = residuals(&rn, &tn);
            let trial_cost = cost(&trial);
            if trial_cost < current_cost {
                let relative = (current_cost - trial_cost) / current_cost.max(1e-300);
                (r, t, current, current_cost) = (rn, tn, trial, trial_cost);
                lambda = (lambda * 0.1).max(1e-12);
                improved = relative > 1e-12;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let r = crate::geometry::nearest_rotation(&r).to_rotation_matrix().into_inner();
    (r, t)
}

/// RANSAC over eight-point minimal samples, refit on the final inlier set.
/// Coordinates are normalized image coordinates.
pub fn estimate_relative_pose<R: Rng + ?Sized>(
    src: &[Vector2<f64>],
    dst: &[Vector2<f64>],
    config: &RansacConfig,
    rng: &mut R,
) -> Result<TwoViewGeometry, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::LengthMismatch { left: src.len(), right: dst.len() });
    }
    if src.len() < MIN_POINTS {
        return Err(GeometryError::TooFewPoints(src.len()));
    }
    let n = src.len();
    let classify = |e: &Matrix3<f64>| -> Vec<bool> {
        src.iter().zip(dst).map(|(s, d)| sampson_distance(e, s, d) < config.threshold).collect()
    };
    let mut best: Option<(Matrix3<f64>, Vec<bool>, usize)> = None;
    let mut needed = config.iterations as f64;
    let mut iteration = 0;
    while (iteration as f64) < needed.min(config.iterations as f64) {
        iteration += 1;
        let pick = sample(rng, n, MIN_POINTS);
        let s: Vec<Vector2<f64>> = pick.iter().map(|i| src[i]).collect();
        let d: Vec<Vector2<f64>> = pick.iter().map(|i| dst[i]).collect();
        let Ok(e) = eight_point(&s, &d) else { continue };
        let inliers = classify(&e);
        let count = inliers.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|b| count > b.2) {
            needed = required_iterations(count as f64 / n as f64, config.confidence);
            best = Some((e, inliers, count));
        }
    }
    let (mut essential, mut inliers, mut count) =
        best.ok_or_else(|| GeometryError::DegenerateConfiguration("no valid minimal sample".into()))?;
    for _ in 0..3 {
        let s: Vec<Vector2<f64>> = (0..n).filter(|&i| inliers[i]).map(|i| src[i]).collect();
        let d: Vec<Vector2<f64>> = (0..n).filter(|&i| inliers[i]).map(|i| dst[i]).collect();
        let Ok(e) = eight_point(&s, &d) else { break };
        let refit = classify(&e);
        let refit_count = refit.iter().filter(|&&b| b).count();
        if refit_count < count {
            break;
        }
        essential = e;
        inliers = refit;
        count = refit_count;
    }
    if count < MIN_POINTS {
        return Err(GeometryError::TooFewPoints(count));
    }
    let (rotation, translation) = decompose_essential(&essential, src, dst, &inliers)?;
    let candidates: Vec<usize> =
        (0..n).filter(|&i| sampson_distance(&essential, &src[i], &dst[i]) < REFINE_BAND * config.threshold).collect();
    let s: Vec<Vector2<f64>> = candidates.iter().map(|&i| src[i]).collect();
    let d: Vec<Vector2<f64>> = candidates.iter().map(|&i| dst[i]).collect();
    let (rotation, translation) = refine_relative_pose(&rotation, &translation, &s, &d, config.threshold);
    let essential = skew3(&translation) * rotation;
    let mut inliers = classify(&essential);
    for (i, keep) in inliers.iter_mut().enumerate() {
        if *keep && !matches!(two_view_depths(&rotation, &translation, &src[i], &dst[i]), Some((a, b)) if a > 0.0 && b > 0.0) {
            *keep = false;
        }
    }
    Ok(TwoViewGeometry { essential, rotation, translation, inliers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(n: usize, seed: u64) -> (Matrix3<f64>, Vector3<f64>, Vec<Vector2<f64>>, Vec<Vector2<f64>>, Vec<Vector3<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = *Rotation3::from_euler_angles(0.05, -0.1, 0.02).matrix();
        let t = Vector3::new(0.8, 0.1, 0.2).normalize();
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut pts = Vec::new();
        while src.len() < n {
            let p = Vector3::new(rng.random_range(-4.0..4.0), rng.random_range(-3.0..3.0), rng.random_range(4.0..15.0));
            let q = r * p + t;
            if q.z <= 0.1 {
                continue;
            }
            src.push(p.xy() / p.z);
            dst.push(q.xy() / q.z);
            pts.push(p);
        }
        (r, t, src, dst, pts)
    }

    #[test]
    fn exact_correspondences_give_zero_epipolar_error() {
        let (r, t, src, dst, _) = scene(30, 1);
        let e = eight_point(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            assert!(sampson_distance(&e, s, d) < 1e-10);
        }
        let (rr, tt) = decompose_essential(&e, &src, &dst, &[true; 30]).unwrap();
        assert!((rr - r).norm() < 1e-8);
        assert!((tt - t).norm() < 1e-8);
    }

    #[test]
    fn two_view_depths_recover_points() {
        let (r, t, src, dst, pts) = scene(10, 2);
        for ((s, d), p) in src.iter().zip(&dst).zip(&pts) {
            let (zs, zd) = two_view_depths(&r, &t, s, d).unwrap();
            assert!((zs - p.z).abs() < 1e-9);
            assert!((zd - (r * p + t).z).abs() < 1e-9);
        }
    }

    #[test]
    fn refined_fit_stays_exact_on_clean_data() {
        let (r, t, src, dst, _) = scene(100, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fit = estimate_relative_pose(&src, &dst, &RansacConfig::default(), &mut rng).unwrap();
        assert_eq!(fit.inlier_count(), 100);
        assert!(crate::geometry::nearest_rotation(&(fit.rotation.transpose() * r)).angle() < 1e-8);
        assert!((fit.translation - t).norm() < 1e-8);
    }

    #[test]
    fn ransac_rejects_outliers() {
        let (r, t, mut src, dst, _) = scene(200, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for s in src.iter_mut().take(60) {
            *s += Vector2::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
        }
        let fit = estimate_relative_pose(&src, &dst, &RansacConfig::default(), &mut rng).unwrap();
        assert!(fit.inliers[60..].iter().all(|&b| b));
        assert!(fit.inlier_count() < 200);
        // Perturbed points that land inside the threshold pull the refinement slightly.
        let angle = crate::geometry::nearest_rotation(&(fit.rotation.transpose() * r)).angle();
        assert!(angle < 2e-3, "{angle}");
        assert!((fit.translation - t).norm() < 1e-2);
    }

    #[test]
    fn too_few_points() {
        let (_, _, src, dst, _) = scene(7, 4);
        assert!(matches!(eight_point(&src, &dst), Err(GeometryError::TooFewPoints(7))));
    }
}
