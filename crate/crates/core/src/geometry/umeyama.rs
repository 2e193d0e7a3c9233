//! Closed-form least-squares similarity between matched point sets.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use super::{GeometryError, Sim3};

/// Relative singular-value floor below which the cross-covariance is
/// treated as rank deficient.
const RANK_TOL: f64 = 1e-12;

/// Least-squares `(s, R, t)` minimizing `sum |s R src_i + t - dst_i|^2`.
///
/// With `with_scale == false` the scale is pinned to one and the result is
/// the best rigid transform.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Result<Sim3, GeometryError> {
    umeyama_weighted(src, dst, None, with_scale)
}

/// Weighted variant of [`umeyama`]; `weights` must be non-negative.
pub fn umeyama_weighted(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    weights: Option<&[f64]>,
    with_scale: bool,
) -> Result<Sim3, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::LengthMismatch { left: src.len(), right: dst.len() });
    }
    if let Some(w) = weights {
        if w.len() != src.len() {
            return Err(GeometryError::LengthMismatch { left: src.len(), right: w.len() });
        }
    }
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);
    let active = (0..src.len()).filter(|&i| weight(i) > 0.0).count();
    if active < 3 {
        return Err(GeometryError::TooFewPoints(active));
    }
    if src.iter().chain(dst.iter()).any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(GeometryError::DegenerateConfiguration("non-finite input point".into()));
    }

    let total: f64 = (0..src.len()).map(weight).sum();
    let mut mu_src = Vector3::zeros();
    let mut mu_dst = Vector3::zeros();
    for i in 0..src.len() {
        mu_src += weight(i) * src[i];
        mu_dst += weight(i) * dst[i];
    }
    mu_src /= total;
    mu_dst /= total;

    let mut cov = Matrix3::zeros();
    let mut var_src = 0.0;
    for i in 0..src.len() {
        let w = weight(i);
        let s = src[i] - mu_src;
        let d = dst[i] - mu_dst;
        cov += w * d * s.transpose();
        var_src += w * s.norm_squared();
    }
    cov /= total;
    var_src /= total;

    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(GeometryError::DegenerateConfiguration("svd failed".into())),
    };
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= 0.0 || sv[1] <= RANK_TOL * sv[0] {
        return Err(GeometryError::DegenerateConfiguration(
            "cross-covariance has rank < 2 (points collinear or coincident)".into(),
        ));
    }

    let mut signs = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        // flip the axis belonging to the smallest singular value
        let (min_idx, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("three singular values");
        signs[(min_idx, min_idx)] = -1.0;
    }
    let r = u * signs * v_t;
    let scale = if with_scale {
        let trace: f64 = (0..3).map(|i| svd.singular_values[i] * signs[(i, i)]).sum();
        trace / var_src
    } else {
        1.0
    };
    if !(scale > 0.0) {
        return Err(GeometryError::DegenerateConfiguration(format!("non-positive scale {scale}")));
    }
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let translation = mu_dst - scale * (rotation * mu_src);
    Ok(Sim3::new(scale, rotation, translation))
}

/// Root-mean-square residual of `transform` applied to `src` against `dst`.
pub fn alignment_rmse(transform: &Sim3, src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
    let sum: f64 = src.iter().zip(dst).map(|(s, d)| (transform.apply(s) - d).norm_squared()).sum();
    (sum / src.len().max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn cloud(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
            .collect()
    }

    #[test]
    fn identity_when_sets_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = cloud(&mut rng, 20);
        let s = umeyama(&src, &src, true).unwrap();
        assert_relative_eq!(s.scale, 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.rotation.angle(), 0.0, epsilon = 1e-7);
        assert_relative_eq!(s.translation, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn exact_similarity_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = cloud(&mut rng, 30);
        let rz = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2);
        let truth = Sim3::new(2.0, rz, Vector3::new(1.0, 2.0, 3.0));
        let dst: Vec<_> = src.iter().map(|p| truth.apply(p)).collect();
        let est = umeyama(&src, &dst, true).unwrap();
        assert_relative_eq!(est.scale, 2.0, epsilon = 1e-9);
        assert_relative_eq!(est.rotation_matrix(), truth.rotation_matrix(), epsilon = 1e-9);
        assert_relative_eq!(est.translation, truth.translation, epsilon = 1e-9);
    }

    #[test]
    fn rigid_mode_pins_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = cloud(&mut rng, 10);
        let dst: Vec<_> = src.iter().map(|p| 3.0 * p).collect();
        let est = umeyama(&src, &dst, false).unwrap();
        assert_eq!(est.scale, 1.0);
    }

    #[test]
    fn reflection_is_never_returned() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = cloud(&mut rng, 12);
        let dst: Vec<_> = src.iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect();
        let est = umeyama(&src, &dst, true).unwrap();
        assert_relative_eq!(est.rotation_matrix().determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn too_few_and_collinear_rejected() {
        let pts = vec![Vector3::zeros(), Vector3::x()];
        assert!(matches!(umeyama(&pts, &pts, true), Err(GeometryError::TooFewPoints(2))));
        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(umeyama(&line, &line, true), Err(GeometryError::DegenerateConfiguration(_))));
        let short = vec![Vector3::zeros(); 3];
        assert!(matches!(umeyama(&line, &short, true), Err(GeometryError::LengthMismatch { .. })));
    }

    #[test]
    fn coplanar_points_are_fine() {
        let src: Vec<_> = (0..9).map(|i| Vector3::new((i % 3) as f64, (i / 3) as f64, 0.0)).collect();
        let q = UnitQuaternion::from_scaled_axis(Vector3::new(0.3, -0.2, 0.5));
        let truth = Sim3::new(0.7, q, Vector3::new(0.0, 1.0, -1.0));
        let dst: Vec<_> = src.iter().map(|p| truth.apply(p)).collect();
        let est = umeyama(&src, &dst, true).unwrap();
        assert!(alignment_rmse(&est, &src, &dst) < 1e-12);
    }

    #[test]
    fn permutation_and_pretransform_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let src = cloud(&mut rng, 25);
        let dst: Vec<_> = src
            .iter()
            .map(|p| 1.3 * p + Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.5))
            .collect();
        let base = umeyama(&src, &dst, true).unwrap();

        let mut perm: Vec<usize> = (0..src.len()).collect();
        perm.reverse();
        perm.swap(3, 11);
        let ps: Vec<_> = perm.iter().map(|&i| src[i]).collect();
        let pd: Vec<_> = perm.iter().map(|&i| dst[i]).collect();
        let permuted = umeyama(&ps, &pd, true).unwrap();
        assert_relative_eq!(permuted.scale, base.scale, epsilon = 1e-12);
        assert_relative_eq!(permuted.translation, base.translation, epsilon = 1e-12);

        // equivariance: fitting from G(src) gives base * G^-1
        let g = Sim3::new(0.5, UnitQuaternion::from_scaled_axis(Vector3::new(1.0, 0.2, 0.0)), Vector3::new(4.0, 0.0, -1.0));
        let gs: Vec<_> = src.iter().map(|p| g.apply(p)).collect();
        let moved = umeyama(&gs, &dst, true).unwrap();
        let expected = base.compose(&g.inverse());
        assert_relative_eq!(moved.scale, expected.scale, epsilon = 1e-10);
        assert_relative_eq!(moved.rotation_matrix(), expected.rotation_matrix(), epsilon = 1e-10);
        assert_relative_eq!(moved.translation, expected.translation, epsilon = 1e-10);
    }
}
