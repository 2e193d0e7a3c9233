use std::ops::Mul;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

/// Rigid transform mapping camera-frame points into the world frame
/// (`world = R * cam + t`). The translation is therefore the camera center.
///
/// The stored quaternion is always unit length with `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseRepr", into = "PoseRepr")]
pub struct PoseSE3 {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    /// `[w, x, y, z]`
    q: [f64; 4],
    t: [f64; 3],
}

impl From<PoseRepr> for PoseSE3 {
    fn from(r: PoseRepr) -> Self {
        PoseSE3::from_quaternion(
            Quaternion::new(r.q[0], r.q[1], r.q[2], r.q[3]),
            Vector3::from(r.t),
        )
    }
}

impl From<PoseSE3> for PoseRepr {
    fn from(p: PoseSE3) -> Self {
        let q = p.rotation.quaternion();
        PoseRepr {
            q: [q.w, q.i, q.j, q.k],
            t: p.translation.into(),
        }
    }
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    // Renormalize from the raw coefficients so drift never accumulates.
    let raw = q.into_inner();
    let raw = if raw.w < 0.0 { -raw } else { raw };
    UnitQuaternion::new_normalize(raw)
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: canonical(rotation),
            translation,
        }
    }

    /// Builds a pose from a possibly unnormalized quaternion.
    pub fn from_quaternion(q: Quaternion<f64>, translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::new_normalize(q), translation)
    }

    pub fn from_rotation_matrix(r: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(nearest_rotation(r), translation)
    }

    /// World-from-camera pose of a camera at `eye` looking at `target`, with
    /// image rows pointing along `down`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, down: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = down.cross(&z).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_columns(&[x, y, z]);
        Self::from_rotation_matrix(&r, eye)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> PoseSE3 {
        let inv = self.rotation.inverse();
        PoseSE3::new(inv, -(inv * self.translation))
    }

    /// Maps a camera-frame point into the world frame.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Maps a world point into this camera's frame.
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse_transform_vector(&(p - self.translation))
    }

    /// SE(3) exponential of a tangent vector `[rho, phi]`.
    pub fn exp(xi: &Vector6<f64>) -> PoseSE3 {
        let rho = xi.fixed_rows::<3>(0).into_owned();
        let phi = xi.fixed_rows::<3>(3).into_owned();
        let rot = UnitQuaternion::from_scaled_axis(phi);
        PoseSE3::new(rot, so3_left_jacobian(&phi) * rho)
    }

    /// Right-perturbation update `self * exp(delta)`.
    pub fn retract(&self, delta: &Vector6<f64>) -> PoseSE3 {
        self.compose(&PoseSE3::exp(delta))
    }

    /// Rotation angle of the pose in radians.
    pub fn angle(&self) -> f64 {
        self.rotation.angle()
    }
}

impl Mul for PoseSE3 {
    type Output = PoseSE3;

    fn mul(self, rhs: PoseSE3) -> PoseSE3 {
        self.compose(&rhs)
    }
}

/// Closest rotation to `m` in the Frobenius norm.
pub fn nearest_rotation(m: &Matrix3<f64>) -> UnitQuaternion<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)) * v_t;
    }
    UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r))
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Left Jacobian of SO(3), the `V` matrix of the SE(3) exponential.
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    if theta2 < 1e-16 {
        return Matrix3::identity() + 0.5 * k + k * k / 6.0;
    }
    let theta = theta2.sqrt();
    let a = (1.0 - theta.cos()) / theta2;
    let b = (theta - theta.sin()) / (theta2 * theta);
    Matrix3::identity() + a * k + b * k * k
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_pose(rng: &mut impl Rng) -> PoseSE3 {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let t = Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        PoseSE3::new(UnitQuaternion::from_scaled_axis(axis * 2.0), t)
    }

    #[test]
    fn inverse_of_composition_reverses_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let lhs = a.compose(&b).inverse();
            let rhs = b.inverse().compose(&a.inverse());
            assert_relative_eq!(lhs.rotation_matrix(), rhs.rotation_matrix(), epsilon = 1e-12);
            assert_relative_eq!(lhs.translation(), rhs.translation(), epsilon = 1e-12);
        }
    }

    #[test]
    fn canonical_w_is_non_negative() {
        let q = Quaternion::new(-0.5, 0.5, 0.5, 0.5);
        let p = PoseSE3::from_quaternion(q, Vector3::zeros());
        assert!(p.rotation().w >= 0.0);
        assert_relative_eq!(p.rotation().into_inner().norm(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn normalization_survives_a_million_compositions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let steps: Vec<PoseSE3> = (0..64).map(|_| random_pose(&mut rng)).collect();
        let mut acc = PoseSE3::identity();
        for i in 0..1_000_000 {
            acc = acc.compose(&steps[i % steps.len()]);
            if i % 1000 == 0 {
                // keep translations bounded; rotation drift is what we measure
                acc = PoseSE3::new(*acc.rotation(), Vector3::zeros());
            }
        }
        let drift = (acc.rotation().into_inner().norm() - 1.0).abs();
        assert!(drift < 1e-6, "drift {drift}");
        assert!(drift < 1e-9);
    }

    #[test]
    fn exp_matches_small_step_and_roundtrips_rotation() {
        let xi = Vector6::new(0.1, -0.2, 0.3, 0.01, 0.02, -0.03);
        let p = PoseSE3::exp(&xi);
        assert_relative_eq!(p.rotation().scaled_axis(), Vector3::new(0.01, 0.02, -0.03), epsilon = 1e-14);
        let tiny = Vector6::new(1e-3, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert_relative_eq!(PoseSE3::exp(&tiny).translation().x, 1e-3, epsilon = 1e-15);
    }

    #[test]
    fn look_at_points_optical_axis_at_target() {
        let eye = Vector3::new(1.0, -1.0, 0.0);
        let target = Vector3::new(0.0, 0.0, 10.0);
        let p = PoseSE3::look_at(eye, target, Vector3::y());
        let in_cam = p.to_camera(&target);
        assert_relative_eq!(in_cam.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(in_cam.y, 0.0, epsilon = 1e-12);
        assert!(in_cam.z > 0.0);
    }

    #[test]
    fn serde_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_pose(&mut rng);
        let s = serde_json::to_string(&p).unwrap();
        let back: PoseSE3 = serde_json::from_str(&s).unwrap();
        assert_relative_eq!(back.rotation_matrix(), p.rotation_matrix(), epsilon = 1e-15);
        assert_eq!(back.translation(), p.translation());
    }
}
