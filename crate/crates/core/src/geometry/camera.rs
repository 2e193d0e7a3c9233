use nalgebra::{Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{GeometryError, PoseSE3};

/// Minimum camera-frame depth accepted by [`CameraModel::project`].
pub const MIN_DEPTH: f64 = 1e-9;

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRepr")]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Deserialize)]
struct CameraRepr {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

impl TryFrom<CameraRepr> for CameraModel {
    type Error = GeometryError;

    fn try_from(r: CameraRepr) -> Result<Self, Self::Error> {
        CameraModel::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)
    }
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let finite = [fx, fy, cx, cy].iter().all(|v| v.is_finite());
        if !finite || fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be finite and positive (fx={fx}, fy={fy})"
            )));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Mean focal length, used to convert pixel thresholds to normalized units.
    pub fn focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= (self.width - 1) as f64
            && pixel.y <= (self.height - 1) as f64
    }

    /// Pinhole projection of a camera-frame point.
    pub fn project_camera(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if p.z <= MIN_DEPTH || !p.z.is_finite() {
            return Err(GeometryError::PointBehindCamera { depth: p.z });
        }
        Ok(Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Projects a world point seen from `pose` (world-from-camera).
    pub fn project(&self, pose: &PoseSE3, world: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        self.project_camera(&pose.to_camera(world))
    }

    /// Ray through `pixel` with unit z component.
    pub fn unproject(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }

    /// World point at camera-frame depth `depth` along the ray through `pixel`.
    pub fn back_project(
        &self,
        pose: &PoseSE3,
        pixel: &Vector2<f64>,
        depth: f64,
    ) -> Result<Vector3<f64>, GeometryError> {
        if !(depth > 0.0) || !depth.is_finite() {
            return Err(GeometryError::NonPositiveDepth(depth));
        }
        Ok(pose.transform_point(&(self.unproject(pixel) * depth)))
    }

    /// Derivative of the pixel with respect to the camera-frame point.
    pub fn projection_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }
}

/// Free-function form of [`CameraModel::project`].
pub fn project(cam: &CameraModel, pose: &PoseSE3, world: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    cam.project(pose, world)
}

/// Free-function form of [`CameraModel::back_project`].
pub fn back_project(
    cam: &CameraModel,
    pose: &PoseSE3,
    pixel: &Vector2<f64>,
    depth: f64,
) -> Result<Vector3<f64>, GeometryError> {
    cam.back_project(pose, pixel, depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_cam() -> CameraModel {
        CameraModel { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, width: 1, height: 1 }
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let px = unit_cam().project(&PoseSE3::identity(), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(px, Vector2::new(0.0, 0.0));
    }

    #[test]
    fn pinhole_formula() {
        let cam = CameraModel::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let px = cam.project(&PoseSE3::identity(), &Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_eq!(px, Vector2::new(100.0, 50.0));
    }

    #[test]
    fn behind_camera_is_rejected() {
        let err = unit_cam().project(&PoseSE3::identity(), &Vector3::new(0.0, 0.0, -1.0));
        assert!(matches!(err, Err(GeometryError::PointBehindCamera { .. })));
        let err = unit_cam().project(&PoseSE3::identity(), &Vector3::new(0.0, 0.0, 1e-10));
        assert!(matches!(err, Err(GeometryError::PointBehindCamera { .. })));
    }

    #[test]
    fn back_project_principal_point() {
        let cam = CameraModel::new(300.0, 310.0, 160.0, 120.0, 320, 240).unwrap();
        let p = cam.back_project(&PoseSE3::identity(), &Vector2::new(160.0, 120.0), 4.0).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 4.0));
    }

    #[test]
    fn back_project_rejects_non_positive_depth() {
        let cam = CameraModel::new(300.0, 310.0, 160.0, 120.0, 320, 240).unwrap();
        for d in [0.0, -1.0, f64::NAN] {
            let r = cam.back_project(&PoseSE3::identity(), &Vector2::new(1.0, 1.0), d);
            assert!(matches!(r, Err(GeometryError::NonPositiveDepth(_))));
        }
    }

    #[test]
    fn back_project_translated_pose_matches_explicit_transform() {
        let cam = CameraModel::new(300.0, 310.0, 160.0, 120.0, 320, 240).unwrap();
        let px = Vector2::new(17.0, 201.5);
        let base = cam.back_project(&PoseSE3::identity(), &px, 2.5).unwrap();
        let moved = PoseSE3::new(UnitQuaternion::identity(), Vector3::new(1.0, 0.0, 0.0));
        let shifted = cam.back_project(&moved, &px, 2.5).unwrap();
        assert_relative_eq!(shifted, base + Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(CameraModel::new(0.0, 1.0, 0.0, 0.0, 10, 10).is_err());
        assert!(CameraModel::new(1.0, 1.0, 10.0, 0.0, 10, 10).is_err());
        assert!(CameraModel::new(1.0, 1.0, 0.0, -0.1, 10, 10).is_err());
        let json = r#"{"fx":-1,"fy":1,"cx":0,"cy":0,"width":4,"height":4}"#;
        assert!(serde_json::from_str::<CameraModel>(json).is_err());
    }

    #[test]
    fn roundtrip_ten_thousand_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cam = CameraModel::new(520.0, 515.0, 319.5, 239.5, 640, 480).unwrap();
        for _ in 0..10_000 {
            let pose = PoseSE3::new(
                UnitQuaternion::from_scaled_axis(Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )),
                Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)),
            );
            let z = rng.random_range(0.1..100.0);
            let cam_pt = Vector3::new(rng.random_range(-1.0..1.0) * z, rng.random_range(-1.0..1.0) * z, z);
            let world = pose.transform_point(&cam_pt);
            let px = cam.project(&pose, &world).unwrap();
            let back = cam.back_project(&pose, &px, z).unwrap();
            assert!((back - world).norm() < 1e-9, "{back} vs {world}");
            let again = cam.project(&pose, &back).unwrap();
            assert!((again - px).norm() < 1e-9);
        }
    }
}
