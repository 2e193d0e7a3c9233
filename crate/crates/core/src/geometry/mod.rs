//! Rigid-body and pinhole camera math shared by every stage.

mod camera;
mod essential;
mod pose;
mod sim3;
mod triangulate;
mod umeyama;

use thiserror::Error;

pub use camera::{back_project, project, CameraModel, MIN_DEPTH};
pub use essential::{
    decompose_essential, eight_point, estimate_relative_pose, sampson_distance, two_view_depths, RansacConfig,
    TwoViewGeometry,
};
pub use pose::{nearest_rotation, skew, so3_left_jacobian, PoseSE3};
pub use sim3::Sim3;
pub use triangulate::{reprojection_cost, triangulate, Observation, Triangulated, TriangulationConfig};
pub use umeyama::{alignment_rmse, umeyama, umeyama_weighted};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point behind camera (depth {depth})")]
    PointBehindCamera { depth: f64 },
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("need at least 2 observations, got {0}")]
    TooFewObservations(usize),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("triangulated point is behind camera in view {view}")]
    BehindCamera { view: usize },
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
}
