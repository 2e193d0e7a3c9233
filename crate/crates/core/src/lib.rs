//! Dynamic-aware global structure from motion on long-term point tracks.
//!
//! Tracks are split into static and dynamic sets by a depth-aware scene-flow
//! classifier, camera poses are estimated globally from the static tracks
//! (rotation averaging, translation averaging, triangulation and bundle
//! adjustment), and scale-aligned depth samples of the dynamic tracks are
//! fused into a single labeled point cloud.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod geometry;
pub mod robust;

pub use geometry::{CameraModel, GeometryError, PoseSE3, Sim3};
pub mod cloud;
pub mod fusion;
pub mod io;
pub mod metrics;
pub mod segmentation;
pub mod sfm;
pub mod synthetic;

pub use cloud::{CloudPoint, PointLabel, ScenePointCloud};
pub use io::{FormatError, Track, TrackSet};
