//! Global structure from motion over static, visible track samples: pairwise
//! two-view geometry, rotation and translation averaging, triangulation and
//! bundle adjustment.

mod bundle;
mod graph;
mod rotation;
mod select;
mod translation;
mod triangulation;

use std::fmt;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bundle::{
    bundle_adjust, residual_and_jacobians, total_cost, BundleConfig, BundleDiagnostics, BundleObservation,
    Termination,
};
pub use graph::{build_view_graph, GraphDiagnostics, ViewEdge, ViewGraph};
pub use rotation::{
    rotation_averaging, rotation_residuals, spanning_tree_rotations, RotationConfig, RotationDiagnostics,
};
pub use select::{select_static_visible, StaticTrack};
pub use translation::{edge_direction, translation_averaging, TranslationConfig, TranslationDiagnostics};
pub use triangulation::{triangulate_tracks, SfmPoint, TriangulationReport};

use crate::geometry::{CameraModel, GeometryError, PoseSE3};
use crate::io::TrackSet;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SfmError {
    #[error("no static track is visible in two or more frames")]
    NoStaticTracks,
    #[error("view graph has {components} connected components; frames {unreachable:?} are not connected to frame 0")]
    GraphDisconnected { components: usize, unreachable: Vec<usize> },
    #[error("degenerate translation directions: {0}")]
    DegenerateDirections(String),
    #[error("bundle adjustment diverged: damping reached {lambda:e}")]
    SolverDiverged { lambda: f64 },
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("invalid sfm config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SfmStage {
    Select,
    ViewGraph,
    RotationAveraging,
    TranslationAveraging,
    Triangulation,
    BundleAdjustment,
}

impl fmt::Display for SfmStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SfmStage::Select => "select",
            SfmStage::ViewGraph => "view graph",
            SfmStage::RotationAveraging => "rotation averaging",
            SfmStage::TranslationAveraging => "translation averaging",
            SfmStage::Triangulation => "triangulation",
            SfmStage::BundleAdjustment => "bundle adjustment",
        })
    }
}

/// An [`SfmError`] tagged with the stage that raised it.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{stage}: {source}")]
pub struct StageError {
    pub stage: SfmStage,
    #[source]
    pub source: SfmError,
}

trait Staged<T> {
    fn stage(self, stage: SfmStage) -> Result<T, StageError>;
}

impl<T> Staged<T> for Result<T, SfmError> {
    fn stage(self, stage: SfmStage) -> Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfmConfig {
    /// Frame gaps considered for pairwise geometry.
    pub strides: Vec<usize>,
    pub min_covisible: usize,
    pub ransac_iterations: usize,
    pub epipolar_threshold_px: f64,
    pub ransac_confidence: f64,
    pub rotation: RotationConfig,
    pub translation: TranslationConfig,
    pub max_reprojection_px: f64,
    pub min_triangulation_angle_deg: f64,
    pub bundle: BundleConfig,
    pub seed: u64,
}

impl Default for SfmConfig {
    fn default() -> Self {
        Self {
            strides: vec![1, 2, 4, 8],
            min_covisible: 16,
            ransac_iterations: 2000,
            epipolar_threshold_px: 1.0,
            ransac_confidence: 0.9999,
            rotation: RotationConfig::default(),
            translation: TranslationConfig::default(),
            max_reprojection_px: 4.0,
            min_triangulation_angle_deg: 1.0,
            bundle: BundleConfig::default(),
            seed: 42,
        }
    }
}

impl SfmConfig {
    pub fn validate(&self) -> Result<(), SfmError> {
        let fail = |m: &str| Err(SfmError::InvalidConfig(m.into()));
        if self.strides.is_empty() || self.strides.contains(&0) {
            return fail("strides must be non-empty and positive");
        }
        if self.min_covisible < 8 {
            return fail("min_covisible must be at least 8");
        }
        if self.ransac_iterations == 0 {
            return fail("ransac_iterations must be positive");
        }
        if !(self.epipolar_threshold_px > 0.0) {
            return fail("epipolar_threshold_px must be positive");
        }
        if !(self.ransac_confidence > 0.0 && self.ransac_confidence < 1.0) {
            return fail("ransac_confidence must be in (0, 1)");
        }
        if !(self.max_reprojection_px > 0.0) || !(self.min_triangulation_angle_deg >= 0.0) {
            return fail("triangulation thresholds must be positive");
        }
        self.bundle.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfmDiagnostics {
    pub static_tracks: usize,
    pub observations: usize,
    pub view_graph: GraphDiagnostics,
    pub rotation: RotationDiagnostics,
    pub translation: TranslationDiagnostics,
    pub triangulation: TriangulationReport,
    pub bundle: BundleDiagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfmResult {
    /// World-from-camera poses; the first is the identity.
    pub poses: Vec<PoseSE3>,
    pub points: Vec<SfmPoint>,
    pub diagnostics: SfmDiagnostics,
}

impl SfmResult {
    pub fn diagnostics_json(&self) -> String {
        serde_json::to_string_pretty(&self.diagnostics).expect("diagnostics serialize") + "\n"
    }
}

/// Mean distance between consecutive camera centers.
pub fn mean_baseline(centers: &[Vector3<f64>]) -> f64 {
    if centers.len() < 2 {
        return 0.0;
    }
    centers.windows(2).map(|w| (w[1] - w[0]).norm()).sum::<f64>() / (centers.len() - 1) as f64
}

pub(crate) fn poses_from(rotations: &[Matrix3<f64>], centers: &[Vector3<f64>]) -> Vec<PoseSE3> {
    rotations.iter().zip(centers).map(|(r, c)| PoseSE3::from_rotation_matrix(r, *c)).collect()
}

/// Full pipeline on the static tracks of `tracks`.
pub fn run_global_sfm(tracks: &TrackSet, camera: &CameraModel, config: &SfmConfig) -> Result<SfmResult, StageError> {
    config.validate().stage(SfmStage::Select)?;
    let selected = select_static_visible(tracks).stage(SfmStage::Select)?;
    let observations = selected.iter().map(|t| t.observations.len()).sum();
    log::info!("sfm: {} static tracks, {observations} observations", selected.len());

    let graph = build_view_graph(&selected, tracks.num_frames(), camera, config).stage(SfmStage::ViewGraph)?;
    log::info!("sfm: view graph with {} edges", graph.edges.len());

    let (rotations, rotation_diag) = rotation_averaging(&graph, &config.rotation).stage(SfmStage::RotationAveraging)?;
    let (centers, translation_diag) =
        translation_averaging(&graph, &rotations, &selected, camera, &config.translation).stage(SfmStage::TranslationAveraging)?;
    let mut poses = poses_from(&rotations, &centers);

    let (points, triangulation) = triangulate_tracks(&selected, camera, &poses, config);
    if points.is_empty() {
        return Err(StageError { stage: SfmStage::Triangulation, source: SfmError::NoStaticTracks });
    }
    log::info!("sfm: triangulated {} of {} tracks", triangulation.kept, triangulation.attempted);

    let mut positions: Vec<Vector3<f64>> = points.iter().map(|p| p.position).collect();
    let index_of: std::collections::BTreeMap<u64, usize> =
        points.iter().enumerate().map(|(i, p)| (p.track_id, i)).collect();
    let ba_observations: Vec<BundleObservation> = selected
        .iter()
        .filter_map(|t| index_of.get(&t.id).map(|&point| (t, point)))
        .flat_map(|(t, point)| t.observations.iter().map(move |&(frame, pixel)| BundleObservation { frame, point, pixel }))
        .collect();
    let bundle = bundle_adjust(camera, &mut poses, &mut positions, &ba_observations, &config.bundle)
        .stage(SfmStage::BundleAdjustment)?;
    log::info!(
        "sfm: bundle adjustment {} iterations, cost {:.3e} -> {:.3e}",
        bundle.iterations,
        bundle.initial_cost,
        bundle.final_cost
    );

    let centers: Vec<Vector3<f64>> = poses.iter().map(PoseSE3::center).collect();
    let baseline = mean_baseline(&centers);
    if baseline > 0.0 {
        let s = 1.0 / baseline;
        for p in &mut poses {
            *p = PoseSE3::new(*p.rotation(), p.translation() * s);
        }
        for x in &mut positions {
            *x *= s;
        }
    }
    let mut points = points;
    let mut max_error = vec![0.0_f64; points.len()];
    for o in &ba_observations {
        let e = camera.project(&poses[o.frame], &positions[o.point]).map_or(f64::INFINITY, |px| (px - o.pixel).norm());
        max_error[o.point] = max_error[o.point].max(e);
    }
    for ((p, x), e) in points.iter_mut().zip(&positions).zip(max_error) {
        p.position = *x;
        p.max_reprojection_error = e;
    }

    Ok(SfmResult {
        poses,
        points,
        diagnostics: SfmDiagnostics {
            static_tracks: selected.len(),
            observations,
            view_graph: graph.diagnostics(),
            rotation: rotation_diag,
            translation: translation_diag,
            triangulation,
            bundle,
        },
    })
}
