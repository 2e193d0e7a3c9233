use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Provenance of a fused point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointLabel {
    /// Triangulated from static tracks.
    StaticSfm,
    /// Back-projected static depth sample.
    StaticDepth,
    /// Back-projected dynamic depth sample.
    DynamicDepth,
}

impl PointLabel {
    /// Numeric code written to the PLY `label` property.
    pub fn code(self) -> u8 {
        match self {
            PointLabel::StaticSfm => 0,
            PointLabel::StaticDepth => 1,
            PointLabel::DynamicDepth => 2,
        }
    }

    pub fn default_color(self) -> [u8; 3] {
        match self {
            PointLabel::StaticSfm => [200, 200, 200],
            PointLabel::StaticDepth => [110, 160, 230],
            PointLabel::DynamicDepth => [235, 70, 50],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    pub position: Vector3<f64>,
    pub color: [u8; 3],
    pub label: PointLabel,
    /// Source frame, or -1 for triangulated points.
    pub frame: i64,
}

impl CloudPoint {
    pub fn new(position: Vector3<f64>, label: PointLabel, frame: i64) -> Self {
        Self { position, color: label.default_color(), label, frame }
    }
}

/// Labeled world-frame point cloud.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenePointCloud {
    pub points: Vec<CloudPoint>,
}

impl ScenePointCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, point: CloudPoint) {
        debug_assert!(point.position.iter().all(|v| v.is_finite()));
        self.points.push(point);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn count(&self, label: PointLabel) -> usize {
        self.points.iter().filter(|p| p.label == label).count()
    }
}
