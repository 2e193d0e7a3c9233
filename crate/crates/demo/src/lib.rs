//! Browser demo: generate a synthetic scene, segment its tracks and
//! reconstruct the camera path. Every call returns a JSON string.

use dynasfm::metrics::{align_trajectories, ate, seg_metrics_tracks, Alignment, SegMetrics};
use dynasfm::segmentation::{segment_tracks, SegmentationConfig};
use dynasfm::sfm::{run_global_sfm, SfmConfig};
use dynasfm::synthetic::{generate_scene, strip_labels, SceneConfig, SyntheticScene};
use dynasfm::TrackSet;
use serde::Serialize;
use thiserror::Error;
use wasm_bindgen::prelude::*;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("scene config: {0}")]
    Config(String),
    #[error("frame {frame} outside 0..{frames}")]
    Frame { frame: usize, frames: usize },
    #[error("{0}")]
    Stage(String),
}

#[derive(Debug, Serialize)]
pub struct SceneSummary {
    pub frames: usize,
    pub tracks: usize,
    pub dynamic: usize,
    pub width: u32,
    pub height: u32,
    pub span: f64,
}

#[derive(Debug, Serialize)]
pub struct FramePoint {
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub truth_dynamic: bool,
    /// `None` until the tracks are segmented.
    pub predicted_dynamic: Option<bool>,
}

#[derive(Debug, Serialize)]
pub struct SegmentationSummary {
    pub dynamic: usize,
    pub static_: usize,
    pub metrics: SegMetrics,
}

#[derive(Debug, Serialize)]
pub struct Reconstruction {
    pub used_segmentation: bool,
    pub ate: f64,
    pub ate_over_span: f64,
    pub rms_px: f64,
    /// Estimated camera centers mapped into the ground-truth frame.
    pub cameras: Vec<[f64; 3]>,
    pub truth: Vec<[f64; 3]>,
    pub points: Vec<[f64; 3]>,
}

/// Scene state shared by the browser calls.
pub struct Session {
    scene: SyntheticScene,
    truth: TrackSet,
    labeled: Option<TrackSet>,
}

impl Session {
    /// `config` is a partial scene config as JSON; empty means defaults.
    pub fn new(config: &str) -> Result<Self, DemoError> {
        let mut scene_config: SceneConfig = if config.trim().is_empty() {
            SceneConfig::default()
        } else {
            serde_json::from_str(config).map_err(|e| DemoError::Config(e.to_string()))?
        };
        scene_config.render_depth = false;
        let (scene, truth, _) = generate_scene(&scene_config).map_err(|e| DemoError::Config(e.to_string()))?;
        Ok(Self { scene, truth, labeled: None })
    }

    pub fn summary(&self) -> SceneSummary {
        let camera = self.scene.camera();
        SceneSummary {
            frames: self.truth.num_frames(),
            tracks: self.truth.len(),
            dynamic: self.truth.iter().filter(|t| t.is_dynamic()).count(),
            width: camera.width,
            height: camera.height,
            span: self.scene.trajectory_span(),
        }
    }

    pub fn frame(&self, frame: usize) -> Result<Vec<FramePoint>, DemoError> {
        let frames = self.truth.num_frames();
        if frame >= frames {
            return Err(DemoError::Frame { frame, frames });
        }
        Ok(self
            .truth
            .iter()
            .filter_map(|t| {
                let pixel = t.position(frame).filter(|_| t.is_visible(frame))?;
                let predicted_dynamic = self.labeled.as_ref().and_then(|l| l.get(t.id)).map(|l| l.is_dynamic());
                Some(FramePoint { id: t.id, x: pixel.x, y: pixel.y, truth_dynamic: t.is_dynamic(), predicted_dynamic })
            })
            .collect())
    }

    pub fn segment(&mut self, kappa: f64) -> Result<SegmentationSummary, DemoError> {
        let config = SegmentationConfig { kappa, ..SegmentationConfig::default() };
        let (labeled, report) = segment_tracks(&strip_labels(&self.truth), self.scene.camera(), &config)
            .map_err(|e| DemoError::Stage(format!("segmentation: {e}")))?;
        let metrics = seg_metrics_tracks(&labeled, &self.truth).map_err(|e| DemoError::Stage(e.to_string()))?;
        self.labeled = Some(labeled);
        Ok(SegmentationSummary { dynamic: report.dynamic_tracks, static_: report.static_tracks, metrics })
    }

    /// Without segmentation every track is treated as static.
    pub fn reconstruct(&self, use_segmentation: bool) -> Result<Reconstruction, DemoError> {
        let input = match (&self.labeled, use_segmentation) {
            (Some(labeled), true) => labeled.clone(),
            (None, true) => return Err(DemoError::Stage("segment the tracks first".into())),
            (_, false) => {
                let mut all = strip_labels(&self.truth);
                all.update(|t| t.set_dynamic(false)).map_err(DemoError::Stage)?;
                all
            }
        };
        let result = run_global_sfm(&input, self.scene.camera(), &SfmConfig::default())
            .map_err(|e| DemoError::Stage(e.to_string()))?;
        let gt = &self.scene.poses;
        let error = ate(&result.poses, gt, Alignment::Sim3).map_err(|e| DemoError::Stage(e.to_string()))?;
        let to_truth = align_trajectories(&result.poses, gt, Alignment::Sim3).map_err(|e| DemoError::Stage(e.to_string()))?;
        Ok(Reconstruction {
            used_segmentation: use_segmentation,
            ate: error,
            ate_over_span: error / self.scene.trajectory_span(),
            rms_px: result.diagnostics.bundle.final_rms_px,
            cameras: result.poses.iter().map(|p| to_truth.apply(&p.center()).into()).collect(),
            truth: gt.iter().map(|p| p.center().into()).collect(),
            points: result.points.iter().map(|p| to_truth.apply(&p.position).into()).collect(),
        })
    }
}

fn to_js<T: Serialize>(value: Result<T, DemoError>) -> Result<String, JsError> {
    value.map(|v| serde_json::to_string(&v).expect("plain data serializes")).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub struct Demo {
    session: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(config: &str) -> Result<Demo, JsError> {
        Session::new(config).map(|session| Demo { session }).map_err(|e| JsError::new(&e.to_string()))
    }

    pub fn summary(&self) -> String {
        serde_json::to_string(&self.session.summary()).expect("plain data serializes")
    }

    pub fn frame(&self, frame: usize) -> Result<String, JsError> {
        to_js(self.session.frame(frame))
    }

    pub fn segment(&mut self, kappa: f64) -> Result<String, JsError> {
        to_js(self.session.segment(kappa))
    }

    pub fn reconstruct(&self, use_segmentation: bool) -> Result<String, JsError> {
        to_js(self.session.reconstruct(use_segmentation))
    }
}
