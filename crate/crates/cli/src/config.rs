use std::path::{Path, PathBuf};

use dynasfm::fusion::FusionConfig;
use dynasfm::metrics::{Alignment, LossWeights};
use dynasfm::segmentation::SegmentationConfig;
use dynasfm::sfm::SfmConfig;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsOptions {
    pub alignment: Alignment,
    pub weights: LossWeights,
    pub rpe_delta: usize,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self { alignment: Alignment::Sim3, weights: LossWeights::default(), rpe_delta: 1 }
    }
}

/// Inputs and stage settings of a pipeline run. Relative paths are resolved
/// against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub tracks: Option<PathBuf>,
    pub depth_dir: Option<PathBuf>,
    pub intrinsics: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub gt_trajectory: Option<PathBuf>,
    pub gt_tracks: Option<PathBuf>,
    pub seed: u64,
    pub segmentation: SegmentationConfig,
    pub sfm: SfmConfig,
    pub fusion: FusionConfig,
    pub metrics: MetricsOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tracks: None,
            depth_dir: None,
            intrinsics: None,
            output: None,
            gt_trajectory: None,
            gt_tracks: None,
            seed: 42,
            segmentation: SegmentationConfig::default(),
            sfm: SfmConfig::default(),
            fusion: FusionConfig::default(),
            metrics: MetricsOptions::default(),
        }
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

fn resolve(base: &Path, path: &mut Option<PathBuf>) {
    if let Some(p) = path.as_mut() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut config: PipelineConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut config.tracks,
            &mut config.depth_dir,
            &mut config.intrinsics,
            &mut config.output,
            &mut config.gt_trajectory,
            &mut config.gt_tracks,
        ] {
            resolve(base, p);
        }
        Ok(config)
    }

    /// Stage configs with the run seed applied.
    pub fn seeded_sfm(&self) -> SfmConfig {
        SfmConfig { seed: self.seed, ..self.sfm.clone() }
    }

    /// Checks stage settings and that every referenced input exists.
    pub fn validate(&self) -> Result<(), CliError> {
        self.segmentation.validate().map_err(CliError::from)?;
        self.sfm.validate().map_err(|e| CliError::validation(format!("sfm config: {e}")))?;
        self.fusion.validate().map_err(CliError::from)?;
        if self.metrics.rpe_delta == 0 {
            return Err(CliError::validation("metrics.rpe_delta must be positive"));
        }
        for (name, path) in [
            ("tracks", &self.tracks),
            ("depth_dir", &self.depth_dir),
            ("intrinsics", &self.intrinsics),
            ("gt_trajectory", &self.gt_trajectory),
            ("gt_tracks", &self.gt_tracks),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(CliError::validation(format!("{name} path {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

pub fn required<'a>(name: &str, path: &'a Option<PathBuf>) -> Result<&'a Path, CliError> {
    path.as_deref().ok_or_else(|| CliError::validation(format!("no {name} path given")))
}
