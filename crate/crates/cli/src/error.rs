use dynasfm::fusion::FusionError;
use dynasfm::metrics::MetricsError;
use dynasfm::segmentation::SegmentationError;
use dynasfm::sfm::{SfmError, StageError};
use dynasfm::synthetic::InvalidConfig;
use dynasfm::FormatError;
use thiserror::Error;

/// Failures are split by exit code: bad input or config (1) versus a stage
/// that could not produce a result (2).
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Solver(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Solver(_) => 2,
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        CliError::Validation(message.into())
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<InvalidConfig> for CliError {
    fn from(e: InvalidConfig) -> Self {
        CliError::Validation(format!("scene config: {e}"))
    }
}

impl From<StageError> for CliError {
    fn from(e: StageError) -> Self {
        match e.source {
            SfmError::InvalidConfig(_) => CliError::Validation(e.to_string()),
            _ => CliError::Solver(e.to_string()),
        }
    }
}

impl From<SegmentationError> for CliError {
    fn from(e: SegmentationError) -> Self {
        let message = format!("segmentation: {e}");
        match e {
            SegmentationError::EmptyInput
            | SegmentationError::MissingDepth { .. }
            | SegmentationError::MissingGroundTruth { .. }
            | SegmentationError::InvalidConfig(_) => CliError::Validation(message),
            _ => CliError::Solver(message),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        let message = format!("fusion: {e}");
        match e {
            FusionError::InvalidConfig(_) | FusionError::Format(_) => CliError::Validation(message),
            _ => CliError::Solver(message),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        let message = format!("evaluate: {e}");
        match e {
            MetricsError::Alignment(_) => CliError::Solver(message),
            _ => CliError::Validation(message),
        }
    }
}
