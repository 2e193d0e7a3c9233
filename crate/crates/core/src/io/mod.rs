//! File formats: JSON-Lines tracks, PFM depth rasters, TUM trajectories and
//! ASCII PLY point clouds.

mod pfm;
mod ply;
mod tracks;
mod tum;

use std::fmt;
use std::path::Path;

use thiserror::Error;

pub use pfm::{depth_frame_path, encode_depth_pfm, read_depth_dir, read_depth_pfm, sample_depth, write_depth_pfm, DepthFrame};
pub use ply::{write_ply, write_ply_to};
pub use tracks::{read_tracks, read_tracks_from, write_tracks, write_tracks_to, Track, TrackSet};
pub use tum::{format_trajectory_tum, parse_trajectory_tum, read_trajectory_tum, write_trajectory_tum, TimedPose};

/// Where in an input a problem was found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Location {
    pub path: String,
    pub line: Option<usize>,
}

impl Location {
    pub fn file(path: impl AsRef<Path>) -> Self {
        Self { path: path.as_ref().display().to_string(), line: None }
    }

    pub fn line(path: impl AsRef<Path>, line: usize) -> Self {
        Self { path: path.as_ref().display().to_string(), line: Some(line) }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "{}:{}", self.path, line),
            None => f.write_str(&self.path),
        }
    }
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{location}: parse error: {message}")]
    Parse { location: Location, message: String },
    #[error("{location}: invariant violation: {message}")]
    InvariantViolation { location: Location, message: String },
    #[error("{location}: non-positive depth value {value}")]
    NonPositiveDepthValue { location: Location, value: f64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl FormatError {
    pub(crate) fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        FormatError::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Line number of the offending input, when known.
    pub fn line(&self) -> Option<usize> {
        match self {
            FormatError::Parse { location, .. }
            | FormatError::InvariantViolation { location, .. }
            | FormatError::NonPositiveDepthValue { location, .. } => location.line,
            FormatError::Io { .. } => None,
        }
    }
}

/// Writes `contents` to `path`, creating parent directories.
pub(crate) fn write_file(path: &Path, contents: &[u8]) -> Result<(), FormatError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| FormatError::io(parent, e))?;
        }
    }
    std::fs::write(path, contents).map_err(|e| FormatError::io(path, e))
}
