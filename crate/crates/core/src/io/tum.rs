use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, Vector3};

use super::{write_file, FormatError, Location};
use crate::geometry::PoseSE3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPose {
    pub timestamp: f64,
    pub pose: PoseSE3,
}

/// One line per pose: `timestamp tx ty tz qx qy qz qw`. Timestamps default
/// to the frame index.
pub fn write_trajectory_tum(
    poses: &[PoseSE3],
    timestamps: Option<&[f64]>,
    path: impl AsRef<Path>,
) -> Result<(), FormatError> {
    write_file(path.as_ref(), format_trajectory_tum(poses, timestamps).as_bytes())
}

/// Renders the TUM text; panics if `timestamps` has the wrong length.
pub fn format_trajectory_tum(poses: &[PoseSE3], timestamps: Option<&[f64]>) -> String {
    if let Some(ts) = timestamps {
        assert_eq!(ts.len(), poses.len(), "one timestamp per pose");
    }
    let mut out = String::new();
    for (i, pose) in poses.iter().enumerate() {
        let ts = timestamps.map_or(i as f64, |t| t[i]);
        let t = pose.translation();
        let q = pose.rotation().quaternion();
        writeln!(out, "{:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?}", ts, t.x, t.y, t.z, q.i, q.j, q.k, q.w)
            .expect("writing to a String");
    }
    out
}

pub fn read_trajectory_tum(path: impl AsRef<Path>) -> Result<Vec<TimedPose>, FormatError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    parse_trajectory_tum(&text, path)
}

pub fn parse_trajectory_tum(text: &str, origin: impl AsRef<Path>) -> Result<Vec<TimedPose>, FormatError> {
    let origin = origin.as_ref();
    let mut poses = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |message: String| FormatError::Parse { location: Location::line(origin, idx + 1), message };
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| bad(format!("'{s}': {e}"))))
            .collect::<Result<_, _>>()?;
        if fields.len() != 8 {
            return Err(bad(format!("expected 8 fields, found {}", fields.len())));
        }
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite value".into()));
        }
        let q = Quaternion::new(fields[7], fields[4], fields[5], fields[6]);
        if q.norm() < 1e-12 {
            return Err(bad("zero quaternion".into()));
        }
        poses.push(TimedPose {
            timestamp: fields[0],
            pose: PoseSE3::from_quaternion(q, Vector3::new(fields[1], fields[2], fields[3])),
        });
    }
    Ok(poses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    #[test]
    fn identity_line() {
        let text = format_trajectory_tum(&[PoseSE3::identity()], None);
        assert_eq!(text, "0.0 0.0 0.0 0.0 0.0 0.0 0.0 1.0\n");
    }

    #[test]
    fn roundtrip_within_1e12() {
        let poses: Vec<PoseSE3> = (0..20)
            .map(|i| {
                let f = i as f64;
                PoseSE3::new(
                    UnitQuaternion::from_scaled_axis(Vector3::new(0.1 * f, -0.03 * f, 0.7)),
                    Vector3::new(f.sin() * 3.1, 1e-7 * f, -f / 3.0),
                )
            })
            .collect();
        let text = format_trajectory_tum(&poses, None);
        let back = parse_trajectory_tum(&text, "mem").unwrap();
        for (i, (a, b)) in poses.iter().zip(&back).enumerate() {
            assert_eq!(b.timestamp, i as f64);
            assert!((a.translation() - b.pose.translation()).norm() < 1e-12);
            assert!(a.rotation().angle_to(b.pose.rotation()) < 1e-12);
        }
    }

    #[test]
    fn seven_fields_is_parse_error_with_line() {
        let text = "# header\n0 0 0 0 0 0 0 1\n1 0 0 0 0 0 1\n";
        let err = parse_trajectory_tum(text, "t.txt").unwrap_err();
        assert_eq!(err.line(), Some(3));
        assert!(matches!(err, FormatError::Parse { .. }));
    }

    #[test]
    fn garbage_is_parse_error() {
        assert!(parse_trajectory_tum("0 a 0 0 0 0 0 1", "t").is_err());
        assert!(parse_trajectory_tum("0 0 0 0 0 0 0 0", "t").is_err());
    }
}
