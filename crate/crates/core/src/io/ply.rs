use std::io::Write;
use std::path::Path;

use super::{write_file, FormatError};
use crate::cloud::ScenePointCloud;

const HEADER_PROPS: &str = "property float x\nproperty float y\nproperty float z\n\
property uchar red\nproperty uchar green\nproperty uchar blue\n\
property uchar label\nproperty int frame\n";

/// ASCII PLY with `x y z red green blue label frame` per vertex.
pub fn write_ply(cloud: &ScenePointCloud, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let mut buf = Vec::new();
    write_ply_to(cloud, &mut buf).map_err(|e| FormatError::io(path.as_ref(), e))?;
    write_file(path.as_ref(), &buf)
}

pub fn write_ply_to(cloud: &ScenePointCloud, mut out: impl Write) -> std::io::Result<()> {
    write!(out, "ply\nformat ascii 1.0\nelement vertex {}\n{HEADER_PROPS}end_header\n", cloud.len())?;
    for p in &cloud.points {
        let [r, g, b] = p.color;
        writeln!(
            out,
            "{} {} {} {r} {g} {b} {} {}",
            p.position.x as f32,
            p.position.y as f32,
            p.position.z as f32,
            p.label.code(),
            p.frame
        )?;
    }
    Ok(())
}
