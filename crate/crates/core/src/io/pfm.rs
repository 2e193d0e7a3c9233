use std::path::{Path, PathBuf};

use nalgebra::Vector2;

use super::{write_file, FormatError, Location};

/// Relative depth raster of one frame, row-major with row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub frame: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthFrame {
    /// Panics unless `data.len() == width * height`.
    pub fn new(frame: usize, width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "raster size mismatch");
        Self { frame, width, height, data }
    }

    pub fn filled(frame: usize, width: usize, height: usize, value: f32) -> Self {
        Self::new(frame, width, height, vec![value; width * height])
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Bilinear sample at sub-pixel `(x, y)`; integer coordinates hit raster cells
/// exactly and the lookup is clamped to the image bounds.
pub fn sample_depth(frame: &DepthFrame, pixel: &Vector2<f64>) -> f64 {
    let max_x = (frame.width - 1) as f64;
    let max_y = (frame.height - 1) as f64;
    let x = pixel.x.clamp(0.0, max_x);
    let y = pixel.y.clamp(0.0, max_y);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(frame.width - 1);
    let y1 = (y0 + 1).min(frame.height - 1);
    let ax = x - x0 as f64;
    let ay = y - y0 as f64;
    let v = |xx: usize, yy: usize| frame.at(xx, yy) as f64;
    let top = v(x0, y0) * (1.0 - ax) + v(x1, y0) * ax;
    let bottom = v(x0, y1) * (1.0 - ax) + v(x1, y1) * ax;
    top * (1.0 - ay) + bottom * ay
}

/// `dir/frame_%06d.pfm`
pub fn depth_frame_path(dir: impl AsRef<Path>, frame: usize) -> PathBuf {
    dir.as_ref().join(format!("frame_{frame:06}.pfm"))
}

fn frame_index_from_name(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_str()?;
    stem.strip_prefix("frame_")?.parse().ok()
}

/// Reads a grayscale (`Pf`) PFM. The frame index is taken from a
/// `frame_NNNNNN.pfm` file name and defaults to 0.
pub fn read_depth_pfm(path: impl AsRef<Path>) -> Result<DepthFrame, FormatError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| FormatError::io(path, e))?;
    let frame = frame_index_from_name(path).unwrap_or(0);
    parse_pfm(&bytes, frame, path)
}

fn parse_pfm(bytes: &[u8], frame: usize, path: &Path) -> Result<DepthFrame, FormatError> {
    let mut pos = 0;
    let mut header = Vec::with_capacity(3);
    // three whitespace-terminated header lines: magic, "w h", scale
    while header.len() < 3 {
        let line_no = header.len() + 1;
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| FormatError::Parse {
                location: Location::line(path, line_no),
                message: "truncated header".into(),
            })?;
        let text = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| FormatError::Parse {
            location: Location::line(path, line_no),
            message: "header is not ASCII".into(),
        })?;
        header.push(text.trim().to_string());
        pos += end + 1;
    }
    let bad = |line: usize, message: String| FormatError::Parse { location: Location::line(path, line), message };

    if header[0] != "Pf" {
        return Err(bad(1, format!("expected grayscale magic 'Pf', got '{}'", header[0])));
    }
    let dims: Vec<usize> = header[1]
        .split_whitespace()
        .map(|s| s.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| bad(2, format!("bad dimensions: {e}")))?;
    let [width, height] = dims[..] else {
        return Err(bad(2, format!("expected 'width height', got '{}'", header[1])));
    };
    if width == 0 || height == 0 {
        return Err(bad(2, "empty raster".into()));
    }
    let scale: f64 = header[2].parse().map_err(|e| bad(3, format!("bad scale: {e}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad(3, format!("invalid scale {scale}")));
    }
    let little_endian = scale < 0.0;

    let payload = &bytes[pos..];
    let expected = width * height * 4;
    if payload.len() != expected {
        return Err(FormatError::Parse {
            location: Location::file(path),
            message: format!("expected {expected} payload bytes, found {}", payload.len()),
        });
    }
    let mut data = vec![0f32; width * height];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little_endian { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        // PFM stores rows bottom to top
        let file_row = i / width;
        let col = i % width;
        let row = height - 1 - file_row;
        if !v.is_finite() || v <= 0.0 {
            return Err(FormatError::NonPositiveDepthValue {
                location: Location::file(format!("{} (x={col}, y={row})", path.display())),
                value: v as f64,
            });
        }
        data[row * width + col] = v;
    }
    Ok(DepthFrame::new(frame, width, height, data))
}

/// Writes a little-endian grayscale PFM.
pub fn write_depth_pfm(frame: &DepthFrame, path: impl AsRef<Path>) -> Result<(), FormatError> {
    write_file(path.as_ref(), &encode_depth_pfm(frame))
}

/// PFM bytes of the frame; rows are stored bottom-up.
pub fn encode_depth_pfm(frame: &DepthFrame) -> Vec<u8> {
    let mut buf = format!("Pf\n{} {}\n-1.0\n", frame.width, frame.height).into_bytes();
    buf.reserve(frame.data.len() * 4);
    for row in (0..frame.height).rev() {
        for v in &frame.data[row * frame.width..(row + 1) * frame.width] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Reads every `frame_*.pfm` in `dir`, sorted by frame index.
pub fn read_depth_dir(dir: impl AsRef<Path>) -> Result<Vec<DepthFrame>, FormatError> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| FormatError::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| FormatError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "pfm") && frame_index_from_name(&path).is_some() {
            paths.push(path);
        }
    }
    let mut frames = paths.iter().map(read_depth_pfm).collect::<Result<Vec<_>, _>>()?;
    frames.sort_by_key(|f| f.frame);
    Ok(frames)
}
