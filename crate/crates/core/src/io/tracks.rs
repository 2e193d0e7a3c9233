use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::{write_file, FormatError, Location};

/// One point trajectory from its start frame to the end of the sequence.
///
/// Arrays are indexed by `frame - start`. Positions at invisible frames are
/// whatever the tracker reported (typically the last visible location).
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u64,
    pub start: usize,
    pub points: Vec<Vector2<f64>>,
    pub visible: Vec<bool>,
    /// Relative depth sample per frame.
    pub depth: Option<Vec<f64>>,
    /// Per-frame dynamic label.
    pub dynamic: Option<Vec<bool>>,
    /// Dynamic score in `[0, 1]`.
    pub score: Option<f64>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// One past the last frame covered by the track.
    pub fn end(&self) -> usize {
        self.start + self.points.len()
    }

    fn offset(&self, frame: usize) -> Option<usize> {
        frame.checked_sub(self.start).filter(|&i| i < self.points.len())
    }

    pub fn is_visible(&self, frame: usize) -> bool {
        self.offset(frame).is_some_and(|i| self.visible[i])
    }

    pub fn position(&self, frame: usize) -> Option<Vector2<f64>> {
        self.offset(frame).map(|i| self.points[i])
    }

    pub fn depth_at(&self, frame: usize) -> Option<f64> {
        let i = self.offset(frame)?;
        self.depth.as_ref().map(|d| d[i])
    }

    /// Frames where the track is visible, ascending.
    pub fn visible_frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.visible
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(i, _)| self.start + i)
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    /// Track-level dynamic label: true if any frame is labeled dynamic.
    pub fn is_dynamic(&self) -> bool {
        self.dynamic.as_ref().is_some_and(|d| d.iter().any(|&m| m))
    }

    /// Sets the same dynamic label on every frame.
    pub fn set_dynamic(&mut self, dynamic: bool) {
        self.dynamic = Some(vec![dynamic; self.len()]);
    }

    fn validate(&self, num_frames: usize) -> Result<(), String> {
        let n = self.points.len();
        if n == 0 {
            return Err(format!("track {} has no samples", self.id));
        }
        if self.end() != num_frames {
            return Err(format!(
                "track {} covers frames {}..{} but the sequence has {} frames",
                self.id,
                self.start,
                self.end(),
                num_frames
            ));
        }
        if self.visible.len() != n {
            return Err(format!("track {}: vis has {} entries, points has {}", self.id, self.visible.len(), n));
        }
        if !self.visible[0] {
            return Err(format!("track {}: first sample must be visible", self.id));
        }
        if self.points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(format!("track {}: non-finite position", self.id));
        }
        if let Some(d) = &self.depth {
            if d.len() != n {
                return Err(format!("track {}: depth has {} entries, points has {}", self.id, d.len(), n));
            }
            if d.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                return Err(format!("track {}: depth samples must be finite and positive", self.id));
            }
        }
        if let Some(m) = &self.dynamic {
            if m.len() != n {
                return Err(format!("track {}: dyn has {} entries, points has {}", self.id, m.len(), n));
            }
        }
        if let Some(s) = self.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(format!("track {}: score {s} outside [0, 1]", self.id));
            }
        }
        Ok(())
    }
}

/// All tracks of a sequence, sorted by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackSet {
    tracks: Vec<Track>,
    num_frames: usize,
}

impl TrackSet {
    /// Validates and sorts the tracks. Every track must end at `num_frames`.
    pub fn new(mut tracks: Vec<Track>, num_frames: usize) -> Result<Self, String> {
        tracks.sort_by_key(|t| t.id);
        for w in tracks.windows(2) {
            if w[0].id == w[1].id {
                return Err(format!("duplicate track id {}", w[0].id));
            }
        }
        for t in &tracks {
            t.validate(num_frames)?;
        }
        Ok(Self { tracks, num_frames })
    }

    /// Like [`TrackSet::new`] with the frame count taken from the tracks.
    pub fn from_tracks(tracks: Vec<Track>) -> Result<Self, String> {
        let num_frames = tracks.iter().map(Track::end).max().unwrap_or(0);
        Self::new(tracks, num_frames)
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Track> {
        self.tracks.iter()
    }

    pub fn get(&self, id: u64) -> Option<&Track> {
        self.tracks.binary_search_by_key(&id, |t| t.id).ok().map(|i| &self.tracks[i])
    }

    pub fn ids(&self) -> BTreeSet<u64> {
        self.tracks.iter().map(|t| t.id).collect()
    }

    pub fn has_depth(&self) -> bool {
        self.tracks.iter().all(|t| t.depth.is_some())
    }

    /// Mutable access for in-place updates that keep lengths and ids intact
    /// (labels, scores, depth samples).
    pub fn update<F: FnMut(&mut Track)>(&mut self, mut f: F) -> Result<(), String> {
        for t in &mut self.tracks {
            let id = t.id;
            f(t);
            if t.id != id {
                return Err(format!("track id changed from {id} to {}", t.id));
            }
            t.validate(self.num_frames)?;
        }
        Ok(())
    }

    pub fn into_tracks(self) -> Vec<Track> {
        self.tracks
    }
}

impl<'a> IntoIterator for &'a TrackSet {
    type Item = &'a Track;
    type IntoIter = std::slice::Iter<'a, Track>;

    fn into_iter(self) -> Self::IntoIter {
        self.tracks.iter()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackRecord {
    id: u64,
    start: usize,
    points: Vec<[f64; 2]>,
    vis: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth: Option<Vec<f64>>,
    #[serde(rename = "dyn", default, skip_serializing_if = "Option::is_none")]
    dynamic: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

fn flag(v: u8, what: &str) -> Result<bool, String> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(format!("{what} entries must be 0 or 1, got {other}")),
    }
}

impl TrackRecord {
    fn into_track(self) -> Result<Track, String> {
        let visible = self.vis.iter().map(|&v| flag(v, "vis")).collect::<Result<Vec<_>, _>>()?;
        let dynamic = match self.dynamic {
            Some(d) => Some(d.iter().map(|&v| flag(v, "dyn")).collect::<Result<Vec<_>, _>>()?),
            None => None,
        };
        Ok(Track {
            id: self.id,
            start: self.start,
            points: self.points.iter().map(|p| Vector2::new(p[0], p[1])).collect(),
            visible,
            depth: self.depth,
            dynamic,
            score: self.score,
        })
    }

    fn from_track(t: &Track) -> Self {
        Self {
            id: t.id,
            start: t.start,
            points: t.points.iter().map(|p| [p.x, p.y]).collect(),
            vis: t.visible.iter().map(|&v| v as u8).collect(),
            depth: t.depth.clone(),
            dynamic: t.dynamic.as_ref().map(|d| d.iter().map(|&v| v as u8).collect()),
            score: t.score,
        }
    }
}

/// Reads a `*.tracks.jsonl` file: one JSON object per line, blank lines ignored.
pub fn read_tracks(path: impl AsRef<Path>) -> Result<TrackSet, FormatError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| FormatError::io(path, e))?;
    read_tracks_from(file, path)
}

/// Reads tracks from any reader; `origin` is only used in error locations.
pub fn read_tracks_from(reader: impl Read, origin: impl AsRef<Path>) -> Result<TrackSet, FormatError> {
    let origin = origin.as_ref();
    let mut tracks = Vec::new();
    let mut first_line = std::collections::HashMap::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| FormatError::Parse {
            location: Location::line(origin, lineno),
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrackRecord = serde_json::from_str(&line).map_err(|e| FormatError::Parse {
            location: Location::line(origin, lineno),
            message: e.to_string(),
        })?;
        let track = record.into_track().map_err(|message| FormatError::Parse {
            location: Location::line(origin, lineno),
            message,
        })?;
        // per-track invariants are checked here so the error carries a line
        if let Err(message) = track.validate(track.end()) {
            return Err(FormatError::InvariantViolation { location: Location::line(origin, lineno), message });
        }
        if let Some(prev) = first_line.insert(track.id, lineno) {
            return Err(FormatError::InvariantViolation {
                location: Location::line(origin, lineno),
                message: format!("duplicate track id {} (first on line {prev})", track.id),
            });
        }
        tracks.push((lineno, track));
    }
    let num_frames = tracks.iter().map(|(_, t)| t.end()).max().unwrap_or(0);
    if let Some((lineno, t)) = tracks.iter().find(|(_, t)| t.end() != num_frames) {
        return Err(FormatError::InvariantViolation {
            location: Location::line(origin, *lineno),
            message: format!("track {} ends at frame {} but others end at {num_frames}", t.id, t.end()),
        });
    }
    TrackSet::new(tracks.into_iter().map(|(_, t)| t).collect(), num_frames)
        .map_err(|message| FormatError::InvariantViolation { location: Location::file(origin), message })
}

pub fn write_tracks(tracks: &TrackSet, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let mut buf = Vec::new();
    write_tracks_to(tracks, &mut buf).map_err(|e| FormatError::io(path.as_ref(), e))?;
    write_file(path.as_ref(), &buf)
}

pub fn write_tracks_to(tracks: &TrackSet, mut out: impl std::io::Write) -> std::io::Result<()> {
    for t in tracks {
        serde_json::to_writer(&mut out, &TrackRecord::from_track(t))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
