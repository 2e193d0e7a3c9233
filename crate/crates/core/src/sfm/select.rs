use nalgebra::Vector2;

use super::SfmError;
use crate::io::TrackSet;

/// Visible samples of one static track, in frame order.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticTrack {
    pub id: u64,
    pub observations: Vec<(usize, Vector2<f64>)>,
}

/// Static tracks restricted to their visible frames. Tracks without labels
/// count as static; tracks left with fewer than two samples are dropped.
pub fn select_static_visible(tracks: &TrackSet) -> Result<Vec<StaticTrack>, SfmError> {
    let out: Vec<StaticTrack> = tracks
        .iter()
        .filter(|t| !t.is_dynamic())
        .map(|t| StaticTrack { id: t.id, observations: t.visible_frames().map(|f| (f, t.points[f - t.start])).collect() })
        .filter(|t| t.observations.len() >= 2)
        .collect();
    if out.is_empty() {
        return Err(SfmError::NoStaticTracks);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::Track;

    fn track(id: u64, visible: Vec<bool>, dynamic: bool) -> Track {
        let n = visible.len();
        Track {
            id,
            start: 0,
            points: (0..n).map(|i| Vector2::new(i as f64, id as f64)).collect(),
            visible,
            depth: None,
            dynamic: Some(vec![dynamic; n]),
            score: None,
        }
    }

    #[test]
    fn all_static_visible_is_kept_whole() {
        let set = TrackSet::new(vec![track(1, vec![true; 3], false), track(2, vec![true; 3], false)], 3).unwrap();
        let out = select_static_visible(&set).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].observations, vec![(0, Vector2::new(0.0, 1.0)), (1, Vector2::new(1.0, 1.0)), (2, Vector2::new(2.0, 1.0))]);
    }

    #[test]
    fn all_dynamic_is_an_error() {
        let set = TrackSet::new(vec![track(1, vec![true; 3], true)], 3).unwrap();
        assert_eq!(select_static_visible(&set), Err(SfmError::NoStaticTracks));
    }

    #[test]
    fn single_visible_frame_dropped_and_invisible_frames_removed() {
        let set = TrackSet::new(
            vec![track(1, vec![true, false, false], false), track(2, vec![true, false, true], false)],
            3,
        )
        .unwrap();
        let out = select_static_visible(&set).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].id, 2);
        assert_eq!(out[0].observations.iter().map(|o| o.0).collect::<Vec<_>>(), vec![0, 2]);
    }
}
