use std::collections::{BTreeMap, VecDeque};

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SfmConfig, SfmError, StaticTrack};
use crate::geometry::{estimate_relative_pose, CameraModel, RansacConfig};

/// Relative pose between frames `i < j`: `x_j = rotation * x_i + direction * s`
/// for some `s > 0`, in camera coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewEdge {
    pub i: usize,
    pub j: usize,
    pub rotation: Matrix3<f64>,
    pub direction: Vector3<f64>,
    pub correspondences: usize,
    pub inliers: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewGraph {
    pub num_nodes: usize,
    pub edges: Vec<ViewEdge>,
    /// Candidate pairs that produced no edge.
    pub skipped: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSummary {
    pub i: usize,
    pub j: usize,
    pub correspondences: usize,
    pub inliers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDiagnostics {
    pub nodes: usize,
    pub candidate_pairs: usize,
    pub components: usize,
    pub edges: Vec<EdgeSummary>,
    pub skipped: Vec<(usize, usize)>,
}

impl ViewGraph {
    /// Frames reachable from frame 0 and the number of connected components.
    pub fn connectivity(&self) -> (usize, Vec<usize>) {
        let mut adjacency = vec![Vec::new(); self.num_nodes];
        for e in &self.edges {
            adjacency[e.i].push(e.j);
            adjacency[e.j].push(e.i);
        }
        let mut component = vec![usize::MAX; self.num_nodes];
        let mut count = 0;
        for root in 0..self.num_nodes {
            if component[root] != usize::MAX {
                continue;
            }
            component[root] = count;
            let mut queue = VecDeque::from([root]);
            while let Some(n) = queue.pop_front() {
                for &m in &adjacency[n] {
                    if component[m] == usize::MAX {
                        component[m] = count;
                        queue.push_back(m);
                    }
                }
            }
            count += 1;
        }
        let unreachable = (0..self.num_nodes).filter(|&n| component[n] != 0).collect();
        (count, unreachable)
    }

    pub fn require_connected(&self) -> Result<(), SfmError> {
        if self.num_nodes == 0 {
            return Err(SfmError::GraphDisconnected { components: 0, unreachable: Vec::new() });
        }
        let (components, unreachable) = self.connectivity();
        if components > 1 {
            return Err(SfmError::GraphDisconnected { components, unreachable });
        }
        Ok(())
    }

    pub fn diagnostics(&self) -> GraphDiagnostics {
        GraphDiagnostics {
            nodes: self.num_nodes,
            candidate_pairs: self.edges.len() + self.skipped.len(),
            components: self.connectivity().0,
            edges: self
                .edges
                .iter()
                .map(|e| EdgeSummary { i: e.i, j: e.j, correspondences: e.correspondences, inliers: e.inliers.len() })
                .collect(),
            skipped: self.skipped.clone(),
        }
    }
}

fn pair_seed(seed: u64, i: usize, j: usize) -> u64 {
    seed ^ ((i as u64) << 32 | j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Two-view geometry for every frame pair whose gap is in `config.strides`.
/// A disconnected result is returned as is; averaging rejects it.
pub fn build_view_graph(
    tracks: &[StaticTrack],
    num_frames: usize,
    camera: &CameraModel,
    config: &SfmConfig,
) -> Result<ViewGraph, SfmError> {
    config.validate()?;
    let mut by_frame: Vec<BTreeMap<u64, Vector2<f64>>> = vec![BTreeMap::new(); num_frames];
    for t in tracks {
        for &(f, px) in &t.observations {
            if f < num_frames {
                by_frame[f].insert(t.id, camera.unproject(&px).xy());
            }
        }
    }
    let mut strides = config.strides.clone();
    strides.sort_unstable();
    strides.dedup();
    let pairs: Vec<(usize, usize)> = (0..num_frames)
        .flat_map(|i| strides.iter().map(move |s| (i, i + s)))
        .filter(|&(_, j)| j < num_frames)
        .collect();
    let ransac = RansacConfig {
        iterations: config.ransac_iterations,
        threshold: config.epipolar_threshold_px / camera.focal(),
        confidence: config.ransac_confidence,
    };

    let estimate = |&(i, j): &(usize, usize)| -> Option<ViewEdge> {
        let mut ids = Vec::new();
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for (id, a) in &by_frame[i] {
            if let Some(b) = by_frame[j].get(id) {
                ids.push(*id);
                src.push(*a);
                dst.push(*b);
            }
        }
        if ids.len() < config.min_covisible {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(config.seed, i, j));
        let fit = estimate_relative_pose(&src, &dst, &ransac, &mut rng).ok()?;
        let inliers: Vec<u64> = ids.iter().zip(&fit.inliers).filter(|(_, &k)| k).map(|(id, _)| *id).collect();
        (inliers.len() >= config.min_covisible).then_some(ViewEdge {
            i,
            j,
            rotation: fit.rotation,
            direction: fit.translation,
            correspondences: ids.len(),
            inliers,
        })
    };

    #[cfg(feature = "parallel")]
    let results: Vec<Option<ViewEdge>> = {
        use rayon::prelude::*;
        pairs.par_iter().map(estimate).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Option<ViewEdge>> = pairs.iter().map(estimate).collect();

    let mut graph = ViewGraph { num_nodes: num_frames, edges: Vec::new(), skipped: Vec::new() };
    for (pair, edge) in pairs.into_iter().zip(results) {
        match edge {
            Some(e) => graph.edges.push(e),
            None => graph.skipped.push(pair),
        }
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PoseSE3;
    use nalgebra::UnitQuaternion;
    use rand::Rng;

    fn camera() -> CameraModel {
        CameraModel::new(500.0, 500.0, 319.5, 239.5, 640, 480).unwrap()
    }

    fn two_views(n: usize, outlier_fraction: f64) -> (Vec<StaticTrack>, PoseSE3, PoseSE3, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cam = camera();
        let a = PoseSE3::identity();
        let b = PoseSE3::new(UnitQuaternion::from_euler_angles(0.02, -0.05, 0.01), Vector3::new(0.5, 0.05, 0.1));
        let mut tracks = Vec::new();
        let mut truth = Vec::new();
        while tracks.len() < n {
            let x = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-3.0..3.0), rng.random_range(5.0..15.0));
            let (Ok(pa), Ok(mut pb)) = (cam.project(&a, &x), cam.project(&b, &x)) else { continue };
            let outlier = rng.random_bool(outlier_fraction);
            if outlier {
                pb += Vector2::new(rng.random_range(10.0..40.0), rng.random_range(-40.0..-10.0));
            }
            truth.push(!outlier);
            tracks.push(StaticTrack { id: tracks.len() as u64, observations: vec![(0, pa), (1, pb)] });
        }
        (tracks, a, b, truth)
    }

    #[test]
    fn noiseless_pair_recovers_relative_pose() {
        let (tracks, a, b, _) = two_views(60, 0.0);
        let g = build_view_graph(&tracks, 2, &camera(), &SfmConfig::default()).unwrap();
        assert_eq!(g.edges.len(), 1);
        let e = &g.edges[0];
        let rel = b.inverse().compose(&a);
        let r_err = crate::geometry::nearest_rotation(&(e.rotation.transpose() * rel.rotation_matrix())).angle();
        let t_err = e.direction.angle(&rel.translation().normalize());
        assert!(r_err < 1e-6 && t_err < 1e-6, "{r_err} {t_err}");
    }

    #[test]
    fn outliers_are_rejected() {
        let (tracks, _, _, truth) = two_views(200, 0.3);
        let g = build_view_graph(&tracks, 2, &camera(), &SfmConfig::default()).unwrap();
        let inliers: std::collections::BTreeSet<u64> = g.edges[0].inliers.iter().copied().collect();
        let good: Vec<u64> = (0..200u64).filter(|&i| truth[i as usize]).collect();
        let found = good.iter().filter(|i| inliers.contains(i)).count();
        assert!(found as f64 >= 0.95 * good.len() as f64);
    }

    #[test]
    fn seven_correspondences_skip_the_pair() {
        let (tracks, _, _, _) = two_views(7, 0.0);
        let config = SfmConfig { min_covisible: 8, ..SfmConfig::default() };
        let g = build_view_graph(&tracks, 2, &camera(), &config).unwrap();
        assert!(g.edges.is_empty());
        assert_eq!(g.skipped, vec![(0, 1)]);
        assert!(matches!(g.require_connected(), Err(SfmError::GraphDisconnected { components: 2, .. })));
    }
}
