use std::collections::VecDeque;

use nalgebra::{Cholesky, DMatrix, Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::{SfmError, ViewGraph};
use crate::geometry::nearest_rotation;
use crate::robust::median;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RotationConfig {
    pub max_iterations: usize,
    /// Stop once the largest tangent update falls below this, in radians.
    pub step_tolerance: f64,
    /// Residual floor of the L1 weights, in radians.
    pub weight_floor: f64,
}

impl Default for RotationConfig {
    fn default() -> Self {
        Self { max_iterations: 100, step_tolerance: 1e-8, weight_floor: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub initial_mean_residual_deg: f64,
    pub final_mean_residual_deg: f64,
    pub final_median_residual_deg: f64,
    pub final_max_residual_deg: f64,
}

fn edge_error(rotations: &[UnitQuaternion<f64>], i: usize, j: usize, relative: &Matrix3<f64>) -> Vector3<f64> {
    (rotations[j] * nearest_rotation(relative) * rotations[i].inverse()).scaled_axis()
}

fn to_rotations(mats: &[Matrix3<f64>]) -> Vec<UnitQuaternion<f64>> {
    mats.iter().map(nearest_rotation).collect()
}

/// Angular residual of every edge, in radians, for world-from-camera rotations.
pub fn rotation_residuals(graph: &ViewGraph, rotations: &[Matrix3<f64>]) -> Vec<f64> {
    let rots = to_rotations(rotations);
    graph.edges.iter().map(|e| edge_error(&rots, e.i, e.j, &e.rotation).norm()).collect()
}

/// Chains relative rotations along a maximum-inlier spanning tree rooted at frame 0.
pub fn spanning_tree_rotations(graph: &ViewGraph) -> Result<Vec<Matrix3<f64>>, SfmError> {
    graph.require_connected()?;
    let n = graph.num_nodes;
    let mut order: Vec<usize> = (0..graph.edges.len()).collect();
    order.sort_by_key(|&k| {
        let e = &graph.edges[k];
        (std::cmp::Reverse(e.inliers.len()), e.i, e.j)
    });
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut adjacency = vec![Vec::new(); n];
    for k in order {
        let e = &graph.edges[k];
        let (a, b) = (find(&mut parent, e.i), find(&mut parent, e.j));
        if a != b {
            parent[a] = b;
            adjacency[e.i].push(k);
            adjacency[e.j].push(k);
        }
    }
    let mut rotations = vec![None; n];
    rotations[0] = Some(Matrix3::identity());
    let mut queue = VecDeque::from([0]);
    while let Some(node) = queue.pop_front() {
        let r = rotations[node].expect("visited");
        for &k in &adjacency[node] {
            let e = &graph.edges[k];
            let (other, value) = if e.i == node { (e.j, r * e.rotation.transpose()) } else { (e.i, r * e.rotation) };
            if rotations[other].is_none() {
                rotations[other] = Some(value);
                queue.push_back(other);
            }
        }
    }
    Ok(rotations.into_iter().map(|r| r.expect("connected")).collect())
}

/// Spanning-tree initialization refined by L1-weighted IRLS in the tangent
/// space, with frame 0 held at the identity.
pub fn rotation_averaging(
    graph: &ViewGraph,
    config: &RotationConfig,
) -> Result<(Vec<Matrix3<f64>>, RotationDiagnostics), SfmError> {
    let init = spanning_tree_rotations(graph)?;
    let n = graph.num_nodes;
    let mut rots = to_rotations(&init);
    let initial = rotation_residuals(graph, &init);
    let mut iterations = 0;
    let mut converged = n == 1;

    while !converged && iterations < config.max_iterations {
        iterations += 1;
        // Unknowns are the tangent updates of frames 1..n.
        let mut lap = DMatrix::<f64>::zeros(n - 1, n - 1);
        let mut rhs = DMatrix::<f64>::zeros(n - 1, 3);
        for e in &graph.edges {
            let err = edge_error(&rots, e.i, e.j, &e.rotation);
            let w = 1.0 / err.norm().max(config.weight_floor);
            // w * |omega_j - omega_i + err|^2
            let (i, j) = (e.i.checked_sub(1), e.j.checked_sub(1));
            if let Some(i) = i {
                lap[(i, i)] += w;
                for a in 0..3 {
                    rhs[(i, a)] += w * err[a];
                }
            }
            if let Some(j) = j {
                lap[(j, j)] += w;
                for a in 0..3 {
                    rhs[(j, a)] -= w * err[a];
                }
            }
            if let (Some(i), Some(j)) = (i, j) {
                lap[(i, j)] -= w;
                lap[(j, i)] -= w;
            }
        }
        let chol = Cholesky::new(lap)
            .ok_or_else(|| SfmError::NumericalFailure("rotation Laplacian is not positive definite".into()))?;
        let step = chol.solve(&rhs);
        let mut largest = 0.0_f64;
        for k in 1..n {
            let omega = Vector3::new(step[(k - 1, 0)], step[(k - 1, 1)], step[(k - 1, 2)]);
            largest = largest.max(omega.norm());
            rots[k] = UnitQuaternion::from_scaled_axis(omega) * rots[k];
        }
        converged = largest < config.step_tolerance;
    }

    let result: Vec<Matrix3<f64>> = rots.iter().map(|r| r.to_rotation_matrix().into_inner()).collect();
    let fin = rotation_residuals(graph, &result);
    let mean_deg = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 }.to_degrees();
    let diagnostics = RotationDiagnostics {
        iterations,
        converged,
        initial_mean_residual_deg: mean_deg(&initial),
        final_mean_residual_deg: mean_deg(&fin),
        final_median_residual_deg: median(&fin).unwrap_or(0.0).to_degrees(),
        final_max_residual_deg: fin.iter().copied().fold(0.0, f64::max).to_degrees(),
    };
    Ok((result, diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sfm::ViewEdge;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        Rotation3::from_scaled_axis(v * 1.5).into_inner()
    }

    fn edge(i: usize, j: usize, rotation: Matrix3<f64>) -> ViewEdge {
        ViewEdge { i, j, rotation, direction: Vector3::x(), correspondences: 20, inliers: (0..20).collect() }
    }

    fn exact_graph(truth: &[Matrix3<f64>], pairs: &[(usize, usize)]) -> ViewGraph {
        ViewGraph {
            num_nodes: truth.len(),
            edges: pairs.iter().map(|&(i, j)| edge(i, j, truth[j].transpose() * truth[i])).collect(),
            skipped: Vec::new(),
        }
    }

    #[test]
    fn exact_relative_rotations_are_reproduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut truth: Vec<Matrix3<f64>> = (0..8).map(|_| random_rotation(&mut rng)).collect();
        truth[0] = Matrix3::identity();
        let pairs = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7), (0, 3), (2, 6), (1, 7)];
        let graph = exact_graph(&truth, &pairs);
        let (rots, diag) = rotation_averaging(&graph, &RotationConfig::default()).unwrap();
        assert!(rotation_residuals(&graph, &rots).iter().all(|r| *r < 1e-8));
        for (r, t) in rots.iter().zip(&truth) {
            assert!(nearest_rotation(&(r.transpose() * t)).angle() < 1e-8);
        }
        assert!(diag.converged);
    }

    #[test]
    fn two_components_are_rejected() {
        let truth: Vec<Matrix3<f64>> = vec![Matrix3::identity(); 4];
        let graph = exact_graph(&truth, &[(0, 1), (2, 3)]);
        match rotation_averaging(&graph, &RotationConfig::default()) {
            Err(SfmError::GraphDisconnected { components, unreachable }) => {
                assert_eq!(components, 2);
                assert_eq!(unreachable, vec![2, 3]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_outlier_edge_is_absorbed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut truth: Vec<Matrix3<f64>> = (0..6).map(|_| random_rotation(&mut rng)).collect();
        truth[0] = Matrix3::identity();
        let pairs = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 2), (1, 3), (2, 4), (3, 5), (0, 5)];
        let mut graph = exact_graph(&truth, &pairs);
        graph.edges[9].rotation = Rotation3::from_euler_angles(0.4, 0.0, 0.0).into_inner() * graph.edges[9].rotation;
        let (rots, _) = rotation_averaging(&graph, &RotationConfig::default()).unwrap();
        for (r, t) in rots.iter().zip(&truth) {
            assert!(nearest_rotation(&(r.transpose() * t)).angle() < 5e-3);
        }
    }
}
