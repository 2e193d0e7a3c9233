use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use super::{mean_baseline, SfmError, StaticTrack, ViewEdge, ViewGraph};
use crate::geometry::CameraModel;
use crate::robust::{huber_weight, median, robust_scale};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslationConfig {
    pub max_iterations: usize,
    /// Huber threshold in robust standard deviations of the angular residual.
    pub huber_k: f64,
    /// Stop once the largest center update drops below this, in mean baselines.
    pub tolerance: f64,
    /// Tracks whose bearings span less than this angle are not used, in degrees.
    pub min_point_angle_deg: f64,
}

impl Default for TranslationConfig {
    fn default() -> Self {
        Self { max_iterations: 20, huber_k: 1.345, tolerance: 1e-10, min_point_angle_deg: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// Tracks entering the problem as point nodes.
    pub points: usize,
    pub smallest_eigenvalue: f64,
    pub second_eigenvalue: f64,
    pub mean_angle_error_deg: f64,
    pub median_angle_error_deg: f64,
}

/// Unit world-frame direction from the center of `edge.i` toward `edge.j`.
pub fn edge_direction(edge: &ViewEdge, rotations: &[Matrix3<f64>]) -> Vector3<f64> {
    -(rotations[edge.j] * edge.direction).normalize()
}

const DEGENERACY_RATIO: f64 = 1e-12;

/// `to - from` should be a positive multiple of `d`.
#[derive(Debug, Clone, Copy)]
struct Constraint {
    from: usize,
    to: Node,
    d: Vector3<f64>,
}

#[derive(Debug, Clone, Copy)]
enum Node {
    Camera(usize),
    Point(usize),
}

struct Problem {
    cameras: usize,
    points: usize,
    constraints: Vec<Constraint>,
}

struct State {
    centers: Vec<Vector3<f64>>,
    points: Vec<Vector3<f64>>,
}

impl State {
    fn delta(&self, c: &Constraint) -> Vector3<f64> {
        let to = match c.to {
            Node::Camera(k) => self.centers[k],
            Node::Point(p) => self.points[p],
        };
        to - self.centers[c.from]
    }
}

fn angle_between(d: &Vector3<f64>, delta: &Vector3<f64>) -> f64 {
    d.cross(delta).norm().atan2(d.dot(delta))
}

/// Quadratic form `sum w (x_to - x_from)^T P (x_to - x_from)` over the
/// cameras with the points eliminated; frame 0 is held at the origin.
struct Reduced {
    matrix: DMatrix<f64>,
    point_inv: Vec<Matrix3<f64>>,
    /// Camera-point coupling block per point constraint.
    coupling: Vec<(usize, usize, Matrix3<f64>)>,
}

fn reduce(problem: &Problem, weights: &[f64]) -> Option<Reduced> {
    let dim = 3 * (problem.cameras - 1);
    let mut matrix = DMatrix::<f64>::zeros(dim, dim);
    let mut point_blocks = vec![Matrix3::zeros(); problem.points];
    let mut coupling = Vec::new();
    let mut by_point: Vec<Vec<usize>> = vec![Vec::new(); problem.points];
    let add = |matrix: &mut DMatrix<f64>, u: usize, v: usize, m: &Matrix3<f64>| {
        if u > 0 && v > 0 {
            let mut block = matrix.fixed_view_mut::<3, 3>(3 * (u - 1), 3 * (v - 1));
            block += m;
        }
    };
    for (c, &w) in problem.constraints.iter().zip(weights) {
        let wm = (Matrix3::identity() - c.d * c.d.transpose()) * w;
        add(&mut matrix, c.from, c.from, &wm);
        match c.to {
            Node::Camera(j) => {
                add(&mut matrix, j, j, &wm);
                add(&mut matrix, c.from, j, &-wm);
                add(&mut matrix, j, c.from, &-wm);
            }
            Node::Point(p) => {
                point_blocks[p] += wm;
                by_point[p].push(coupling.len());
                coupling.push((c.from, p, -wm));
            }
        }
    }
    let mut point_inv = Vec::with_capacity(problem.points);
    for (p, block) in point_blocks.iter().enumerate() {
        let inv = block.try_inverse()?;
        for &ka in &by_point[p] {
            let (fa, _, ca) = coupling[ka];
            if fa == 0 {
                continue;
            }
            let scaled = ca * inv;
            for &kb in &by_point[p] {
                let (fb, _, cb) = coupling[kb];
                if fb > 0 {
                    let mut block = matrix.fixed_view_mut::<3, 3>(3 * (fa - 1), 3 * (fb - 1));
                    block -= scaled * cb.transpose();
                }
            }
        }
        point_inv.push(inv);
    }
    Some(Reduced { matrix, point_inv, coupling })
}

fn back_substitute(problem: &Problem, reduced: &Reduced, centers: Vec<Vector3<f64>>) -> State {
    let mut acc = vec![Vector3::zeros(); problem.points];
    for (f, p, c) in &reduced.coupling {
        acc[*p] -= c.transpose() * centers[*f];
    }
    let points = acc.iter().zip(&reduced.point_inv).map(|(a, inv)| inv * a).collect();
    State { centers, points }
}

fn unstack(n: usize, v: &DVector<f64>) -> Vec<Vector3<f64>> {
    std::iter::once(Vector3::zeros()).chain((1..n).map(|k| v.fixed_rows::<3>(3 * (k - 1)).into_owned())).collect()
}

/// Smallest eigenvector of the weighted cross-product system, oriented to
/// agree with the directions and scaled to unit mean consecutive baseline.
fn cross_product_solve(problem: &Problem, weights: &[f64], check: bool) -> Result<(State, f64, f64), SfmError> {
    let reduced = reduce(problem, weights)
        .ok_or_else(|| SfmError::NumericalFailure("singular point block in translation averaging".into()))?;
    let dim = reduced.matrix.nrows();
    let eig = SymmetricEigen::new(reduced.matrix.clone());
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    let lambda_max = eig.eigenvalues[order[dim - 1]].abs();
    let l1 = eig.eigenvalues[order[0]];
    let l2 = if dim > 1 { eig.eigenvalues[order[1]] } else { 0.0 };
    if dim < 2 || (check && l2 < DEGENERACY_RATIO * lambda_max) {
        return Err(SfmError::DegenerateDirections(format!(
            "second smallest eigenvalue {l2:e} vs largest {lambda_max:e}"
        )));
    }
    let v = eig.eigenvectors.column(order[0]).into_owned();
    let mut state = back_substitute(problem, &reduced, unstack(problem.cameras, &v));
    let agreement: f64 = problem.constraints.iter().zip(weights).map(|(c, w)| w * c.d.dot(&state.delta(c))).sum();
    let baseline = mean_baseline(&state.centers);
    if !(baseline > 0.0) {
        return Err(SfmError::DegenerateDirections("zero mean baseline".into()));
    }
    let scale = agreement.signum() / baseline;
    state.centers.iter_mut().chain(state.points.iter_mut()).for_each(|x| *x *= scale);
    Ok((state, l1, l2))
}

fn build_problem(
    graph: &ViewGraph,
    rotations: &[Matrix3<f64>],
    tracks: &[StaticTrack],
    camera: &CameraModel,
    config: &TranslationConfig,
) -> Problem {
    let mut constraints: Vec<Constraint> = graph
        .edges
        .iter()
        .map(|e| Constraint { from: e.i, to: Node::Camera(e.j), d: edge_direction(e, rotations) })
        .collect();
    let verified: BTreeSet<u64> = graph.edges.iter().flat_map(|e| e.inliers.iter().copied()).collect();
    // Two unit bearings at angle t give a smallest eigenvalue of 1 - cos t.
    let min_eigen = 1.0 - config.min_point_angle_deg.to_radians().cos();
    let mut points = 0;
    for t in tracks.iter().filter(|t| verified.contains(&t.id)) {
        let bearings: Vec<(usize, Vector3<f64>)> = t
            .observations
            .iter()
            .filter(|(f, _)| *f < graph.num_nodes)
            .map(|(f, px)| (*f, (rotations[*f] * camera.unproject(px)).normalize()))
            .collect();
        let spread: Matrix3<f64> = bearings.iter().map(|(_, b)| Matrix3::identity() - b * b.transpose()).sum();
        if bearings.len() < 2 || SymmetricEigen::new(spread).eigenvalues.min() < min_eigen {
            continue;
        }
        constraints.extend(bearings.into_iter().map(|(f, d)| Constraint { from: f, to: Node::Point(points), d }));
        points += 1;
    }
    Problem { cameras: graph.num_nodes, points, constraints }
}

/// Camera centers from pairwise directions and track bearings, frame 0 at the
/// origin and unit mean consecutive baseline. Tracks enter as extra nodes so
/// that near-collinear camera paths stay well posed.
pub fn translation_averaging(
    graph: &ViewGraph,
    rotations: &[Matrix3<f64>],
    tracks: &[StaticTrack],
    camera: &CameraModel,
    config: &TranslationConfig,
) -> Result<(Vec<Vector3<f64>>, TranslationDiagnostics), SfmError> {
    graph.require_connected()?;
    let n = graph.num_nodes;
    if n < 2 {
        return Err(SfmError::DegenerateDirections("a single frame has no baseline".into()));
    }
    let problem = build_problem(graph, rotations, tracks, camera, config);
    let mut weights = vec![1.0; problem.constraints.len()];
    let (mut state, l1, l2) = cross_product_solve(&problem, &weights, true)?;

    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iterations && !converged {
        iterations += 1;
        let angles: Vec<f64> = problem.constraints.iter().map(|c| angle_between(&c.d, &state.delta(c))).collect();
        let delta = config.huber_k * robust_scale(&angles).max(1e-12);
        weights = angles.iter().map(|a| huber_weight(*a, delta)).collect();
        let (next, _, _) = cross_product_solve(&problem, &weights, false)?;
        let change = next.centers.iter().zip(&state.centers).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        converged = change <= config.tolerance;
        state = next;
    }

    let centers = state.centers;
    let angles: Vec<f64> = graph
        .edges
        .iter()
        .map(|e| angle_between(&edge_direction(e, rotations), &(centers[e.j] - centers[e.i])))
        .collect();
    let diagnostics = TranslationDiagnostics {
        iterations,
        converged,
        points: problem.points,
        smallest_eigenvalue: l1,
        second_eigenvalue: l2,
        mean_angle_error_deg: (angles.iter().sum::<f64>() / angles.len().max(1) as f64).to_degrees(),
        median_angle_error_deg: median(&angles).unwrap_or(0.0).to_degrees(),
    };
    Ok((centers, diagnostics))
}
