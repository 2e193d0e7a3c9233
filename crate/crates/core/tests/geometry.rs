use dynasfm::geometry::{
    alignment_rmse, reprojection_cost, triangulate, umeyama, Observation, TriangulationConfig,
};
use dynasfm::{CameraModel, PoseSE3, Sim3};
use nalgebra::{Matrix3, SymmetricEigen, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Derivative-free compass search: shrinks the step until no axis move improves.
fn compass_search<const N: usize>(f: impl Fn(&[f64; N]) -> f64, mut x: [f64; N], mut step: f64, min_step: f64) -> [f64; N] {
    let mut best = f(&x);
    while step > min_step {
        let mut moved = false;
        for k in 0..N {
            for sign in [1.0, -1.0] {
                let mut trial = x;
                trial[k] += sign * step;
                let value = f(&trial);
                if value < best {
                    (x, best, moved) = (trial, value, true);
                }
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    x
}

fn brute_force_minimizer(observations: &[Observation], truth: &Vector3<f64>) -> Vector3<f64> {
    let cost = |p: &[f64; 3]| reprojection_cost(observations, &Vector3::new(p[0], p[1], p[2]));
    // Dense grid around the true point, then local refinement.
    let half = 0.05 * truth.norm();
    let n = 20;
    let mut start = [truth.x, truth.y, truth.z];
    let mut best = f64::INFINITY;
    for i in 0..=n {
        for j in 0..=n {
            for k in 0..=n {
                let p = [
                    truth.x - half + 2.0 * half * i as f64 / n as f64,
                    truth.y - half + 2.0 * half * j as f64 / n as f64,
                    truth.z - half + 2.0 * half * k as f64 / n as f64,
                ];
                let c = cost(&p);
                if c < best {
                    (start, best) = (p, c);
                }
            }
        }
    }
    // Whiten by a finite-difference Hessian so the search is not stuck in the depth valley.
    let at = Vector3::new(start[0], start[1], start[2]);
    let f = |p: Vector3<f64>| reprojection_cost(observations, &p);
    let h = 1e-4 * half;
    let hessian = Matrix3::from_fn(|i, j| {
        let (ei, ej) = (Vector3::ith(i, h), Vector3::ith(j, h));
        (f(at + ei + ej) - f(at + ei - ej) - f(at - ei + ej) + f(at - ei - ej)) / (4.0 * h * h)
    });
    let eig = SymmetricEigen::new(hessian);
    let basis = Matrix3::from_fn(|i, j| eig.eigenvectors[(i, j)] / eig.eigenvalues[j].abs().sqrt());
    let to_world = |y: &[f64; 3]| at + basis * Vector3::new(y[0], y[1], y[2]);
    let y = compass_search(|y| f(to_world(y)), [0.0; 3], 1.0, 1e-12);
    to_world(&y)
}

#[test]
fn triangulation_matches_brute_force_minimizer() {
    let camera = CameraModel::new(500.0, 500.0, 319.5, 239.5, 640, 480).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut done = 0;
    while done < 200 {
        let truth = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(4.0..8.0));
        let views = rng.random_range(2..=6);
        let observations: Vec<Observation> = (0..views)
            .map(|_| {
                let eye = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
                let pose = PoseSE3::look_at(eye, truth + Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5)), Vector3::y());
                let noise = Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)) * 0.5;
                Observation { camera, pose, pixel: camera.project(&pose, &truth).unwrap() + noise }
            })
            .collect();
        let Ok(result) = triangulate(&observations, &TriangulationConfig::default()) else { continue };
        let oracle = brute_force_minimizer(&observations, &truth);
        let gap = (result.point - oracle).norm();
        assert!(gap < 1e-6, "configuration {done}: {gap:e}");
        done += 1;
    }
}

#[test]
fn umeyama_residual_matches_numeric_optimizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let src: Vec<Vector3<f64>> = (0..30).map(|_| Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0))).collect();
        let truth = Sim3::new(
            rng.random_range(0.5..2.0),
            UnitQuaternion::from_scaled_axis(Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))),
            Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0)),
        );
        let dst: Vec<Vector3<f64>> = src
            .iter()
            .map(|p| truth.apply(p) + Vector3::from_fn(|_, _| 0.05 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let closed = alignment_rmse(&umeyama(&src, &dst, true).unwrap(), &src, &dst);

        let to_sim3 = |x: &[f64; 7]| {
            Sim3::new(x[0].exp(), UnitQuaternion::from_scaled_axis(Vector3::new(x[1], x[2], x[3])), Vector3::new(x[4], x[5], x[6]))
        };
        let objective = |x: &[f64; 7]| alignment_rmse(&to_sim3(x), &src, &dst).powi(2);
        let axis = truth.rotation.scaled_axis();
        let start = [truth.scale.ln(), axis.x, axis.y, axis.z, truth.translation.x, truth.translation.y, truth.translation.z];
        let numeric = alignment_rmse(&to_sim3(&compass_search(objective, start, 0.1, 1e-12)), &src, &dst);
        assert!((closed - numeric).abs() < 1e-6, "{closed} vs {numeric}");
        assert!(closed <= numeric + 1e-12);
    }
}
