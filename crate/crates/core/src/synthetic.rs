//! Deterministic synthetic dynamic scenes with full ground truth.
//!
//! The static world is the inside of an axis-aligned room; static tracks are
//! points on its walls. Dynamic tracks are points on spheres that translate
//! and spin rigidly from frame to frame. Visibility accounts for the image
//! bounds, sphere self-occlusion and occlusion by other spheres. Depth samples
//! are the camera-frame depth passed through a per-frame affine map
//! `a_t * z + b_t`, which mimics the unknown scale and shift of monocular
//! relative depth.

use std::collections::BTreeMap;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraModel, PoseSE3};
use crate::io::{DepthFrame, Track, TrackSet};

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid scene config: {0}")]
pub struct InvalidConfig(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub num_frames: usize,
    /// Total number of tracks, static and dynamic.
    pub num_tracks: usize,
    /// Fraction of tracks placed on moving objects; the count is rounded.
    pub dynamic_fraction: f64,
    pub num_objects: usize,
    pub camera: CameraModel,
    /// Gaussian pixel noise sigma.
    pub pixel_noise: f64,
    /// Relative (multiplicative) Gaussian noise on depth before the disguise.
    pub depth_noise: f64,
    /// Per-frame probability of a random visibility dropout.
    pub occlusion_rate: f64,
    /// Fraction of static tracks replaced by drifting garbage.
    pub outlier_track_rate: f64,
    /// Apply a random per-frame affine map to depth samples.
    pub depth_disguise: bool,
    /// Fraction of tracks that start after frame 0.
    pub late_start_fraction: f64,
    /// Camera path length per frame.
    pub camera_step: f64,
    /// Speed of object centers along their orbits, per frame.
    pub object_speed: f64,
    pub orbit_radius: f64,
    /// Mean object rotation per frame, in degrees.
    pub object_spin_deg: f64,
    pub render_depth: bool,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_frames: 30,
            num_tracks: 400,
            dynamic_fraction: 0.2,
            num_objects: 3,
            camera: CameraModel { fx: 500.0, fy: 500.0, cx: 319.5, cy: 239.5, width: 640, height: 480 },
            pixel_noise: 0.0,
            depth_noise: 0.0,
            occlusion_rate: 0.0,
            outlier_track_rate: 0.0,
            depth_disguise: true,
            late_start_fraction: 0.25,
            camera_step: 0.1,
            object_speed: 0.25,
            orbit_radius: 1.0,
            object_spin_deg: 10.0,
            render_depth: true,
            seed: 42,
        }
    }
}

impl SceneConfig {
    pub fn num_dynamic(&self) -> usize {
        (self.dynamic_fraction * self.num_tracks as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), InvalidConfig> {
        let fail = |m: &str| Err(InvalidConfig(m.to_string()));
        if self.num_frames < 2 {
            return fail("need at least 2 frames");
        }
        if !(0.0..1.0).contains(&self.dynamic_fraction) {
            return fail("dynamic_fraction must be in [0, 1)");
        }
        if self.num_tracks.saturating_sub(self.num_dynamic()) < 8 {
            return fail("need at least 8 static tracks");
        }
        if self.num_dynamic() > 0 && self.num_objects == 0 {
            return fail("dynamic tracks need at least one object");
        }
        if !(self.orbit_radius > 0.0) {
            return fail("orbit_radius must be positive");
        }
        if !(self.camera_step > 0.0) {
            return fail("camera_step must be positive (nonzero baseline)");
        }
        for (name, v) in [
            ("pixel_noise", self.pixel_noise),
            ("depth_noise", self.depth_noise),
            ("object_speed", self.object_speed),
            ("object_spin_deg", self.object_spin_deg),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(InvalidConfig(format!("{name} must be finite and non-negative")));
            }
        }
        for (name, v) in [
            ("occlusion_rate", self.occlusion_rate),
            ("outlier_track_rate", self.outlier_track_rate),
            ("late_start_fraction", self.late_start_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(InvalidConfig(format!("{name} must be in [0, 1]")));
            }
        }
        CameraModel::new(
            self.camera.fx,
            self.camera.fy,
            self.camera.cx,
            self.camera.cy,
            self.camera.width,
            self.camera.height,
        )
        .map_err(|e| InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

/// Axis-aligned room bounds (y points down, the floor is at `max.y`).
const ROOM_MIN: [f64; 3] = [-8.0, -5.0, -4.0];
const ROOM_MAX: [f64; 3] = [8.0, 3.0, 16.0];

/// A rigidly moving sphere: its center runs around a circle at constant speed
/// while the sphere spins about a fixed axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovingObject {
    pub radius: f64,
    pub orbit_center: Vector3<f64>,
    /// Orthonormal axes spanning the orbit plane.
    pub orbit_axes: [Vector3<f64>; 2],
    pub orbit_radius: f64,
    /// Orbit angle per frame, radians.
    pub orbit_rate: f64,
    pub orbit_phase: f64,
    /// Rotation per frame as a scaled axis.
    pub spin: Vector3<f64>,
}

impl MovingObject {
    pub fn center(&self, frame: usize) -> Vector3<f64> {
        let a = self.orbit_phase + self.orbit_rate * frame as f64;
        self.orbit_center + (self.orbit_axes[0] * a.cos() + self.orbit_axes[1] * a.sin()) * self.orbit_radius
    }

    pub fn orientation(&self, frame: usize) -> UnitQuaternion<f64> {
        UnitQuaternion::from_scaled_axis(self.spin * frame as f64)
    }

    pub fn to_world(&self, frame: usize, local: &Vector3<f64>) -> Vector3<f64> {
        self.center(frame) + self.orientation(frame) * local
    }

    /// Smallest ray parameter `s > min_s` with `origin + s * dir` on the sphere.
    fn intersect(&self, frame: usize, origin: &Vector3<f64>, dir: &Vector3<f64>, min_s: f64) -> Option<f64> {
        let oc = origin - self.center(frame);
        let a = dir.norm_squared();
        let b = 2.0 * dir.dot(&oc);
        let c = oc.norm_squared() - self.radius * self.radius;
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)].into_iter().find(|&s| s > min_s)
    }
}

/// Ground truth of one track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthPoint {
    pub id: u64,
    pub dynamic: bool,
    /// Static track whose image positions were replaced by garbage.
    pub outlier: bool,
    /// Owning object for dynamic points.
    pub object: Option<usize>,
    /// World position per frame for frames `0..num_frames`.
    pub world: Vec<Vector3<f64>>,
}

/// Ground truth of a generated sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    /// World-from-camera pose per frame.
    pub poses: Vec<PoseSE3>,
    pub objects: Vec<MovingObject>,
    pub points: Vec<GroundTruthPoint>,
    /// Per-frame `(a_t, b_t)` with `depth = a_t * z + b_t`.
    pub disguise: Vec<(f64, f64)>,
}

impl SyntheticScene {
    pub fn camera(&self) -> &CameraModel {
        &self.config.camera
    }

    pub fn point(&self, id: u64) -> Option<&GroundTruthPoint> {
        self.points.binary_search_by_key(&id, |p| p.id).ok().map(|i| &self.points[i])
    }

    pub fn dynamic_labels(&self) -> BTreeMap<u64, bool> {
        self.points.iter().map(|p| (p.id, p.dynamic)).collect()
    }

    /// Length of the camera path, summed over consecutive frames.
    pub fn trajectory_length(&self) -> f64 {
        self.poses.windows(2).map(|w| (w[1].center() - w[0].center()).norm()).sum()
    }

    /// Largest distance between any two camera centers.
    pub fn trajectory_span(&self) -> f64 {
        let mut span = 0.0_f64;
        for a in &self.poses {
            for b in &self.poses {
                span = span.max((a.center() - b.center()).norm());
            }
        }
        span
    }

    /// Camera-frame depth of the first surface hit through `pixel` at `frame`.
    pub fn ray_cast_depth(&self, frame: usize, pixel: &Vector2<f64>) -> f64 {
        let pose = &self.poses[frame];
        let dir = pose.rotation() * self.camera().unproject(pixel);
        let origin = pose.center();
        let mut best = room_exit(&origin, &dir);
        for obj in &self.objects {
            if let Some(s) = obj.intersect(frame, &origin, &dir, 1e-9) {
                best = best.min(s);
            }
        }
        // dir has unit camera-frame z, so the ray parameter is the depth
        best
    }

    /// True when the world point is in view and unoccluded at `frame`.
    /// `owner` is the sphere the point lies on, if any.
    fn is_visible(&self, frame: usize, world: &Vector3<f64>, owner: Option<usize>) -> bool {
        let pose = &self.poses[frame];
        let cam_pt = pose.to_camera(world);
        if cam_pt.z < 0.1 {
            return false;
        }
        let Ok(px) = self.camera().project_camera(&cam_pt) else {
            return false;
        };
        if !self.camera().contains(&px) {
            return false;
        }
        let origin = pose.center();
        let dir = world - origin;
        for (k, obj) in self.objects.iter().enumerate() {
            if Some(k) == owner {
                let normal = world - obj.center(frame);
                if normal.dot(&(origin - world)) <= 0.0 {
                    return false;
                }
                continue;
            }
            if let Some(s) = obj.intersect(frame, &origin, &dir, 1e-9) {
                if s < 1.0 - 1e-9 {
                    return false;
                }
            }
        }
        true
    }
}

fn room_exit(origin: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for axis in 0..3 {
        let d = dir[axis];
        if d.abs() < 1e-300 {
            continue;
        }
        let bound = if d > 0.0 { ROOM_MAX[axis] } else { ROOM_MIN[axis] };
        let s = (bound - origin[axis]) / d;
        if s > 0.0 {
            best = best.min(s);
        }
    }
    best
}

fn camera_path(config: &SceneConfig) -> Vec<PoseSE3> {
    let n = config.num_frames;
    let length = config.camera_step * (n - 1) as f64;
    (0..n)
        .map(|i| {
            let u = i as f64 / (n - 1) as f64;
            let arc = (std::f64::consts::PI * u).sin();
            let eye = Vector3::new(-0.5 * length + length * u, -0.3 * length * arc / 3.0, 0.8 * length * arc / 3.0);
            let target = Vector3::new(0.8 * (2.0 * std::f64::consts::PI * u).sin(), 0.5, 10.0);
            PoseSE3::look_at(eye, target, Vector3::y())
        })
        .collect()
}

fn random_objects(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<MovingObject> {
    (0..config.num_objects)
        .map(|k| {
            // spread objects across the view so they rarely overlap
            let lane = if config.num_objects > 1 { k as f64 / (config.num_objects - 1) as f64 - 0.5 } else { 0.0 };
            let orbit_center = Vector3::new(
                5.0 * lane + rng.random_range(-0.4..0.4),
                rng.random_range(-0.6..1.0),
                rng.random_range(6.0..8.0),
            );
            // orbit planes tilted away from the viewing direction
            let first = Vector3::new(1.0, rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)).normalize();
            let helper = Vector3::new(rng.random_range(-0.5..0.5), 1.0, rng.random_range(-0.5..0.5));
            let second = (helper - first * first.dot(&helper)).normalize();
            let orbit_radius = config.orbit_radius;
            let speed = config.object_speed * rng.random_range(0.8..1.2);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                .normalize();
            MovingObject {
                radius: rng.random_range(0.7..1.0),
                orbit_center,
                orbit_axes: [first, second],
                orbit_radius,
                orbit_rate: sign * speed / orbit_radius,
                orbit_phase: rng.random_range(0.0..std::f64::consts::TAU),
                spin: axis * rng.random_range(config.object_spin_deg * 0.7..config.object_spin_deg * 1.3).to_radians(),
            }
        })
        .collect()
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

fn start_frame(config: &SceneConfig, rng: &mut ChaCha8Rng) -> usize {
    if config.num_frames > 2 && rng.random_bool(config.late_start_fraction) {
        rng.random_range(1..config.num_frames - 1)
    } else {
        0
    }
}

const MAX_ATTEMPTS: usize = 10_000;

/// Generates ground truth, observed tracks and (optionally) depth rasters.
pub fn generate_scene(config: &SceneConfig) -> Result<(SyntheticScene, TrackSet, Vec<DepthFrame>), InvalidConfig> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_frames = config.num_frames;
    let poses = camera_path(config);
    let objects = if config.num_dynamic() > 0 { random_objects(config, &mut rng) } else { Vec::new() };
    let disguise: Vec<(f64, f64)> = (0..n_frames)
        .map(|_| {
            if config.depth_disguise {
                (rng.random_range(0.5..2.0), rng.random_range(0.0..2.0))
            } else {
                (1.0, 0.0)
            }
        })
        .collect();

    let mut scene = SyntheticScene { config: config.clone(), poses, objects, points: Vec::new(), disguise };
    let cam = config.camera;
    let n_dynamic = config.num_dynamic();
    let n_static = config.num_tracks - n_dynamic;
    let n_outliers = (config.outlier_track_rate * n_static as f64).round() as usize;

    // Dynamic ids first would leak the label through the id; interleave instead.
    let mut kinds: Vec<bool> = (0..config.num_tracks).map(|i| i < n_dynamic).collect();
    for i in (1..kinds.len()).rev() {
        let j = rng.random_range(0..=i);
        kinds.swap(i, j);
    }

    let mut starts = Vec::with_capacity(config.num_tracks);
    let mut dyn_counter = 0usize;
    let mut static_counter = 0usize;
    for (id, &dynamic) in kinds.iter().enumerate() {
        let mut attempts = 0;
        let (point, start) = loop {
            attempts += 1;
            if attempts > MAX_ATTEMPTS {
                return Err(InvalidConfig(format!("could not place a visible point for track {id}")));
            }
            let start = start_frame(config, &mut rng);
            if dynamic {
                let k = dyn_counter % scene.objects.len();
                let obj = &scene.objects[k];
                let local = random_unit(&mut rng) * obj.radius;
                let world: Vec<Vector3<f64>> = (0..n_frames).map(|t| obj.to_world(t, &local)).collect();
                if scene.is_visible(start, &world[start], Some(k)) && scene.is_visible(start + 1, &world[start + 1], Some(k)) {
                    break (GroundTruthPoint { id: id as u64, dynamic, outlier: false, object: Some(k), world }, start);
                }
            } else {
                let px = Vector2::new(
                    rng.random_range(0.0..(cam.width - 1) as f64),
                    rng.random_range(0.0..(cam.height - 1) as f64),
                );
                let pose = scene.poses[start];
                let dir = pose.rotation() * cam.unproject(&px);
                let s = room_exit(&pose.center(), &dir);
                let world = pose.center() + dir * s;
                if s > 0.5 && scene.is_visible(start, &world, None) && scene.is_visible(start + 1, &world, None) {
                    break (
                        GroundTruthPoint { id: id as u64, dynamic, outlier: false, object: None, world: vec![world; n_frames] },
                        start,
                    );
                }
            }
        };
        if dynamic {
            dyn_counter += 1;
        } else {
            static_counter += 1;
        }
        starts.push(start);
        scene.points.push(point);
    }
    debug_assert_eq!(static_counter, n_static);

    // pick outlier tracks among the static ones
    let static_ids: Vec<usize> = (0..config.num_tracks).filter(|&i| !kinds[i]).collect();
    let mut chosen = static_ids.clone();
    for i in 0..n_outliers.min(chosen.len()) {
        let j = rng.random_range(i..chosen.len());
        chosen.swap(i, j);
        scene.points[chosen[i]].outlier = true;
    }

    let pixel_noise = Normal::new(0.0, config.pixel_noise.max(0.0)).expect("finite sigma");
    let mut tracks = Vec::with_capacity(config.num_tracks);
    for (gt, &start) in scene.points.iter().zip(&starts) {
        let len = n_frames - start;
        let mut points = Vec::with_capacity(len);
        let mut visible = Vec::with_capacity(len);
        let mut depth = Vec::with_capacity(len);
        let mut last = (Vector2::zeros(), 1.0);
        let mut drift = Vector2::zeros();
        for t in start..n_frames {
            let world = &gt.world[t];
            let mut vis = scene.is_visible(t, world, gt.object);
            if t > start + 1 && config.occlusion_rate > 0.0 && rng.random_bool(config.occlusion_rate) {
                vis = false;
            }
            if vis {
                let cam_pt = scene.poses[t].to_camera(world);
                let mut px = cam.project_camera(&cam_pt).expect("visible point projects");
                if config.pixel_noise > 0.0 {
                    px += Vector2::new(pixel_noise.sample(&mut rng), pixel_noise.sample(&mut rng));
                }
                if gt.outlier && t > start {
                    drift += Vector2::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
                    px += drift;
                }
                let mut z = cam_pt.z;
                if config.depth_noise > 0.0 {
                    let e: f64 = rng.sample(StandardNormal);
                    z *= (1.0 + config.depth_noise * e).max(0.05);
                }
                let (a, b) = scene.disguise[t];
                last = (px, a * z + b);
            }
            points.push(last.0);
            visible.push(vis);
            depth.push(last.1);
        }
        tracks.push(Track {
            id: gt.id,
            start,
            points,
            visible,
            depth: Some(depth),
            dynamic: Some(vec![gt.dynamic; len]),
            score: None,
        });
    }
    let tracks = TrackSet::new(tracks, n_frames).map_err(InvalidConfig)?;

    let rasters = if config.render_depth {
        (0..n_frames).map(|t| render_depth(&scene, t)).collect()
    } else {
        Vec::new()
    };
    Ok((scene, tracks, rasters))
}

/// Ray-cast relative depth raster of one frame (disguise applied).
pub fn render_depth(scene: &SyntheticScene, frame: usize) -> DepthFrame {
    let cam = scene.camera();
    let (a, b) = scene.disguise[frame];
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let z = scene.ray_cast_depth(frame, &Vector2::new(x as f64, y as f64));
            data.push((a * z + b) as f32);
        }
    }
    DepthFrame::new(frame, w, h, data)
}

/// Tracks with labels cleared, as a tracker would emit them.
pub fn strip_labels(tracks: &TrackSet) -> TrackSet {
    let mut out = tracks.clone();
    out.update(|t| {
        t.dynamic = None;
        t.score = None;
    })
    .expect("clearing labels keeps tracks valid");
    out
}
