use std::collections::BTreeMap;

use dynasfm::io::TrackSet;
use dynasfm::segmentation::{classify_tracks, segment_tracks, PairFit, SegmentationConfig};
use dynasfm::synthetic::{generate_scene, SceneConfig, SyntheticScene};
use dynasfm::geometry::Sim3;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scene(dynamic_fraction: f64, pixel_noise: f64, seed: u64) -> (SyntheticScene, TrackSet) {
    let cfg = SceneConfig { dynamic_fraction, pixel_noise, seed, render_depth: false, ..SceneConfig::default() };
    let (scene, tracks, _) = generate_scene(&cfg).unwrap();
    (scene, tracks)
}

fn labels(tracks: &TrackSet) -> BTreeMap<u64, bool> {
    tracks.iter().map(|t| (t.id, t.is_dynamic())).collect()
}

fn precision_recall(scene: &SyntheticScene, labeled: &TrackSet) -> (f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for t in labeled {
        match (t.is_dynamic(), scene.point(t.id).unwrap().dynamic) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    (tp as f64 / (tp + fp).max(1) as f64, tp as f64 / (tp + fn_).max(1) as f64)
}

#[test]
fn noisy_scene_with_disguised_depth_is_separated() {
    for seed in [42, 7] {
        let (scene, tracks) = scene(0.2, 0.5, seed);
        let (out, report) = segment_tracks(&tracks, scene.camera(), &SegmentationConfig::default()).unwrap();
        let (p, r) = precision_recall(&scene, &out);
        assert!(p >= 0.95 && r >= 0.9, "seed {seed}: precision {p} recall {r}");
        assert!(report.pairs_skipped.is_empty());
    }
}

#[test]
fn thirty_percent_dynamic_noiseless() {
    let (scene, tracks) = scene(0.3, 0.0, 42);
    let (out, _) = segment_tracks(&tracks, scene.camera(), &SegmentationConfig::default()).unwrap();
    let (p, r) = precision_recall(&scene, &out);
    assert!(p >= 0.95 && r >= 0.9, "precision {p} recall {r}");
}

#[test]
fn static_noisy_scene_stays_static() {
    let (scene, tracks) = scene(0.0, 0.5, 3);
    let (_, report) = segment_tracks(&tracks, scene.camera(), &SegmentationConfig::default()).unwrap();
    assert_eq!(report.dynamic_tracks, 0);
}

fn residual_fits() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.0f64..10.0, 12), 1..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn per_frame_affine_depth_changes_no_label(seed in 0u64..1000, frame_seed in any::<u64>()) {
        let (scene, tracks) = scene(0.2, 0.0, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(frame_seed);
        let maps: Vec<(f64, f64)> = (0..tracks.num_frames())
            .map(|_| (rand::Rng::random_range(&mut rng, 0.05..20.0), rand::Rng::random_range(&mut rng, 0.0..5.0)))
            .collect();
        let mut disguised = tracks.clone();
        disguised.update(|t| {
            let start = t.start;
            if let Some(depth) = t.depth.as_mut() {
                for (i, d) in depth.iter_mut().enumerate() {
                    let (a, b) = maps[start + i];
                    *d = a * *d + b;
                }
            }
        }).unwrap();
        let config = SegmentationConfig::default();
        let (a, _) = segment_tracks(&tracks, scene.camera(), &config).unwrap();
        let (b, _) = segment_tracks(&disguised, scene.camera(), &config).unwrap();
        prop_assert_eq!(labels(&a), labels(&b));
    }

    #[test]
    fn labels_do_not_depend_on_track_order(seed in 0u64..1000, shuffle_seed in any::<u64>()) {
        let (scene, tracks) = scene(0.2, 0.0, seed);
        let mut shuffled = tracks.clone().into_tracks();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let shuffled = TrackSet::new(shuffled, tracks.num_frames()).unwrap();
        let config = SegmentationConfig::default();
        let (a, _) = segment_tracks(&tracks, scene.camera(), &config).unwrap();
        let (b, _) = segment_tracks(&shuffled, scene.camera(), &config).unwrap();
        prop_assert_eq!(labels(&a), labels(&b));
    }
}

proptest! {
    #[test]
    fn raising_kappa_never_adds_dynamic_tracks(residuals in residual_fits(), low in 0.5f64..4.0, extra in 0.0f64..4.0) {
        let ids: Vec<u64> = (0..12).collect();
        let tracks = TrackSet::new(
            ids.iter()
                .map(|&id| dynasfm::io::Track {
                    id,
                    start: 0,
                    points: vec![nalgebra::Vector2::zeros(); 9],
                    visible: vec![true; 9],
                    depth: Some(vec![1.0; 9]),
                    dynamic: None,
                    score: None,
                })
                .collect(),
            9,
        )
        .unwrap();
        let fits: Vec<PairFit> = residuals
            .into_iter()
            .enumerate()
            .map(|(frame, residuals)| PairFit { frame, ids: ids.clone(), residuals, transform: Sim3::identity(), shift: (0.0, 0.0) })
            .collect();
        let strict = SegmentationConfig { kappa: low + extra, ..Default::default() };
        let loose = SegmentationConfig { kappa: low, ..Default::default() };
        let (_, a) = classify_tracks(&tracks, &fits, &strict).unwrap();
        let (_, b) = classify_tracks(&tracks, &fits, &loose).unwrap();
        for id in ids {
            prop_assert!(!a[&id].dynamic || b[&id].dynamic);
            prop_assert!(a[&id].score <= b[&id].score);
        }
    }
}
