use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynasfm")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn generate(config: &str, dir: &Path) -> PathBuf {
    let scene = dir.join("scene");
    ok(&["generate", "--config", s(&configs().join(config)), "--output", s(&scene)]);
    scene
}

#[test]
fn noiseless_demo_pipeline_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate("demo_noiseless.json", dir.path());
    let out = dir.path().join("out");
    let stdout = ok(&["pipeline", "--config", s(&scene.join("pipeline.json")), "--output", s(&out), "--threads", "1"]);
    assert!(String::from_utf8_lossy(&stdout.stdout).contains("evaluate: ATE"));
    let report = json(&out.join("report.json"));
    let ate = report["metrics"]["ate_rmse"].as_f64().unwrap();
    assert!(ate < 1e-6, "ATE {ate}");
    assert!(report["sfm"]["bundle"]["final_rms_px"].as_f64().unwrap() < 1e-9);
    for name in ["trajectory.tum", "sfm_points.ply", "fused.ply", "depth_calibration.json", "metrics.json", "per_frame_errors.csv"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
}

#[test]
fn pipeline_equals_chained_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate("demo_noisy.json", dir.path());
    let config = scene.join("pipeline.json");
    let whole = dir.path().join("whole");
    ok(&["pipeline", "--config", s(&config), "--output", s(&whole)]);

    let parts = dir.path().join("parts");
    ok(&["segment", "--config", s(&config), "--output", s(&parts)]);
    let segmented = parts.join("segmented_tracks.jsonl");
    ok(&["sfm", "--config", s(&config), "--tracks", s(&segmented), "--output", s(&parts)]);
    ok(&[
        "fuse",
        "--config",
        s(&config),
        "--tracks",
        s(&segmented),
        "--trajectory",
        s(&parts.join("trajectory.tum")),
        "--points",
        s(&parts.join("sfm_points.json")),
        "--output",
        s(&parts),
    ]);
    ok(&[
        "evaluate",
        "--pred",
        s(&parts.join("trajectory.tum")),
        "--gt",
        s(&scene.join("gt_trajectory.tum")),
        "--pred-tracks",
        s(&segmented),
        "--gt-tracks",
        s(&scene.join("gt_tracks.jsonl")),
        "--output",
        s(&parts),
    ]);

    let mut compared = 0;
    for entry in std::fs::read_dir(&parts).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(parts.join(&name)).unwrap();
        let b = std::fs::read(whole.join(&name)).unwrap();
        assert!(a == b, "{name:?} differs");
        compared += 1;
    }
    assert_eq!(compared, 11);
    assert!(whole.join("report.json").is_file());
}

#[test]
fn evaluate_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate("demo_noisy.json", dir.path());
    let gt = scene.join("gt_trajectory.tum");
    let out = dir.path().join("eval");
    for align in ["sim3", "se3", "none"] {
        ok(&["evaluate", "--pred", s(&gt), "--gt", s(&gt), "--align", align, "--output", s(&out)]);
        let metrics = json(&out.join("metrics.json"));
        assert_eq!(metrics["alignment"], align);
        for key in ["ate_rmse", "rpe_trans", "rpe_rot"] {
            let v = metrics[key].as_f64().unwrap();
            assert!(v < 1e-9, "{align} {key} = {v}");
        }
    }
}

#[test]
fn invalid_input_exits_one_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("missing.jsonl");
    let r = run(&["segment", "--tracks", s(&missing), "--intrinsics", s(&missing), "--output", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).starts_with("error: "));
    assert!(!out.exists());

    let scene = generate("demo_noisy.json", dir.path());
    let r = run(&["sfm", "--config", s(&scene.join("pipeline.json")), "--output", s(&out)]);
    assert_eq!(r.status.code(), Some(1), "unlabeled tracks need --no-segmentation");
    assert!(!out.exists());

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"tracks": "x", "sfm": {"strides": []}}"#).unwrap();
    assert_eq!(run(&["pipeline", "--config", s(&bad), "--output", s(&out)]).status.code(), Some(1));
    assert_eq!(run(&["pipeline", "--align", "affine"]).status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn solver_failure_exits_two_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = dir.path().join("tiny.json");
    std::fs::write(&tiny, r#"{"num_tracks": 12, "dynamic_fraction": 0.0}"#).unwrap();
    let scene = dir.path().join("scene");
    ok(&["generate", "--config", s(&tiny), "--output", s(&scene)]);
    let out = dir.path().join("out");
    let r = run(&["pipeline", "--config", s(&scene.join("pipeline.json")), "--no-segmentation", "--output", s(&out)]);
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(!out.exists());
}
