use std::path::Path;
use std::process::{Command, Output};

use kinetrack::pipeline::{
    CorrectionFile, CorrectionRecord, Manifest, SceneDocument, StageStatus, CORRECTION_SCHEMA,
};

const SMALL: &str = r#"
seed = 3
out_dir = "out"

[synth]
frames = 12
sigma_n = [0.0]
p_o = [0.0]
"#;

fn kinetrack(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kinetrack"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) {
    std::fs::write(dir.join("pipeline.toml"), text).unwrap();
}

#[test]
fn synth_writes_artifacts_and_nothing_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SMALL);
    let out = kinetrack(&["--config", "pipeline.toml", "synth"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    let base = dir.path().join("out");
    assert!(base.join("ground_truth.json").is_file());
    assert!(base.join("sn0_po0/keypoints.csv").is_file());
    let manifest = Manifest::from_json(&std::fs::read_to_string(base.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest.complete);
}

#[test]
fn missing_calibration_is_a_validation_error_with_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &format!("{SMALL}\n[inputs]\nrig = \"nope.json\"\n"));
    let out = kinetrack(&["--config", "pipeline.toml", "triangulate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "sead = 1\n");
    let out = kinetrack(&["--config", "pipeline.toml", "synth"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = kinetrack(&["reticulate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_failure_exits_3_and_marks_manifest_incomplete() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SMALL);
    // A plain file where the dataset directory should go makes the synth
    // stage fail after the run has started.
    std::fs::create_dir_all(dir.path().join("out")).unwrap();
    std::fs::write(dir.path().join("out/sn0_po0"), "blocker").unwrap();
    let out = kinetrack(&["--config", "pipeline.toml", "triangulate"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let text = std::fs::read_to_string(dir.path().join("out/manifest.json")).unwrap();
    let manifest = Manifest::from_json(&text).unwrap();
    assert!(!manifest.complete);
    assert_eq!(manifest.stages[0].status, StageStatus::Failed);
    assert_eq!(manifest.stages[1].status, StageStatus::Pending);
}

#[test]
fn seed_and_out_dir_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SMALL);
    for (seed, sub) in [("3", "a"), ("3", "b"), ("4", "c")] {
        let out = kinetrack(
            &["--config", "pipeline.toml", "--seed", seed, "--out-dir", sub, "synth"],
            dir.path(),
        );
        assert_eq!(out.status.code(), Some(0));
    }
    let read = |s: &str| std::fs::read(dir.path().join(s).join("sn0_po0/keypoints.csv")).unwrap();
    // sigma_n = 0 and p_o = 0 leave nothing for the seed to change.
    assert_eq!(read("a"), read("b"));
    assert_eq!(read("a"), read("c"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn export_scene_then_apply_corrections() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &format!("{SMALL}\n[export]\nmethod = \"TRI\"\n"));
    let out = kinetrack(&["--config", "pipeline.toml", "export-scene"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let scene_path = dir.path().join("out/scene.json");
    let scene = SceneDocument::load(&scene_path).unwrap();
    assert_eq!(scene.frames.len(), 12);

    let original = scene.frames[2].markers[0].unwrap();
    let mut corrected = original;
    corrected[2] += 0.15;
    let file = CorrectionFile {
        schema: CORRECTION_SCHEMA.to_string(),
        scene: None,
        corrections: vec![
            CorrectionRecord {
                frame: scene.frames[2].frame,
                marker: scene.skeleton.markers[0].clone(),
                original,
                corrected,
                author: "test".into(),
                timestamp: "2024-01-01T00:00:00Z".into(),
            },
            CorrectionRecord {
                frame: scene.frames[3].frame,
                marker: "sixth_leg".into(),
                original,
                corrected: original,
                author: "test".into(),
                timestamp: "2024-01-01T00:00:00Z".into(),
            },
        ],
    };
    std::fs::write(dir.path().join("fix.json"), file.to_json()).unwrap();
    let out = kinetrack(
        &["--out-dir", "fixed", "apply-corrections", "--scene", "out/scene.json", "--corrections", "fix.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fixed/corrections.summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["applied"], 1);
    assert_eq!(summary["rejected"].as_array().unwrap().len(), 1);
    assert_eq!(summary["large_fraction"], 1.0);
    assert!(dir.path().join("fixed/ground_truth.corrected.json").is_file());
}
