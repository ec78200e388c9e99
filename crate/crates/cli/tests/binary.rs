mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::{read_csv, tiny_run, write_matrix};

fn featgeom(args: &[&str], ws: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_featgeom"))
        .args(args)
        .env("FEATGEOM_WORKSPACE", ws)
        .output()
        .unwrap()
}

#[test]
fn synth_train_match_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let out = featgeom(
        &["gen-synth", "--d", "16", "--atoms", "32", "--k", "2", "--n", "4000", "--out", &p("synth")],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("synth/dictionary.fgt").exists());
    let samples = p("synth/samples.fgt");
    for (seed, name) in [("0", "sae0"), ("1", "sae1")] {
        let out = featgeom(
            &[
                "train-sae", "--activations", &samples, "--seed", seed, "--steps", "300", "--k", "2",
                "--expansion", "2", "--lr", "3e-3", "--batch-size", "128", "--out", &p(name),
            ],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let out = featgeom(
        &["match", "--a", &p("sae0"), "--b", &p("sae1"), "--tau", "0.5,0.7,0.9", "--out", &p("m")],
        dir.path(),
    );
    assert!(out.status.success());
    let (header, rows) = read_csv(&dir.path().join("m/survival.csv"));
    assert_eq!(header, ["tau", "one_way", "mnn", "greedy"]);
    assert_eq!(rows.len(), 3);
    let (header, rows) = read_csv(&dir.path().join("m/per_feature.csv"));
    assert_eq!(header, ["feature_id", "best_match", "score", "mnn_at_0.7"]);
    assert_eq!(rows.len(), 32);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"runs\": [ {\"run_id\": 1 }").unwrap();
    let out = featgeom(&["run", "--matrix", bad.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));

    let out = featgeom(&["run", "--no-such-flag"], dir.path());
    assert_eq!(out.status.code(), Some(3));

    let m = dir.path().join("m.json");
    let mut broken = tiny_run("mag", "magnitude", 0.5, &[0], 40);
    broken["sae"]["lr"] = serde_json::json!(1e300);
    write_matrix(&m, vec![tiny_run("dense", "none", 0.0, &[0], 40), broken]);
    let out = featgeom(&["run", "--matrix", m.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stdout));
    // Workspace came from the environment variable.
    assert!(dir.path().join("dense").join("result.json").exists());
    assert!(dir.path().join("mag").join("FAILED").exists());
    assert!(dir.path().join("reports").is_dir());
}
