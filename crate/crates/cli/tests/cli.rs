//! End-to-end runs of the `dekf` binary: config validation, experiment
//! outputs, stream replay, and snapshot round-trips.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dekf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dekf"))
}

fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A small static logistic-regression experiment that runs in well under a
/// second; written into `dir` and returned by path.
fn small_config(dir: &Path) -> PathBuf {
    let text = "\
model = \"regression\"
horizon = 150
n_sims = 2
seed = 1
dynamic = false

[regression]
context_dim = 4
context_pool = 20

[namespaces.theta]
pi_fill = 0.1
ref_cov_trace_per_dim = 0.05
half_life_steps = 500
drift_scale = 0.03

[bandit]
candidate_set_size = 5
";
    let path = dir.join("small.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn validates_shipped_configs() {
    for name in ["regression.toml", "mf.toml", "tf.toml"] {
        let out = dekf()
            .args(["validate-config", "--config"])
            .arg(repo_path("configs").join(name))
            .output()
            .unwrap();
        assert!(out.status.success(), "{name}: {}", stderr(&out));
        assert!(
            stdout(&out).starts_with("ok:"),
            "{name}: unexpected stdout {}",
            stdout(&out)
        );
    }
}

#[test]
fn rejects_unknown_config_fields() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "model = \"regression\"\nhorizon = 10\nn_sims = 1\nseed = 1\ndynamic = false\nturbo = true\n").unwrap();
    let out = dekf()
        .args(["validate-config", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).starts_with("error:"));
}

#[test]
fn missing_config_is_an_io_error() {
    let out = dekf()
        .args(["validate-config", "--config", "/nonexistent/nope.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
}

#[test]
fn estimate_writes_csvs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = dekf()
        .args(["estimate", "--seed", "7", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));

    let dekf_csv = fs::read_to_string(out_dir.join("dekf.csv")).unwrap();
    assert!(out_dir.join("adagrad.csv").exists());
    let mut lines = dekf_csv.lines();
    assert_eq!(lines.next(), Some("t,p_true,p_pred,cum_avg_abs_err"));
    assert_eq!(lines.count(), 150, "one row per step");

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 7, "seed override must reach the manifest");
    assert_eq!(manifest["config"]["horizon"], 150);
    let outputs: Vec<&str> = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(outputs, ["dekf.csv", "adagrad.csv"]);
    assert!(!manifest["harness_choices"].as_array().unwrap().is_empty());
    let mean = manifest["results"][0]["mean_final"].as_f64().unwrap();
    assert!(mean.is_finite() && mean > 0.0);
}

#[test]
fn estimate_reruns_are_byte_identical_and_seeds_matter() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let run = |out_dir: &Path, seed: &str| {
        let out = dekf()
            .args(["estimate", "--seed", seed, "--config"])
            .arg(&config)
            .arg("--out")
            .arg(out_dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
        fs::read(out_dir.join("dekf.csv")).unwrap()
    };
    let a = run(&dir.path().join("a"), "3");
    let b = run(&dir.path().join("b"), "3");
    let c = run(&dir.path().join("c"), "4");
    assert_eq!(a, b, "same seed must reproduce the CSV byte for byte");
    assert_ne!(a, c, "a different seed must change the draws");
}

#[test]
fn bandit_single_policy_writes_one_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = dekf()
        .args(["bandit", "--policy", "thompson", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(out_dir.join("thompson.csv")).unwrap();
    assert!(csv.starts_with("t,p_true,p_pred,cum_avg_abs_err,norm_regret\n"));
    assert!(!out_dir.join("greedy.csv").exists());
    assert!(!out_dir.join("random.csv").exists());
    assert!(out_dir.join("manifest.json").exists());
}

#[test]
fn bandit_rejects_unknown_policy() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = dekf()
        .args(["bandit", "--policy", "oracle", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
}

#[test]
fn update_stream_tracks_entities_and_snapshots_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = repo_path("configs/mf.toml");
    let stream = repo_path("docs/example-stream.csv");

    let out_a = dir.path().join("a");
    let out = dekf()
        .args(["update-stream", "--config"])
        .arg(&config)
        .arg("--stream")
        .arg(&stream)
        .arg("--out")
        .arg(&out_a)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(
        text.contains("processed 5 observations; 6 entities tracked"),
        "unexpected stdout: {text}"
    );

    // Importing the snapshot and re-exporting it must reproduce the file.
    let out_b = dir.path().join("b");
    let out = dekf()
        .args(["snapshot-import", "--config"])
        .arg(&config)
        .arg("--snapshot")
        .arg(out_a.join("snapshot.txt"))
        .arg("--out")
        .arg(&out_b)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("imported 6 entities"));
    let a = fs::read(out_a.join("snapshot.txt")).unwrap();
    let b = fs::read(out_b.join("snapshot.txt")).unwrap();
    assert_eq!(a, b, "snapshot round-trip must be byte-identical");

    // Resuming from the snapshot splits the stream without changing where
    // it ends up: replaying the last rows on top of a prefix snapshot is
    // exercised in the library's snapshot tests; here we just confirm the
    // flag is wired through.
    let out = dekf()
        .args(["snapshot-export", "--config"])
        .arg(&config)
        .arg("--snapshot")
        .arg(out_a.join("snapshot.txt"))
        .arg("--out")
        .arg(dir.path().join("c"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("exported 6 entities"));
}

#[test]
fn update_stream_rejects_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    let config = repo_path("configs/mf.toml");

    // Wrong header.
    let bad_header = dir.path().join("h.csv");
    fs::write(&bad_header, "time,user,item,y\n1,0,0,1\n").unwrap();
    let out = dekf()
        .args(["update-stream", "--config"])
        .arg(&config)
        .arg("--stream")
        .arg(&bad_header)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("stream line 1"));

    // Non-numeric field.
    let bad_field = dir.path().join("f.csv");
    fs::write(&bad_field, "t,user,item,y\n1,alice,0,1\n").unwrap();
    let out = dekf()
        .args(["update-stream", "--config"])
        .arg(&config)
        .arg("--stream")
        .arg(&bad_field)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("stream line 2"));

    // Observations out of time order on one entity.
    let backwards = dir.path().join("b.csv");
    fs::write(&backwards, "t,user,item,y\n5,3,0,1\n2,3,1,0\n").unwrap();
    let out = dekf()
        .args(["update-stream", "--config"])
        .arg(&config)
        .arg("--stream")
        .arg(&backwards)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "stderr: {}", stderr(&out));
}

#[test]
fn static_flag_overrides_dynamics() {
    let config = repo_path("configs/regression.toml");
    let out = dekf()
        .args(["validate-config", "--verbose", "--static", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(
        stderr(&out).contains("dynamic = false"),
        "verbose echo should show the override: {}",
        stderr(&out)
    );
}
