use std::path::Path;
use std::process::{Command, Output};

const SMALL_CONFIG: &str = r#"{
  "sim": { "hours": 6, "num_users": 20 },
  "schedule": { "epochs": 2, "hours_per_epoch": 6, "steps_per_epoch": 5 },
  "trainer": { "batch_size": 32 },
  "trials": 2
}"#;

fn rpaf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpaf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    std::fs::write(&path, SMALL_CONFIG).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn check_passes_every_property() {
    let out = rpaf(&["check", "--seed", "3"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(stdout.lines().count() >= 7);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"unknown_key": 1}"#).unwrap();
    let out_dir = dir.path().join("out");
    let out_dir = out_dir.to_str().unwrap();
    for args in [
        vec![
            "evaluate",
            "--config",
            bad.to_str().unwrap(),
            "--out",
            out_dir,
        ],
        vec!["evaluate", "--method", "nonsense", "--out", out_dir],
        vec!["evaluate", "--method", "rpaf", "--out", out_dir],
        vec![
            "train",
            "--config",
            dir.path().join("missing.json").to_str().unwrap(),
        ],
    ] {
        let out = rpaf(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn train_evaluate_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = out_dir.to_str().unwrap();

    let train = rpaf(&["train", "--config", &config, "--out", out, "--seed", "4"]);
    assert_eq!(
        train.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&train.stderr)
    );
    for file in ["checkpoint.bin", "diagnostics.csv", "config.json"] {
        assert!(out_dir.join(file).exists(), "{file}");
    }

    let eval = rpaf(&[
        "evaluate", "--config", &config, "--out", out, "--seed", "4", "--method", "all",
    ]);
    assert_eq!(
        eval.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&eval.stderr)
    );
    for method in [
        "greedy",
        "all-realtime",
        "oracle-myopic",
        "rpaf-nopool",
        "rpaf",
    ] {
        let csv = std::fs::read_to_string(out_dir.join(method).join("trial_01.csv")).unwrap();
        assert!(csv
            .starts_with("hour,requests,realtime,cached,failures,budget,watchtime,mean_atilde\n"));
        assert_eq!(csv.lines().count(), 1 + 6);
    }
    let summary = std::fs::read_to_string(out_dir.join("summary.txt")).unwrap();
    assert!(summary.contains("paired rpaf-greedy"));

    std::fs::remove_file(out_dir.join("summary.txt")).unwrap();
    let report = rpaf(&["report", "--config", &config, "--out", out]);
    assert_eq!(report.status.code(), Some(0));
    assert_eq!(
        std::fs::read_to_string(out_dir.join("summary.txt")).unwrap(),
        summary
    );
    assert_eq!(String::from_utf8_lossy(&report.stdout), summary);
}

#[test]
fn incompatible_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let ckpt = dir.path().join("junk.bin");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    let out = rpaf(&[
        "evaluate",
        "--config",
        &config,
        "--method",
        "rpaf",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_without_trials_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = rpaf(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
