//! End-to-end checks of the `nanoslam` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nanoslam(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nanoslam"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn repeated_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a.csv", "b.csv"] {
        let o = nanoslam(
            &["run", "--algo", "nano", "--synthetic", "default", "--steps", "150", "--seed", "7", "--no-timing", "--out", out],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("RMSE"));
    }
    let a = fs::read(dir.path().join("a.csv")).unwrap();
    let b = fs::read(dir.path().join("b.csv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn ekf_run_reports_rmse() {
    let dir = tempfile::tempdir().unwrap();
    let o = nanoslam(&["run", "--algo", "ekf", "--synthetic", "default", "--landmarks", "5", "--steps", "100"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    assert!(line.starts_with("ekf: RMSE ") && line.contains(" m,"), "{line}");
    let csv = fs::read_to_string(dir.path().join("run.csv")).unwrap();
    assert_eq!(csv.lines().count(), 101);
}

#[test]
fn compare_prints_one_row_per_filter() {
    let dir = tempfile::tempdir().unwrap();
    let o = nanoslam(
        &["compare", "--synthetic", "default", "--steps", "120", "--particles", "10", "--out-dir", "runs"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4, "{table}");
    assert!(lines[0].starts_with("Method") && lines[0].contains("RMSE [m]") && lines[0].contains("Time [ms]"));
    for (line, label) in lines[1..].iter().zip(["EKF-SLAM", "UFastSLAM", "NANO-SLAM"]) {
        assert!(line.starts_with(label), "{line}");
        // a single repeat has no spread
        assert_eq!(line.matches("± 0.000").count(), 2, "{line}");
    }
    for name in ["ekf-0.csv", "ufastslam-0.csv", "nano-0.csv"] {
        assert!(dir.path().join("runs").join(name).is_file(), "{name}");
    }
}

#[test]
fn compare_needs_two_filters() {
    let dir = tempfile::tempdir().unwrap();
    let o = nanoslam(&["compare", "--synthetic", "default", "--algos", "nano"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulated_events_replay_as_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let o = nanoslam(&["simulate", "--steps", "80", "--landmarks", "12", "--seed", "3", "--out", "events.txt"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("80 steps, 12 landmarks"), "{}", stdout(&o));
    let events = fs::read_to_string(dir.path().join("events.txt")).unwrap();
    assert!(!events.trim().is_empty());

    let o = nanoslam(&["run", "--algo", "ufastslam", "--dataset", "events.txt", "--vehicle", "default", "--particles", "10"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("RMSE"), "{}", stdout(&o));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"algo": "nano", "synthetic": "default", "steps": 60, "particles": 7, "sigma_b": "3deg", "seed": 11}"#,
    )
    .unwrap();
    let o = nanoslam(&["run", "--config", "cfg.json", "--particles", "5", "--out", "r.csv"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("r.summary.json")).unwrap();
    let summary: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(summary["n_particles"], 5);
    assert_eq!(summary["seed"], 11);
    assert_eq!(summary["steps"], 60);
    let filter = &summary["config"]["filter"];
    assert_eq!(filter["particle_count"], 5);
    let sigma_b = filter["noise"]["sigma_b"].as_f64().unwrap();
    assert!((sigma_b - 3f64.to_radians()).abs() < 1e-15, "{sigma_b}");
    assert!(summary["config"]["input"]["synthetic"].is_object());
}

#[test]
fn bad_configuration_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), r#"{"particle_count": 7}"#).unwrap();
    let o = nanoslam(&["run", "--config", "cfg.json", "--synthetic", "default"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = nanoslam(&["run", "--synthetic", "default", "--particles", "0"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = nanoslam(&["run"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = nanoslam(&["run", "--synthetic", "default", "--dataset", "x.txt"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_dataset_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = nanoslam(&["run", "--dataset", "absent.txt"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error: "));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = nanoslam(&["selftest", "--fixtures", "200"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("checks passed"));
}

#[test]
fn selftest_names_a_broken_jacobian() {
    let dir = tempfile::tempdir().unwrap();
    let o = nanoslam(&["selftest", "--fixtures", "200", "--perturb-pose-jacobian", "0.001"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("FAIL measurement-pose-jacobian")), "{out}");
    assert!(out.lines().any(|l| l.starts_with("PASS kalman-equivalence")), "{out}");
}
