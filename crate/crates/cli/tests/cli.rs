use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn baseline_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/baseline.json")
}

fn rmfc(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rmfc"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn rmfc")
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn simulate_writes_trajectory_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let config = baseline_config();
    let out = rmfc(&["simulate", "--config", config.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let rows = read_csv(&dir.path().join("trajectory.csv"));
    assert_eq!(rows[0][0], "t");
    assert_eq!(rows.len(), 1 + 10_001);
    let metrics: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["J"].as_f64().unwrap().is_finite());
    for name in ["trajectory", "metrics"] {
        let sidecar = dir.path().join(format!("{name}.provenance.json"));
        let prov: Value = serde_json::from_str(&fs::read_to_string(sidecar).unwrap()).unwrap();
        assert_eq!(prov["command"], "simulate");
        assert_eq!(prov["inputs"]["params"]["dt"], 0.001);
    }
}

#[test]
fn invalid_step_exits_with_validation_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = rmfc(&["simulate", "--set", "dt=0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("dt"), "{stderr}");
    assert!(!dir.path().join("trajectory.csv").exists());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(rmfc(&["bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(rmfc(&["simulate", "--set", "nope=1"], dir.path()).status.code(), Some(2));
    assert_eq!(rmfc(&["poc"], dir.path()).status.code(), Some(2));
    assert_eq!(
        rmfc(&["loss-map", "--grid", "chi=0:1"], dir.path()).status.code(),
        Some(2)
    );
}

#[test]
fn loss_map_marks_low_leverage_cells() {
    let dir = tempfile::tempdir().unwrap();
    let config = baseline_config();
    let out = rmfc(
        &[
            "loss-map",
            "--config",
            config.to_str().unwrap(),
            "--set",
            "lambda_v=0.02",
            "--grid",
            "chi=0.05:0.5:10",
            "--grid",
            "beta=0.1:0.3:3",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&dir.path().join("loss_map.csv"));
    let header = &rows[0];
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (chi, breakdown, j) = (col("chi"), col("breakdown"), col("J"));
    assert_eq!(rows.len(), 1 + 30);
    let threshold = (4.0_f64 * 0.02 * 0.25).sqrt();
    for row in &rows[1..] {
        let c: f64 = row[chi].parse().unwrap();
        if c <= threshold {
            assert_eq!(row[breakdown], "true", "chi = {c}");
            assert_eq!(row[j], "breakdown");
        } else {
            assert_eq!(row[breakdown], "false", "chi = {c}");
            assert!(row[j].parse::<f64>().unwrap().is_finite());
        }
    }
}

fn strip_wall_time(path: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("wall_time_seconds");
    v
}

#[test]
fn identical_inputs_give_identical_bytes() {
    let runs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for dir in &runs {
        let out = rmfc(
            &[
                "poc",
                "--seed",
                "7",
                "--n-list",
                "16,64",
                "--replications",
                "3",
                "--set",
                "T=2",
                "--set",
                "dt=0.01",
                "--workers",
                "2",
            ],
            dir.path(),
        );
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["poc.csv", "poc_summary.json"] {
        let a = fs::read(runs[0].path().join(name)).unwrap();
        let b = fs::read(runs[1].path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between runs");
    }
    for name in ["poc.provenance.json", "poc_summary.provenance.json"] {
        assert_eq!(
            strip_wall_time(&runs[0].path().join(name)),
            strip_wall_time(&runs[1].path().join(name))
        );
    }
}

#[test]
fn worker_count_does_not_change_sweep_output() {
    let runs: Vec<_> = [1, 4]
        .iter()
        .map(|w| {
            let dir = tempfile::tempdir().unwrap();
            let workers = w.to_string();
            let out = rmfc(
                &[
                    "sweep-adversary",
                    "--grid",
                    "lambda=0:0.1:6",
                    "--set",
                    "dt=0.01",
                    "--workers",
                    &workers,
                ],
                dir.path(),
            );
            assert_eq!(out.status.code(), Some(0));
            fs::read(dir.path().join("adversary.csv")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}
