use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use conformal_contraction::conformal::{calibrate, CalibrationResult};
use conformal_contraction::harness::{ExperimentConfig, Pipeline, Report};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn tiny_vtol(dir: &Path) -> PathBuf {
    let text = format!(
        r#"
name = "vtol_tiny"
benchmark = "vtol"
seed = 2
horizon_s = 0.5
dt_s = 0.01
alpha = 0.2
n_train = 6
n_cal = 9
n_test = 3

[metric]
source = "load"
path = "{}"

[sampler]
kind = "steered"
state_lo = [-2.0, -2.0, -0.5, -1.0, -0.5, -0.5]
state_hi = [12.0, 12.0, 0.5, 1.0, 0.5, 0.5]
initial_lo = [2.0, 2.0, -0.05, -0.1, -0.1, -0.05]
initial_hi = [8.0, 8.0, 0.05, 0.1, 0.1, 0.05]
offset_lo = [-0.5, -0.5, 0.0, 0.0, 0.0, 0.0]
offset_hi = [0.5, 0.5, 0.0, 0.0, 0.0, 0.0]
target_input = [2.38383, 2.38383]

[predictor]
family = "linear_features"

[output]
ellipse_plane = [0, 1]
"#,
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("assets/vtol_metric.json")
            .display()
    );
    let path = dir.join("vtol_tiny.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn smoke_pipeline_writes_every_artifact_and_resumes() {
    let out = tempfile::tempdir().unwrap();
    let mut p =
        Pipeline::from_config_file(&configs().join("smoke.toml"), out.path(), None).unwrap();
    let report = p.run().unwrap();
    for f in [
        "config.toml",
        "report.json",
        "metric/metric.json",
        "predictor/predictor.json",
        "calibration/calibration.json",
        "reference/manifest.json",
        "evaluation/rollouts.csv",
        "evaluation/ellipse.csv",
    ] {
        assert!(out.path().join(f).is_file(), "missing {f}");
    }
    let first = fs::read(out.path().join("report.json")).unwrap();
    assert_eq!(
        Report::from_json(std::str::from_utf8(&first).unwrap()).unwrap(),
        report
    );

    fs::remove_dir_all(out.path().join("evaluation")).unwrap();
    fs::remove_dir_all(out.path().join("test_data")).unwrap();
    fs::remove_file(out.path().join("report.json")).unwrap();
    Pipeline::from_config_file(&configs().join("smoke.toml"), out.path(), None)
        .unwrap()
        .run()
        .unwrap();
    assert_eq!(fs::read(out.path().join("report.json")).unwrap(), first);
}

#[test]
fn persisted_scores_recalibrate_bit_exactly() {
    let out = tempfile::tempdir().unwrap();
    let mut p =
        Pipeline::from_config_file(&configs().join("smoke.toml"), out.path(), None).unwrap();
    let c = p.calibration().unwrap();
    let saved = CalibrationResult::from_json(
        &fs::read_to_string(out.path().join("calibration/calibration.json")).unwrap(),
    )
    .unwrap();
    let again = calibrate(&saved.scores, saved.alpha).unwrap();
    assert_eq!(again.quantile_value.to_bits(), c.quantile_value.to_bits());
    assert_eq!(again.quantile_index, c.quantile_index);
}

#[test]
fn seed_override_changes_the_run() {
    let cfg = ExperimentConfig::load(&configs().join("smoke.toml")).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = Pipeline::new(cfg.clone(), a.path(), Some(cfg.seed + 1))
        .unwrap()
        .run()
        .unwrap();
    let rb = Pipeline::new(cfg.clone(), b.path(), None)
        .unwrap()
        .run()
        .unwrap();
    assert_eq!(ra.seed, cfg.seed + 1);
    assert_ne!(ra.calibration.quantile, rb.calibration.quantile);
}

#[test]
fn shipped_configs_parse() {
    for entry in fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(
            ExperimentConfig::from_toml(&cfg.to_toml().unwrap())
                .unwrap()
                .name,
            cfg.name
        );
    }
}

#[test]
fn cli_evaluate_on_vtol_writes_ellipse_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_vtol(dir.path());
    let out = dir.path().join("run");
    let status = Command::new(env!("CARGO_BIN_EXE_prci"))
        .args(["evaluate", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    let table = String::from_utf8(status.stdout).unwrap();
    assert!(table.lines().any(|l| l.starts_with("containment")));

    let csv = fs::read_to_string(out.join("evaluation/ellipse.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,center_i,center_j,a11,a12,a22,radius"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 51);
    for (k, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), 7);
        assert!((r[0] - k as f64 * 0.01).abs() < 1e-12);
        assert!(r[3] > 0.0 && r[5] > 0.0 && r[3] * r[5] > r[4] * r[4]);
        assert_eq!(r[6], rows[0][6]);
    }

    let rollouts = fs::read_to_string(out.join("evaluation/rollouts.csv")).unwrap();
    assert!(rollouts.starts_with("id,failed,score,max_distance,contained,envelope_ok,state_violation,input_violation,violated\n"));
    assert_eq!(rollouts.lines().count(), 4);
}

#[test]
fn cli_usage_errors_exit_nonzero() {
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_prci"))
            .args(args)
            .output()
            .unwrap()
    };
    assert!(!run(&["pipeline"]).status.success());
    assert!(!run(&["bogus", "--config", "x", "--out", "y"])
        .status
        .success());
    let missing = run(&[
        "pipeline",
        "--config",
        "/nonexistent.toml",
        "--out",
        "/tmp/never",
    ]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error"));
}
