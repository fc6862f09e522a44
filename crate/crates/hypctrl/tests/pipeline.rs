//! End-to-end command pipeline tests: exit codes, artifact sets, and
//! byte-determinism of the emitted files, driven through the compiled binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_hypctrl");

/// A small heavy-rope scenario that runs in well under a second.
const SMALL: &str = r#"{
    "system": {"kind": "heavy_rope"},
    "grid": {"m": 60},
    "sim": {
        "dt": 0.01,
        "t_end": 2.0,
        "initial": {
            "xi": [-0.1, 0.0],
            "profile": {"kind": "sin_cubed", "amplitude": 0.2}
        }
    },
    "controller": {"kind": "flatness", "gamma": 0.0, "kappa": [20.0, 9.0]},
    "reference": {"y0": 0.0, "y_star": 1.0, "t0": 0.7, "t_star": 1.3,
                  "coordinates": "xi1"},
    "output": {"snapshot_times": [0.5], "error_tail_start": 1.5}
}"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("scenario.json");
    fs::write(&path, text).unwrap();
    path
}

fn hypctrl(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn malformed_json_exits_2_without_partial_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "{\"system\": {\"kind\": \"heavy_rope\"");
    let out_dir = tmp.path().join("out");
    let out = hypctrl(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(!out_dir.exists(), "no partial outputs on config error");
}

#[test]
fn unknown_field_exits_2() {
    let tmp = TempDir::new().unwrap();
    let bad = SMALL.replace("\"grid\"", "\"grid_size\"");
    let cfg = write_config(tmp.path(), &bad);
    let out = hypctrl(&["simulate", "--config", cfg.to_str().unwrap(), "--dry-run"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("error"), "stderr: {}", stderr(&out));
}

#[test]
fn refine_zero_exits_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = hypctrl(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--dry-run",
        "--refine",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
}

#[test]
fn missing_output_directory_exits_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = hypctrl(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("output"), "stderr: {}", stderr(&out));
}

#[test]
fn uncontrollable_ode_exits_2() {
    let tmp = TempDir::new().unwrap();
    // b = 0 makes (F, b) uncontrollable: the scenario describes an invalid
    // plant, which is a configuration error.
    let custom = r#"{
        "system": {"kind": "custom", "f": [[0.0]], "b": [0.0], "c": [1.0],
                   "q0": 1.0, "q1": 0.5,
                   "lambda1": {"z": [0.0, 1.0], "value": [1.0, 1.0]},
                   "lambda2": {"z": [0.0, 1.0], "value": [1.0, 1.0]}},
        "grid": {"m": 40},
        "sim": {"dt": 0.02, "t_end": 1.0,
                "initial": {"xi": [0.0], "profile": {"kind": "zero"}}},
        "controller": {"kind": "flatness", "gamma": 0.0, "kappa": [5.0]},
        "reference": {"y0": 0.0, "y_star": 1.0, "coordinates": "flat"},
        "output": {}
    }"#;
    let cfg = write_config(tmp.path(), custom);
    let out_dir = tmp.path().join("out");
    let out = hypctrl(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(!out_dir.exists());
}

#[test]
fn kernel_non_convergence_exits_3() {
    let tmp = TempDir::new().unwrap();
    // Extreme in-domain coupling: the kernel iteration cannot reach its
    // tolerance within the sweep budget, a numerical failure.
    let custom = r#"{
        "system": {"kind": "custom", "f": [], "b": [], "c": [],
                   "q0": 1.0, "q1": 0.5,
                   "lambda1": {"z": [0.0, 1.0], "value": [1.0, 1.0]},
                   "lambda2": {"z": [0.0, 1.0], "value": [1.0, 1.0]},
                   "a12": {"z": [0.0, 1.0], "value": [100.0, 100.0]},
                   "a21": {"z": [0.0, 1.0], "value": [100.0, 100.0]}},
        "grid": {"m": 40},
        "sim": {"dt": 0.02, "t_end": 2.5,
                "initial": {"xi": [], "profile": {"kind": "zero"}}},
        "controller": {"kind": "none"},
        "reference": {"y0": 0.0, "y_star": 1.0, "coordinates": "flat"},
        "output": {}
    }"#;
    let cfg = write_config(tmp.path(), custom);
    let out_dir = tmp.path().join("out");
    let out = hypctrl(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(!out_dir.exists());
}

#[test]
fn dry_run_reports_derived_quantities_and_writes_nothing() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out_dir = tmp.path().join("out");
    let out = hypctrl(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--dry-run",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("ode_dim = 2"), "stdout: {text}");
    assert!(text.contains("tau1 = 0.667"), "stdout: {text}");
    assert!(text.contains("F eigenvalues: [-3.43"), "stdout: {text}");
    assert!(text.contains("controller: flatness"), "stdout: {text}");
    assert!(!out_dir.exists(), "dry run must not write artifacts");
}

#[test]
fn simulate_writes_the_artifact_set_deterministically() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        let out = hypctrl(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
        dir
    };
    let a = run("a");
    let b = run("b");
    for file in ["timeseries.csv", "profiles.csv", "metrics.json"] {
        let fa = fs::read(a.join(file)).unwrap_or_else(|_| panic!("{file} missing"));
        let fb = fs::read(b.join(file)).unwrap();
        assert_eq!(fa, fb, "{file} differs between identical runs");
    }
    let header = fs::read_to_string(a.join("timeseries.csv")).unwrap();
    assert!(
        header.starts_with("t,xi_1,xi_2,u,u_r,x1_at_0,x2_at_1,y,y_r"),
        "unexpected header: {}",
        header.lines().next().unwrap_or_default()
    );
    let metrics = fs::read_to_string(a.join("metrics.json")).unwrap();
    assert!(metrics.contains("\"u_rms\""));
    assert!(metrics.contains("\"config\""));
}

#[test]
fn kernels_emits_tables_and_reports_residuals() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let dir = tmp.path().join("kernels");
    let out = hypctrl(&[
        "kernels",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    for file in [
        "kernels.csv",
        "kernels_inverse.csv",
        "decoupling.csv",
        "kernels_report.json",
    ] {
        assert!(dir.join(file).exists(), "{file} missing");
    }
    let report = fs::read_to_string(dir.join("kernels_report.json")).unwrap();
    assert!(report.contains("\"interior_residual\""));
    assert!(report.contains("\"roundtrip_residual\""));
    assert!(report.contains("\"backstepping\""));
    let kernels = fs::read_to_string(dir.join("kernels.csv")).unwrap();
    assert!(kernels.starts_with("z,zeta,k11,k12,k21,k22"));
}

#[test]
fn plan_emits_the_reference_table() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let dir = tmp.path().join("plan");
    let out = hypctrl(&[
        "plan",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = fs::read_to_string(dir.join("reference.csv")).unwrap();
    assert!(text.starts_with("t,y_r_d0,y_r_d1,y_r_d2,xi_r_1,xi_r_2,u_r"));
    let last = text.lines().last().unwrap();
    let xi1: f64 = last.split(',').nth(4).unwrap().parse().unwrap();
    assert!(
        (xi1 - 1.0).abs() < 1e-9,
        "final reference xi1 = {xi1}, expected the transition target 1.0"
    );
}

#[test]
fn compare_runs_both_controllers_and_emits_the_deviation() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let dir = tmp.path().join("compare");
    let out = Command::new(BIN)
        .env("HYPCTRL_THREADS", "1")
        .args([
            "compare",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    for file in [
        "compare.csv",
        "metrics.json",
        "main/timeseries.csv",
        "main/metrics.json",
        "counterpart/timeseries.csv",
        "counterpart/metrics.json",
        "counterpart/target_error.csv",
    ] {
        assert!(dir.join(file).exists(), "{file} missing");
    }
    let doc = fs::read_to_string(dir.join("metrics.json")).unwrap();
    assert!(doc.contains("\"main_kind\": \"flatness\""));
    assert!(doc.contains("\"counterpart_kind\": \"backstepping\""));
    let head = fs::read_to_string(dir.join("compare.csv")).unwrap();
    assert!(head.starts_with("t,u_main,u_counterpart,deviation"));
    // The matched pair stays close even on the coarse grid.
    let mut worst = 0.0f64;
    for line in head.lines().skip(1) {
        let dev: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        worst = worst.max(dev.abs());
    }
    assert!(worst < 0.05, "matched controllers deviate by {worst}");
}

#[test]
fn refine_halves_the_step_and_doubles_the_grid() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = hypctrl(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--dry-run",
        "--refine",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("grid m = 120"), "stdout: {text}");
    assert!(text.contains("dt = 0.005"), "stdout: {text}");
}
