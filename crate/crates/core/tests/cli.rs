use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_intrinsic-filter"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn schema_violations_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let out = out.to_str().unwrap();
    let unknown = write_config(tmp.path(), "a.json", r#"{"ts": [0.2, 0.1, 0.05], "colour": 3}"#);
    let o = run(&["check-geometry", "--config", &unknown, "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));

    let chart = write_config(tmp.path(), "b.json", r#"{"charts": [{"chart": "torus", "base": [0, 0], "velocity": [1, 0]}]}"#);
    assert_eq!(run(&["check-geometry", "--config", &chart, "--out", out]).status.code(), Some(2));

    let missing = tmp.path().join("nope.json");
    assert_eq!(run(&["check-jacobi", "--config", missing.to_str().unwrap(), "--out", out]).status.code(), Some(2));

    let short = write_config(tmp.path(), "c.json", r#"{"update": {"gammas": [0.1]}}"#);
    let o = run(&["mc-compare", "--config", &short, "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("at least 3"));

    assert_eq!(run(&["check-geometry", "--threads", "0", "--out", out]).status.code(), Some(2));
}

#[test]
fn flat_chart_residuals_vanish() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "flat.json",
        r#"{"charts": [{"chart": "flat", "params": {"dim": 2}, "base": [0.1, 0.2], "velocity": [1, -1], "curvature": 0}], "n_configs": 10}"#,
    );
    let out = tmp.path().join("o");
    let o = run(&["check-geometry", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let r = report(&out);
    let res = &r["results"][0];
    assert!(res["exp_errors"].as_array().unwrap().iter().all(|p| p["error"] == 0.0));
    assert_eq!(res["antisymmetry"], 0.0);
    assert_eq!(res["bianchi"], 0.0);
    assert!(out.join("exp_ladder.csv").exists());
}

#[test]
fn geometry_report_carries_a_header_and_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("g");
    let o = run(&["check-geometry", "--seed", "9", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let r = report(&out);
    assert_eq!(r["header"]["command"], "check-geometry");
    assert_eq!(r["header"]["seed"], 9);
    assert_eq!(r["config"]["seed"], 9);
    assert_eq!(r["header"]["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(r["pass"], true);
    let names: Vec<&str> = r["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"sphere-stereo.sectional"));
    assert!(names.contains(&"poincare-half-plane.exp_slope"));
    let table = fs::read_to_string(out.join("slope_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn failing_checks_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "wrong.json",
        r#"{"charts": [{"chart": "sphere-stereo", "base": [0.3, -0.2], "velocity": [0.8, 0.6], "curvature": -1}], "n_configs": 5}"#,
    );
    let out = tmp.path().join("o");
    let o = run(&["check-geometry", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL sphere-stereo.sectional"));
    assert_eq!(report(&out)["pass"], false);
}

#[test]
fn flat_linear_run_reproduces_kalman() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("f");
    let o = run(&["run-filter", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let r = report(&out);
    assert!(r["results"]["flat_reduction"]["filter_vs_kalman"].as_f64().unwrap() < 1e-10);
    let steps = r["results"]["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 20);
    for key in ["x_delta", "mu_hat", "sigma_hat", "x0_prime", "zhat"] {
        assert!(steps[0].get(key).is_some(), "{key}");
    }
    assert_eq!(fs::read_to_string(out.join("trajectory.csv")).unwrap().lines().count(), 21);
}

#[test]
fn seed_repeats_are_byte_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "w.json",
        r#"{"model": {"name": "warped-2d"}, "observation": {"name": "quadratic", "h": [[1, 0.3], [-0.2, 1]], "c": [[[1, 0], [0, 0]], [[0, 0.8], [0.8, -0.5]]]}, "gamma": 0.3, "n_steps": 5}"#,
    );
    let dirs: Vec<_> = [("1", "a"), ("1", "b"), ("3", "c")]
        .iter()
        .map(|(threads, name)| {
            let out = tmp.path().join(name);
            let o = run(&["run-filter", "--config", &cfg, "--seed", "4", "--threads", threads, "--out", out.to_str().unwrap()]);
            assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
            out
        })
        .collect();
    for f in ["trajectory.csv", "report.json"] {
        let a = fs::read(dirs[0].join(f)).unwrap();
        assert_eq!(a, fs::read(dirs[1].join(f)).unwrap(), "{f}");
        assert_eq!(a, fs::read(dirs[2].join(f)).unwrap(), "{f}");
    }

    let other = tmp.path().join("d");
    run(&["run-filter", "--config", &cfg, "--seed", "5", "--out", other.to_str().unwrap()]);
    assert_ne!(fs::read(dirs[0].join("trajectory.csv")).unwrap(), fs::read(other.join("trajectory.csv")).unwrap());
}

#[test]
fn mc_compare_writes_tables_and_path_dumps() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "mc.json",
        r#"{"update": {"n_paths": 4000, "sde_steps": 64}, "dump_paths": true,
            "diffusion": {"n_paths": 4000, "sde_steps": 64, "generator_configs": 3}}"#,
    );
    let dirs: Vec<_> = ["1", "3"]
        .iter()
        .map(|threads| {
            let out = tmp.path().join(format!("t{threads}"));
            let o = run(&["mc-compare", "--config", &cfg, "--threads", threads, "--out", out.to_str().unwrap()]);
            assert!(matches!(o.status.code(), Some(0 | 1)), "{}", String::from_utf8_lossy(&o.stderr));
            out
        })
        .collect();
    for f in ["update_ladder.csv", "slope_table.csv", "diffusion.csv", "paths_0.csv", "paths_2.csv"] {
        assert_eq!(fs::read(dirs[0].join(f)).unwrap(), fs::read(dirs[1].join(f)).unwrap(), "{f}");
    }
    let paths = fs::read_to_string(dirs[0].join("paths_1.csv")).unwrap();
    let mut lines = paths.lines();
    assert_eq!(lines.next().unwrap(), "path,u_delta_0,u_delta_1,z_delta_0,z_delta_1,lambda_0,lambda_1");
    assert_eq!(lines.count(), 4000);
    let r = report(&dirs[0]);
    let names: Vec<&str> = r["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"filter_mean_slope"));
    assert!(names.contains(&"ekf_slope_gap"));
    assert!(names.contains(&"scalar-exp.ailp_obs_excess"));
}
