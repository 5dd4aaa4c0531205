use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pspin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pspin"))
        .args(args)
        .env_remove("PSPIN_OUT_DIR")
        .env_remove("PSPIN_THREADS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.toml");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn json_out(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

const SMALL_SPHERICAL: &str = "mode = \"spherical\"\nn = 200\n[iamp]\ndelta = 0.05\nn_se_samples = 3000\nn_se_keep = 500\n";

#[test]
fn dry_run_prints_plan_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bundle");
    let o = pspin(&["--json", "run", "--dry-run", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let v = json_out(&o);
    assert_eq!(v["dry_run"], true);
    assert_eq!(v["n_iter"], 47);
    assert_eq!(v["within_budget"], true);
    assert!(!out.exists());
}

#[test]
fn unknown_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "n = 100\n[iamp]\nstepsize = 0.1\n");
    let o = pspin(&["run", "--dry-run", "-c", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stepsize"));
    let cfg = write_config(dir.path(), "[iamp]\ndelta = 1.5\n");
    assert_eq!(pspin(&["run", "--dry-run", "-c", &cfg]).status.code(), Some(2));
}

#[test]
fn resource_refusals() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = pspin(&["oracle", "--n", "23", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert!(!out.exists());
    let cfg = write_config(dir.path(), "n = 400\nbyte_budget = 1000\n");
    let o = pspin(&["run", "-c", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn oracle_small_instances() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[oracle]\nn = 10\nn_seeds = 3\nhistogram = true\n");
    let out = dir.path().join("o");
    let o = pspin(&["--json", "oracle", "-c", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let v = json_out(&o);
    let seeds = v["seeds"].as_array().unwrap();
    assert_eq!(seeds.len(), 3);
    for s in seeds {
        assert!(s["opt_value"].as_f64().unwrap() > 0.0);
        assert_eq!(s["argmax"].as_array().unwrap().len(), 10);
    }
    let hist = fs::read_to_string(out.join("oracle_hist_1.csv")).unwrap();
    assert!(hist.starts_with("# config_hash: "));
    assert_eq!(hist.lines().count(), 3 + 1024);
}

#[test]
fn spherical_run_bundle_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_SPHERICAL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = pspin(&["run", "-c", &cfg, "--out", out.to_str().unwrap(), "--threads", "1"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["config.toml", "gamma.csv", "calibration.json", "iterations.jsonl", "rounding.json", "summary.json"] {
        let x = fs::read(a.join(name)).unwrap();
        assert_eq!(x, fs::read(b.join(name)).unwrap(), "{name}");
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(a.join("summary.json")).unwrap()).unwrap();
    let hash = summary["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    assert_eq!(summary["n_iter"], 19);
    let lines: Vec<String> = fs::read_to_string(a.join("iterations.jsonl")).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 1 + 20);
    let head: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    assert_eq!(head["config_hash"], hash.as_str());
    let rec: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
    for key in ["iter", "norm_m", "energy", "se_pred_energy", "max_abs_m"] {
        assert!(rec.get(key).is_some(), "{key}");
    }
    let rounding: serde_json::Value = serde_json::from_slice(&fs::read(a.join("rounding.json")).unwrap()).unwrap();
    let out: Vec<f64> = rounding["output"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!((out.iter().map(|v| v * v).sum::<f64>() / 200.0 - 1.0).abs() < 1e-12);
    assert!(fs::read_to_string(a.join("gamma.csv")).unwrap().contains(&hash));
}

#[test]
fn solve_gamma_spherical_writes_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "mode = \"spherical\"\n[mixture]\nc2 = 1.0\nc4 = 1.0\n");
    let out = dir.path().join("g");
    let o = pspin(&["--json", "solve-gamma", "-c", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let v = json_out(&o);
    assert!((v["value"].as_f64().unwrap() - 2.340880429).abs() < 1e-8);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["converged"], true);
    let csv = fs::read_to_string(out.join("gamma.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "t_left,t_right,gamma");
    assert_eq!(rows.len(), 41);

    // The written gamma feeds back into a run.
    let cfg2 = write_config(
        dir.path(),
        &format!("{SMALL_SPHERICAL}[variational]\ngamma_file = \"{}\"\n", out.join("gamma.csv").display()),
    );
    let o = pspin(&["run", "--dry-run", "-c", &cfg2]);
    assert!(o.status.success());
}

#[test]
fn pde_check_json() {
    let o = pspin(&["--json", "pde-check"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json_out(&o);
    assert_eq!(v["pass"], true);
    assert!(v["checks"].as_array().unwrap().iter().any(|c| c["name"] == "gamma0_phi00"));
}

#[test]
fn se_check_reports_failure_with_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL_SPHERICAL}[checks]\nnorm_tol = 1e-9\n"));
    let out = dir.path().join("s");
    let o = pspin(&["--json", "se-check", "-c", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(out.join("se_check.json")).unwrap()).unwrap();
    assert_eq!(v["pass"], false);
    assert!(v["negative_control"].is_object());
}
