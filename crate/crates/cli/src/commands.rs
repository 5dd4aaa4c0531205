//! Subcommand implementations. Each returns the JSON it reports on stdout.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use pspin_core::hamiltonian::DisorderSample;
use pspin_core::iamp::{calibrate, run_iamp, run_iamp_with, se_check, standard_tests, IampRun, SECalibration};
use pspin_core::oracle::{brute_force_opt, MAX_BRUTE_FORCE_N};
use pspin_core::parisi::{closed_form_gamma_zero, solve_parisi, GammaPath, ParisiSolution, PdeGrid};
use pspin_core::rounding::{round_pipeline, Mode, RoundingReport};
use pspin_core::variational::{
    hjb_value_check, minimize_parisi, parisi_functional, spherical_gamma, value_from_solution,
};
use pspin_core::dynamics::Drive;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{parse, Resolved};
use crate::error::CliError;

/// Reads the config (defaults when `None`) and applies the output override.
pub fn load(path: Option<&Path>, out: Option<PathBuf>) -> Result<Resolved, CliError> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = parse(&text)?;
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    cfg.resolve()
}

/// Output directory whose every file carries the config and its hash.
struct Bundle {
    dir: PathBuf,
    hash: String,
    config: Value,
}

impl Bundle {
    fn create(r: &Resolved) -> Result<Self, CliError> {
        let dir = r.cfg.out_dir.clone();
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.toml"), format!("# config_hash: {}\n{}", r.hash, r.text))?;
        Ok(Self { dir, hash: r.hash.clone(), config: r.config_json() })
    }

    fn stamp(&self, payload: Value) -> Value {
        let mut map = match payload {
            Value::Object(m) => m,
            other => Map::from_iter([("data".to_string(), other)]),
        };
        map.insert("config_hash".into(), Value::String(self.hash.clone()));
        map.insert("config".into(), self.config.clone());
        Value::Object(map)
    }

    fn json(&self, name: &str, payload: Value) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(&self.stamp(payload)).expect("json");
        text.push('\n');
        fs::write(self.dir.join(name), text)?;
        Ok(())
    }

    fn csv_writer(&self, name: &str, header: &str) -> Result<BufWriter<fs::File>, CliError> {
        let mut w = BufWriter::new(fs::File::create(self.dir.join(name))?);
        writeln!(w, "# config_hash: {}", self.hash)?;
        writeln!(w, "# config: {}", self.config)?;
        writeln!(w, "{header}")?;
        Ok(w)
    }

    fn write_gamma(&self, g: &GammaPath) -> Result<(), CliError> {
        let mut w = self.csv_writer("gamma.csv", "t_left,t_right,gamma")?;
        for (k, v) in g.knots().windows(2).zip(g.values()) {
            writeln!(w, "{},{},{}", k[0], k[1], v)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

/// Parses a `gamma.csv` as written by `solve-gamma`.
pub fn read_gamma(path: &Path) -> Result<GammaPath, CliError> {
    let bad = |msg: String| CliError::validation(format!("{}: {msg}", path.display()));
    let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let mut knots = Vec::new();
    let mut values = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("t_left") {
            continue;
        }
        let f: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| bad(format!("line {}: {e}", no + 1)))?;
        if f.len() != 3 {
            return Err(bad(format!("line {}: expected 3 columns", no + 1)));
        }
        if knots.is_empty() {
            knots.push(f[0]);
        } else if *knots.last().unwrap() != f[0] {
            return Err(bad(format!("line {}: intervals are not contiguous", no + 1)));
        }
        knots.push(f[1]);
        values.push(f[2]);
    }
    Ok(GammaPath::new(knots, values)?)
}

fn timed<T>(profile: &mut Vec<(&'static str, f64)>, stage: &'static str, f: impl FnOnce() -> Result<T, CliError>) -> Result<T, CliError> {
    let t0 = Instant::now();
    let out = f().map_err(|e| e.at(stage));
    profile.push((stage, t0.elapsed().as_secs_f64()));
    out
}

fn profile_json(profile: &[(&'static str, f64)]) -> Value {
    Value::Array(profile.iter().map(|(s, t)| json!({"stage": s, "seconds": t})).collect())
}

// ---------------------------------------------------------------- solve-gamma

pub struct SolvedGamma {
    pub gamma: GammaPath,
    /// `P(gamma)` for Ising, `int sqrt(xi'')` for spherical.
    pub value: f64,
    pub converged: bool,
    pub report: Value,
}

fn solve_gamma_inner(r: &Resolved) -> Result<SolvedGamma, CliError> {
    let n_knots = r.cfg.variational.n_knots;
    match r.cfg.mode {
        Mode::Spherical => {
            let s = spherical_gamma(&r.mixture, n_knots)?;
            Ok(SolvedGamma {
                gamma: s.gamma.clone(),
                value: s.value,
                converged: true,
                report: json!({"mode": "spherical", "value": s.value, "truncated": s.truncated, "converged": true, "gamma_star": to_value(&s.gamma)}),
            })
        }
        Mode::Ising => {
            let opts = r.minimize_options();
            let rep = minimize_parisi(&r.mixture, n_knots, &opts)?;
            let mut report = to_value(&rep);
            report["mode"] = json!("ising");
            report["max_stationarity_gap"] = json!(rep.max_stationarity_gap(opts.eps_t));
            Ok(SolvedGamma { gamma: rep.gamma_star, value: rep.value, converged: rep.converged, report })
        }
    }
}

/// Uses `variational.gamma_file` when set, otherwise solves.
fn gamma_for(r: &Resolved) -> Result<SolvedGamma, CliError> {
    let Some(path) = &r.cfg.variational.gamma_file else {
        return solve_gamma_inner(r);
    };
    let gamma = read_gamma(path)?;
    let value = match r.cfg.mode {
        Mode::Spherical => spherical_gamma(&r.mixture, 1)?.value,
        Mode::Ising => {
            let grid = PdeGrid::new(r.x_max(), r.cfg.grid.n_x, vec![0.0])?;
            parisi_functional(&r.mixture, &gamma, &grid)?
        }
    };
    let report = json!({"source": path.display().to_string(), "value": value, "converged": true});
    Ok(SolvedGamma { gamma, value, converged: true, report })
}

pub fn solve_gamma(r: &Resolved) -> Result<Value, CliError> {
    let bundle = Bundle::create(r)?;
    let s = solve_gamma_inner(r)?;
    bundle.write_gamma(&s.gamma)?;
    if let Some(profile) = s.report.get("stationarity_profile").and_then(Value::as_array) {
        let mut w = bundle.csv_writer("stationarity.csv", "t,gap")?;
        for p in profile {
            writeln!(w, "{},{}", p[0], p[1])?;
        }
        w.flush()?;
    }
    bundle.json("report.json", s.report.clone())?;
    let out = json!({
        "command": "solve-gamma",
        "config_hash": r.hash,
        "mode": r.cfg.mode,
        "value": s.value,
        "converged": s.converged,
        "out_dir": r.cfg.out_dir.display().to_string(),
    });
    if !s.converged {
        return Err(CliError::numeric(format!("descent did not converge in {} iterations; report written", r.cfg.variational.max_iter)));
    }
    Ok(out)
}

// ------------------------------------------------------------------------ run

/// Solution of the Parisi PDE at the iteration times, Ising only.
fn pde_for(r: &Resolved, gamma: &GammaPath) -> Result<Option<ParisiSolution>, CliError> {
    match r.cfg.mode {
        Mode::Spherical => Ok(None),
        Mode::Ising => {
            let grid = PdeGrid::new(r.x_max(), r.cfg.grid.n_x, r.iamp.times())?;
            Ok(Some(solve_parisi(&r.mixture, gamma, &grid)?))
        }
    }
}

fn drive<'a>(r: &'a Resolved, sol: &'a Option<ParisiSolution>) -> Drive<'a> {
    match sol {
        Some(s) => Drive::Parisi(s),
        None => Drive::Spherical(&r.mixture),
    }
}

pub fn plan(r: &Resolved) -> Value {
    let n = r.cfg.n;
    let bytes = pspin_core::hamiltonian::tensor_bytes(n, &r.mixture);
    let gamma_stage = match (&r.cfg.variational.gamma_file, r.cfg.mode) {
        (Some(p), _) => format!("read {}", p.display()),
        (None, Mode::Spherical) => "closed form".into(),
        (None, Mode::Ising) => format!("projected gradient descent, {} knots", r.cfg.variational.n_knots),
    };
    json!({
        "command": "run",
        "dry_run": true,
        "config_hash": r.hash,
        "mode": r.cfg.mode,
        "mixture": r.mixture.terms(),
        "n": n,
        "delta": r.iamp.delta,
        "t_star": r.iamp.t_star,
        "n_iter": r.iamp.n_iter(),
        "disorder_bytes": bytes as f64,
        "byte_budget": r.cfg.byte_budget,
        "within_budget": bytes <= r.cfg.byte_budget as u128,
        "out_dir": r.cfg.out_dir.display().to_string(),
        "stages": [
            format!("gamma: {gamma_stage}"),
            match r.cfg.mode { Mode::Ising => "pde: Parisi PDE at the iteration times", Mode::Spherical => "pde: not needed" },
            format!("calibrate: {} state-evolution samples", r.iamp.n_se_samples),
            format!("disorder: seed {}", r.cfg.seeds.disorder),
            format!("iamp: {} iterations", r.iamp.n_iter()),
            format!("round: {}", match r.cfg.mode { Mode::Ising => "threshold and sequential rounding", Mode::Spherical => "projection to the sphere" }),
        ],
    })
}

pub fn run(r: &Resolved) -> Result<Value, CliError> {
    r.check_budget(r.cfg.n)?;
    let bundle = Bundle::create(r)?;
    let mut profile = Vec::new();
    let result = run_stages(r, &bundle, &mut profile);
    bundle.json("profile.json", json!({"stages": profile_json(&profile)}))?;
    match result {
        Ok(summary) => {
            bundle.json("summary.json", summary.clone())?;
            Ok(summary)
        }
        Err(e) => {
            bundle.json("summary.json", json!({"status": "failed", "stage": e.stage, "error": e.message}))?;
            Err(e)
        }
    }
}

fn run_stages(r: &Resolved, bundle: &Bundle, profile: &mut Vec<(&'static str, f64)>) -> Result<Value, CliError> {
    let g = timed(profile, "gamma", || {
        let g = gamma_for(r)?;
        bundle.write_gamma(&g.gamma)?;
        Ok(g)
    })?;
    let sol = timed(profile, "pde", || pde_for(r, &g.gamma))?;
    let drive = drive(r, &sol);
    let cal = timed(profile, "calibrate", || {
        let cal = calibrate(&r.mixture, drive, &r.iamp)?;
        bundle.json("calibration.json", to_value(&cal))?;
        Ok(cal)
    })?;
    let d = timed(profile, "disorder", || {
        Ok(DisorderSample::sample_with_budget(r.cfg.n, &r.mixture, r.cfg.seeds.disorder, r.cfg.byte_budget as u128)?)
    })?;
    let run = timed(profile, "iamp", || {
        let mut w = BufWriter::new(fs::File::create(bundle.dir.join("iterations.jsonl"))?);
        writeln!(w, "{}", json!({"config_hash": bundle.hash, "config": bundle.config}))?;
        let mut io_err = None;
        let run = run_iamp_with(&d, drive, &cal, &r.iamp, |rec| {
            if let Err(e) = writeln!(w, "{}", to_value(rec)) {
                io_err.get_or_insert(e);
            }
        });
        w.flush()?;
        if let Some(e) = io_err {
            return Err(e.into());
        }
        Ok(run?)
    })?;
    let rep = timed(profile, "round", || {
        let rep = round_pipeline(&d, run.final_m(), r.cfg.mode)?;
        bundle.json("rounding.json", to_value(&rep))?;
        Ok(rep)
    })?;
    Ok(summary(r, &g, &cal, &run, &rep))
}

fn summary(r: &Resolved, g: &SolvedGamma, cal: &SECalibration, run: &IampRun, rep: &RoundingReport) -> Value {
    let last = run.records.last().expect("at least one record");
    json!({
        "command": "run",
        "status": "ok",
        "config_hash": r.hash,
        "mode": r.cfg.mode,
        "n": r.cfg.n,
        "n_iter": run.n_iter(),
        "gamma_value": g.value,
        "gamma_converged": g.converged,
        "energy_iterate": last.energy,
        "se_pred_energy": cal.pred_energy[cal.n_iter],
        "energy_output": rep.energy_output,
        "ratio_to_gamma_value": rep.energy_output / g.value,
        "max_norm_deviation": run.max_norm_deviation(),
        "clip_fraction": rep.clip_fraction,
    })
}

// ------------------------------------------------------------------- se-check

pub fn se_check_cmd(r: &Resolved) -> Result<Value, CliError> {
    r.check_budget(r.cfg.n)?;
    let bundle = Bundle::create(r)?;
    let g = gamma_for(r).map_err(|e| e.at("gamma"))?;
    let sol = pde_for(r, &g.gamma).map_err(|e| e.at("pde"))?;
    let drive = drive(r, &sol);
    let cal = calibrate(&r.mixture, drive, &r.iamp).map_err(|e| CliError::from(e).at("calibrate"))?;
    let d = DisorderSample::sample_with_budget(r.cfg.n, &r.mixture, r.cfg.seeds.disorder, r.cfg.byte_budget as u128)
        .map_err(|e| CliError::from(e).at("disorder"))?;
    let run = run_iamp(&d, drive, &cal, &r.iamp).map_err(|e| CliError::from(e).at("iamp"))?;
    let rep = se_check(&run, &cal, &standard_tests(run.n_iter()));
    let tol = r.cfg.checks.norm_tol;

    // Negative control: the same iteration without memory terms.
    let control = match run_iamp(&d, drive, &cal.without_onsager(), &r.iamp) {
        Ok(c) => {
            let first = c.records.iter().find(|rec| (rec.norm_m - (rec.iter + 1) as f64 * r.iamp.delta).abs() > tol);
            json!({"max_norm_deviation": c.max_norm_deviation(), "first_violation": first.map(|rec| rec.iter)})
        }
        Err(e) => json!({"error": e.to_string()}),
    };
    let pass = rep.max_norm_deviation <= tol;
    let norms: Vec<Value> = run
        .records
        .iter()
        .map(|rec| json!({"iter": rec.iter, "norm_m": rec.norm_m, "target": (rec.iter + 1) as f64 * r.iamp.delta}))
        .collect();
    let out = json!({
        "command": "se-check",
        "config_hash": r.hash,
        "pass": pass,
        "norm_tol": tol,
        "max_norm_deviation": rep.max_norm_deviation,
        "max_abs_z": rep.max_abs_z,
        "norms": norms,
        "tests": to_value(&rep.rows),
        "negative_control": control,
    });
    bundle.json("se_check.json", out.clone())?;
    if !pass {
        return Err(CliError::numeric(format!(
            "norm law violated: max deviation {:.4} > {tol}",
            rep.max_norm_deviation
        )));
    }
    Ok(out)
}

// ------------------------------------------------------------------ pde-check

#[derive(Serialize)]
struct CheckRow {
    name: String,
    error: f64,
    tol: f64,
    pass: bool,
}

fn row(name: impl Into<String>, error: f64, tol: f64) -> CheckRow {
    CheckRow { name: name.into(), error, tol, pass: error <= tol }
}

pub fn pde_check(r: &Resolved) -> Result<Value, CliError> {
    let m = &r.mixture;
    let c = &r.cfg.checks;
    let times = vec![0.0, 0.25, 0.5, 0.75, 0.9];
    let grid = PdeGrid::new(r.x_max(), r.cfg.grid.n_x, times.clone())?;
    let mut rows = Vec::new();

    let sol = solve_parisi(m, &GammaPath::zero(), &grid)?;
    rows.push(row("gamma0_phi00", (sol.phi00() - closed_form_gamma_zero(m, 0.0, 0.0)).abs(), c.pde_tol));
    let xs = grid.x_values();
    for (k, &t) in times.iter().enumerate() {
        let err = xs
            .iter()
            .zip(sol.phi_slice(k))
            .map(|(&x, &p)| (p - closed_form_gamma_zero(m, t, x)).abs())
            .fold(0.0, f64::max);
        rows.push(row(format!("gamma0_slice_t{t}"), err, c.pde_tol));
    }

    let gammas = [
        ("constant", GammaPath::constant(1.5)?),
        ("steps", GammaPath::new(vec![0.0, 0.3, 0.7, 1.0], vec![0.5, 3.0, 1.0])?),
        ("ramp", GammaPath::from_params(&[0.2, 0.8, 1.6, 2.4, 4.0], 0.01)?),
    ];
    for (name, g) in &gammas {
        let sol = solve_parisi(m, g, &grid)?;
        let (v00, p) = hjb_value_check(m, g, &sol);
        rows.push(row(format!("hjb_{name}"), (v00 - p).abs(), c.hjb_tol));
        let mut worst = 0.0f64;
        for k in 0..times.len() {
            for (j, &x) in xs.iter().enumerate() {
                worst = worst
                    .max(x.abs() - sol.phi_slice(k)[j])
                    .max(sol.phi_x_slice(k)[j].abs() - 1.0)
                    .max(-sol.phi_xx_slice(k)[j]);
            }
        }
        rows.push(row(format!("invariants_{name}"), worst.max(0.0), 1e-9));
        rows.push(row(format!("value_finite_{name}"), if value_from_solution(&sol).is_finite() { 0.0 } else { 1.0 }, 0.0));
    }
    let pass = rows.iter().all(|r| r.pass);
    let out = json!({"command": "pde-check", "config_hash": r.hash, "pass": pass, "checks": to_value(&rows)});
    if !pass {
        let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
        eprintln!("{}", serde_json::to_string_pretty(&out).expect("json"));
        return Err(CliError::numeric(format!("pde checks failed: {}", failed.join(", "))));
    }
    Ok(out)
}

// --------------------------------------------------------------------- oracle

pub fn oracle(r: &Resolved, n: Option<usize>, with_alg: bool) -> Result<Value, CliError> {
    let n = n.unwrap_or(r.cfg.oracle.n);
    if n > MAX_BRUTE_FORCE_N {
        return Err(CliError::resource(format!("brute force refused: n = {n} exceeds {MAX_BRUTE_FORCE_N}")));
    }
    r.check_budget(n)?;
    let bundle = Bundle::create(r)?;
    let alg = if with_alg {
        let g = gamma_for(r).map_err(|e| e.at("gamma"))?;
        let sol = pde_for(r, &g.gamma).map_err(|e| e.at("pde"))?;
        Some((g, sol))
    } else {
        None
    };
    let cal = match &alg {
        Some((_, sol)) => Some(calibrate(&r.mixture, drive(r, sol), &r.iamp).map_err(|e| CliError::from(e).at("calibrate"))?),
        None => None,
    };
    let mut rows = Vec::new();
    for s in 0..r.cfg.oracle.n_seeds as u64 {
        let seed = r.cfg.seeds.disorder + s;
        let d = DisorderSample::sample_with_budget(n, &r.mixture, seed, r.cfg.byte_budget as u128)?;
        let bf = brute_force_opt(&d, r.cfg.oracle.histogram)?;
        let mut row = json!({"seed": seed, "opt_value": bf.opt_value, "argmax": bf.argmax.spins()});
        if let (Some((_, sol)), Some(cal)) = (&alg, &cal) {
            let run = run_iamp(&d, drive(r, sol), cal, &r.iamp)?;
            let rep = round_pipeline(&d, run.final_m(), Mode::Ising)?;
            row["alg_energy"] = json!(rep.energy_output);
            row["ratio"] = json!(rep.energy_output / bf.opt_value);
        }
        if let Some(h) = &bf.histogram {
            let mut w = bundle.csv_writer(&format!("oracle_hist_{seed}.csv"), "bits,energy")?;
            for (b, e) in h.iter().enumerate() {
                writeln!(w, "{b},{e}")?;
            }
            w.flush()?;
        }
        rows.push(row);
    }
    let ratios: Vec<f64> = rows.iter().filter_map(|v| v["ratio"].as_f64()).collect();
    let mean_ratio = (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64);
    let out = json!({"command": "oracle", "config_hash": r.hash, "n": n, "seeds": rows, "mean_ratio": mean_ratio});
    bundle.json("oracle.json", out.clone())?;
    Ok(out)
}

// ---------------------------------------------------------------------- bench

pub fn bench(r: &Resolved) -> Result<Value, CliError> {
    r.check_budget(r.cfg.n)?;
    let mut rows = Vec::new();
    let mut time = |name: &str, reps: usize, f: &mut dyn FnMut() -> Result<(), CliError>| -> Result<(), CliError> {
        let t0 = Instant::now();
        for _ in 0..reps {
            f()?;
        }
        let s = t0.elapsed().as_secs_f64() / reps as f64;
        rows.push(json!({"kernel": name, "reps": reps, "seconds_each": s}));
        Ok(())
    };
    let n = r.cfg.n;
    let mut d = None;
    time(&format!("sample_disorder_n{n}"), 1, &mut || {
        d = Some(DisorderSample::sample_with_budget(n, &r.mixture, r.cfg.seeds.disorder, r.cfg.byte_budget as u128)?);
        Ok(())
    })?;
    let d = d.expect("sampled");
    let x: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.37).sin()).collect();
    time("energy_and_grad", 10, &mut || {
        std::hint::black_box(d.energy_and_grad(&x)?);
        Ok(())
    })?;
    let grid = PdeGrid::new(r.x_max(), r.cfg.grid.n_x, r.iamp.times())?;
    let g = GammaPath::from_params(&[0.5, 1.0, 2.0, 3.0], 0.01)?;
    time("solve_parisi", 3, &mut || {
        std::hint::black_box(solve_parisi(&r.mixture, &g, &grid)?);
        Ok(())
    })?;
    time("calibrate_spherical", 1, &mut || {
        std::hint::black_box(calibrate(&r.mixture, Drive::Spherical(&r.mixture), &r.iamp)?);
        Ok(())
    })?;
    let nb = r.cfg.oracle.n.min(MAX_BRUTE_FORCE_N);
    let small = DisorderSample::sample(nb, &r.mixture, r.cfg.seeds.disorder)?;
    time(&format!("brute_force_n{nb}"), 1, &mut || {
        std::hint::black_box(brute_force_opt(&small, false)?);
        Ok(())
    })?;
    Ok(json!({"command": "bench", "config_hash": r.hash, "threads": rayon::current_num_threads(), "kernels": rows}))
}
