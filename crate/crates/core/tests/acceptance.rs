//! Acceptance criteria, run in order. Prints one PASS/FAIL line per
//! criterion. Pass criterion numbers as arguments to run a subset
//! (`cargo test --test acceptance -- 1 4`). Set PSPIN_ACCEPTANCE_STRICT=1 to
//! turn any FAIL into a nonzero exit status.

use std::f64::consts::{PI, SQRT_2};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::DMatrix;
use pspin_core::dynamics::Drive;
use pspin_core::iamp::{calibrate, run_iamp, IampConfig, IampRun, SECalibration};
use pspin_core::oracle::brute_force_opt;
use pspin_core::parisi::{closed_form_gamma_zero, DEFAULT_N_X};
use pspin_core::rounding::{round_pipeline, sequential_round_traced, Mode};
use pspin_core::variational::{
    adaptive_simpson, hjb_value_check, minimize_parisi, parisi_functional, parisi_gradient, spherical_gamma,
    GradientOptions, MinimizeOptions, VariationalReport,
};
use pspin_core::{solve_parisi, DisorderSample, GammaPath, Mixture, ParisiSolution, PdeGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DISORDER_SEED: u64 = 1;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

// ------------------------------------------------------------ shared state

fn sk_gamma() -> &'static VariationalReport {
    static CELL: OnceLock<VariationalReport> = OnceLock::new();
    CELL.get_or_init(|| minimize_parisi(&Mixture::sk(), 40, &MinimizeOptions::default()).expect("SK descent"))
}

struct SkPipeline {
    sol: ParisiSolution,
    cal: SECalibration,
    cfg: IampConfig,
}

fn sk_pipeline() -> &'static SkPipeline {
    static CELL: OnceLock<SkPipeline> = OnceLock::new();
    CELL.get_or_init(|| {
        let m = Mixture::sk();
        let cfg = IampConfig::ising();
        let grid = PdeGrid::default_for(&m, cfg.times()).unwrap();
        let sol = solve_parisi(&m, &sk_gamma().gamma_star, &grid).unwrap();
        let cal = calibrate(&m, Drive::Parisi(&sol), &cfg).unwrap();
        SkPipeline { sol, cal, cfg }
    })
}

struct SkRun {
    d: DisorderSample,
    run: IampRun,
}

fn sk_run() -> &'static SkRun {
    static CELL: OnceLock<SkRun> = OnceLock::new();
    CELL.get_or_init(|| {
        let p = sk_pipeline();
        let d = DisorderSample::sample(2000, &Mixture::sk(), DISORDER_SEED).unwrap();
        let run = run_iamp(&d, Drive::Parisi(&p.sol), &p.cal, &p.cfg).unwrap();
        SkRun { d, run }
    })
}

fn random_gamma(rng: &mut ChaCha8Rng, n: usize, eps_t: f64) -> GammaPath {
    let params: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..3.0)).collect();
    GammaPath::from_params(&params, eps_t).unwrap()
}

// ---------------------------------------------------------------- criteria

fn c1_pde_closed_form() -> Verdict {
    let m = Mixture::sk();
    let times = vec![0.0, 0.25, 0.5, 0.75, 0.95];
    let grid = PdeGrid::default_for(&m, times.clone()).unwrap();
    let sol = solve_parisi(&m, &GammaPath::zero(), &grid).unwrap();
    let e0 = (sol.phi00() - 2.0 / PI.sqrt()).abs();
    let xs = grid.x_values();
    let slice = times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            xs.iter()
                .zip(sol.phi_slice(k))
                .map(|(&x, &p)| (p - closed_form_gamma_zero(&m, t, x)).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    verdict(e0 <= 1e-3 && slice <= 1e-3, format!("|Phi(0,0) - 2/sqrt(pi)| = {e0:.2e}, max slice error = {slice:.2e}"))
}

fn c2_parisi_gradient() -> Verdict {
    let m = Mixture::sk();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grid = PdeGrid::default_for(&m, vec![0.0]).unwrap();
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let g = random_gamma(&mut rng, 4, 0.0);
        let opts = GradientOptions { n_paths: 100_000, substeps: 64, ..Default::default() };
        let est = parisi_gradient(&m, &g, &opts).unwrap();
        for (i, c) in est.components.iter().enumerate() {
            let bump = |s: f64| {
                let mut v = g.values().to_vec();
                v[i] += s;
                parisi_functional(&m, &GammaPath::new(g.knots().to_vec(), v).unwrap(), &grid).unwrap()
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            worst = worst.max((c - fd).abs() / fd.abs());
        }
    }
    verdict(worst <= 0.03, format!("max relative error over 5 gamma x 4 components = {:.2}%", 100.0 * worst))
}

fn c3_stationarity() -> Verdict {
    // The flat early coordinates need a less noisy descent direction than the
    // default budget gives; the default run is reported alongside.
    let mut opts = MinimizeOptions::default();
    opts.gradient.n_paths = 400_000;
    let rep = minimize_parisi(&Mixture::sk(), 40, &opts).unwrap();
    let gap = rep.max_stationarity_gap(opts.eps_t);
    let base = sk_gamma();
    verdict(
        gap <= 0.01 && rep.support_fraction >= 0.95,
        format!(
            "P = {:.6}, max |E[Phi_x^2] - t| on support = {gap:.4}, support fraction = {:.3}, converged = {} \
             (4e5 paths); default 1e5 paths: P = {:.6}, gap {:.4}, support {:.3}",
            rep.value,
            rep.support_fraction,
            rep.converged,
            base.value,
            base.max_stationarity_gap(opts.eps_t),
            base.support_fraction
        ),
    )
}

fn c4_hjb_identity() -> Verdict {
    let m = Mixture::new([(2, 1.0), (3, 0.5)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let g = random_gamma(&mut rng, 6, 0.01);
        let sol = solve_parisi(&m, &g, &PdeGrid::default_for(&m, vec![0.0]).unwrap()).unwrap();
        let (v, p) = hjb_value_check(&m, &g, &sol);
        worst = worst.max((v - p).abs());
    }
    verdict(worst <= 1e-6, format!("max |V(0,0) - P(gamma)| over 5 gamma = {worst:.2e}"))
}

fn c5_norm_law() -> Verdict {
    let p = sk_pipeline();
    let r = sk_run();
    let dev = r.run.max_norm_deviation();
    let control = run_iamp(&r.d, Drive::Parisi(&p.sol), &p.cal.without_onsager(), &p.cfg);
    let first = match &control {
        Ok(c) => c
            .records
            .iter()
            .find(|rec| (rec.norm_m - (rec.iter + 1) as f64 * p.cfg.delta).abs() > 0.05)
            .map(|rec| rec.iter),
        Err(_) => Some(0),
    };
    let control_ok = matches!(first, Some(i) if i <= 5);
    verdict(
        dev <= 0.05 && control_ok,
        format!("max_l |<m,m>_N - (l+1) delta| = {dev:.4} (tol 0.05); control first violation at iteration {first:?}"),
    )
}

fn spherical_energy(m: &Mixture, n: usize, delta: f64, t_star: f64) -> Result<f64, String> {
    let cfg = IampConfig { delta, t_star, ..IampConfig::spherical() };
    let cal = calibrate(m, Drive::Spherical(m), &cfg).map_err(|e| e.to_string())?;
    let d = DisorderSample::sample(n, m, DISORDER_SEED).map_err(|e| e.to_string())?;
    let run = run_iamp(&d, Drive::Spherical(m), &cal, &cfg).map_err(|e| e.to_string())?;
    let rep = round_pipeline(&d, run.final_m(), Mode::Spherical).map_err(|e| e.to_string())?;
    Ok(rep.energy_output)
}

fn c6_spherical_sk() -> Verdict {
    let target = 0.95 * SQRT_2;
    let energy = spherical_energy(&Mixture::sk(), 2000, 0.01, 0.99);
    let d = DisorderSample::sample(500, &Mixture::sk(), DISORDER_SEED).unwrap();
    let g = d.tensor(2).unwrap().data();
    let a = DMatrix::from_fn(500, 500, |i, j| 0.5 * (g[i * 500 + j] + g[j * 500 + i]) / (500f64).sqrt());
    let lambda = a.symmetric_eigenvalues().max();
    let eig_ok = (lambda / SQRT_2 - 1.0).abs() <= 0.03;
    match energy {
        Ok(e) => verdict(
            e >= target && eig_ok,
            format!("H(sigma)/N = {e:.4} (target >= {target:.4}); dense lambda_max at N=500 = {lambda:.4} (sqrt 2 +- 3%)"),
        ),
        Err(err) => verdict(false, format!("{err}; dense lambda_max at N=500 = {lambda:.4}")),
    }
}

fn c7_mixed_spherical() -> Verdict {
    let m = Mixture::new([(2, 1.0), (4, 1.0)]).unwrap();
    let value = adaptive_simpson(&|t| m.xi_second(t).sqrt(), 0.0, 1.0, 1e-12, 50);
    let closed = spherical_gamma(&m, 1).unwrap().value;
    let target = 0.93 * value;
    match spherical_energy(&m, 150, 0.01, 0.99) {
        Ok(e) => verdict(e >= target, format!("H/N = {e:.4} at N=150 (target >= {target:.4}, integral {closed:.6})")),
        Err(err) => verdict(false, format!("{err} at N=150 (target >= {target:.4})")),
    }
}

fn c8_ising_sk() -> Verdict {
    let rep = sk_gamma();
    let r = sk_run();
    let round = round_pipeline(&r.d, r.run.final_m(), Mode::Ising).unwrap();
    let target = 0.90 * rep.value;
    let feasible = round.output.iter().all(|&s| s == 1.0 || s == -1.0);

    // Resolution doubling: twice the knots and twice the grid points.
    let m = Mixture::sk();
    let mut opts = MinimizeOptions::default();
    opts.gradient.n_x = 2 * DEFAULT_N_X - 1;
    let fine = minimize_parisi(&m, 80, &opts).unwrap();
    let drift = (fine.value - rep.value).abs();
    let in_band = (rep.value - 1.079).abs() <= 0.005;
    verdict(
        feasible && round.energy_output >= target && drift <= 0.005 && in_band,
        format!(
            "H(sigma)/N = {:.4} (target >= {target:.4}); P(gamma*) = {:.5}, doubled resolution {:.5} (drift {drift:.1e})",
            round.energy_output, rep.value, fine.value
        ),
    )
}

fn c9_brute_force() -> Verdict {
    let p = sk_pipeline();
    let m = Mixture::sk();
    let mut ratios = Vec::new();
    let mut ok = true;
    for seed in 0..20u64 {
        let d = DisorderSample::sample(15, &m, 100 + seed).unwrap();
        let opt = brute_force_opt(&d, false).unwrap().opt_value;
        let run = run_iamp(&d, Drive::Parisi(&p.sol), &p.cal, &p.cfg).unwrap();
        let rep = round_pipeline(&d, run.final_m(), Mode::Ising).unwrap();
        ok &= rep.output.iter().all(|&s| s == 1.0 || s == -1.0);
        ok &= rep.energy_output <= opt + 1e-12;
        ratios.push(rep.energy_output / opt);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    verdict(ok, format!("20 seeds feasible and below OPT; mean H(sigma)/OPT = {mean:.4}"))
}

fn c10_prediction() -> Verdict {
    let p = sk_pipeline();
    let r = sk_run();
    let m = Mixture::sk();
    let delta = p.cfg.delta;
    let pred: f64 = p.cal.mean_u.iter().enumerate().map(|(k, u)| m.xi_second(k as f64 * delta) * u * delta).sum();
    let energy = r.run.records.last().unwrap().energy;
    let tol = 3.0 * (delta.sqrt() + (2000f64).powf(-1.0 / 3.0));
    let err = (energy - pred).abs();
    verdict(err <= tol, format!("|H(m)/N - prediction| = |{energy:.4} - {pred:.4}| = {err:.4} (tol {tol:.4})"))
}

fn c11_properties() -> Verdict {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = Mixture::new([(2, 1.0), (3, 0.8), (4, 0.5)]).unwrap();

    // Gradient against central differences.
    let mut grad_err: f64 = 0.0;
    for s in 0..5 {
        let d = DisorderSample::sample(12, &m, 500 + s).unwrap();
        let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = d.grad(&x).unwrap();
        let h = 1e-5;
        let shifted = |s: f64| -> Vec<f64> { x.iter().zip(&e).map(|(a, b)| a + s * b).collect() };
        let fd = (d.hamiltonian(&shifted(h)).unwrap() - d.hamiltonian(&shifted(-h)).unwrap()) / (2.0 * h);
        let exact: f64 = g.iter().zip(&e).map(|(a, b)| a * b).sum();
        grad_err = grad_err.max((fd - exact).abs() / exact.abs().max(1.0));
    }
    if grad_err > 1e-5 {
        failures.push(format!("gradient error {grad_err:.1e}"));
    }

    // Multilinearity and monotone rounding.
    let mut affine_err: f64 = 0.0;
    let mut worst_step: f64 = 0.0;
    for s in 0..5 {
        let d = DisorderSample::sample(14, &m, 600 + s).unwrap();
        let x: Vec<f64> = (0..14).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for i in 0..14 {
            let at = |v: f64| {
                let mut y = x.clone();
                y[i] = v;
                d.multilinear(&y).unwrap()
            };
            let delta = d.partial_multilinear(&x, i).unwrap();
            affine_err = affine_err.max((at(1.0) - at(-1.0) - 2.0 * delta).abs());
            affine_err = affine_err.max((at(0.3) - (at(0.0) + 0.3 * delta)).abs());
        }
        let (_, trace) = sequential_round_traced(&d, &x, None).unwrap();
        worst_step = worst_step.max(trace.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max));
    }
    if affine_err > 1e-12 {
        failures.push(format!("multilinear identity error {affine_err:.1e}"));
    }
    if worst_step > 1e-12 {
        failures.push(format!("rounding decreased H~ by {worst_step:.1e}"));
    }

    // PDE invariants and the Lipschitz bound in gamma.
    let times = vec![0.0, 0.3, 0.6, 0.9];
    let grid = PdeGrid::default_for(&m, times.clone()).unwrap();
    let xs = grid.x_values();
    let mut inv: f64 = 0.0;
    let mut lip: f64 = f64::NEG_INFINITY;
    for _ in 0..4 {
        let g1 = random_gamma(&mut rng, 8, 0.01);
        let g2 = random_gamma(&mut rng, 8, 0.01);
        let s1 = solve_parisi(&m, &g1, &grid).unwrap();
        let s2 = solve_parisi(&m, &g2, &grid).unwrap();
        let mut sup: f64 = 0.0;
        for k in 0..times.len() {
            let (p, px, pxx) = (s1.phi_slice(k), s1.phi_x_slice(k), s1.phi_xx_slice(k));
            for j in 0..xs.len() {
                inv = inv.max(xs[j].abs() - p[j]).max(px[j].abs() - 1.0).max(-pxx[j]);
                if j > 0 && j + 1 < xs.len() {
                    inv = inv.max(-(p[j + 1] - 2.0 * p[j] + p[j - 1]));
                }
                sup = sup.max((p[j] - s2.phi_slice(k)[j]).abs());
            }
        }
        lip = lip.max(sup - g1.xi_l1_distance(&g2, &m));
    }
    if inv > 1e-12 {
        failures.push(format!("PDE invariants violated by {inv:.1e}"));
    }
    if lip > 0.0 {
        failures.push(format!("Lipschitz bound exceeded by {lip:.1e}"));
    }
    let detail = if failures.is_empty() {
        format!(
            "gradient {grad_err:.1e}, multilinear {affine_err:.1e}, rounding {worst_step:.1e}, invariants {inv:.1e}, Lipschitz slack {:.2e}",
            -lip
        )
    } else {
        failures.join("; ")
    };
    verdict(failures.is_empty(), detail)
}

// -------------------------------------------------------------------- main

type Criterion = (u32, &'static str, f64, fn() -> Verdict);

const CRITERIA: &[Criterion] = &[
    (1, "PDE closed form at gamma = 0", 5.0, c1_pde_closed_form),
    (2, "Parisi gradient vs finite differences", 120.0, c2_parisi_gradient),
    (3, "stationarity and full support at the SK minimizer", 600.0, c3_stationarity),
    (4, "HJB value identity", 60.0, c4_hjb_identity),
    (5, "state evolution norm law, N = 2000", 300.0, c5_norm_law),
    (6, "spherical SK energy, N = 2000", 600.0, c6_spherical_sk),
    (7, "mixed spherical 2+4 energy, N = 150", 900.0, c7_mixed_spherical),
    (8, "Ising SK end to end, N = 2000", 900.0, c8_ising_sk),
    (9, "brute-force dominance at N = 15", 120.0, c9_brute_force),
    (10, "energy against prediction, N = 2000", 300.0, c10_prediction),
    (11, "property suites", 180.0, c11_properties),
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let strict = std::env::var("PSPIN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = Vec::new();
    let total = Instant::now();
    for &(id, name, limit, f) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            verdict(false, format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        let pass = v.pass && secs <= limit;
        let timing = if secs <= limit { String::new() } else { format!(" [over the {limit:.0} s limit]") };
        println!(
            "{} criterion {id:>2}: {name}: {}; {secs:.1} s{timing}",
            if pass { "PASS" } else { "FAIL" },
            v.detail
        );
        if !pass {
            failed.push(id);
        }
    }
    println!("acceptance: {} failed {:?}, total {:.0} s", failed.len(), failed, total.elapsed().as_secs_f64());
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
