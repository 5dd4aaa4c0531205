//! The Parisi functional `P(gamma) = Phi_gamma(0, 0) - 1/2 int t xi'' gamma dt`,
//! its gradient, and projected gradient descent over nonnegative simple
//! functions (no monotonicity constraint).

use serde::{Deserialize, Serialize};

use crate::dynamics::{path_means, trapezoid, Drive, Scheme};
use crate::error::{Error, Result};
use crate::mixture::Mixture;
use crate::parisi::{default_x_max, solve_parisi, GammaPath, ParisiSolution, PdeGrid, DEFAULT_N_X};

/// Monte Carlo settings for gradient estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientOptions {
    pub n_paths: usize,
    pub seed: u64,
    /// SDE steps per knot interval.
    pub substeps: usize,
    pub scheme: Scheme,
    pub x_max: Option<f64>,
    pub n_x: usize,
}

impl Default for GradientOptions {
    fn default() -> Self {
        Self { n_paths: 100_000, seed: 0x5eed, substeps: 2, scheme: Scheme::Heun, x_max: None, n_x: DEFAULT_N_X }
    }
}

impl GradientOptions {
    fn grid(&self, m: &Mixture, times: Vec<f64>) -> Result<PdeGrid> {
        PdeGrid::new(self.x_max.unwrap_or_else(|| default_x_max(m)), self.n_x, times)
    }
}

/// Gradient estimate together with the quantities computed on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    /// `P(gamma)` (deterministic, from the PDE).
    pub value: f64,
    /// One entry per interval of `gamma`.
    pub components: Vec<f64>,
    /// Upper bound on the Monte Carlo standard error of each component
    /// (treats the samples within an interval as fully correlated).
    pub std_errors: Vec<f64>,
    /// `(t, E[Phi_x(t, X_t)^2] - t)` on the SDE grid.
    pub profile: Vec<(f64, f64)>,
}

/// `P(gamma)` on the given grid.
pub fn parisi_functional(m: &Mixture, g: &GammaPath, grid: &PdeGrid) -> Result<f64> {
    Ok(value_from_solution(&solve_parisi(m, g, grid)?))
}

pub fn value_from_solution(sol: &ParisiSolution) -> f64 {
    sol.phi00() - 0.5 * sol.gamma().weighted_integral(sol.mixture())
}

/// Knot intervals of `g`, each split into `substeps` equal steps.
pub fn gradient_times(g: &GammaPath, substeps: usize) -> Vec<f64> {
    let k = g.knots();
    let mut out = vec![0.0];
    for w in k.windows(2) {
        for s in 1..=substeps {
            out.push(if s == substeps { w[1] } else { w[0] + (w[1] - w[0]) * s as f64 / substeps as f64 });
        }
    }
    out
}

/// `component_i = 1/2 int_{I_i} xi''(t) (E[Phi_x(t, X_t)^2] - t) dt`, with
/// `X` driven by `v = xi'' gamma Phi_x` and the integral by trapezoid.
pub fn parisi_gradient(m: &Mixture, g: &GammaPath, opts: &GradientOptions) -> Result<GradientEstimate> {
    let substeps = opts.substeps.max(1);
    let times = gradient_times(g, substeps);
    let sol = solve_parisi(m, g, &opts.grid(m, times.clone())?)?;
    gradient_from_solution(&sol, &times, substeps, opts)
}

fn gradient_from_solution(sol: &ParisiSolution, times: &[f64], substeps: usize, opts: &GradientOptions) -> Result<GradientEstimate> {
    let m = sol.mixture();
    let ks: Vec<usize> = times.iter().map(|&t| sol.time_index(t)).collect();
    let means = path_means(m, Drive::Parisi(sol), opts.scheme, times, opts.n_paths, opts.seed, 2, |j, x, out| {
        let px = sol.lookup_x(ks[j], x);
        out[0] = px * px;
        out[1] = out[0] * out[0];
    })?;
    let n = opts.n_paths as f64;
    let dev: Vec<f64> = times.iter().zip(&means).map(|(&t, e)| e[0] - t).collect();
    let integrand: Vec<f64> = times.iter().zip(&dev).map(|(&t, d)| 0.5 * m.xi_second(t) * d).collect();
    let spread: Vec<f64> = times
        .iter()
        .zip(&means)
        .map(|(&t, e)| 0.5 * m.xi_second(t) * ((e[1] - e[0] * e[0]).max(0.0) / n).sqrt())
        .collect();
    let per_interval = |ys: &[f64]| -> Vec<f64> {
        (0..sol.gamma().n_intervals())
            .map(|i| {
                let r = i * substeps..=(i + 1) * substeps;
                trapezoid(&times[r.clone()], &ys[r])
            })
            .collect()
    };
    Ok(GradientEstimate {
        value: value_from_solution(sol),
        components: per_interval(&integrand),
        std_errors: per_interval(&spread),
        profile: times.iter().copied().zip(dev).collect(),
    })
}

/// Settings for [`minimize_parisi`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizeOptions {
    pub eps_t: f64,
    pub init: f64,
    pub max_iter: usize,
    /// Exit when every component of the preconditioned projected gradient
    /// is below this or within three Monte Carlo standard errors of zero.
    pub tol: f64,
    /// Initial step; `None` means `0.5 / xi''(1)`.
    pub step: Option<f64>,
    pub gradient: GradientOptions,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self { eps_t: 0.01, init: 0.5, max_iter: 400, tol: 1e-3, step: None, gradient: GradientOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub value: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalReport {
    pub gamma_star: GammaPath,
    pub params: Vec<f64>,
    pub value: f64,
    pub stationarity_profile: Vec<(f64, f64)>,
    pub gradient_norm: f64,
    pub converged: bool,
    /// Share of profile times in `[0, 1 - eps_t]` where `gamma > 1e-6`.
    pub support_fraction: f64,
    /// Whether the knot values never drop by more than 5% of their maximum.
    pub nondecreasing: bool,
    pub iterations: Vec<IterationRecord>,
}

impl VariationalReport {
    /// `max |E[Phi_x^2] - t|` over profile times where `gamma > 1e-6`.
    pub fn max_stationarity_gap(&self, eps_t: f64) -> f64 {
        self.stationarity_profile
            .iter()
            .filter(|(t, _)| *t <= 1.0 - eps_t + 1e-12 && self.gamma_star.value_at(*t) > 1e-6)
            .map(|(_, d)| d.abs())
            .fold(0.0, f64::max)
    }
}

/// Folds interval components onto the parameters of [`GammaPath::from_params`].
fn param_gradient(components: &[f64], n_params: usize) -> Vec<f64> {
    let mut g = components[..n_params].to_vec();
    for c in &components[n_params..] {
        g[n_params - 1] += c;
    }
    g
}

fn param_lengths(g: &GammaPath, n_params: usize) -> Vec<f64> {
    let k = g.knots();
    let mut l: Vec<f64> = (0..n_params).map(|i| k[i + 1] - k[i]).collect();
    l[n_params - 1] += 1.0 - k[n_params];
    l
}

fn projected(params: &[f64], dir: &[f64]) -> Vec<f64> {
    params.iter().zip(dir).map(|(p, d)| (p - (p - d).max(0.0)).abs()).collect()
}

/// Preconditioned direction, its projected sup norm, and whether every
/// projected component is within `max(tol, 3 SE)`.
fn direction(est: &GradientEstimate, gamma: &GammaPath, n_params: usize, tol: f64) -> (Vec<f64>, f64, bool, Vec<f64>) {
    let lengths = param_lengths(gamma, n_params);
    let dir: Vec<f64> = param_gradient(&est.components, n_params).iter().zip(&lengths).map(|(g, l)| g / l).collect();
    let noise: Vec<f64> = param_gradient(&est.std_errors, n_params).iter().zip(&lengths).map(|(s, l)| s / l).collect();
    let pg = projected(&gamma.values()[..n_params], &dir);
    let norm = pg.iter().copied().fold(0.0, f64::max);
    let settled = pg.iter().zip(&noise).all(|(g, s)| *g <= tol.max(3.0 * s));
    (dir, norm, settled, noise)
}

/// Projected gradient descent from `gamma = init` on `n_knots` uniform knots.
pub fn minimize_parisi(m: &Mixture, n_knots: usize, opts: &MinimizeOptions) -> Result<VariationalReport> {
    if n_knots < 2 {
        return Err(Error::InvalidArgument(format!("n_knots = {n_knots} must be at least 2")));
    }
    let substeps = opts.gradient.substeps.max(1);
    let mut params = vec![opts.init; n_knots];
    let mut step = opts.step.unwrap_or(0.5 / m.xi_second(1.0));
    let mut iterations = Vec::new();
    let mut converged = false;

    let build = |p: &[f64]| GammaPath::from_params(p, opts.eps_t);
    let mut gamma = build(&params)?;
    let times = gradient_times(&gamma, substeps);
    let grid = opts.gradient.grid(m, times.clone())?;
    let mut sol = solve_parisi(m, &gamma, &grid)?;
    let mut est = gradient_from_solution(&sol, &times, substeps, &opts.gradient)?;

    for iter in 0..opts.max_iter {
        let (dir, grad_norm, settled, _) = direction(&est, &gamma, n_knots, opts.tol);
        iterations.push(IterationRecord { iter, value: est.value, grad_norm, step });
        if settled {
            converged = true;
            break;
        }
        let mut accepted = None;
        for _ in 0..30 {
            let trial: Vec<f64> = params.iter().zip(&dir).map(|(p, d)| (p - step * d).max(0.0)).collect();
            let tg = build(&trial)?;
            let tsol = solve_parisi(m, &tg, &grid)?;
            let tv = value_from_solution(&tsol);
            if tv < est.value {
                accepted = Some((trial, tg, tsol));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((p, g, s)) => {
                params = p;
                gamma = g;
                sol = s;
                est = gradient_from_solution(&sol, &times, substeps, &opts.gradient)?;
                step *= 1.5;
            }
            // no descent along the estimated direction: MC noise floor
            None => break,
        }
    }

    let (_, gradient_norm, settled, _) = direction(&est, &gamma, n_knots, opts.tol);
    converged |= settled;
    let on_range: Vec<f64> = times.iter().copied().filter(|&t| t <= 1.0 - opts.eps_t + 1e-12).collect();
    let support_fraction =
        on_range.iter().filter(|&&t| gamma.value_at(t) > 1e-6).count() as f64 / on_range.len() as f64;
    let top = params.iter().copied().fold(0.0, f64::max);
    let nondecreasing = params.windows(2).all(|w| w[1] >= w[0] - 0.05 * top);
    Ok(VariationalReport {
        gamma_star: gamma,
        params,
        value: est.value,
        stationarity_profile: est.profile,
        gradient_norm,
        converged,
        support_fraction,
        nondecreasing,
        iterations,
    })
}

/// Closed-form minimizer for spherical models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphericalGamma {
    pub gamma: GammaPath,
    /// `int_0^1 sqrt(xi''(t)) dt`.
    pub value: f64,
    /// Set when `xi''(0) = 0` and the first interval was not integrable.
    pub truncated: bool,
}

/// `gamma*(t) = -d/dt xi''(t)^{-1/2}`, averaged over `n_knots` uniform intervals.
pub fn spherical_gamma(m: &Mixture, n_knots: usize) -> Result<SphericalGamma> {
    if n_knots < 1 {
        return Err(Error::InvalidArgument("n_knots must be positive".into()));
    }
    let knots: Vec<f64> = (0..=n_knots).map(|i| i as f64 / n_knots as f64).collect();
    let inv_sqrt = |t: f64| m.xi_second(t).sqrt().recip();
    let truncated = m.xi_second(0.0) == 0.0;
    let values: Vec<f64> = knots
        .windows(2)
        .map(|w| {
            if w[0] == 0.0 && truncated {
                0.5 * m.xi_third(w[1]) * m.xi_second(w[1]).powf(-1.5)
            } else {
                ((inv_sqrt(w[0]) - inv_sqrt(w[1])) / (w[1] - w[0])).max(0.0)
            }
        })
        .collect();
    let value = adaptive_simpson(&|t| m.xi_second(t).sqrt(), 0.0, 1.0, 1e-12, 50);
    Ok(SphericalGamma { gamma: GammaPath::new(knots, values)?, value, truncated })
}

/// Adaptive Simpson quadrature.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    rec(f, a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, depth)
}

/// `int_0^1 nu(s) ds` with `nu(t) = int_t^1 xi'' gamma`, integrated on each
/// interval directly rather than through `t xi'' gamma`.
pub fn nu_integral(m: &Mixture, g: &GammaPath) -> f64 {
    let k = g.knots();
    let a = g.values();
    let mut tail = 0.0;
    let mut total = 0.0;
    for i in (0..a.len()).rev() {
        let (l, r) = (k[i], k[i + 1]);
        // nu(t) = tail + a_i (xi'(r) - xi'(t)) on [l, r)
        total += (tail + a[i] * m.xi_prime(r)) * (r - l) - a[i] * (m.xi(r) - m.xi(l));
        tail += a[i] * (m.xi_prime(r) - m.xi_prime(l));
    }
    total
}

/// `(V(0, 0), P(gamma))` with `V(0, 0) = min_x Phi(0, x) - 1/2 int nu`.
pub fn hjb_value_check(m: &Mixture, g: &GammaPath, sol: &ParisiSolution) -> (f64, f64) {
    let k0 = sol.time_index(0.0);
    let inf_phi = sol.phi_slice(k0).iter().copied().fold(f64::INFINITY, f64::min);
    let v00 = inf_phi - 0.5 * nu_integral(m, g);
    let p = sol.phi00() - 0.5 * g.weighted_integral(m);
    (v00, p)
}
