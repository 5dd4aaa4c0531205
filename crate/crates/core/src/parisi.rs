//! Parisi PDE for piecewise-constant order parameters.
//!
//! On an interval where `gamma = a`, the Cole-Hopf transform turns the PDE
//! into a heat equation, so every time slice inside the interval is one
//! Gaussian convolution of the slice at the interval's right endpoint:
//!
//! ```text
//! Phi(t, x) = a^{-1} log E exp{a Phi(t_i, x + sigma G)},  sigma^2 = xi'(t_i) - xi'(t)
//! ```
//!
//! Two convolution kernels are used. When the source is the terminal `|x|`
//! or `sigma` is below three grid cells, the source is taken as its
//! piecewise-linear interpolant and integrated exactly segment by segment.
//! Otherwise the integral is a trapezoid sum over grid nodes with
//! normalized Gaussian weights. Derivatives are tilted expectations of the
//! source derivatives, never finite differences of `Phi`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::Mixture;
use crate::special::{folded_normal_mean, log_norm_interval, norm_cdf, norm_pdf};

pub const DEFAULT_N_X: usize = 2001;

/// Knot spacing below which two times are treated as the same slice.
const TIME_EPS: f64 = 1e-12;
/// Below this value of `gamma` an interval is plain Gaussian smoothing.
const LINEAR_GAMMA: f64 = 1e-10;
/// Below this value the tilt is accumulated through `expm1`/`ln_1p`.
const SMALL_GAMMA: f64 = 1e-3;
/// Kernel half-width in standard deviations.
const WINDOW_SIGMAS: f64 = 8.0;

/// Nonnegative piecewise-constant order parameter on `[0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaPath {
    knots: Vec<f64>,
    values: Vec<f64>,
}

impl GammaPath {
    /// `values[i]` is the value on `[knots[i], knots[i + 1])`.
    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || knots.len() != values.len() + 1 {
            return Err(Error::InvalidGamma(format!(
                "{} knots for {} values",
                knots.len(),
                values.len()
            )));
        }
        if knots[0] != 0.0 || *knots.last().unwrap() != 1.0 {
            return Err(Error::InvalidGamma("knots must start at 0 and end at 1".into()));
        }
        if knots.windows(2).any(|w| w[1] - w[0] <= TIME_EPS || !w[1].is_finite()) {
            return Err(Error::InvalidGamma("knots must be strictly increasing".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidGamma(format!("value {v} is not a finite nonnegative number")));
        }
        Ok(Self { knots, values })
    }

    pub fn zero() -> Self {
        Self::constant(0.0).unwrap()
    }

    pub fn constant(a: f64) -> Result<Self> {
        Self::new(vec![0.0, 1.0], vec![a])
    }

    /// Uniform knots on `[0, 1 - eps_t]`, one value per knot interval; the
    /// tail `[1 - eps_t, 1)` repeats the last value.
    pub fn from_params(params: &[f64], eps_t: f64) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::InvalidGamma("no parameters".into()));
        }
        if !(0.0..1.0).contains(&eps_t) {
            return Err(Error::InvalidGamma(format!("eps_t = {eps_t} outside [0, 1)")));
        }
        let n = params.len();
        let end = 1.0 - eps_t;
        let mut knots: Vec<f64> = (0..=n).map(|i| end * i as f64 / n as f64).collect();
        let mut values = params.to_vec();
        if eps_t > 0.0 {
            knots.push(1.0);
            values.push(params[n - 1]);
        } else {
            knots[n] = 1.0;
        }
        Self::new(knots, values)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_intervals(&self) -> usize {
        self.values.len()
    }

    /// Index of the interval containing `t`; `t >= 1` maps to the last one.
    pub fn interval_of(&self, t: f64) -> usize {
        let idx = self.knots.partition_point(|&k| k <= t);
        idx.saturating_sub(1).min(self.values.len() - 1)
    }

    pub fn value_at(&self, t: f64) -> f64 {
        self.values[self.interval_of(t)]
    }

    /// `int_0^1 t xi''(t) gamma(t) dt`, exact.
    pub fn weighted_integral(&self, m: &Mixture) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(i, &a)| a * m.integral_t_xi_second(self.knots[i], self.knots[i + 1]))
            .sum()
    }

    /// `|| xi'' (gamma - other) ||_1` over `[0, 1]`, exact.
    pub fn xi_l1_distance(&self, other: &GammaPath, m: &Mixture) -> f64 {
        let mut cuts: Vec<f64> = self.knots.iter().chain(&other.knots).copied().collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup_by(|a, b| (*a - *b).abs() <= TIME_EPS);
        cuts.windows(2)
            .map(|w| {
                let mid = 0.5 * (w[0] + w[1]);
                (self.value_at(mid) - other.value_at(mid)).abs() * (m.xi_prime(w[1]) - m.xi_prime(w[0]))
            })
            .sum()
    }
}

/// Space grid and the times at which the solution is kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeGrid {
    pub x_max: f64,
    pub n_x: usize,
    pub eval_times: Vec<f64>,
}

impl PdeGrid {
    pub fn new(x_max: f64, n_x: usize, eval_times: Vec<f64>) -> Result<Self> {
        if !(x_max.is_finite() && x_max > 0.0) {
            return Err(Error::InvalidArgument(format!("x_max = {x_max} must be positive")));
        }
        if n_x < 3 || n_x % 2 == 0 {
            return Err(Error::InvalidArgument(format!("n_x = {n_x} must be odd and at least 3")));
        }
        if eval_times.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidArgument("eval times must lie in [0, 1]".into()));
        }
        Ok(Self { x_max, n_x, eval_times })
    }

    /// `x_max = max(8, 6 sqrt(xi'(1)))`, 2001 points.
    pub fn default_for(m: &Mixture, eval_times: Vec<f64>) -> Result<Self> {
        Self::new(default_x_max(m), DEFAULT_N_X, eval_times)
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.x_max / (self.n_x - 1) as f64
    }

    pub fn x_at(&self, j: usize) -> f64 {
        -self.x_max + j as f64 * self.dx()
    }

    pub fn x_values(&self) -> Vec<f64> {
        (0..self.n_x).map(|j| self.x_at(j)).collect()
    }
}

pub fn default_x_max(m: &Mixture) -> f64 {
    f64::max(8.0, 6.0 * m.xi_prime(1.0).sqrt())
}

/// `Phi`, `d_x Phi`, `d_xx Phi` on the grid at every materialized time.
#[derive(Debug, Clone, PartialEq)]
pub struct ParisiSolution {
    grid: PdeGrid,
    times: Vec<f64>,
    phi: Vec<Vec<f64>>,
    phi_x: Vec<Vec<f64>>,
    phi_xx: Vec<Vec<f64>>,
    gamma: GammaPath,
    mixture: Mixture,
}

struct Slice {
    phi: Vec<f64>,
    phi_x: Vec<f64>,
    phi_xx: Vec<f64>,
}

/// Solves the Parisi PDE backward from `Phi(1, x) = |x|`.
pub fn solve_parisi(m: &Mixture, gamma: &GammaPath, grid: &PdeGrid) -> Result<ParisiSolution> {
    let required = 6.0 * m.xi_prime(1.0).sqrt();
    if grid.x_max < required {
        return Err(Error::GridTooSmall { x_max: grid.x_max, required });
    }
    let mut times: Vec<f64> = grid
        .eval_times
        .iter()
        .chain(gamma.knots())
        .copied()
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup_by(|a, b| (*a - *b).abs() <= TIME_EPS);
    // snap to knots so interval membership is exact
    for t in times.iter_mut() {
        if let Some(k) = gamma.knots().iter().find(|k| (**k - *t).abs() <= TIME_EPS) {
            *t = *k;
        }
    }

    let n = grid.n_x;
    let h = (n - 1) / 2;
    let xs = grid.x_values();
    let nt = times.len();
    let mut slices: Vec<Option<Slice>> = (0..nt).map(|_| None).collect();
    slices[nt - 1] = Some(Slice {
        phi: xs.iter().map(|x| x.abs()).collect(),
        phi_x: (0..n).map(|j| (j as f64 - h as f64).signum()).collect(),
        phi_xx: vec![0.0; n],
    });

    let knots = gamma.knots();
    for i in (0..gamma.n_intervals()).rev() {
        let (left, right, a) = (knots[i], knots[i + 1], gamma.values()[i]);
        let src_idx = times.iter().position(|&t| t == right).expect("knot materialized");
        let targets: Vec<usize> = (0..nt).filter(|&k| times[k] >= left && times[k] < right).collect();
        for k in targets {
            let sigma = (m.xi_prime(right) - m.xi_prime(times[k])).max(0.0).sqrt();
            let src = slices[src_idx].as_ref().unwrap();
            let slice = if src_idx == nt - 1 {
                convolve_pl(&[0.0], &[0.0], &xs, h, sigma, a)
            } else if sigma < 3.0 * grid.dx() {
                convolve_pl(&xs, &src.phi, &xs, h, sigma, a)
            } else {
                convolve_trapezoid(src, grid, sigma, a)
            };
            slices[k] = Some(slice);
        }
    }

    let mut phi = Vec::with_capacity(nt);
    let mut phi_x = Vec::with_capacity(nt);
    let mut phi_xx = Vec::with_capacity(nt);
    for s in slices {
        let s = s.expect("every time covered by an interval");
        phi.push(s.phi);
        phi_x.push(s.phi_x);
        phi_xx.push(s.phi_xx);
    }
    Ok(ParisiSolution { grid: grid.clone(), times, phi, phi_x, phi_xx, gamma: gamma.clone(), mixture: m.clone() })
}

/// Fills the `x < 0` half from the `x >= 0` results.
fn mirror(half: Vec<[f64; 3]>, n: usize) -> Slice {
    let h = (n - 1) / 2;
    let mut s = Slice { phi: vec![0.0; n], phi_x: vec![0.0; n], phi_xx: vec![0.0; n] };
    for (off, r) in half.into_iter().enumerate() {
        let (jp, jm) = (h + off, h - off);
        s.phi[jp] = r[0];
        s.phi[jm] = r[0];
        s.phi_x[jp] = r[1];
        s.phi_x[jm] = -r[1];
        s.phi_xx[jp] = r[2];
        s.phi_xx[jm] = r[2];
    }
    s.phi_x[h] = 0.0;
    s
}

/// Exact convolution of the piecewise-linear interpolant through
/// `(ys, fs)`, extended with slope -1 to the left and +1 to the right.
fn convolve_pl(ys: &[f64], fs: &[f64], xs: &[f64], h: usize, sigma: f64, a: f64) -> Slice {
    let half: Vec<[f64; 3]> = xs[h..].par_iter().map(|&x| pl_point(ys, fs, x, sigma, a)).collect();
    mirror(half, xs.len())
}

fn pl_point(ys: &[f64], fs: &[f64], x: f64, sigma: f64, a: f64) -> [f64; 3] {
    let last = ys.len() - 1;
    let w = WINDOW_SIGMAS * sigma + a * sigma * sigma;
    let lo = ys.partition_point(|&y| y <= x - w).saturating_sub(1);
    let hi = ys.partition_point(|&y| y < x + w).min(last);
    let slope = |j: usize| (fs[j + 1] - fs[j]) / (ys[j + 1] - ys[j]);
    let beta_left = if lo == 0 { -1.0 } else { slope(lo - 1) };
    let beta_right = if hi == last { 1.0 } else { slope(hi) };

    // pieces: (y0, y1, reference node, slope)
    let mut pieces = Vec::with_capacity(hi - lo + 2);
    pieces.push((f64::NEG_INFINITY, ys[lo], lo, beta_left));
    for j in lo..hi {
        pieces.push((ys[j], ys[j + 1], j, slope(j)));
    }
    pieces.push((ys[hi], f64::INFINITY, hi, beta_right));
    let kink = |j: usize| {
        let left = if j == lo { beta_left } else { slope(j - 1) };
        let right = if j == hi { beta_right } else { slope(j) };
        right - left
    };

    if a < LINEAR_GAMMA {
        let (mut phi, mut phi_x, mut phi_xx) = (0.0, 0.0, 0.0);
        for &(y0, y1, r, beta) in &pieces {
            let (g0, g1) = ((y0 - x) / sigma, (y1 - x) / sigma);
            let p = norm_cdf(g1) - norm_cdf(g0);
            let line = fs[r] + beta * (x - ys[r]);
            phi += line * p + beta * sigma * (norm_pdf(g0) - norm_pdf(g1));
            phi_x += beta * p;
        }
        for j in lo..=hi {
            phi_xx += kink(j) * norm_pdf((ys[j] - x) / sigma) / sigma;
        }
        return [phi, phi_x, phi_xx];
    }

    let logs: Vec<(f64, f64)> = pieces
        .iter()
        .map(|&(y0, y1, r, beta)| {
            let s = a * beta * sigma;
            let (g0, g1) = ((y0 - x) / sigma, (y1 - x) / sigma);
            let l = a * (fs[r] + beta * (x - ys[r])) + 0.5 * s * s + log_norm_interval(g0 - s, g1 - s);
            (l, beta)
        })
        .collect();
    let top = logs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let log_z = top + logs.iter().map(|p| (p.0 - top).exp()).sum::<f64>().ln();
    let (mut m1, mut m2) = (0.0, 0.0);
    for &(l, beta) in &logs {
        let w = (l - log_z).exp();
        m1 += w * beta;
        m2 += w * beta * beta;
    }
    let mut phi_xx = a * (m2 - m1 * m1).max(0.0);
    for j in lo..=hi {
        let g = (ys[j] - x) / sigma;
        phi_xx += kink(j) * (a * fs[j] - log_z - 0.5 * g * g).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    }
    [log_z / a, m1, phi_xx]
}

/// Trapezoid convolution against grid nodes, with the linear tail rule
/// supplying nodes past the grid edge.
fn convolve_trapezoid(src: &Slice, grid: &PdeGrid, sigma: f64, a: f64) -> Slice {
    let n = grid.n_x;
    let h = (n - 1) / 2;
    let dx = grid.dx();
    let half_width = ((WINDOW_SIGMAS * sigma + a * sigma * sigma) / dx).ceil() as usize;
    let weights: Vec<f64> = (0..=2 * half_width)
        .map(|q| {
            let u = (q as f64 - half_width as f64) * dx / sigma;
            (-0.5 * u * u).exp()
        })
        .collect();
    let w_sum: f64 = weights.iter().sum();

    // extended source over indices h - half_width ..= n - 1 + half_width
    let start = h as isize - half_width as isize;
    let len = n - h + 2 * half_width;
    let mut f = Vec::with_capacity(len);
    let mut fx = Vec::with_capacity(len);
    let mut fxx = Vec::with_capacity(len);
    for q in 0..len {
        let idx = start + q as isize;
        if idx < 0 {
            f.push(src.phi[0] + (-idx) as f64 * dx);
            fx.push(-1.0);
            fxx.push(0.0);
        } else if idx as usize >= n {
            f.push(src.phi[n - 1] + (idx as usize - (n - 1)) as f64 * dx);
            fx.push(1.0);
            fxx.push(0.0);
        } else {
            let i = idx as usize;
            f.push(src.phi[i]);
            fx.push(src.phi_x[i]);
            fxx.push(src.phi_xx[i]);
        }
    }
    let targets = n - h;
    let span = 2 * half_width + 1;

    let half: Vec<[f64; 3]> = if a < LINEAR_GAMMA {
        (0..targets)
            .into_par_iter()
            .map(|t| {
                let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
                for (q, &w) in weights.iter().enumerate() {
                    s0 += w * f[t + q];
                    s1 += w * fx[t + q];
                    s2 += w * fxx[t + q];
                }
                [s0 / w_sum, s1 / w_sum, s2 / w_sum]
            })
            .collect()
    } else if a < SMALL_GAMMA {
        (0..targets)
            .into_par_iter()
            .map(|t| {
                let c0 = f[t + half_width];
                let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
                for (q, &w) in weights.iter().enumerate() {
                    let d = (a * (f[t + q] - c0)).exp_m1();
                    let we = w * (1.0 + d);
                    s0 += w * d;
                    s1 += we * fx[t + q];
                    s2 += we * (fxx[t + q] + a * fx[t + q] * fx[t + q]);
                }
                let z = w_sum + s0;
                let px = s1 / z;
                [c0 + (s0 / w_sum).ln_1p() / a, px, s2 / z - a * px * px]
            })
            .collect()
    } else {
        let (f_min, f_max) = f.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let global = a * (f_max - f_min) < 1200.0;
        let c_mid = 0.5 * (f_min + f_max);
        let g2: Vec<f64> = fx.iter().zip(&fxx).map(|(d1, d2)| d2 + a * d1 * d1).collect();
        let e: Vec<f64> = if global { f.iter().map(|&v| (a * (v - c_mid)).exp()).collect() } else { Vec::new() };
        (0..targets)
            .into_par_iter()
            .map(|t| {
                let (mut z, mut s1, mut s2) = (0.0, 0.0, 0.0);
                let c0 = if global {
                    for q in 0..span {
                        let we = weights[q] * e[t + q];
                        z += we;
                        s1 += we * fx[t + q];
                        s2 += we * g2[t + q];
                    }
                    c_mid
                } else {
                    // convex source: the window maximum sits at an end
                    let c = f[t].max(f[t + span - 1]);
                    for q in 0..span {
                        let we = weights[q] * (a * (f[t + q] - c)).exp();
                        z += we;
                        s1 += we * fx[t + q];
                        s2 += we * g2[t + q];
                    }
                    c
                };
                let px = s1 / z;
                [c0 + (z / w_sum).ln() / a, px, s2 / z - a * px * px]
            })
            .collect()
    };
    mirror(half, n)
}

impl ParisiSolution {
    pub fn grid(&self) -> &PdeGrid {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn gamma(&self) -> &GammaPath {
        &self.gamma
    }

    pub fn mixture(&self) -> &Mixture {
        &self.mixture
    }

    pub fn phi_slice(&self, k: usize) -> &[f64] {
        &self.phi[k]
    }

    pub fn phi_x_slice(&self, k: usize) -> &[f64] {
        &self.phi_x[k]
    }

    pub fn phi_xx_slice(&self, k: usize) -> &[f64] {
        &self.phi_xx[k]
    }

    /// `Phi(0, 0)`.
    pub fn phi00(&self) -> f64 {
        self.phi[0][(self.grid.n_x - 1) / 2]
    }

    /// Index of the materialized time nearest to `t`.
    pub fn time_index(&self, t: f64) -> usize {
        let i = self.times.partition_point(|&s| s < t);
        if i == 0 {
            0
        } else if i == self.times.len() {
            i - 1
        } else if (self.times[i] - t) <= (t - self.times[i - 1]) {
            i
        } else {
            i - 1
        }
    }

    fn locate(&self, x: f64) -> Option<(usize, f64)> {
        let g = &self.grid;
        if x.abs() >= g.x_max {
            return None;
        }
        let pos = (x + g.x_max) / g.dx();
        let j = (pos.floor() as usize).min(g.n_x - 2);
        Some((j, pos - j as f64))
    }

    /// `(Phi, Phi_x, Phi_xx)` at slice `k`, linear in `x`, with the tail rule
    /// past the grid.
    pub fn lookup(&self, k: usize, x: f64) -> [f64; 3] {
        if k + 1 == self.times.len() {
            return [x.abs(), if x == 0.0 { 0.0 } else { x.signum() }, 0.0];
        }
        match self.locate(x) {
            Some((j, s)) => {
                let lerp = |v: &[f64]| v[j] + s * (v[j + 1] - v[j]);
                [lerp(&self.phi[k]), lerp(&self.phi_x[k]), lerp(&self.phi_xx[k])]
            }
            None => {
                let edge = self.phi[k][0];
                [edge + x.abs() - self.grid.x_max, x.signum(), 0.0]
            }
        }
    }

    /// `Phi_x` alone, as in [`Self::lookup`].
    pub fn lookup_x(&self, k: usize, x: f64) -> f64 {
        if k + 1 == self.times.len() {
            return if x == 0.0 { 0.0 } else { x.signum() };
        }
        match self.locate(x) {
            Some((j, s)) => {
                let v = &self.phi_x[k];
                v[j] + s * (v[j + 1] - v[j])
            }
            None => x.signum(),
        }
    }

    /// Slopes in `x` of the interpolants of `Phi_x` and `Phi_xx` at slice `k`.
    pub fn lookup_slopes(&self, k: usize, x: f64) -> [f64; 2] {
        match self.locate(x) {
            Some((j, _)) => {
                let dx = self.grid.dx();
                [
                    (self.phi_x[k][j + 1] - self.phi_x[k][j]) / dx,
                    (self.phi_xx[k][j + 1] - self.phi_xx[k][j]) / dx,
                ]
            }
            None => [0.0, 0.0],
        }
    }

    pub fn eval_phi(&self, t: f64, x: f64) -> f64 {
        self.lookup(self.time_index(t), x)[0]
    }

    pub fn eval_phi_x(&self, t: f64, x: f64) -> f64 {
        self.lookup(self.time_index(t), x)[1]
    }

    pub fn eval_phi_xx(&self, t: f64, x: f64) -> f64 {
        self.lookup(self.time_index(t), x)[2]
    }

    /// CSV with columns `t,x,phi,phi_x,phi_xx`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,x,phi,phi_x,phi_xx")?;
        let xs = self.grid.x_values();
        for (k, &t) in self.times.iter().enumerate() {
            for (j, &x) in xs.iter().enumerate() {
                writeln!(w, "{t},{x},{},{},{}", self.phi[k][j], self.phi_x[k][j], self.phi_xx[k][j])?;
            }
        }
        Ok(())
    }
}

/// `E|x + sqrt(xi'(1) - xi'(t)) G|`, the solution for `gamma = 0`.
pub fn closed_form_gamma_zero(m: &Mixture, t: f64, x: f64) -> f64 {
    let sigma = (m.xi_prime(1.0) - m.xi_prime(t)).max(0.0).sqrt();
    folded_normal_mean(x, sigma)
}

/// `(d_x, d_xx)` of [`closed_form_gamma_zero`] for `t < 1`.
pub fn closed_form_gamma_zero_derivs(m: &Mixture, t: f64, x: f64) -> (f64, f64) {
    let sigma = (m.xi_prime(1.0) - m.xi_prime(t)).max(0.0).sqrt();
    (libm::erf(x / (sigma * std::f64::consts::SQRT_2)), 2.0 * norm_pdf(x / sigma) / sigma)
}
