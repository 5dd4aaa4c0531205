//! Monte Carlo for the state-evolution SDE
//! `dX = v(t, X) dt + sqrt(xi''(t)) dB` and the martingale
//! `dM = sqrt(xi''(t)) u(t, X) dB`.
//!
//! Steps use the exact integrated diffusion `xi'(t_{j+1}) - xi'(t_j)` and a
//! left-endpoint drift. Path `p` draws its normals from its own ChaCha
//! stream, so any subset of paths can be regenerated independently and the
//! same seed gives common random numbers across drives.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::Mixture;
use crate::parisi::ParisiSolution;

/// Paths per reduction block; sums are combined in block order so results
/// do not depend on the thread count.
const BLOCK: usize = 2048;

/// The pair `(u, v)` driving the SDE and the martingale.
#[derive(Debug, Clone, Copy)]
pub enum Drive<'a> {
    /// `u = Phi_xx`, `v = xi'' gamma Phi_x`, read from the nearest slice.
    Parisi(&'a ParisiSolution),
    /// `u = xi''^{-1/2}`, `v = 0`.
    Spherical(&'a Mixture),
}

/// A drive frozen at one time.
#[derive(Debug, Clone, Copy)]
pub enum DriveAt<'a> {
    Parisi { sol: &'a ParisiSolution, k: usize, coef: f64 },
    Constant { u: f64 },
}

impl<'a> Drive<'a> {
    /// The drive at the end `t1` of a step started at `t0`, using the left
    /// limit of `gamma` so the step stays inside one knot interval.
    fn at_end(&self, t0: f64, t1: f64) -> DriveAt<'a> {
        match *self {
            Drive::Parisi(sol) => {
                let m = sol.mixture();
                DriveAt::Parisi { sol, k: sol.time_index(t1), coef: m.xi_second(t1) * sol.gamma().value_at(t0) }
            }
            Drive::Spherical(_) => self.at(t1),
        }
    }

    pub fn at(&self, t: f64) -> DriveAt<'a> {
        match *self {
            Drive::Parisi(sol) => {
                let m = sol.mixture();
                DriveAt::Parisi { sol, k: sol.time_index(t), coef: m.xi_second(t) * sol.gamma().value_at(t) }
            }
            Drive::Spherical(m) => {
                let s = m.xi_second(t);
                DriveAt::Constant { u: if s > 0.0 { s.sqrt().recip() } else { 0.0 } }
            }
        }
    }
}

impl DriveAt<'_> {
    pub fn u(&self, x: f64) -> f64 {
        match *self {
            DriveAt::Parisi { sol, k, .. } => sol.lookup(k, x)[2],
            DriveAt::Constant { u } => u,
        }
    }

    pub fn v(&self, x: f64) -> f64 {
        match *self {
            DriveAt::Parisi { sol, k, coef } => coef * sol.lookup_x(k, x),
            DriveAt::Constant { .. } => 0.0,
        }
    }

    /// `(u, v)` in one lookup.
    pub fn uv(&self, x: f64) -> (f64, f64) {
        match *self {
            DriveAt::Parisi { sol, k, coef } => {
                let r = sol.lookup(k, x);
                (r[2], coef * r[1])
            }
            DriveAt::Constant { u } => (u, 0.0),
        }
    }

    /// `(d_x u, d_x v)`, slopes of the interpolants.
    pub fn slopes(&self, x: f64) -> (f64, f64) {
        match *self {
            DriveAt::Parisi { sol, k, coef } => {
                let s = sol.lookup_slopes(k, x);
                (s[1], coef * s[0])
            }
            DriveAt::Constant { .. } => (0.0, 0.0),
        }
    }
}

/// `{0, delta, 2 delta, ..., floor(t_star / delta) delta}`.
pub fn uniform_times(t_star: f64, delta: f64) -> Result<Vec<f64>> {
    if !(delta > 0.0 && delta <= t_star && t_star <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < delta <= t_star <= 1, got delta = {delta}, t_star = {t_star}"
        )));
    }
    let steps = (t_star / delta + 1e-9).floor() as usize;
    Ok((0..=steps).map(|j| j as f64 * delta).collect())
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.len() < 2 || times[0] != 0.0 || times.windows(2).any(|w| w[1] <= w[0]) || times[times.len() - 1] > 1.0 {
        return Err(Error::InvalidArgument("time grid must start at 0, increase strictly and stay in [0, 1]".into()));
    }
    Ok(())
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Simulated `X` together with the scaled increments `Delta Z_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdePaths {
    times: Vec<f64>,
    n_paths: usize,
    x: Vec<f64>,
    increments: Vec<f64>,
}

impl SdePaths {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    /// `X` along path `p`.
    pub fn path(&self, p: usize) -> &[f64] {
        let nt = self.times.len();
        &self.x[p * nt..(p + 1) * nt]
    }

    /// `Delta Z` along path `p`, one entry per step.
    pub fn increments(&self, p: usize) -> &[f64] {
        let ns = self.times.len() - 1;
        &self.increments[p * ns..(p + 1) * ns]
    }

    /// Samples of `X` at time index `j` across paths.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.path(p)[j]).collect()
    }
}

/// Euler-Maruyama on the uniform grid of step `delta` up to `t_star`.
pub fn simulate_sde(m: &Mixture, drive: Drive<'_>, t_star: f64, delta: f64, n_paths: usize, seed: u64) -> Result<SdePaths> {
    simulate_sde_on(m, drive, &uniform_times(t_star, delta)?, n_paths, seed)
}

/// Euler-Maruyama on an arbitrary increasing grid starting at 0.
pub fn simulate_sde_on(m: &Mixture, drive: Drive<'_>, times: &[f64], n_paths: usize, seed: u64) -> Result<SdePaths> {
    check_times(times)?;
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be positive".into()));
    }
    let nt = times.len();
    let steps = step_table(m, drive, times);
    let mut x = vec![0.0; n_paths * nt];
    let mut increments = vec![0.0; n_paths * (nt - 1)];
    x.par_chunks_mut(nt)
        .zip(increments.par_chunks_mut(nt - 1))
        .enumerate()
        .for_each(|(p, (xp, dz))| {
            let mut rng = path_rng(seed, p);
            for (j, st) in steps.iter().enumerate() {
                let g: f64 = rng.sample(StandardNormal);
                dz[j] = st.sd * g;
                xp[j + 1] = xp[j] + st.drive.v(xp[j]) * st.h + dz[j];
            }
        });
    Ok(SdePaths { times: times.to_vec(), n_paths, x, increments })
}

struct Step<'a> {
    drive: DriveAt<'a>,
    end: DriveAt<'a>,
    h: f64,
    sd: f64,
}

/// Time stepping for [`path_means`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Scheme {
    /// Left-endpoint drift, the discretization the message passing follows.
    #[default]
    Euler,
    /// Predictor-corrector drift; weak order two for additive noise.
    Heun,
}

fn step_table<'a>(m: &Mixture, drive: Drive<'a>, times: &[f64]) -> Vec<Step<'a>> {
    times
        .windows(2)
        .map(|w| Step {
            drive: drive.at(w[0]),
            end: drive.at_end(w[0], w[1]),
            h: w[1] - w[0],
            sd: (m.xi_prime(w[1]) - m.xi_prime(w[0])).max(0.0).sqrt(),
        })
        .collect()
}

/// Streams paths without storing them and returns, for every time index
/// `j` and observable `o`, the path average of `obs(j, x_j)[o]`.
#[allow(clippy::too_many_arguments)]
pub fn path_means<F>(
    m: &Mixture,
    drive: Drive<'_>,
    scheme: Scheme,
    times: &[f64],
    n_paths: usize,
    seed: u64,
    n_obs: usize,
    obs: F,
) -> Result<Vec<Vec<f64>>>
where
    F: Fn(usize, f64, &mut [f64]) + Sync,
{
    check_times(times)?;
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be positive".into()));
    }
    let nt = times.len();
    let steps = step_table(m, drive, times);
    let n_blocks = n_paths.div_ceil(BLOCK);
    let partials: Vec<Vec<f64>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![0.0; nt * n_obs];
            let mut out = vec![0.0; n_obs];
            for p in b * BLOCK..((b + 1) * BLOCK).min(n_paths) {
                let mut rng = path_rng(seed, p);
                let mut x = 0.0;
                for j in 0..nt {
                    obs(j, x, &mut out);
                    for (a, o) in acc[j * n_obs..(j + 1) * n_obs].iter_mut().zip(&out) {
                        *a += o;
                    }
                    if j + 1 < nt {
                        let st = &steps[j];
                        let g: f64 = rng.sample(StandardNormal);
                        let dz = st.sd * g;
                        let v0 = st.drive.v(x);
                        x += match scheme {
                            Scheme::Euler => v0 * st.h + dz,
                            Scheme::Heun => {
                                let pred = x + v0 * st.h + dz;
                                0.5 * (v0 + st.end.v(pred)) * st.h + dz
                            }
                        };
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; nt * n_obs];
    for part in partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    Ok(total.chunks(n_obs).map(|c| c.iter().map(|v| v / n_paths as f64).collect()).collect())
}

/// `M` on the path grid: `M_0 = 0`, `M_{j+1} = M_j + u(t_j, X_j) Delta Z_j`.
pub fn martingale_paths(paths: &SdePaths, drive: Drive<'_>) -> Vec<f64> {
    let nt = paths.n_times();
    let at: Vec<DriveAt<'_>> = paths.times[..nt - 1].iter().map(|&t| drive.at(t)).collect();
    let mut out = vec![0.0; paths.n_paths * nt];
    out.par_chunks_mut(nt).enumerate().for_each(|(p, mp)| {
        let (xp, dz) = (paths.path(p), paths.increments(p));
        for j in 0..nt - 1 {
            mp[j + 1] = mp[j] + at[j].u(xp[j]) * dz[j];
        }
    });
    out
}

/// Trapezoid rule for `int xi''(t) E[u(t, X_t)] dt` over the path grid.
pub fn energy_functional(m: &Mixture, drive: Drive<'_>, paths: &SdePaths) -> f64 {
    let vals: Vec<f64> = paths
        .times
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let at = drive.at(t);
            let mean = (0..paths.n_paths).map(|p| at.u(paths.path(p)[j])).sum::<f64>() / paths.n_paths as f64;
            m.xi_second(t) * mean
        })
        .collect();
    trapezoid(&paths.times, &vals)
}

pub fn trapezoid(ts: &[f64], ys: &[f64]) -> f64 {
    ts.windows(2).zip(ys.windows(2)).map(|(t, y)| 0.5 * (t[1] - t[0]) * (y[0] + y[1])).sum()
}

/// Per-time sample mean and variance of `X` and `M`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PathSummary {
    pub t: Vec<f64>,
    pub mean_x: Vec<f64>,
    pub var_x: Vec<f64>,
    pub mean_m: Vec<f64>,
    pub var_m: Vec<f64>,
}

fn mean_var(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = xs.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

impl PathSummary {
    pub fn new(paths: &SdePaths, m_paths: &[f64]) -> Self {
        let nt = paths.n_times();
        let mut s = PathSummary { t: paths.times.clone(), mean_x: vec![], var_x: vec![], mean_m: vec![], var_m: vec![] };
        for j in 0..nt {
            let (mx, vx) = mean_var((0..paths.n_paths).map(|p| paths.path(p)[j]));
            let (mm, vm) = mean_var((0..paths.n_paths).map(|p| m_paths[p * nt + j]));
            s.mean_x.push(mx);
            s.var_x.push(vx);
            s.mean_m.push(mm);
            s.var_m.push(vm);
        }
        s
    }

    /// Columns `t,mean_x,var_x,mean_m,var_m`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,mean_x,var_x,mean_m,var_m")?;
        for j in 0..self.t.len() {
            writeln!(w, "{},{},{},{},{}", self.t[j], self.mean_x[j], self.var_x[j], self.mean_m[j], self.var_m[j])?;
        }
        Ok(())
    }
}
