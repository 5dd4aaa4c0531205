//! Incremental approximate message passing.
//!
//! The iteration is
//!
//! ```text
//! z^{l+1} = grad H(m^l) - sum_{j=1}^{l} d_{l,j} m^{j-1}
//! x^{l+1} = x^l + v(l delta, x^l) delta + (z^{l+1} - z^l)
//! m^{l+1} = m^l + u_l(x^l) (z^{l+1} - z^l)
//! ```
//!
//! with `z^0 = x^0 = 0` and `m^0 = sqrt(delta)`. The coefficients `d_{l,j}`
//! and the rescaled nonlinearities `u_l` come from a Monte Carlo run of the
//! scalar state evolution, see [`calibrate`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Drive, DriveAt};
use crate::error::{Error, Result};
use crate::hamiltonian::DisorderSample;
use crate::mixture::Mixture;

const BLOCK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IampConfig {
    pub delta: f64,
    pub t_star: f64,
    pub n_se_samples: usize,
    pub seed: u64,
    /// State-evolution paths kept for [`se_check`].
    pub n_se_keep: usize,
}

impl IampConfig {
    pub fn ising() -> Self {
        Self { delta: 0.02, t_star: 0.95, n_se_samples: 50_000, seed: 0xca1b, n_se_keep: 20_000 }
    }

    pub fn spherical() -> Self {
        Self { t_star: 0.98, ..Self::ising() }
    }

    /// `floor(t_star / delta)`.
    pub fn n_iter(&self) -> usize {
        (self.t_star / self.delta + 1e-9).floor() as usize
    }

    pub fn validate(&self, m: &Mixture) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta = {} must lie in (0, 1)", self.delta)));
        }
        if !(self.t_star > 0.0 && self.t_star <= 1.0) {
            return Err(Error::InvalidArgument(format!("t_star = {} must lie in (0, 1]", self.t_star)));
        }
        if self.n_se_samples < 2 {
            return Err(Error::InvalidArgument("n_se_samples must be at least 2".into()));
        }
        if m.xi_prime(self.delta) <= 0.0 {
            return Err(Error::InvalidArgument("xi'(delta) must be positive".into()));
        }
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_iter()).map(|l| l as f64 * self.delta).collect()
    }
}

impl Default for IampConfig {
    fn default() -> Self {
        Self::ising()
    }
}

/// Calibrated coefficients for one `(mixture, drive, config)` triple.
#[derive(Debug, Clone, Serialize)]
pub struct SECalibration {
    pub delta: f64,
    pub n_iter: usize,
    /// `Var(z^{l+1} - z^l) = xi'((l+1) delta) - xi'(l delta)` for `l < n_iter`.
    pub increment_vars: Vec<f64>,
    /// `u_0`, the constant first nonlinearity `sqrt(delta / xi'(delta))`.
    pub u0: f64,
    /// Rescalings `Sigma_l`; entry 0 is 1 and unused.
    pub sigma: Vec<f64>,
    /// Row `l` holds `d_{l,j}` for `j = 0..=l`; column 0 multiplies
    /// `f_{-1} = 0` and is always 0.
    pub onsager: Vec<Vec<f64>>,
    /// `E[m^l m^j]` for `l, j <= n_iter`.
    pub se_moments: Vec<Vec<f64>>,
    /// `E[u_l(X_l)]` with the rescaled nonlinearity.
    pub mean_u: Vec<f64>,
    /// Predicted `H(m^l) / N`, the running sum of
    /// `(xi'((k+1) delta) - xi'(k delta)) E[u_k(X_k)]` over `k < l`.
    pub pred_energy: Vec<f64>,
    #[serde(skip)]
    mixture: Mixture,
    #[serde(skip)]
    kept_z: Vec<f64>,
    #[serde(skip)]
    kept_m: Vec<f64>,
    #[serde(skip)]
    n_kept: usize,
}

impl SECalibration {
    pub fn mixture(&self) -> &Mixture {
        &self.mixture
    }

    /// Same calibration with every Onsager coefficient set to zero.
    pub fn without_onsager(&self) -> Self {
        let mut c = self.clone();
        for row in &mut c.onsager {
            row.iter_mut().for_each(|d| *d = 0.0);
        }
        c
    }

    pub fn n_kept(&self) -> usize {
        self.n_kept
    }

    /// `(z^0..z^L, m^0..m^L)` along kept state-evolution path `p`.
    pub fn kept_path(&self, p: usize) -> (&[f64], &[f64]) {
        let w = self.n_iter + 1;
        (&self.kept_z[p * w..(p + 1) * w], &self.kept_m[p * w..(p + 1) * w])
    }

    /// `u_l(x)` as used by the iteration.
    fn u_scaled(&self, at: &DriveAt<'_>, l: usize, x: f64) -> f64 {
        if l == 0 {
            self.u0
        } else {
            at.u(x) / self.sigma[l]
        }
    }
}

fn check_drive(drive: &Drive<'_>, m: &Mixture, cfg: &IampConfig) -> Result<()> {
    if let Drive::Parisi(sol) = drive {
        if sol.mixture() != m {
            return Err(Error::InvalidArgument("drive was solved for a different mixture".into()));
        }
        let ts = sol.times();
        for t in cfg.times() {
            if !ts.iter().any(|&s| (s - t).abs() <= 1e-9) {
                return Err(Error::InvalidArgument(format!("pde solution has no slice at t = {t}")));
            }
        }
    }
    Ok(())
}

fn se_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Draws the increments of one state-evolution path and the resulting
/// `x^0..x^L`.
fn se_path(rng: &mut ChaCha8Rng, at: &[DriveAt<'_>], sd: &[f64], delta: f64, x: &mut [f64], inc: &mut [f64]) {
    x[0] = 0.0;
    for l in 0..inc.len() {
        let g: f64 = rng.sample(StandardNormal);
        inc[l] = sd[l] * g;
        x[l + 1] = x[l] + at[l].v(x[l]) * delta + inc[l];
    }
}

struct Partial {
    sens: Vec<f64>,
    moments: Vec<f64>,
    mean_u: Vec<f64>,
}

/// Monte Carlo calibration over `cfg.n_se_samples` state-evolution paths.
///
/// `E[dm^l / dz^j]` is a pathwise forward derivative of the scalar recursion;
/// `d_{l,j} = xi''(j delta) E[dm^l / dz^j]`.
pub fn calibrate(m: &Mixture, drive: Drive<'_>, cfg: &IampConfig) -> Result<SECalibration> {
    cfg.validate(m)?;
    check_drive(&drive, m, cfg)?;
    let l_star = cfg.n_iter();
    let delta = cfg.delta;
    let n = cfg.n_se_samples;
    let times = cfg.times();
    let increment_vars: Vec<f64> = (0..l_star).map(|l| m.xi_prime(times[l + 1]) - m.xi_prime(times[l])).collect();
    if let Some(l) = increment_vars.iter().position(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(Error::Calibration { step: l, reason: "non-positive increment variance".into() });
    }
    let sd: Vec<f64> = increment_vars.iter().map(|v| v.sqrt()).collect();
    let at: Vec<DriveAt<'_>> = times[..l_star].iter().map(|&t| drive.at(t)).collect();
    let u0 = (delta / m.xi_prime(delta)).sqrt();
    let n_blocks = n.div_ceil(BLOCK);

    // Pass 1: E[u(l delta, X_l)^2] fixes the rescalings.
    let sq: Vec<Vec<f64>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![0.0; l_star];
            let (mut x, mut inc) = (vec![0.0; l_star + 1], vec![0.0; l_star]);
            for p in b * BLOCK..((b + 1) * BLOCK).min(n) {
                se_path(&mut se_rng(cfg.seed, p), &at, &sd, delta, &mut x, &mut inc);
                for l in 1..l_star {
                    let u = at[l].u(x[l]);
                    acc[l] += u * u;
                }
            }
            acc
        })
        .collect();
    let mut sigma = vec![1.0; l_star];
    for l in 1..l_star {
        let mean_sq = sq.iter().map(|a| a[l]).sum::<f64>() / n as f64;
        let s2 = increment_vars[l] * mean_sq / delta;
        if !(s2 > 0.0 && s2.is_finite()) {
            return Err(Error::Calibration { step: l, reason: format!("rescaling Sigma^2 = {s2}") });
        }
        sigma[l] = s2.sqrt();
    }

    let w = l_star + 1;
    let n_keep = cfg.n_se_keep.min(n);
    let mut cal = SECalibration {
        delta,
        n_iter: l_star,
        increment_vars,
        u0,
        sigma,
        onsager: Vec::new(),
        se_moments: Vec::new(),
        mean_u: Vec::new(),
        pred_energy: Vec::new(),
        mixture: m.clone(),
        kept_z: vec![0.0; n_keep * w],
        kept_m: vec![0.0; n_keep * w],
        n_kept: n_keep,
    };

    // Pass 2: replay the same paths for m, moments and sensitivities.
    let cal_ref = &cal;
    let results: Vec<(Partial, Vec<(usize, Vec<f64>, Vec<f64>)>)> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut part = Partial { sens: vec![0.0; w * w], moments: vec![0.0; w * w], mean_u: vec![0.0; w] };
            let mut kept = Vec::new();
            let (mut x, mut inc) = (vec![0.0; w], vec![0.0; l_star]);
            let (mut mm, mut uk, mut duk, mut dvk) = (vec![0.0; w], vec![0.0; w], vec![0.0; w], vec![0.0; w]);
            for p in b * BLOCK..((b + 1) * BLOCK).min(n) {
                se_path(&mut se_rng(cfg.seed, p), &at, &sd, delta, &mut x, &mut inc);
                mm[0] = delta.sqrt();
                for l in 0..l_star {
                    uk[l] = cal_ref.u_scaled(&at[l], l, x[l]);
                    let (du, dv) = at[l].slopes(x[l]);
                    duk[l] = if l == 0 { 0.0 } else { du / cal_ref.sigma[l] };
                    dvk[l] = dv;
                    mm[l + 1] = mm[l] + uk[l] * inc[l];
                    part.mean_u[l] += uk[l];
                }
                for l in 0..w {
                    for j in 0..=l {
                        part.moments[l * w + j] += mm[l] * mm[j];
                    }
                }
                for j in 1..l_star {
                    let (mut d, mut acc) = (1.0, 0.0);
                    for l in j..l_star {
                        let direct = uk[j - 1] - if j < l { uk[j] } else { 0.0 };
                        part.sens[l * w + j] += direct + acc;
                        acc += duk[l] * d * inc[l];
                        d = if l == j { dvk[l] * delta } else { d * (1.0 + dvk[l] * delta) };
                    }
                }
                if p < n_keep {
                    let mut z = vec![0.0; w];
                    for l in 0..l_star {
                        z[l + 1] = z[l] + inc[l];
                    }
                    kept.push((p, z, mm.clone()));
                }
            }
            (part, kept)
        })
        .collect();

    let mut sens = vec![0.0; w * w];
    let mut moments = vec![0.0; w * w];
    let mut mean_u = vec![0.0; w];
    for (part, kept) in results {
        for (a, b) in sens.iter_mut().zip(&part.sens) {
            *a += b;
        }
        for (a, b) in moments.iter_mut().zip(&part.moments) {
            *a += b;
        }
        for (a, b) in mean_u.iter_mut().zip(&part.mean_u) {
            *a += b;
        }
        for (p, z, mp) in kept {
            cal.kept_z[p * w..(p + 1) * w].copy_from_slice(&z);
            cal.kept_m[p * w..(p + 1) * w].copy_from_slice(&mp);
        }
    }
    let inv = 1.0 / n as f64;
    let mut onsager = vec![Vec::new(); l_star];
    for (l, row) in onsager.iter_mut().enumerate() {
        *row = vec![0.0; l + 1];
        for j in 1..=l {
            let e = sens[l * w + j] * inv;
            if !e.is_finite() {
                return Err(Error::Calibration { step: l, reason: format!("non-finite sensitivity for j = {j}") });
            }
            row[j] = m.xi_second(j as f64 * delta) * e;
        }
    }
    let mut se_moments = vec![vec![0.0; w]; w];
    for l in 0..w {
        for j in 0..=l {
            let v = moments[l * w + j] * inv;
            se_moments[l][j] = v;
            se_moments[j][l] = v;
        }
    }
    mean_u.truncate(l_star);
    mean_u.iter_mut().for_each(|v| *v *= inv);
    let mut pred_energy = vec![0.0; w];
    for l in 0..l_star {
        pred_energy[l + 1] = pred_energy[l] + cal.increment_vars[l] * mean_u[l];
    }
    cal.onsager = onsager;
    cal.se_moments = se_moments;
    cal.mean_u = mean_u;
    cal.pred_energy = pred_energy;
    Ok(cal)
}

/// Central finite difference of `E[m^l]` in `z^j` with common random
/// numbers, holding the calibrated rescalings fixed. Checks [`calibrate`].
pub fn bump_sensitivity(
    drive: Drive<'_>,
    cal: &SECalibration,
    cfg: &IampConfig,
    l: usize,
    j: usize,
    h: f64,
    n_paths: usize,
) -> Result<f64> {
    let l_star = cal.n_iter;
    if !(1 <= j && j <= l && l <= l_star) {
        return Err(Error::InvalidArgument(format!("need 1 <= j <= l <= {l_star}, got j = {j}, l = {l}")));
    }
    let delta = cal.delta;
    let times = cfg.times();
    let at: Vec<DriveAt<'_>> = times[..l_star].iter().map(|&t| drive.at(t)).collect();
    let sd: Vec<f64> = cal.increment_vars.iter().map(|v| v.sqrt()).collect();
    let replay = |inc: &[f64]| {
        let (mut x, mut mm) = (0.0, delta.sqrt());
        for k in 0..l {
            let u = cal.u_scaled(&at[k], k, x);
            mm += u * inc[k];
            x += at[k].v(x) * delta + inc[k];
        }
        mm
    };
    let (mut x, mut inc) = (vec![0.0; l_star + 1], vec![0.0; l_star]);
    let mut total = 0.0;
    for p in 0..n_paths {
        se_path(&mut se_rng(cfg.seed, p), &at, &sd, delta, &mut x, &mut inc);
        let mut up = inc.clone();
        let mut dn = inc.clone();
        up[j - 1] += h;
        dn[j - 1] -= h;
        if j < l_star {
            up[j] -= h;
            dn[j] += h;
        }
        total += (replay(&up) - replay(&dn)) / (2.0 * h);
    }
    Ok(total / n_paths as f64)
}

/// Diagnostics recorded after each iterate `m^l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub norm_m: f64,
    pub energy: f64,
    pub se_pred_energy: f64,
    pub max_abs_m: f64,
}

#[derive(Debug, Clone)]
pub struct IampRun {
    pub n: usize,
    pub delta: f64,
    /// `z^0..z^L`, each of length `n`.
    pub z: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
    pub m: Vec<Vec<f64>>,
    pub records: Vec<IterRecord>,
}

impl IampRun {
    pub fn n_iter(&self) -> usize {
        self.m.len() - 1
    }

    pub fn final_m(&self) -> &[f64] {
        &self.m[self.m.len() - 1]
    }

    pub fn energies(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.energy).collect()
    }

    pub fn norms(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.norm_m).collect()
    }

    /// Largest `|<m^l, m^l>_N - (l+1) delta|` over all iterates.
    pub fn max_norm_deviation(&self) -> f64 {
        self.records
            .iter()
            .map(|r| (r.norm_m - (r.iter + 1) as f64 * self.delta).abs())
            .fold(0.0, f64::max)
    }

    /// Coordinate variance of `z^{l+1} - z^l`.
    pub fn increment_var(&self, l: usize) -> f64 {
        let n = self.n as f64;
        let d: Vec<f64> = self.z[l + 1].iter().zip(&self.z[l]).map(|(a, b)| a - b).collect();
        let mean = d.iter().sum::<f64>() / n;
        d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    }
}

fn record(d: &DisorderSample, cal: &SECalibration, l: usize, mv: &[f64]) -> Result<IterRecord> {
    let n = mv.len() as f64;
    if mv.iter().any(|v| !v.is_finite()) {
        return Err(Error::Overflow { iteration: l });
    }
    let energy = d.energy(mv)?;
    if !energy.is_finite() {
        return Err(Error::Overflow { iteration: l });
    }
    Ok(IterRecord {
        iter: l,
        norm_m: mv.iter().map(|v| v * v).sum::<f64>() / n,
        energy,
        se_pred_energy: cal.pred_energy[l],
        max_abs_m: mv.iter().fold(0.0, |a, v| a.max(v.abs())),
    })
}

pub fn run_iamp(d: &DisorderSample, drive: Drive<'_>, cal: &SECalibration, cfg: &IampConfig) -> Result<IampRun> {
    run_iamp_with(d, drive, cal, cfg, |_| {})
}

/// [`run_iamp`] calling `on_iter` with each record as soon as it exists.
pub fn run_iamp_with<F>(
    d: &DisorderSample,
    drive: Drive<'_>,
    cal: &SECalibration,
    cfg: &IampConfig,
    mut on_iter: F,
) -> Result<IampRun>
where
    F: FnMut(&IterRecord),
{
    if d.mixture() != cal.mixture() {
        return Err(Error::InvalidArgument("disorder mixture differs from the calibrated one".into()));
    }
    if cfg.n_iter() != cal.n_iter || cfg.delta != cal.delta {
        return Err(Error::InvalidArgument("calibration was computed for a different delta or t_star".into()));
    }
    let n = d.n();
    let delta = cal.delta;
    let l_star = cal.n_iter;
    let mut run = IampRun {
        n,
        delta,
        z: vec![vec![0.0; n]],
        x: vec![vec![0.0; n]],
        m: vec![vec![delta.sqrt(); n]],
        records: Vec::with_capacity(l_star + 1),
    };
    let r0 = record(d, cal, 0, &run.m[0])?;
    on_iter(&r0);
    run.records.push(r0);
    for l in 0..l_star {
        let mut z = d.grad(&run.m[l])?;
        for (j, &dj) in cal.onsager[l].iter().enumerate().skip(1) {
            if dj != 0.0 {
                for (zi, mi) in z.iter_mut().zip(&run.m[j - 1]) {
                    *zi -= dj * mi;
                }
            }
        }
        let at = drive.at(l as f64 * delta);
        let (zl, xl, ml) = (&run.z[l], &run.x[l], &run.m[l]);
        let mut x = vec![0.0; n];
        let mut mv = vec![0.0; n];
        for i in 0..n {
            let dz = z[i] - zl[i];
            let u = cal.u_scaled(&at, l, xl[i]);
            x[i] = xl[i] + at.v(xl[i]) * delta + dz;
            mv[i] = ml[i] + u * dz;
        }
        let rec = record(d, cal, l + 1, &mv)?;
        if z.iter().chain(&x).any(|v| !v.is_finite()) {
            return Err(Error::Overflow { iteration: l + 1 });
        }
        on_iter(&rec);
        run.records.push(rec);
        run.z.push(z);
        run.x.push(x);
        run.m.push(mv);
    }
    Ok(run)
}

/// A test function of one coordinate's history `(z^0..z^L, m^0..m^L)`.
pub struct SeTest {
    pub name: String,
    pub f: Box<dyn Fn(&[f64], &[f64]) -> f64 + Sync>,
}

impl SeTest {
    pub fn new(name: impl Into<String>, f: impl Fn(&[f64], &[f64]) -> f64 + Sync + 'static) -> Self {
        Self { name: name.into(), f: Box::new(f) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeCheckRow {
    pub name: String,
    pub empirical: f64,
    pub predicted: f64,
    pub std_error: f64,
    pub z_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeCheckReport {
    pub rows: Vec<SeCheckRow>,
    pub max_abs_z: f64,
    pub max_norm_deviation: f64,
}

fn mean_and_var(vals: impl Iterator<Item = f64>) -> (f64, f64, f64) {
    let (mut n, mut s, mut s2) = (0.0, 0.0, 0.0);
    for v in vals {
        n += 1.0;
        s += v;
        s2 += v * v;
    }
    let mean = s / n;
    (mean, (s2 / n - mean * mean).max(0.0), n)
}

/// Squared increments at every step, `m^l m^j` on a coarse grid of pairs,
/// and the constant 1.
pub fn standard_tests(n_iter: usize) -> Vec<SeTest> {
    let mut tests = vec![SeTest::new("one", |_, _| 1.0)];
    for l in 0..n_iter {
        tests.push(SeTest::new(format!("dz2_{l}"), move |z, _| (z[l + 1] - z[l]).powi(2)));
    }
    let stride = (n_iter / 5).max(1);
    for l in (stride..=n_iter).step_by(stride) {
        for j in (0..=l).step_by(stride) {
            tests.push(SeTest::new(format!("mm_{l}_{j}"), move |_, m| m[l] * m[j]));
        }
    }
    tests
}

/// Coordinate averages of each test over the run against the kept
/// state-evolution paths. The z-score uses both sampling errors.
pub fn se_check(run: &IampRun, cal: &SECalibration, tests: &[SeTest]) -> SeCheckReport {
    let w = run.m.len();
    let coords: Vec<(Vec<f64>, Vec<f64>)> = (0..run.n)
        .map(|i| (run.z.iter().map(|z| z[i]).collect(), run.m.iter().map(|m| m[i]).collect()))
        .collect();
    let rows: Vec<SeCheckRow> = tests
        .iter()
        .map(|t| {
            let (e, ev, en) = mean_and_var(coords.iter().map(|(z, m)| (t.f)(z, m)));
            let (p, pv, pn) = mean_and_var((0..cal.n_kept).map(|k| {
                let (z, m) = cal.kept_path(k);
                (t.f)(&z[..w], &m[..w])
            }));
            let se = (ev / en + pv / pn).sqrt();
            let z_score = if se > 0.0 { (e - p) / se } else if e == p { 0.0 } else { f64::INFINITY };
            SeCheckRow { name: t.name.clone(), empirical: e, predicted: p, std_error: se, z_score }
        })
        .collect();
    let max_abs_z = rows.iter().map(|r| r.z_score.abs()).fold(0.0, f64::max);
    SeCheckReport { rows, max_abs_z, max_norm_deviation: run.max_norm_deviation() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_cfg() -> IampConfig {
        IampConfig { delta: 0.1, t_star: 0.9, n_se_samples: 4000, seed: 3, n_se_keep: 1000 }
    }

    #[test]
    fn first_increment_variance() {
        let m = Mixture::new([(2, 1.0), (3, 0.7)]).unwrap();
        let cfg = small_cfg();
        let cal = calibrate(&m, Drive::Spherical(&m), &cfg).unwrap();
        assert_relative_eq!(cal.increment_vars[0], m.xi_prime(cfg.delta), epsilon = 1e-15);
        assert_eq!(cal.n_iter, 9);
        for row in &cal.onsager {
            assert_eq!(row[0], 0.0);
        }
    }

    #[test]
    fn spherical_sensitivities_are_differences() {
        let m = Mixture::new([(2, 1.0), (4, 1.0)]).unwrap();
        let cfg = small_cfg();
        let cal = calibrate(&m, Drive::Spherical(&m), &cfg).unwrap();
        let u: Vec<f64> = (0..cal.n_iter)
            .map(|l| if l == 0 { cal.u0 } else { m.xi_second(l as f64 * cfg.delta).powf(-0.5) / cal.sigma[l] })
            .collect();
        for l in 1..cal.n_iter {
            for j in 1..=l {
                let e = cal.onsager[l][j] / m.xi_second(j as f64 * cfg.delta);
                let expect = u[j - 1] - if j < l { u[j] } else { 0.0 };
                assert_relative_eq!(e, expect, epsilon = 1e-12);
                let bump = bump_sensitivity(Drive::Spherical(&m), &cal, &cfg, l, j, 1e-4 * cfg.delta.sqrt(), 50).unwrap();
                assert!((bump - expect).abs() <= 1e-6, "l {l} j {j}: {bump} vs {expect}");
            }
        }
    }

    #[test]
    fn spherical_rescaling_is_near_one() {
        let m = Mixture::sk();
        let cfg = IampConfig { delta: 0.01, t_star: 0.5, ..small_cfg() };
        let cal = calibrate(&m, Drive::Spherical(&m), &cfg).unwrap();
        for s in &cal.sigma[1..] {
            assert!((s * s - 1.0).abs() <= 0.03, "{s}");
        }
        for l in 0..=cal.n_iter {
            let q = (l + 1) as f64 * cfg.delta;
            assert!((cal.se_moments[l][l] - q).abs() <= 0.06 * q, "{l}: {}", cal.se_moments[l][l]);
        }
    }

    #[test]
    fn spherical_sk_is_a_chebyshev_recursion() {
        // With u constant the increments obey D_l = A D_{l-1} - D_{l-2},
        // A = grad / sqrt(2), D_{-1} = m^0.
        let m = Mixture::sk();
        let cfg = IampConfig { delta: 0.05, t_star: 0.5, ..small_cfg() };
        let cal = calibrate(&m, Drive::Spherical(&m), &cfg).unwrap();
        let n = 300;
        let d = DisorderSample::sample(n, &m, 11).unwrap();
        let mut streamed = Vec::new();
        let run = run_iamp_with(&d, Drive::Spherical(&m), &cal, &cfg, |r| streamed.push(*r)).unwrap();
        assert_eq!(streamed, run.records);
        assert_eq!(run.n_iter(), 10);
        assert!(run.m[0].iter().all(|&v| v == cfg.delta.sqrt()));
        let a = |v: &[f64]| d.grad(v).unwrap().iter().map(|x| x / 2f64.sqrt()).collect::<Vec<f64>>();
        let mut prev = run.m[0].clone();
        let mut cur = a(&prev);
        let mut acc = prev.clone();
        for l in 1..=10 {
            acc.iter_mut().zip(&cur).for_each(|(s, c)| *s += c);
            for (x, y) in acc.iter().zip(&run.m[l]) {
                assert!((x - y).abs() <= 1e-10);
            }
            let next: Vec<f64> = a(&cur).iter().zip(&prev).map(|(x, y)| x - y).collect();
            prev = std::mem::replace(&mut cur, next);
        }
        let report = se_check(&run, &cal, &standard_tests(cal.n_iter));
        assert_eq!(report.rows[0].empirical, 1.0);
        assert_eq!(report.rows[0].predicted, 1.0);
        assert_eq!(report.rows[0].z_score, 0.0);
    }

    #[test]
    fn deterministic() {
        let m = Mixture::sk();
        let cfg = IampConfig { delta: 0.1, t_star: 0.5, ..small_cfg() };
        let cal = calibrate(&m, Drive::Spherical(&m), &cfg).unwrap();
        let d = DisorderSample::sample(50, &m, 1).unwrap();
        let a = run_iamp(&d, Drive::Spherical(&m), &cal, &cfg).unwrap();
        let b = run_iamp(&d, Drive::Spherical(&m), &calibrate(&m, Drive::Spherical(&m), &cfg).unwrap(), &cfg).unwrap();
        assert_eq!(a.m, b.m);
    }

    #[test]
    fn rejects_mismatch() {
        let m = Mixture::sk();
        let cfg = IampConfig { delta: 0.1, t_star: 0.5, ..small_cfg() };
        let cal = calibrate(&m, Drive::Spherical(&m), &cfg).unwrap();
        let other = Mixture::pure(3, 1.0).unwrap();
        let d = DisorderSample::sample(10, &other, 1).unwrap();
        assert!(run_iamp(&d, Drive::Spherical(&m), &cal, &cfg).is_err());
        let cfg2 = IampConfig { t_star: 0.7, ..cfg };
        let d = DisorderSample::sample(10, &m, 1).unwrap();
        assert!(run_iamp(&d, Drive::Spherical(&m), &cal, &cfg2).is_err());
        assert!(IampConfig { delta: 0.0, ..cfg }.validate(&m).is_err());
    }
}
