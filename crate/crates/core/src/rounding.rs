//! From the last message-passing iterate to a feasible point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{DisorderSample, SpinConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Ising,
    Spherical,
}

/// Entrywise clip to `[-1, 1]`.
pub fn threshold(m: &[f64]) -> Vec<f64> {
    m.iter().map(|v| v.clamp(-1.0, 1.0)).collect()
}

/// Sets `x_i = sign(Delta_i H~(x))` for `i` in `order` (index order when
/// `None`), with `sign(0) = +1`. Returns the spins and `H~(x)` after each step,
/// starting with the input value.
pub fn sequential_round_traced(
    d: &DisorderSample,
    m_hat: &[f64],
    order: Option<&[usize]>,
) -> Result<(SpinConfig, Vec<f64>)> {
    let n = d.n();
    if m_hat.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: m_hat.len() });
    }
    if let Some(bad) = m_hat.iter().find(|v| !(v.abs() <= 1.0)) {
        return Err(Error::InvalidArgument(format!("entry {bad} outside [-1, 1]")));
    }
    let natural: Vec<usize>;
    let order = match order {
        Some(o) => {
            let mut seen = vec![false; n];
            for &i in o {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidArgument("rounding order must be a permutation".into()));
                }
            }
            if o.len() != n {
                return Err(Error::InvalidArgument("rounding order must be a permutation".into()));
            }
            o
        }
        None => {
            natural = (0..n).collect();
            &natural
        }
    };
    let mut x = m_hat.to_vec();
    let mut h = d.multilinear(&x)?;
    let mut trace = Vec::with_capacity(n + 1);
    trace.push(h);
    for &i in order {
        let delta = d.partial_multilinear(&x, i)?;
        let s = if delta >= 0.0 { 1.0 } else { -1.0 };
        h += (s - x[i]) * delta;
        x[i] = s;
        trace.push(h);
    }
    Ok((SpinConfig::from_signs(&x), trace))
}

pub fn sequential_round(d: &DisorderSample, m_hat: &[f64]) -> Result<SpinConfig> {
    Ok(sequential_round_traced(d, m_hat, None)?.0)
}

/// `sqrt(N) m / |m|`.
pub fn spherical_project(m: &[f64]) -> Result<Vec<f64>> {
    let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    let s = (m.len() as f64).sqrt() / norm;
    Ok(m.iter().map(|v| v * s).collect())
}

/// Energies are `H / N` (and `H~ / N`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundingReport {
    pub mode: Mode,
    pub m_hat: Vec<f64>,
    /// Final point: spins for Ising, the projected vector for spherical.
    pub output: Vec<f64>,
    pub energy_iterate: f64,
    pub energy_m_hat: f64,
    pub multilinear_m_hat: Option<f64>,
    pub multilinear_output: Option<f64>,
    pub energy_output: f64,
    pub clip_fraction: f64,
    /// Largest decrease of `H~` over one rounding step, 0 when monotone.
    pub max_step_decrease: f64,
}

impl RoundingReport {
    pub fn spins(&self) -> Option<SpinConfig> {
        match self.mode {
            Mode::Ising => Some(SpinConfig::from_signs(&self.output)),
            Mode::Spherical => None,
        }
    }
}

/// Threshold and round (Ising) or project (spherical) the iterate `m`.
pub fn round_pipeline(d: &DisorderSample, m: &[f64], mode: Mode) -> Result<RoundingReport> {
    let n = d.n() as f64;
    let energy_iterate = d.energy(m)?;
    match mode {
        Mode::Ising => {
            let m_hat = threshold(m);
            let clipped = m.iter().filter(|v| v.abs() > 1.0).count();
            let (sigma, trace) = sequential_round_traced(d, &m_hat, None)?;
            let output = sigma.to_vec();
            let max_step_decrease = trace.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
            let multilinear_output = d.multilinear(&output)? / n;
            // The incremental trace must agree with a fresh evaluation.
            let drift = (trace[trace.len() - 1] / n - multilinear_output).abs();
            if drift > 1e-9 * n.max(1.0) {
                return Err(Error::InvalidArgument(format!("incremental H~ drifted by {drift}")));
            }
            Ok(RoundingReport {
                mode,
                energy_m_hat: d.energy(&m_hat)?,
                multilinear_m_hat: Some(trace[0] / n),
                multilinear_output: Some(multilinear_output),
                energy_output: d.energy(&output)?,
                clip_fraction: clipped as f64 / n,
                m_hat,
                output,
                energy_iterate,
                max_step_decrease,
            })
        }
        Mode::Spherical => {
            let output = spherical_project(m)?;
            Ok(RoundingReport {
                mode,
                m_hat: m.to_vec(),
                energy_m_hat: energy_iterate,
                multilinear_m_hat: None,
                multilinear_output: None,
                energy_output: d.energy(&output)?,
                output,
                energy_iterate,
                clip_fraction: 0.0,
                max_step_decrease: 0.0,
            })
        }
    }
}
