//! Independent checks: exhaustive enumeration at small `N`, Gauss-Hermite
//! quadrature and central differences.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hamiltonian::{DisorderSample, SpinConfig};

pub const MAX_BRUTE_FORCE_N: usize = 22;

/// `H_N` restricted to the hypercube as a polynomial in distinct spins:
/// `H(s) = constant + sum_S J_S prod_{i in S} s_i`, with `S` a bitmask.
#[derive(Debug, Clone)]
pub struct HypercubePolynomial {
    n: usize,
    constant: f64,
    /// Terms containing spin `i`, for every `i`.
    by_spin: Vec<Vec<(u32, f64)>>,
    terms: Vec<(u32, f64)>,
}

impl HypercubePolynomial {
    /// Folds every index tuple onto the set of indices that occur an odd
    /// number of times, since `s_i^2 = 1`.
    pub fn new(d: &DisorderSample) -> Result<Self> {
        let n = d.n();
        if n > MAX_BRUTE_FORCE_N {
            return Err(Error::TooLargeForEnumeration { n, limit: MAX_BRUTE_FORCE_N });
        }
        let mut coeffs: BTreeMap<u32, f64> = BTreeMap::new();
        for t in d.tensors() {
            let k = t.k as usize;
            let mut idx = vec![0usize; k];
            for &g in t.data() {
                let mask = idx.iter().fold(0u32, |m, &i| m ^ (1 << i));
                *coeffs.entry(mask).or_insert(0.0) += t.scale() * g;
                for slot in (0..k).rev() {
                    idx[slot] += 1;
                    if idx[slot] < n {
                        break;
                    }
                    idx[slot] = 0;
                }
            }
        }
        let constant = coeffs.remove(&0).unwrap_or(0.0);
        let terms: Vec<(u32, f64)> = coeffs.into_iter().filter(|&(_, c)| c != 0.0).collect();
        let by_spin = (0..n).map(|i| terms.iter().copied().filter(|&(s, _)| s & (1 << i) != 0).collect()).collect();
        Ok(Self { n, constant, by_spin, terms })
    }

    /// `H` at the configuration whose set bits are the `-1` spins.
    pub fn value(&self, bits: u32) -> f64 {
        self.constant + self.terms.iter().map(|&(s, c)| if (bits & s).count_ones() % 2 == 0 { c } else { -c }).sum::<f64>()
    }

    /// `H(bits with spin i flipped) - H(bits)`.
    pub fn flip_delta(&self, bits: u32, i: usize) -> f64 {
        -2.0 * self.by_spin[i].iter().map(|&(s, c)| if (bits & s).count_ones() % 2 == 0 { c } else { -c }).sum::<f64>()
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

fn bits_to_spins(bits: u32, n: usize) -> SpinConfig {
    SpinConfig::new((0..n).map(|i| if bits & (1 << i) != 0 { -1 } else { 1 }).collect()).expect("+-1 by construction")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BruteForceResult {
    /// `max H / N`.
    pub opt_value: f64,
    pub argmax: SpinConfig,
    /// `H / N` for every configuration; entry `b` has spin `i` equal to `-1`
    /// exactly when bit `i` of `b` is set.
    pub histogram: Option<Vec<f64>>,
}

/// Exact `max_s H(s) / N` by Gray-code enumeration. The leading spins are
/// fixed per worker and results merge in a fixed order; ties go to the
/// smallest configuration index.
pub fn brute_force_opt(d: &DisorderSample, histogram: bool) -> Result<BruteForceResult> {
    let poly = HypercubePolynomial::new(d)?;
    let n = poly.n;
    let lead = n.min(4);
    let low = n - lead;
    let per = 1usize << low;
    let nf = n as f64;
    let blocks: Vec<(f64, u32, Vec<f64>)> = (0..1u32 << lead)
        .into_par_iter()
        .map(|prefix| {
            let base = prefix << low;
            let mut hist = if histogram { vec![0.0; per] } else { Vec::new() };
            let mut gray = 0u32;
            let mut h = poly.value(base);
            let (mut best, mut best_bits) = (h, base);
            if histogram {
                hist[0] = h / nf;
            }
            for step in 1..per as u32 {
                let i = step.trailing_zeros() as usize;
                h += poly.flip_delta(base | gray, i);
                gray ^= 1 << i;
                let bits = base | gray;
                if h > best || (h == best && bits < best_bits) {
                    best = h;
                    best_bits = bits;
                }
                if histogram {
                    hist[gray as usize] = h / nf;
                }
            }
            (best, best_bits, hist)
        })
        .collect();
    let (mut best, mut best_bits) = (f64::NEG_INFINITY, 0u32);
    for &(h, b, _) in &blocks {
        if h > best || (h == best && b < best_bits) {
            best = h;
            best_bits = b;
        }
    }
    let histogram = histogram.then(|| blocks.into_iter().flat_map(|(_, _, h)| h).collect());
    Ok(BruteForceResult { opt_value: best / nf, argmax: bits_to_spins(best_bits, n), histogram })
}

/// Nodes and weights for `E f(G)`, `G` standard normal, by the
/// Golub-Welsch eigenvalue method.
pub fn gauss_hermite_rule(nodes: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(11..=301).contains(&nodes) {
        return Err(Error::InvalidArgument(format!("node count {nodes} outside [11, 301]")));
    }
    let mut j = DMatrix::<f64>::zeros(nodes, nodes);
    for k in 1..nodes {
        let b = (k as f64).sqrt();
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..nodes).map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    Ok(pairs.into_iter().map(|(x, w)| (x, w / total)).unzip())
}

/// `E f(sigma G)` by Gauss-Hermite quadrature.
pub fn gauss_hermite_expect(f: impl Fn(f64) -> f64, sigma: f64, nodes: usize) -> Result<f64> {
    let (x, w) = gauss_hermite_rule(nodes)?;
    Ok(x.iter().zip(&w).map(|(&xi, &wi)| wi * f(sigma * xi)).sum())
}

/// `(f(x + h) - f(x - h)) / (2 h)`.
pub fn finite_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h = {h} must be positive")));
    }
    Ok((f(x + h) - f(x - h)) / (2.0 * h))
}
