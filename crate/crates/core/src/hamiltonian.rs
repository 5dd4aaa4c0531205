//! Gaussian disorder and the mixed p-spin Hamiltonian.
//!
//! Each degree `k` keeps a dense, asymmetric tensor `G` of i.i.d. standard
//! normals in row-major order. The symmetric coupling tensor is never
//! materialized: for any `x`,
//!
//! ```text
//! H_N(x) = sum_k c_k N^{-(k-1)/2} <G, x^{(x)k}>
//! ```
//!
//! and the gradient sums the `k` one-slot-free contractions of `G`.
//! The multilinear variant restricts every sum to tuples of distinct indices.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mixture::Mixture;

/// Default refusal threshold for the dense tensors: 4 GiB.
pub const DEFAULT_BYTE_BUDGET: u128 = 4 << 30;

/// Entries per independently keyed RNG block.
const RNG_BLOCK: usize = 1 << 16;

const MAGIC: &[u8; 4] = b"PSPN";
const FORMAT_VERSION: u32 = 1;

/// Dense tensor of one degree together with its prefactor `c_k N^{-(k-1)/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DegreeTensor {
    pub k: u32,
    pub coeff: f64,
    scale: f64,
    data: Vec<f64>,
}

impl DegreeTensor {
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// One realization of the disorder.
#[derive(Debug, Clone, PartialEq)]
pub struct DisorderSample {
    n: usize,
    mixture: Mixture,
    seed: u64,
    tensors: Vec<DegreeTensor>,
}

/// A point of the hypercube.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SpinConfig {
    sigma: Vec<i8>,
}

impl SpinConfig {
    pub fn new(sigma: Vec<i8>) -> Result<Self> {
        if let Some(bad) = sigma.iter().find(|&&s| s != 1 && s != -1) {
            return Err(Error::InvalidArgument(format!("spin value {bad} is not +-1")));
        }
        Ok(Self { sigma })
    }

    /// Maps `x_i >= 0` to `+1` and negative entries to `-1`.
    pub fn from_signs(x: &[f64]) -> Self {
        Self { sigma: x.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect() }
    }

    pub fn spins(&self) -> &[i8] {
        &self.sigma
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.sigma.iter().map(|&s| s as f64).collect()
    }
}

/// Bytes needed to store every `G^(k)` at dimension `n`.
pub fn tensor_bytes(n: usize, mixture: &Mixture) -> u128 {
    mixture.degrees().map(|k| (n as u128).pow(k) * 8).sum()
}

fn degree_scale(n: usize, k: u32, c: f64) -> f64 {
    c * (n as f64).powf(-((k - 1) as f64) / 2.0)
}

fn fill_gaussian(data: &mut [f64], seed: u64, k: u32) {
    data.par_chunks_mut(RNG_BLOCK).enumerate().for_each(|(block, chunk)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((k as u64) << 48) | block as u64);
        for v in chunk {
            *v = rng.sample(StandardNormal);
        }
    });
}

impl DisorderSample {
    /// Samples every `G^(k)` with the default byte budget.
    pub fn sample(n: usize, mixture: &Mixture, seed: u64) -> Result<Self> {
        Self::sample_with_budget(n, mixture, seed, DEFAULT_BYTE_BUDGET)
    }

    pub fn sample_with_budget(n: usize, mixture: &Mixture, seed: u64, budget: u128) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!("dimension n = {n} must be at least 2")));
        }
        let requested = tensor_bytes(n, mixture);
        if requested > budget {
            return Err(Error::BudgetExceeded { requested, budget });
        }
        let tensors = mixture
            .terms()
            .iter()
            .map(|&(k, c)| {
                let mut data = vec![0.0; n.pow(k)];
                fill_gaussian(&mut data, seed, k);
                DegreeTensor { k, coeff: c, scale: degree_scale(n, k, c), data }
            })
            .collect();
        Ok(Self { n, mixture: mixture.clone(), seed, tensors })
    }

    /// Builds a sample from explicit tensors, one per mixture degree in
    /// increasing order. Used for fixtures and by the file reader.
    pub fn from_tensors(n: usize, mixture: &Mixture, seed: u64, tensors: Vec<Vec<f64>>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        if tensors.len() != mixture.terms().len() {
            return Err(Error::InvalidArgument(format!(
                "{} tensors supplied for {} degrees",
                tensors.len(),
                mixture.terms().len()
            )));
        }
        let tensors = mixture
            .terms()
            .iter()
            .zip(tensors)
            .map(|(&(k, c), data)| {
                if data.len() != n.pow(k) {
                    return Err(Error::DimensionMismatch { expected: n.pow(k), got: data.len() });
                }
                Ok(DegreeTensor { k, coeff: c, scale: degree_scale(n, k, c), data })
            })
            .collect::<Result<_>>()?;
        Ok(Self { n, mixture: mixture.clone(), seed, tensors })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mixture(&self) -> &Mixture {
        &self.mixture
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tensors(&self) -> &[DegreeTensor] {
        &self.tensors
    }

    pub fn tensor(&self, k: u32) -> Option<&DegreeTensor> {
        self.tensors.iter().find(|t| t.k == k)
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: x.len() });
        }
        Ok(())
    }

    /// `H_N(x)`, not normalized.
    pub fn hamiltonian(&self, x: &[f64]) -> Result<f64> {
        self.check_len(x)?;
        Ok(self
            .tensors
            .iter()
            .map(|t| {
                let r1 = contract_trailing(&t.data, self.n, t.k as usize - 1, x);
                t.scale * dot(&r1, x)
            })
            .sum())
    }

    /// `H_N(x) / N`.
    pub fn energy(&self, x: &[f64]) -> Result<f64> {
        Ok(self.hamiltonian(x)? / self.n as f64)
    }

    /// `grad H_N(x)`.
    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.energy_and_grad(x)?.1)
    }

    /// Returns `(H_N(x)/N, grad H_N(x))`; the energy comes for free from the
    /// first contraction chain.
    pub fn energy_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_len(x)?;
        let n = self.n;
        let mut grad = vec![0.0; n];
        let mut h = 0.0;
        for t in &self.tensors {
            let (value, g) = value_and_slot_contractions(&t.data, n, t.k as usize, x);
            h += t.scale * value;
            for (gi, v) in grad.iter_mut().zip(g) {
                *gi += t.scale * v;
            }
        }
        Ok((h / n as f64, grad))
    }

    /// Multilinear Hamiltonian `H~_N(x)` restricted to distinct index tuples,
    /// not normalized.
    pub fn multilinear(&self, x: &[f64]) -> Result<f64> {
        self.check_len(x)?;
        Ok(self
            .tensors
            .iter()
            .map(|t| t.scale * distinct_sum(&t.data, self.n, t.k as usize, x, None))
            .sum())
    }

    /// `H~_N(x) / N`.
    pub fn energy_multilinear(&self, x: &[f64]) -> Result<f64> {
        Ok(self.multilinear(x)? / self.n as f64)
    }

    /// Coefficient of `x_i` in `H~_N(x)`; independent of `x_i` itself.
    pub fn partial_multilinear(&self, x: &[f64], i: usize) -> Result<f64> {
        self.check_len(x)?;
        if i >= self.n {
            return Err(Error::IndexOutOfRange { index: i, n: self.n });
        }
        let k_tot: f64 = self
            .tensors
            .iter()
            .map(|t| {
                let k = t.k as usize;
                let s: f64 = (0..k).map(|slot| distinct_sum(&t.data, self.n, k, x, Some((slot, i)))).sum();
                t.scale * s
            })
            .sum();
        Ok(k_tot)
    }

    /// Power-iteration estimate of `N^{(k-2)/2} ||W^(k)||_op`, a lower bound on
    /// the normalized injective norm. Returns 0 when the tensor vanishes.
    pub fn opnorm_estimate(&self, k: u32, iters: usize, seed: u64) -> Result<f64> {
        let t = self
            .tensor(k)
            .ok_or_else(|| Error::InvalidArgument(format!("degree {k} is not part of the mixture")))?;
        if iters == 0 {
            return Err(Error::InvalidArgument("iters must be at least 1".into()));
        }
        let n = self.n;
        let kk = k as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&mut u);
        // shift keeps the iteration monotone for even k (spectrum symmetric)
        let shift = if kk % 2 == 0 { (kk as f64) * 2.0 * (n as f64).sqrt() } else { 0.0 };
        let mut best: f64 = 0.0;
        for _ in 0..iters {
            let (value, mut g) = value_and_slot_contractions(&t.data, n, kk, &u);
            best = best.max(value);
            for (gi, ui) in g.iter_mut().zip(&u) {
                *gi += shift * ui;
            }
            if normalize(&mut g) == 0.0 {
                return Ok(0.0);
            }
            u = g;
        }
        let (value, _) = value_and_slot_contractions(&t.data, n, kk, &u);
        best = best.max(value);
        let factorial: f64 = (1..=kk).map(|v| v as f64).product();
        Ok(factorial * best / (n as f64).sqrt())
    }

    /// Writes the sample in the little-endian `PSPN` format.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u32::<LittleEndian>(self.n as u32)?;
        w.write_u32::<LittleEndian>(self.mixture.terms().len() as u32)?;
        for &(k, c) in self.mixture.terms() {
            w.write_u32::<LittleEndian>(k)?;
            w.write_f64::<LittleEndian>(c)?;
        }
        w.write_u64::<LittleEndian>(self.seed)?;
        for t in &self.tensors {
            for &v in &t.data {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let n = r.read_u32::<LittleEndian>()? as usize;
        let n_terms = r.read_u32::<LittleEndian>()? as usize;
        let mut pairs = Vec::with_capacity(n_terms);
        for _ in 0..n_terms {
            let k = r.read_u32::<LittleEndian>()?;
            let c = r.read_f64::<LittleEndian>()?;
            pairs.push((k, c));
        }
        let mixture = Mixture::new(pairs).map_err(|e| Error::Format(e.to_string()))?;
        let seed = r.read_u64::<LittleEndian>()?;
        let mut tensors = Vec::with_capacity(n_terms);
        for k in mixture.degrees() {
            let mut data = vec![0.0; n.pow(k)];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            tensors.push(data);
        }
        Self::from_tensors(n, &mixture, seed, tensors)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Contracts the last axis of a row-major `rows x n` block with `x`.
fn contract_last_axis(t: &[f64], n: usize, x: &[f64]) -> Vec<f64> {
    t.par_chunks(n).map(|row| dot(row, x)).collect()
}

/// Contracts the first axis of a row-major `n x cols` block with `x`.
fn contract_first_axis(t: &[f64], n: usize, x: &[f64]) -> Vec<f64> {
    let cols = t.len() / n;
    let mut out = vec![0.0; cols];
    const CHUNK: usize = 4096;
    out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
        let start = c * CHUNK;
        for (a, &xa) in x.iter().enumerate() {
            let row = &t[a * cols + start..a * cols + start + chunk.len()];
            for (o, &v) in chunk.iter_mut().zip(row) {
                *o += xa * v;
            }
        }
    });
    out
}

/// Contracts the trailing `m` axes with `x`, leaving the leading ones.
fn contract_trailing(t: &[f64], n: usize, m: usize, x: &[f64]) -> Vec<f64> {
    if m == 0 {
        return t.to_vec();
    }
    let mut cur = contract_last_axis(t, n, x);
    for _ in 1..m {
        cur = contract_last_axis(&cur, n, x);
    }
    cur
}

/// Returns `<T, x^k>` and `sum_j T{x on all slots but j}`.
fn value_and_slot_contractions(t: &[f64], n: usize, k: usize, x: &[f64]) -> (f64, Vec<f64>) {
    // suffix[m] holds T with axes m..k contracted, shape n^m (m = 1..k-1)
    let mut suffix: Vec<Vec<f64>> = vec![Vec::new(); k];
    for m in (1..k).rev() {
        let src: &[f64] = if m + 1 == k { t } else { &suffix[m + 1] };
        suffix[m] = contract_last_axis(src, n, x);
    }
    let value = dot(&suffix[1], x);
    let mut grad = suffix[1].clone();
    for slot in 1..k {
        let mut cur: Vec<f64> = if slot + 1 == k {
            contract_first_axis(t, n, x)
        } else {
            contract_first_axis(&suffix[slot + 1], n, x)
        };
        for _ in 1..slot {
            cur = contract_first_axis(&cur, n, x);
        }
        for (g, v) in grad.iter_mut().zip(cur) {
            *g += v;
        }
    }
    (value, grad)
}

/// Sum of `T[i_1..i_k] x_{i_1}..x_{i_k}` over tuples of pairwise distinct
/// indices. With `forced = Some((slot, i))` the given slot is pinned to `i`,
/// its factor is dropped, and no other slot may use `i`.
pub(crate) fn distinct_sum(t: &[f64], n: usize, k: usize, x: &[f64], forced: Option<(usize, usize)>) -> f64 {
    let mut used = [usize::MAX; 8];
    let mut n_used = 0;
    if let Some((_, i)) = forced {
        used[0] = i;
        n_used = 1;
    }
    if k == 1 {
        return match forced {
            Some((_, i)) => t[i],
            None => dot(t, x),
        };
    }
    let top = |a: usize| -> f64 {
        let mut used = used;
        let mut n_used = n_used;
        let (prod, skip) = match forced {
            Some((0, i)) => {
                if a != i {
                    return 0.0;
                }
                (1.0, false)
            }
            _ => {
                if used[..n_used].contains(&a) {
                    return 0.0;
                }
                (x[a], true)
            }
        };
        if skip {
            used[n_used] = a;
            n_used += 1;
        }
        distinct_rec(t, n, k, 1, a, prod, &mut used, n_used, x, forced)
    };
    match forced {
        Some((0, i)) => top(i),
        _ => (0..n).into_par_iter().map(top).sum(),
    }
}

#[allow(clippy::too_many_arguments)]
fn distinct_rec(
    t: &[f64],
    n: usize,
    k: usize,
    depth: usize,
    off: usize,
    prod: f64,
    used: &mut [usize; 8],
    n_used: usize,
    x: &[f64],
    forced: Option<(usize, usize)>,
) -> f64 {
    let base = off * n;
    if depth + 1 == k {
        let row = &t[base..base + n];
        return match forced {
            Some((slot, i)) if slot == depth => prod * row[i],
            _ => {
                let mut s = dot(row, x);
                for &u in &used[..n_used] {
                    s -= row[u] * x[u];
                }
                prod * s
            }
        };
    }
    if let Some((slot, i)) = forced {
        if slot == depth {
            return distinct_rec(t, n, k, depth + 1, base + i, prod, used, n_used, x, forced);
        }
    }
    let mut acc = 0.0;
    for a in 0..n {
        if used[..n_used].contains(&a) {
            continue;
        }
        used[n_used] = a;
        acc += distinct_rec(t, n, k, depth + 1, base + a, prod * x[a], used, n_used + 1, x, forced);
    }
    acc
}
