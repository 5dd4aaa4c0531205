//! The mixture function `xi(x) = sum_k c_k^2 x^k` and its derivatives.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest degree accepted by [`Mixture::new`] unless overridden.
pub const DEFAULT_MAX_DEGREE: u32 = 6;

/// Finite mixture of p-spin degrees. Stores the raw coefficients `c_k`
/// (not their squares) on a sparse, increasing degree list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    terms: Vec<(u32, f64)>,
}

impl Mixture {
    /// Builds a mixture from `(degree, coefficient)` pairs. Zero coefficients
    /// are dropped; repeated degrees are rejected.
    pub fn new<I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u32, f64)>,
    {
        Self::with_max_degree(pairs, DEFAULT_MAX_DEGREE)
    }

    pub fn with_max_degree<I>(pairs: I, max_degree: u32) -> Result<Self>
    where
        I: IntoIterator<Item = (u32, f64)>,
    {
        let mut map = BTreeMap::new();
        for (k, c) in pairs {
            if k < 2 {
                return Err(Error::InvalidMixture(format!("degree {k} < 2")));
            }
            if k > max_degree {
                return Err(Error::InvalidMixture(format!(
                    "degree {k} exceeds the supported maximum {max_degree}"
                )));
            }
            if !c.is_finite() {
                return Err(Error::InvalidMixture(format!("coefficient for degree {k} is not finite")));
            }
            if map.insert(k, c).is_some() {
                return Err(Error::InvalidMixture(format!("degree {k} given twice")));
            }
        }
        let terms: Vec<_> = map.into_iter().filter(|&(_, c)| c != 0.0).collect();
        if terms.is_empty() {
            return Err(Error::InvalidMixture("all coefficients vanish".into()));
        }
        Ok(Self { terms })
    }

    /// `xi(t) = t^2`.
    pub fn sk() -> Self {
        Self { terms: vec![(2, 1.0)] }
    }

    /// `xi(t) = c^2 t^p`.
    pub fn pure(p: u32, c: f64) -> Result<Self> {
        Self::new([(p, c)])
    }

    pub fn terms(&self) -> &[(u32, f64)] {
        &self.terms
    }

    pub fn degrees(&self) -> impl Iterator<Item = u32> + '_ {
        self.terms.iter().map(|&(k, _)| k)
    }

    pub fn coeff(&self, k: u32) -> f64 {
        self.terms.iter().find(|&&(d, _)| d == k).map_or(0.0, |&(_, c)| c)
    }

    pub fn k_max(&self) -> u32 {
        self.terms.last().map(|&(k, _)| k).unwrap()
    }

    pub fn k_min(&self) -> u32 {
        self.terms[0].0
    }

    /// True when every degree is even, so that `H(-x) = H(x)`.
    pub fn is_even(&self) -> bool {
        self.terms.iter().all(|&(k, _)| k % 2 == 0)
    }

    /// Horner evaluation of `sum_k w_k x^(k - shift)` over the sparse list.
    fn horner(&self, x: f64, shift: u32, weight: impl Fn(u32, f64) -> f64) -> f64 {
        let mut acc = 0.0;
        let mut prev = self.k_max();
        for &(k, c) in self.terms.iter().rev() {
            acc *= x.powi((prev - k) as i32);
            acc += weight(k, c);
            prev = k;
        }
        acc * x.powi((prev - shift) as i32)
    }

    pub fn xi(&self, x: f64) -> f64 {
        self.horner(x, 0, |_, c| c * c)
    }

    pub fn xi_prime(&self, x: f64) -> f64 {
        self.horner(x, 1, |k, c| k as f64 * c * c)
    }

    pub fn xi_second(&self, x: f64) -> f64 {
        self.horner(x, 2, |k, c| (k * (k - 1)) as f64 * c * c)
    }

    pub fn xi_third(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for &(k, c) in &self.terms {
            if k >= 3 {
                acc += (k * (k - 1) * (k - 2)) as f64 * c * c * x.powi(k as i32 - 3);
            }
        }
        acc
    }

    /// Antiderivative of `t xi''(t)`, i.e. `sum_k (k-1) c_k^2 t^k`.
    fn t_xi_second_antiderivative(&self, t: f64) -> f64 {
        self.horner(t, 0, |k, c| (k - 1) as f64 * c * c)
    }

    /// Exact `int_a^b t xi''(t) dt`.
    pub fn integral_t_xi_second(&self, a: f64, b: f64) -> f64 {
        self.t_xi_second_antiderivative(b) - self.t_xi_second_antiderivative(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn xi_examples() {
        let sk = Mixture::sk();
        assert_eq!(sk.xi(0.5), 0.25);
        let m = Mixture::new([(2, 1.0), (4, 1.0)]).unwrap();
        assert_eq!(m.xi(1.0), 2.0);
        assert_eq!(m.xi(0.0), 0.0);
        assert_eq!(m.xi_prime(1.0), 6.0);
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(sk.xi_second(t), 2.0);
        }
        let p4 = Mixture::pure(4, 1.0).unwrap();
        assert_relative_eq!(p4.xi_second(0.5), 3.0, epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Mixture::new([(1, 1.0)]).is_err());
        assert!(Mixture::new([(2, f64::NAN)]).is_err());
        assert!(Mixture::new([(2, 0.0)]).is_err());
        assert!(Mixture::new([(7, 1.0)]).is_err());
        assert!(Mixture::new([(2, 1.0), (2, 0.5)]).is_err());
        assert!(Mixture::with_max_degree([(8, 1.0)], 8).is_ok());
    }

    #[test]
    fn integral_matches_quadrature() {
        let m = Mixture::new([(2, 0.7), (3, 0.4), (5, 1.1)]).unwrap();
        let (a, b) = (0.15, 0.85);
        let n = 20_000;
        let h = (b - a) / n as f64;
        let simpson: f64 = (0..=n)
            .map(|i| {
                let t = a + i as f64 * h;
                let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                w * t * m.xi_second(t)
            })
            .sum::<f64>()
            * h
            / 3.0;
        assert_relative_eq!(m.integral_t_xi_second(a, b), simpson, max_relative = 1e-12);
    }

    fn arb_mixture() -> impl Strategy<Value = Mixture> {
        prop::collection::btree_map(2u32..=6, 0.05f64..2.0, 1..4)
            .prop_map(|m| Mixture::new(m).unwrap())
    }

    fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    proptest! {
        #[test]
        fn derivatives_match_finite_differences(m in arb_mixture(), x in 0.05f64..1.0) {
            let h = 1e-5;
            let d1 = central(|t| m.xi(t), x, h);
            let d2 = central(|t| m.xi_prime(t), x, h);
            let d3 = central(|t| m.xi_second(t), x, h);
            prop_assert!((d1 - m.xi_prime(x)).abs() <= 1e-8 * m.xi_prime(x).abs().max(1.0));
            prop_assert!((d2 - m.xi_second(x)).abs() <= 1e-8 * m.xi_second(x).abs().max(1.0));
            prop_assert!((d3 - m.xi_third(x)).abs() <= 1e-7 * m.xi_third(x).abs().max(1.0));
        }

        #[test]
        fn xi_second_positive(m in arb_mixture(), x in 1e-3f64..=1.0) {
            prop_assert!(m.xi_second(x) > 0.0);
        }
    }
}
