//! Normal distribution helpers in log space.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2, PI};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Upper tail `P(G > z)`.
pub fn norm_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z * FRAC_1_SQRT_2)
}

pub fn norm_cdf(z: f64) -> f64 {
    norm_sf(-z)
}

/// `ln P(G > z)`, accurate far into the upper tail.
pub fn log_norm_sf(z: f64) -> f64 {
    if z == f64::INFINITY {
        return f64::NEG_INFINITY;
    }
    if z < 35.0 {
        return norm_sf(z).ln();
    }
    let z2 = z * z;
    let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2);
    -0.5 * z2 - z.ln() - LN_SQRT_2PI + series.ln()
}

/// `ln(1 - e^x)` for `x <= 0`.
fn ln_1m_exp(x: f64) -> f64 {
    if x > -LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// `ln(P(a < G < b))` for `a <= b`; either end may be infinite.
pub fn log_norm_interval(a: f64, b: f64) -> f64 {
    if a >= b {
        return f64::NEG_INFINITY;
    }
    if a >= 0.0 {
        let la = log_norm_sf(a);
        la + ln_1m_exp(log_norm_sf(b) - la)
    } else if b <= 0.0 {
        let lb = log_norm_sf(-b);
        lb + ln_1m_exp(log_norm_sf(-a) - lb)
    } else {
        (-(norm_sf(b) + norm_sf(-a))).ln_1p()
    }
}

/// `E|x + sigma G|`.
pub fn folded_normal_mean(x: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return x.abs();
    }
    let r = x / sigma;
    x * libm::erf(r * FRAC_1_SQRT_2) + sigma * (2.0 / PI).sqrt() * (-0.5 * r * r).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn tails() {
        assert_relative_eq!(norm_sf(0.0), 0.5, epsilon = 1e-16);
        assert_relative_eq!(norm_cdf(1.0) - norm_cdf(-1.0), 0.682_689_492_137_085_9, epsilon = 1e-15);
        for z in [34.0, 34.9] {
            let direct = norm_sf(z).ln();
            let z2 = z * z;
            let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2);
            let asym = -0.5 * z2 - f64::ln(z) - LN_SQRT_2PI + series.ln();
            assert_relative_eq!(direct, asym, max_relative = 1e-12);
        }
        assert!(log_norm_sf(60.0).is_finite());
    }

    #[test]
    fn intervals() {
        let p = log_norm_interval(-1.0, 1.0).exp();
        assert_relative_eq!(p, 0.682_689_492_137_085_9, epsilon = 1e-15);
        assert_relative_eq!(log_norm_interval(f64::NEG_INFINITY, f64::INFINITY), 0.0, epsilon = 1e-16);
        let far = log_norm_interval(40.0, 41.0);
        assert_relative_eq!(far, log_norm_sf(40.0), max_relative = 1e-10);
        assert_relative_eq!(log_norm_interval(-3.0, -2.0).exp(), norm_cdf(-2.0) - norm_cdf(-3.0), max_relative = 1e-13);
        assert_eq!(log_norm_interval(1.0, 1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn folded_mean() {
        assert_relative_eq!(folded_normal_mean(0.0, 2f64.sqrt()), 2.0 / PI.sqrt(), epsilon = 1e-15);
        assert_eq!(folded_normal_mean(-3.0, 0.0), 3.0);
        assert!((folded_normal_mean(50.0, 2f64.sqrt()) - 50.0).abs() <= 1e-10);
    }
}
