//! Scalar special functions: the standard normal density and distribution
//! function, the Mills-type ratio φ/Φ, and the χ² distribution function.
//!
//! Φ is evaluated through the complementary error function of `libm` (the
//! musl/fdlibm rational approximations, under 1 ulp), which keeps relative
//! accuracy deep into the lower tail. Below `MILLS_SWITCH`
//! the ratio φ(x)/Φ(x) is evaluated from Laplace's continued fraction
//! instead, so it never degenerates into 0/0.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::{gamma_lr, gamma_ur};

/// 1/√(2π)
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
/// √(2/π), the mean of a standard half-normal variate.
pub const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

const MILLS_SWITCH: f64 = -8.0;

#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[inline]
pub fn ln_norm_pdf(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * (2.0 * PI).ln()
}

#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Returns `(φ(x), Φ(x))`.
pub fn normal_pdf_cdf(x: f64) -> (f64, f64) {
    (norm_pdf(x), norm_cdf(x))
}

/// Φ(x)/φ(x) for x ≤ -8 by Laplace's continued fraction
/// 1/(z+1/(z+2/(z+3/(z+...)))) with z = -x.
fn lower_tail_ratio(x: f64) -> f64 {
    let z = -x;
    let mut acc = z;
    for k in (1..=60).rev() {
        acc = z + k as f64 / acc;
    }
    1.0 / acc
}

/// φ(x)/Φ(x). Tends to -x as x → -∞ and to 0 as x → +∞.
pub fn mills(x: f64) -> f64 {
    if x < MILLS_SWITCH {
        1.0 / lower_tail_ratio(x)
    } else {
        norm_pdf(x) / norm_cdf(x)
    }
}

/// ln Φ(x), finite for every finite x.
pub fn ln_norm_cdf(x: f64) -> f64 {
    if x < MILLS_SWITCH {
        ln_norm_pdf(x) + lower_tail_ratio(x).ln()
    } else if x > 0.0 {
        (-norm_cdf(-x)).ln_1p()
    } else {
        norm_cdf(x).ln()
    }
}

/// Lower-tail χ² probability P(X ≤ x) for `df` degrees of freedom, via the
/// regularized lower incomplete gamma function P(df/2, x/2).
pub fn chi2_cdf(x: f64, df: usize) -> f64 {
    assert!(df > 0, "chi2_cdf requires df > 0");
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    gamma_lr(0.5 * df as f64, 0.5 * x)
}

/// Upper-tail χ² probability P(X > x).
pub fn chi2_sf(x: f64, df: usize) -> f64 {
    assert!(df > 0, "chi2_sf requires df > 0");
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    gamma_ur(0.5 * df as f64, 0.5 * x)
}

/// χ² quantile function.
pub fn chi2_quantile(p: f64, df: usize) -> f64 {
    ChiSquared::new(df as f64)
        .expect("df > 0")
        .inverse_cdf(p.clamp(0.0, 1.0))
}
