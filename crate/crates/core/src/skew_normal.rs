//! Skew-normal kernel: densities, additive-representation samplers and
//! moment formulas.
//!
//! A univariate SN(ξ, ω², λ) variate is generated as
//! `ξ + ω (δ|U₁| + √(1-δ²) U₀)` with `δ = λ/√(1+λ²)`. The multivariate
//! family is restricted to a scalar dispersion `σ²I` and a skewness vector
//! with a single nonzero component.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::special::{norm_cdf, norm_pdf, SQRT_2_OVER_PI};

#[inline]
pub fn delta_of_lambda(lambda: f64) -> f64 {
    lambda / (1.0 + lambda * lambda).sqrt()
}

/// dδ/dλ = (1+λ²)^{-3/2}
#[inline]
pub fn delta_prime(lambda: f64) -> f64 {
    (1.0 + lambda * lambda).powf(-1.5)
}

/// d²δ/dλ² = -3λ (1+λ²)^{-5/2}
#[inline]
pub fn delta_second(lambda: f64) -> f64 {
    -3.0 * lambda * (1.0 + lambda * lambda).powf(-2.5)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnUnivariate {
    pub xi: f64,
    pub omega2: f64,
    pub lambda: f64,
}

impl SnUnivariate {
    pub fn new(xi: f64, omega2: f64, lambda: f64) -> Result<Self> {
        if !(omega2 > 0.0) || !omega2.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "skew-normal scale must be positive, got {omega2}"
            )));
        }
        Ok(Self { xi, omega2, lambda })
    }

    pub fn delta(&self) -> f64 {
        delta_of_lambda(self.lambda)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        sn_pdf(x, self)
    }
}

/// Density 2 φ(x | ξ, ω²) Φ(λ (x-ξ)/ω).
pub fn sn_pdf(x: f64, params: &SnUnivariate) -> f64 {
    let omega = params.omega2.sqrt();
    let z = (x - params.xi) / omega;
    2.0 * norm_pdf(z) * norm_cdf(params.lambda * z) / omega
}

/// One draw from SN(ξ, ω², λ). When λ = 0 only one normal is consumed, so
/// the output coincides with a plain N(ξ, ω²) stream.
pub fn sn_sample(params: &SnUnivariate, rng: &mut RngStream) -> f64 {
    let delta = params.delta();
    let symmetric = rng.standard_normal();
    let w = if delta == 0.0 {
        symmetric
    } else {
        delta * rng.standard_normal().abs() + (1.0 - delta * delta).sqrt() * symmetric
    };
    params.xi + params.omega2.sqrt() * w
}

pub fn half_normal_sample(rng: &mut RngStream) -> f64 {
    rng.standard_normal().abs()
}

/// Centred moments of SN(ξ, ω², λ).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnMoments {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
}

pub fn sn_moments(params: &SnUnivariate) -> SnMoments {
    let delta = params.delta();
    let mu_w = delta * SQRT_2_OVER_PI;
    let var_w = 1.0 - mu_w * mu_w;
    let skewness = 0.5 * (4.0 - std::f64::consts::PI) * mu_w.powi(3) / var_w.powf(1.5);
    let omega = params.omega2.sqrt();
    SnMoments {
        mean: params.xi + omega * mu_w,
        variance: params.omega2 * var_w,
        skewness,
    }
}

/// SN_n(μ, σ²I, λ) with at most one nonzero skewness component.
#[derive(Debug, Clone, PartialEq)]
pub struct SnRestrictedMultivariate {
    pub mu: DVector<f64>,
    pub sigma2: f64,
    pub lambda_vec: DVector<f64>,
}

impl SnRestrictedMultivariate {
    pub fn new(mu: DVector<f64>, sigma2: f64, lambda_vec: DVector<f64>) -> Result<Self> {
        if lambda_vec.len() != mu.len() {
            return Err(Error::Dimension {
                expected: mu.len(),
                found: lambda_vec.len(),
            });
        }
        if !(sigma2 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "dispersion must be positive, got {sigma2}"
            )));
        }
        if lambda_vec.iter().filter(|l| **l != 0.0).count() > 1 {
            return Err(Error::InvalidParameter(
                "skewness vector may have at most one nonzero entry".into(),
            ));
        }
        Ok(Self {
            mu,
            sigma2,
            lambda_vec,
        })
    }

    /// Skewed coordinate and its λ, if any.
    pub fn skewed(&self) -> Option<(usize, f64)> {
        self.lambda_vec
            .iter()
            .enumerate()
            .find(|(_, l)| **l != 0.0)
            .map(|(i, l)| (i, *l))
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// One draw via `μ + σ (δ|X₀| + (I - δδᵀ)^{1/2} X₁)`. The n symmetric
/// normals are drawn first, then the half-normal when skewness is present.
pub fn sn_sample_vector(params: &SnRestrictedMultivariate, rng: &mut RngStream) -> DVector<f64> {
    let sigma = params.sigma2.sqrt();
    let mut w = DVector::from_fn(params.dim(), |_, _| rng.standard_normal());
    if let Some((k, lambda)) = params.skewed() {
        let delta = delta_of_lambda(lambda);
        w[k] = delta * rng.standard_normal().abs() + (1.0 - delta * delta).sqrt() * w[k];
    }
    &params.mu + w * sigma
}
