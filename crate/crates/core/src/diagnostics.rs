//! Marginal likelihood, information criteria and goodness-of-fit tools.
//!
//! After integrating out the latent half-normal, each subject's response
//! has density `2 φ_pm(y | Xβ, Σ) Φ(η/ζ)` with `Σ = V + ddᵀ`. Σ⁻¹ and
//! log|Σ| come from the rank-one update of the factorised `V`.

use std::f64::consts::{LN_2, PI};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::em::{assemble, e_step, ThetaState};
use crate::error::Result;
use crate::special::{chi2_cdf, chi2_quantile, ln_norm_cdf};

/// Per-subject marginal log-likelihood contributions.
pub fn marginal_loglik_terms(theta: &ThetaState, data: &Dataset) -> Result<Vec<f64>> {
    let pm = data.obs_per_subject();
    let asm = assemble(theta.scenario, &theta.xi(), pm)?;
    let wd = &asm.v_inv * &asm.d;
    let c = asm.d.dot(&wd);
    let log_det_sigma = asm.log_det + c.ln_1p();
    let constant = LN_2 - 0.5 * pm as f64 * (2.0 * PI).ln() - 0.5 * log_det_sigma;
    let scale = (1.0 + c).sqrt();
    Ok(data
        .subjects
        .iter()
        .map(|s| {
            let r = &s.y - &s.x * &theta.beta;
            let dwr = wd.dot(&r);
            let quad = r.dot(&(&asm.v_inv * &r)) - dwr * dwr / (1.0 + c);
            constant - 0.5 * quad + ln_norm_cdf(dwr / scale)
        })
        .collect())
}

/// Observed-data log-likelihood summed over subjects in order.
pub fn marginal_loglik(theta: &ThetaState, data: &Dataset) -> Result<f64> {
    Ok(marginal_loglik_terms(theta, data)?.iter().sum())
}

/// `(2k - 2ℓ, k ln n - 2ℓ)`.
pub fn aic_bic(loglik: f64, k: usize, n_obs: usize) -> (f64, f64) {
    let k = k as f64;
    (
        2.0 * k - 2.0 * loglik,
        k * (n_obs as f64).ln() - 2.0 * loglik,
    )
}

/// `(y - Xβ)ᵀ Σ⁻¹ (y - Xβ)` per subject, about the location `Xβ`.
pub fn mahalanobis(theta: &ThetaState, data: &Dataset) -> Result<Vec<f64>> {
    let pm = data.obs_per_subject();
    let asm = assemble(theta.scenario, &theta.xi(), pm)?;
    let wd = &asm.v_inv * &asm.d;
    let c = asm.d.dot(&wd);
    Ok(data
        .subjects
        .iter()
        .map(|s| {
            let r = &s.y - &s.x * &theta.beta;
            let dwr = wd.dot(&r);
            (r.dot(&(&asm.v_inv * &r)) - dwr * dwr / (1.0 + c)).max(0.0)
        })
        .collect())
}

/// Asymptotic Kolmogorov upper tail `P(K > x)`.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let p = if x < 1.18 {
        // P(K ≤ x) = √(2π)/x Σ exp(-(2k-1)²π²/(8x²))
        let f = -PI * PI / (8.0 * x * x);
        let s: f64 = (1..=20)
            .map(|k| {
                let j = (2 * k - 1) as f64;
                (f * j * j).exp()
            })
            .sum();
        1.0 - (2.0 * PI).sqrt() / x * s
    } else {
        2.0 * (1..=100)
            .map(|k| {
                let k = k as f64;
                let sign = if k as u64 % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * k * k * x * x).exp()
            })
            .sum::<f64>()
    };
    p.clamp(0.0, 1.0)
}

/// One-sample KS statistic against a continuous CDF, with the asymptotic
/// p-value at `√n D`.
pub fn ks_against<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> (f64, f64) {
    assert!(!sample.is_empty(), "KS test needs at least one value");
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let stat = sorted.iter().enumerate().fold(0.0f64, |d, (i, x)| {
        let f = cdf(*x);
        let hi = (i + 1) as f64 / n - f;
        let lo = f - i as f64 / n;
        d.max(hi).max(lo)
    });
    (stat, kolmogorov_sf(n.sqrt() * stat))
}

/// KS test of distances against χ²_df.
pub fn ks_test(distances: &[f64], df: usize) -> (f64, f64) {
    ks_against(distances, |x| chi2_cdf(x, df))
}

/// Sorted `((i - 0.5)/n, F_χ²(d_(i)))` pairs.
pub fn healy_points(distances: &[f64], df: usize) -> Vec<(f64, f64)> {
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, d)| ((i as f64 + 0.5) / n, chi2_cdf(*d, df)))
        .collect()
}

/// Standardized conditional residuals `(y - Xβ - d T01) / √diag(V)` and the
/// matching fitted values `Xβ + d T01`.
pub fn residuals_and_fitted(
    theta: &ThetaState,
    data: &Dataset,
) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    let pm = data.obs_per_subject();
    let asm = assemble(theta.scenario, &theta.xi(), pm)?;
    let sd = asm.v.diagonal().map(f64::sqrt);
    let d = asm.d.clone();
    let cache = e_step(data, &theta.beta, asm);
    Ok(data
        .subjects
        .iter()
        .zip(&cache.work)
        .map(|(s, w)| {
            let fitted = &s.x * &theta.beta + &d * w.t01;
            let resid = (&s.y - &fitted).component_div(&sd);
            (resid, fitted)
        })
        .collect())
}

pub fn standardized_residuals(theta: &ThetaState, data: &Dataset) -> Result<Vec<DVector<f64>>> {
    Ok(residuals_and_fitted(theta, data)?
        .into_iter()
        .map(|(r, _)| r)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofReport {
    pub distances: Vec<f64>,
    pub df: usize,
    pub ks_statistic: f64,
    pub ks_pvalue: f64,
    pub healy_points: Vec<(f64, f64)>,
}

pub fn goodness_of_fit(theta: &ThetaState, data: &Dataset) -> Result<GofReport> {
    let distances = mahalanobis(theta, data)?;
    let df = data.obs_per_subject();
    let (ks_statistic, ks_pvalue) = ks_test(&distances, df);
    let healy_points = healy_points(&distances, df);
    Ok(GofReport {
        distances,
        df,
        ks_statistic,
        ks_pvalue,
        healy_points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    Healy,
    QqChisq,
    ResidFitted,
}

/// One row of the plot-data CSV `kind,index,x,y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub kind: PlotKind,
    pub index: usize,
    pub x: f64,
    pub y: f64,
}

pub fn plot_points(
    theta: &ThetaState,
    data: &Dataset,
    report: &GofReport,
) -> Result<Vec<PlotPoint>> {
    let mut out = Vec::new();
    for (i, (x, y)) in report.healy_points.iter().enumerate() {
        out.push(PlotPoint {
            kind: PlotKind::Healy,
            index: i + 1,
            x: *x,
            y: *y,
        });
    }
    let mut sorted = report.distances.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    for (i, d) in sorted.iter().enumerate() {
        out.push(PlotPoint {
            kind: PlotKind::QqChisq,
            index: i + 1,
            x: chi2_quantile((i as f64 + 0.5) / n, report.df),
            y: *d,
        });
    }
    let mut index = 0;
    for (resid, fitted) in residuals_and_fitted(theta, data)? {
        for (r, f) in resid.iter().zip(fitted.iter()) {
            index += 1;
            out.push(PlotPoint {
                kind: PlotKind::ResidFitted,
                index,
                x: *f,
                y: *r,
            });
        }
    }
    Ok(out)
}
