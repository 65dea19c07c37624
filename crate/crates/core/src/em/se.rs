//! Standard errors from the observed information of the marginal
//! log-likelihood, by central differences.

use nalgebra::{DMatrix, DVector};

use super::ThetaState;
use crate::data::Dataset;
use crate::diagnostics::marginal_loglik;
use crate::error::Result;

fn pack(theta: &ThetaState, lambda_free: bool) -> Vec<f64> {
    let mut p: Vec<f64> = theta.beta.iter().copied().collect();
    p.push(theta.sigma_e2);
    p.push(theta.sigma_s2);
    if lambda_free {
        p.push(theta.lambda);
    }
    p
}

fn unpack(template: &ThetaState, p: &[f64], lambda_free: bool) -> ThetaState {
    let q = template.beta.len();
    ThetaState {
        beta: DVector::from_column_slice(&p[..q]),
        sigma_e2: p[q],
        sigma_s2: p[q + 1],
        lambda: if lambda_free {
            p[q + 2]
        } else {
            template.lambda
        },
        scenario: template.scenario,
    }
}

/// Per-coordinate step `max(1e-4, 1e-4|θ_k|)`, shrunk for variance
/// components so the lower evaluation point stays positive.
fn step_sizes(p: &[f64], q: usize) -> Vec<f64> {
    p.iter()
        .enumerate()
        .map(|(k, v)| {
            let h = (1e-4 * v.abs()).max(1e-4);
            if k == q || k == q + 1 {
                h.min(0.5 * v)
            } else {
                h
            }
        })
        .collect()
}

/// Numerical Hessian of the marginal log-likelihood over the free
/// parameters `(β, σe², σs²[, λ])`.
pub fn loglik_hessian(
    theta: &ThetaState,
    data: &Dataset,
    lambda_free: bool,
) -> Result<DMatrix<f64>> {
    let p0 = pack(theta, lambda_free);
    let k = p0.len();
    let h = step_sizes(&p0, theta.beta.len());
    let f = |p: &[f64]| marginal_loglik(&unpack(theta, p, lambda_free), data);
    let f0 = f(&p0)?;
    let mut hess = DMatrix::zeros(k, k);
    let shifted = |moves: &[(usize, f64)]| {
        let mut p = p0.clone();
        for &(i, s) in moves {
            p[i] += s;
        }
        p
    };
    for i in 0..k {
        let up = f(&shifted(&[(i, h[i])]))?;
        let dn = f(&shifted(&[(i, -h[i])]))?;
        hess[(i, i)] = (up - 2.0 * f0 + dn) / (h[i] * h[i]);
        for j in 0..i {
            let pp = f(&shifted(&[(i, h[i]), (j, h[j])]))?;
            let pm = f(&shifted(&[(i, h[i]), (j, -h[j])]))?;
            let mp = f(&shifted(&[(i, -h[i]), (j, h[j])]))?;
            let mm = f(&shifted(&[(i, -h[i]), (j, -h[j])]))?;
            let v = (pp - pm - mp + mm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(hess)
}

/// Square roots of the diagonal of the inverse observed information.
/// Coordinates whose variance comes out non-positive or non-finite are
/// reported as NaN, with a warning.
pub fn standard_errors(
    theta: &ThetaState,
    data: &Dataset,
    lambda_free: bool,
) -> Result<(Vec<f64>, Vec<String>)> {
    let info = -loglik_hessian(theta, data, lambda_free)?;
    let k = info.nrows();
    let mut warnings = Vec::new();
    let cov = match info.clone().cholesky() {
        Some(c) => Some(c.inverse()),
        None => {
            warnings.push("observed information is not positive definite".to_string());
            info.try_inverse()
        }
    };
    let se = match cov {
        Some(cov) => (0..k)
            .map(|i| {
                let v = cov[(i, i)];
                if v > 0.0 && v.is_finite() {
                    v.sqrt()
                } else {
                    f64::NAN
                }
            })
            .collect::<Vec<_>>(),
        None => vec![f64::NAN; k],
    };
    if se.iter().any(|s| s.is_nan()) {
        warnings.push("some standard errors are undefined (reported as NaN)".to_string());
    }
    Ok((se, warnings))
}
