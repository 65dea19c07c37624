//! Starting values from a moment-based normal mixed model.

use log::warn;
use nalgebra::{DMatrix, DVector};

use super::assemble::assemble;
use super::mstep::solve_normal_equations;
use super::{Scenario, ThetaState, Xi};
use crate::data::Dataset;
use crate::error::Result;

pub const INIT_VARIANCE_FLOOR: f64 = 1e-6;

/// Between/within-subject mean squares of the OLS residuals.
///
/// `σe² = MS_within`, `σs² = (MS_between - MS_within)/pm`, both floored.
/// Degrees of freedom are split by the rank of the subject-mean design:
/// columns constant within subjects cost between-subject df, the rest
/// cost within-subject df.
pub fn moment_variances(data: &Dataset) -> Result<(f64, f64)> {
    let q = data.n_fixed();
    let mut xtx = DMatrix::zeros(q, q);
    let mut xty = DVector::zeros(q);
    for s in &data.subjects {
        xtx.gemm_tr(1.0, &s.x, &s.x, 1.0);
        xty.gemv_tr(1.0, &s.x, &s.y, 1.0);
    }
    let beta = solve_normal_equations(data, xtx, xty)?;

    let n = data.n_subjects();
    let pm = data.obs_per_subject();
    let mut within = 0.0;
    let mut between = 0.0;
    let mut mean_x = DMatrix::zeros(n, q);
    for (i, s) in data.subjects.iter().enumerate() {
        let r = &s.y - &s.x * &beta;
        let mean = r.mean();
        within += r.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        between += pm as f64 * mean * mean;
        mean_x.set_row(i, &s.x.row_mean());
    }
    let q_between = mean_x.rank(1e-9 * mean_x.norm().max(1.0));
    let df_within = (n * (pm - 1)) as f64 - (q - q_between) as f64;
    let df_between = n as f64 - q_between as f64;

    let (sigma_e2, sigma_s2) = if df_within > 0.0 && df_between > 0.0 {
        let ms_within = within / df_within;
        let ms_between = between / df_between;
        (ms_within, (ms_between - ms_within) / pm as f64)
    } else {
        // the split is unidentified, start halfway
        let total = (within + between) / ((n * pm) as f64 - q as f64).max(1.0);
        (0.5 * total, 0.5 * total)
    };
    if sigma_e2 < INIT_VARIANCE_FLOOR || sigma_s2 < INIT_VARIANCE_FLOOR {
        warn!(
            "moment variance estimates ({sigma_e2:.3e}, {sigma_s2:.3e}) floored at {INIT_VARIANCE_FLOOR:e}"
        );
    }
    Ok((
        sigma_e2.max(INIT_VARIANCE_FLOOR),
        sigma_s2.max(INIT_VARIANCE_FLOOR),
    ))
}

/// GLS fixed effects under `V = σs² J + σe² I`.
pub fn gls_beta(data: &Dataset, sigma_e2: f64, sigma_s2: f64) -> Result<DVector<f64>> {
    let xi = Xi {
        sigma_e2,
        sigma_s2,
        lambda: 0.0,
    };
    let asm = assemble(Scenario::NormalBaseline, &xi, data.obs_per_subject())?;
    let q = data.n_fixed();
    let mut lhs = DMatrix::zeros(q, q);
    let mut rhs = DVector::zeros(q);
    for s in &data.subjects {
        let wx = &asm.v_inv * &s.x;
        lhs.gemm_tr(1.0, &s.x, &wx, 1.0);
        rhs.gemv_tr(1.0, &wx, &s.y, 1.0);
    }
    solve_normal_equations(data, lhs, rhs)
}

/// λ starts at 1 for the skew scenarios and 0 for the baseline.
pub fn initialize(data: &Dataset, scenario: Scenario) -> Result<ThetaState> {
    let (sigma_e2, sigma_s2) = moment_variances(data)?;
    let beta = gls_beta(data, sigma_e2, sigma_s2)?;
    let lambda = match scenario {
        Scenario::NormalBaseline => 0.0,
        _ => 1.0,
    };
    Ok(ThetaState {
        beta,
        sigma_e2,
        sigma_s2,
        lambda,
        scenario,
    })
}
