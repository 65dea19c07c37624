//! M-step: closed-form fixed effects and a safeguarded Newton-Raphson step
//! on ξ = (σe², σs², λ).
//!
//! With the E-step moments frozen the Q-function depends on the data only
//! through
//!
//! ```text
//! N,  S₂ = Σ T02,  A = Σ r rᵀ,  b = Σ T01 r,     r = y - Xβ
//! ```
//!
//! so `Q = -½[N log|V| + S₂ + dᵀV⁻¹d S₂ + tr(V⁻¹A) - 2 dᵀV⁻¹b]` and its
//! derivatives are evaluated once per iteration instead of once per subject.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix3, Vector3};

use super::assemble::{assemble, derivatives, Assembled};
use super::estep::EStepCache;
use super::{Scenario, Xi};
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Positivity floor for both variance components.
pub const VARIANCE_FLOOR: f64 = 1e-10;
/// A fit stops once |λ| would exceed this; δ is then within 5e-7 of ±1.
pub const LAMBDA_BOUND: f64 = 1e3;
pub const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone)]
pub struct QStats {
    pub n: f64,
    pub sum_t02: f64,
    pub sum_rr: DMatrix<f64>,
    pub sum_t01_r: DVector<f64>,
}

impl QStats {
    pub fn new(data: &Dataset, beta: &DVector<f64>, cache: &EStepCache) -> Self {
        let pm = data.obs_per_subject();
        let mut sum_rr = DMatrix::zeros(pm, pm);
        let mut sum_t01_r = DVector::zeros(pm);
        let mut sum_t02 = 0.0;
        for (s, w) in data.subjects.iter().zip(&cache.work) {
            let r = &s.y - &s.x * beta;
            sum_rr.ger(1.0, &r, &r, 1.0);
            sum_t01_r.axpy(w.t01, &r, 1.0);
            sum_t02 += w.t02;
        }
        Self {
            n: data.n_subjects() as f64,
            sum_t02,
            sum_rr,
            sum_t01_r,
        }
    }

    pub fn pm(&self) -> usize {
        self.sum_t01_r.len()
    }
}

fn q_from(asm: &Assembled, stats: &QStats) -> f64 {
    let w = &asm.v_inv;
    let wd = w * &asm.d;
    let trace_wa = w.component_mul(&stats.sum_rr).sum();
    -0.5 * (stats.n * asm.log_det + stats.sum_t02 + asm.d.dot(&wd) * stats.sum_t02 + trace_wa
        - 2.0 * wd.dot(&stats.sum_t01_r))
}

/// Q(ξ) with β and the E-step moments held fixed.
pub fn q_value(scenario: Scenario, xi: &Xi, stats: &QStats) -> Result<f64> {
    let asm = assemble(scenario, xi, stats.pm())?;
    Ok(q_from(&asm, stats))
}

#[inline]
fn trace_prod(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    // tr(AB) = Σ A_ij B_ji
    a.component_mul(&b.transpose()).sum()
}

/// ∂Q/∂ξ. The λ component is identically zero for the normal baseline.
pub fn q_gradient(scenario: Scenario, xi: &Xi, stats: &QStats) -> Result<Vector3<f64>> {
    let pm = stats.pm();
    let asm = assemble(scenario, xi, pm)?;
    let der = derivatives(scenario, xi, pm);
    let w = &asm.v_inv;
    let d = &asm.d;
    let wd = w * d;
    let wb = w * &stats.sum_t01_r;
    let mut g = Vector3::zeros();
    for a in 0..3 {
        let wva = w * &der.v1[a];
        let wa = -(&wva * w);
        let da = &der.d1[a];
        let wa_d = &wa * d;
        let term = stats.n * wva.trace()
            + (d.dot(&wa_d) + 2.0 * wd.dot(da)) * stats.sum_t02
            + trace_prod(&wa, &stats.sum_rr)
            - 2.0 * (da.dot(&wb) + wa_d.dot(&stats.sum_t01_r));
        g[a] = -0.5 * term;
    }
    Ok(g)
}

/// ∂²Q/∂ξ∂ξᵀ, built from the upper triangle.
pub fn q_hessian(scenario: Scenario, xi: &Xi, stats: &QStats) -> Result<Matrix3<f64>> {
    let pm = stats.pm();
    let asm = assemble(scenario, xi, pm)?;
    let der = derivatives(scenario, xi, pm);
    let w = &asm.v_inv;
    let d = &asm.d;
    let bvec = &stats.sum_t01_r;
    let wd = w * d;
    let wv: Vec<DMatrix<f64>> = der.v1.iter().map(|va| w * va).collect();
    let w_deriv: Vec<DMatrix<f64>> = wv.iter().map(|m| -(m * w)).collect();

    let mut h = Matrix3::zeros();
    for a in 0..3 {
        for b in a..3 {
            let (da, db, dab) = (&der.d1[a], &der.d1[b], &der.d2[a][b]);
            // ∂²V⁻¹ = W Va W Vb W + W Vb W Va W - W Vab W
            let wab = &wv[a] * &wv[b] * w + &wv[b] * &wv[a] * w - w * &der.v2[a][b] * w;
            let tr = -trace_prod(&wv[b], &wv[a]) + trace_prod(w, &der.v2[a][b]);
            let skew = d.dot(&(&wab * d))
                + 2.0 * d.dot(&(&w_deriv[a] * db))
                + 2.0 * d.dot(&(&w_deriv[b] * da))
                + 2.0 * db.dot(&(w * da))
                + 2.0 * wd.dot(dab);
            let cross = dab.dot(&(w * bvec))
                + da.dot(&(&w_deriv[b] * bvec))
                + db.dot(&(&w_deriv[a] * bvec))
                + d.dot(&(&wab * bvec));
            let term =
                stats.n * tr + skew * stats.sum_t02 + trace_prod(&wab, &stats.sum_rr) - 2.0 * cross;
            h[(a, b)] = -0.5 * term;
            h[(b, a)] = h[(a, b)];
        }
    }
    Ok(h)
}

/// Closed-form β maximising Q at the current covariance:
/// `(Σ XᵀV⁻¹X)⁻¹ Σ XᵀV⁻¹(y - d T01)`.
pub fn update_beta(data: &Dataset, cache: &EStepCache) -> Result<DVector<f64>> {
    let w = &cache.assembled.v_inv;
    let d = &cache.assembled.d;
    let q = data.n_fixed();
    let mut lhs = DMatrix::zeros(q, q);
    let mut rhs = DVector::zeros(q);
    for (s, work) in data.subjects.iter().zip(&cache.work) {
        let wx = w * &s.x;
        lhs.gemm_tr(1.0, &s.x, &wx, 1.0);
        let target = &s.y - d * work.t01;
        rhs.gemv_tr(1.0, &wx, &target, 1.0);
    }
    solve_normal_equations(data, lhs, rhs)
}

/// Solves the pooled normal equations, naming dependent columns on failure.
pub fn solve_normal_equations(
    data: &Dataset,
    lhs: DMatrix<f64>,
    rhs: DVector<f64>,
) -> Result<DVector<f64>> {
    let dependent = dependent_columns(&lhs);
    if !dependent.is_empty() {
        let names = data.layout.fixed_effects();
        return Err(Error::RankDeficient(
            dependent
                .iter()
                .map(|&c| names.name(c).to_string())
                .collect(),
        ));
    }
    let chol = Cholesky::<f64, Dyn>::new(lhs).ok_or_else(|| Error::RankDeficient(vec![]))?;
    Ok(chol.solve(&rhs))
}

/// Columns of a Gram matrix that are linear combinations of earlier ones.
pub fn dependent_columns(gram: &DMatrix<f64>) -> Vec<usize> {
    let scale = gram.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-10 * scale.max(f64::MIN_POSITIVE);
    let mut kept: Vec<usize> = Vec::new();
    let mut dependent = Vec::new();
    for c in 0..gram.ncols() {
        let mut idx = kept.clone();
        idx.push(c);
        let sub = gram.select_rows(&idx).select_columns(&idx);
        let min_eig = sub
            .symmetric_eigenvalues()
            .iter()
            .fold(f64::INFINITY, |m, v| m.min(*v));
        if min_eig > tol {
            kept.push(c);
        } else {
            dependent.push(c);
        }
    }
    dependent
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NrOutcome {
    pub xi: Xi,
    pub q_before: f64,
    pub q_after: f64,
    pub halvings: usize,
    /// Newton direction replaced by scaled gradient ascent.
    pub gradient_fallback: bool,
    /// No step increased Q; `xi` is the input unchanged.
    pub stalled: bool,
}

fn feasible(xi: &Xi) -> bool {
    xi.sigma_e2 > VARIANCE_FLOOR && xi.sigma_s2 > VARIANCE_FLOOR && xi.lambda.is_finite()
}

/// Result of [`newton_ascent`].
#[derive(Debug, Clone, PartialEq)]
pub struct AscentStep {
    pub x: DVector<f64>,
    pub f_before: f64,
    pub f_after: f64,
    pub halvings: usize,
    pub gradient_fallback: bool,
    pub stalled: bool,
}

/// One safeguarded Newton step for maximising `f` from `x` with gradient
/// `g` and Hessian `h`. The step is halved (at most [`MAX_HALVINGS`] times)
/// until the candidate is `feasible` and `f` does not decrease; if `-h` is
/// not positive definite the direction is the gradient scaled by `|h_ii|`.
pub fn newton_ascent<F, P>(
    x: &DVector<f64>,
    f_before: f64,
    g: &DVector<f64>,
    h: &DMatrix<f64>,
    f: F,
    feasible: P,
) -> AscentStep
where
    F: Fn(&DVector<f64>) -> Option<f64>,
    P: Fn(&DVector<f64>) -> bool,
{
    let k = x.len();
    let newton = Cholesky::<f64, Dyn>::new(-h).map(|c| c.solve(g));
    let (direction, gradient_fallback) = match newton {
        Some(step) if step.iter().all(|v| v.is_finite()) => (step, false),
        _ => (
            DVector::from_fn(k, |i, _| g[i] / h[(i, i)].abs().max(1.0)),
            true,
        ),
    };

    let mut scale = 1.0;
    for halvings in 0..=MAX_HALVINGS {
        let cand = x + &direction * scale;
        if feasible(&cand) {
            if let Some(f_after) = f(&cand) {
                if f_after >= f_before {
                    return AscentStep {
                        x: cand,
                        f_before,
                        f_after,
                        halvings,
                        gradient_fallback,
                        stalled: false,
                    };
                }
            }
        }
        scale *= 0.5;
    }
    AscentStep {
        x: x.clone(),
        f_before,
        f_after: f_before,
        halvings: MAX_HALVINGS,
        gradient_fallback,
        stalled: true,
    }
}

/// One Newton-Raphson step on the free coordinates of ξ, halved until Q
/// does not decrease and both variances stay above [`VARIANCE_FLOOR`].
pub fn nr_step(scenario: Scenario, xi: &Xi, stats: &QStats, free: &[usize]) -> Result<NrOutcome> {
    let q_before = q_value(scenario, xi, stats)?;
    let g_full = q_gradient(scenario, xi, stats)?;
    let h_full = q_hessian(scenario, xi, stats)?;
    let k = free.len();
    let g = DVector::from_iterator(k, free.iter().map(|&a| g_full[a]));
    let h = DMatrix::from_fn(k, k, |i, j| h_full[(free[i], free[j])]);
    let x = DVector::from_iterator(k, free.iter().map(|&a| xi.get(a)));

    let to_xi = |v: &DVector<f64>| {
        let mut out = *xi;
        for (i, &a) in free.iter().enumerate() {
            out.set(a, v[i]);
        }
        out
    };
    let step = newton_ascent(
        &x,
        q_before,
        &g,
        &h,
        |v| q_value(scenario, &to_xi(v), stats).ok(),
        |v| feasible(&to_xi(v)),
    );
    Ok(NrOutcome {
        xi: to_xi(&step.x),
        q_before,
        q_after: step.f_after,
        halvings: step.halvings,
        gradient_fallback: step.gradient_fallback,
        stalled: step.stalled,
    })
}
