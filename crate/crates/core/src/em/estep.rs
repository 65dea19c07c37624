//! Conditional moments of the latent half-normal given the observed data.

use nalgebra::DVector;

use super::assemble::Assembled;
use crate::data::Dataset;
use crate::special::mills;

/// Per-subject E-step quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectWork {
    pub eta: f64,
    pub zeta2: f64,
    pub t01: f64,
    pub t02: f64,
}

/// E-step output for one iteration: the covariance pieces it was computed
/// at and one [`SubjectWork`] per subject.
#[derive(Debug, Clone)]
pub struct EStepCache {
    pub assembled: Assembled,
    pub work: Vec<SubjectWork>,
}

/// First two moments of N(η, ζ²) truncated to (0, ∞).
pub fn truncated_moments(eta: f64, zeta: f64) -> (f64, f64) {
    let m = mills(eta / zeta);
    let t01 = eta + zeta * m;
    let t02 = eta * eta + zeta * zeta + eta * zeta * m;
    // guards the cancellation in the far lower tail
    (t01, t02.max(t01 * t01))
}

/// E-step for a single residual vector `r = y - Xβ`.
pub fn e_step_subject(
    assembled: &Assembled,
    v_inv_d: &DVector<f64>,
    resid: &DVector<f64>,
) -> SubjectWork {
    let c = assembled.d.dot(v_inv_d);
    let zeta2 = 1.0 / (1.0 + c);
    let eta = v_inv_d.dot(resid) * zeta2;
    let (t01, t02) = truncated_moments(eta, zeta2.sqrt());
    SubjectWork {
        eta,
        zeta2,
        t01,
        t02,
    }
}

pub fn e_step(data: &Dataset, beta: &DVector<f64>, assembled: Assembled) -> EStepCache {
    let v_inv_d = &assembled.v_inv * &assembled.d;
    let work = data
        .subjects
        .iter()
        .map(|s| {
            let resid = &s.y - &s.x * beta;
            e_step_subject(&assembled, &v_inv_d, &resid)
        })
        .collect();
    EStepCache { assembled, work }
}
