//! EM fitting for the skew-normal crossover mixed model.
//!
//! Each iteration runs the E-step (conditional half-normal moments per
//! subject), the closed-form β update and one safeguarded Newton-Raphson
//! step on ξ = (σe², σs², λ). The NR step only accepts moves that do not
//! decrease Q, so the observed-data log-likelihood is non-decreasing.

pub mod assemble;
pub mod estep;
pub mod init;
pub mod mstep;
pub mod se;

use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diagnostics::{aic_bic, marginal_loglik};
use crate::error::{Error, Result};
use crate::skew_normal::delta_of_lambda;
use crate::special::SQRT_2_OVER_PI;

pub use assemble::{assemble, Assembled};
pub use estep::{e_step, truncated_moments, EStepCache, SubjectWork};
pub use init::initialize;
pub use mstep::{
    nr_step, q_gradient, q_hessian, q_value, update_beta, NrOutcome, QStats, LAMBDA_BOUND,
};
pub use se::standard_errors;

/// Which component carries the skewness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Skew-normal error vector (skewness on the first coordinate).
    ErrorSn,
    /// Skew-normal subject random effect.
    EffectSn,
    /// Both normal; λ pinned at 0.
    #[serde(rename = "normal")]
    NormalBaseline,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [
        Scenario::NormalBaseline,
        Scenario::EffectSn,
        Scenario::ErrorSn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::ErrorSn => "error-sn",
            Scenario::EffectSn => "effect-sn",
            Scenario::NormalBaseline => "normal",
        }
    }

    pub fn is_skewed(self) -> bool {
        self != Scenario::NormalBaseline
    }

    #[inline]
    pub(crate) fn effective_lambda(self, lambda: f64) -> f64 {
        if self.is_skewed() {
            lambda
        } else {
            0.0
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "error-sn" => Ok(Scenario::ErrorSn),
            "effect-sn" => Ok(Scenario::EffectSn),
            "normal" => Ok(Scenario::NormalBaseline),
            other => Err(Error::InvalidParameter(format!(
                "unknown scenario `{other}`"
            ))),
        }
    }
}

/// Variance components and skewness, ξ = (σe², σs², λ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Xi {
    pub sigma_e2: f64,
    pub sigma_s2: f64,
    pub lambda: f64,
}

impl Xi {
    pub fn get(&self, k: usize) -> f64 {
        match k {
            0 => self.sigma_e2,
            1 => self.sigma_s2,
            2 => self.lambda,
            _ => panic!("xi index {k} out of range"),
        }
    }

    pub fn set(&mut self, k: usize, value: f64) {
        match k {
            0 => self.sigma_e2 = value,
            1 => self.sigma_s2 = value,
            2 => self.lambda = value,
            _ => panic!("xi index {k} out of range"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaState {
    pub beta: DVector<f64>,
    pub sigma_e2: f64,
    pub sigma_s2: f64,
    pub lambda: f64,
    pub scenario: Scenario,
}

impl ThetaState {
    pub fn xi(&self) -> Xi {
        Xi {
            sigma_e2: self.sigma_e2,
            sigma_s2: self.sigma_s2,
            lambda: self.lambda,
        }
    }

    pub fn with_xi(mut self, xi: Xi) -> Self {
        self.sigma_e2 = xi.sigma_e2;
        self.sigma_s2 = xi.sigma_s2;
        self.lambda = if self.scenario.is_skewed() {
            xi.lambda
        } else {
            0.0
        };
        self
    }

    pub fn delta(&self) -> f64 {
        delta_of_lambda(self.scenario.effective_lambda(self.lambda))
    }

    /// Common nonzero entry of `d`: σe δ (errors) or σs δ (effect).
    pub fn skew_scale(&self) -> f64 {
        match self.scenario {
            Scenario::ErrorSn => self.sigma_e2.sqrt() * self.delta(),
            Scenario::EffectSn => self.sigma_s2.sqrt() * self.delta(),
            Scenario::NormalBaseline => 0.0,
        }
    }

    /// Mean of the skew term, `d₁ √(2/π)`.
    pub fn mean_offset(&self) -> f64 {
        self.skew_scale() * SQRT_2_OVER_PI
    }
}

/// `β₀ + d₁ √(2/π)`; the raw intercept is left untouched in `theta`.
pub fn corrected_intercept(theta: &ThetaState) -> f64 {
    theta.beta[0] + theta.mean_offset()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Stop when the largest absolute change over the free parameters
    /// falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Hold λ at this value instead of estimating it.
    pub fixed_lambda: Option<f64>,
    pub standard_errors: bool,
    pub initial: Option<ThetaState>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 5e-3,
            max_iter: 500,
            fixed_lambda: None,
            standard_errors: true,
            initial: None,
        }
    }
}

/// Bookkeeping for one EM iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    /// Observed-data log-likelihood after the iteration.
    pub loglik: f64,
    pub q_before: f64,
    pub q_after: f64,
    pub halvings: usize,
    pub stalled: bool,
    pub gradient_fallback: bool,
    pub max_change: f64,
    pub min_zeta2: f64,
    pub max_zeta2: f64,
    /// Smallest `T02 - T01²` over subjects.
    pub min_conditional_var: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: ThetaState,
    pub param_names: Vec<String>,
    /// One per free parameter, in `param_names` order.
    pub se: Vec<f64>,
    pub corrected_intercept: f64,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub k: usize,
    pub n_obs: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood at the start value followed by one entry per iteration.
    pub trajectory: Vec<f64>,
    pub history: Vec<IterationRecord>,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn estimates(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.theta.beta.iter().copied().collect();
        out.push(self.theta.sigma_e2);
        out.push(self.theta.sigma_s2);
        if self.param_names.len() > out.len() {
            out.push(self.theta.lambda);
        }
        out
    }

    pub fn lambda_free(&self) -> bool {
        self.param_names.last().map(String::as_str) == Some("lambda")
    }
}

/// Free ξ coordinates for a scenario.
fn free_xi(scenario: Scenario, options: &FitOptions) -> Vec<usize> {
    if scenario.is_skewed() && options.fixed_lambda.is_none() {
        vec![0, 1, 2]
    } else {
        vec![0, 1]
    }
}

pub fn param_names(data: &Dataset, lambda_free: bool) -> Vec<String> {
    let mut names: Vec<String> = data.layout.fixed_effects().names().to_vec();
    names.push("sigma_e2".into());
    names.push("sigma_s2".into());
    if lambda_free {
        names.push("lambda".into());
    }
    names
}

pub fn fit(data: &Dataset, scenario: Scenario, options: &FitOptions) -> Result<FitResult> {
    if !(options.tol > 0.0) {
        return Err(Error::InvalidParameter("tolerance must be positive".into()));
    }
    let pm = data.obs_per_subject();
    let free = free_xi(scenario, options);
    let mut theta = match &options.initial {
        Some(t) => ThetaState {
            scenario,
            ..t.clone()
        },
        None => initialize(data, scenario)?,
    };
    if let Some(l) = options.fixed_lambda {
        theta.lambda = l;
    }
    if !scenario.is_skewed() {
        theta.lambda = 0.0;
    }

    let mut warnings = Vec::new();
    let mut trajectory = vec![marginal_loglik(&theta, data)?];
    let mut history = Vec::new();
    let mut converged = false;
    let mut at_boundary = false;
    let mut iterations = 0;

    while iterations < options.max_iter {
        iterations += 1;
        let asm = assemble(scenario, &theta.xi(), pm)?;
        let cache = e_step(data, &theta.beta, asm);
        let beta = update_beta(data, &cache)?;
        let stats = QStats::new(data, &beta, &cache);
        let step = nr_step(scenario, &theta.xi(), &stats, &free)?;

        let mut max_change = beta
            .iter()
            .zip(theta.beta.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        for &k in &free {
            max_change = max_change.max((step.xi.get(k) - theta.xi().get(k)).abs());
        }

        if step.xi.lambda.abs() > LAMBDA_BOUND {
            warnings.push(format!(
                "{scenario}: |lambda| left the bound {LAMBDA_BOUND:e} at iteration {iterations}; the likelihood is maximized on the delta = +-1 boundary"
            ));
            at_boundary = true;
            break;
        }

        let (min_zeta2, max_zeta2, min_conditional_var) = cache.work.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY),
            |(lo, hi, cv), w| {
                (
                    lo.min(w.zeta2),
                    hi.max(w.zeta2),
                    cv.min(w.t02 - w.t01 * w.t01),
                )
            },
        );

        theta = ThetaState { beta, ..theta }.with_xi(step.xi);
        let loglik = marginal_loglik(&theta, data)?;
        trajectory.push(loglik);
        history.push(IterationRecord {
            loglik,
            q_before: step.q_before,
            q_after: step.q_after,
            halvings: step.halvings,
            stalled: step.stalled,
            gradient_fallback: step.gradient_fallback,
            max_change,
            min_zeta2,
            max_zeta2,
            min_conditional_var,
        });

        if max_change < options.tol {
            converged = true;
            break;
        }
    }
    if !converged && !at_boundary {
        warnings.push(format!(
            "{scenario}: no convergence after {iterations} iterations"
        ));
    }

    let lambda_free = free.len() == 3;
    if lambda_free && theta.lambda.abs() < 0.05 {
        warnings.push(format!(
            "|lambda| = {:.4} is near 0 where the information matrix is singular; standard errors may be unreliable",
            theta.lambda.abs()
        ));
    }

    let names = param_names(data, lambda_free);
    let k = names.len();
    let se = if options.standard_errors {
        let (se, se_warn) = standard_errors(&theta, data, lambda_free)?;
        warnings.extend(se_warn);
        se
    } else {
        vec![f64::NAN; k]
    };
    let loglik = *trajectory.last().expect("trajectory is never empty");
    let n_obs = data.n_obs();
    let (aic, bic) = aic_bic(loglik, k, n_obs);
    for w in &warnings {
        warn!("{w}");
    }
    Ok(FitResult {
        corrected_intercept: corrected_intercept(&theta),
        theta,
        param_names: names,
        se,
        loglik,
        aic,
        bic,
        k,
        n_obs,
        iterations,
        converged,
        trajectory,
        history,
        warnings,
    })
}
