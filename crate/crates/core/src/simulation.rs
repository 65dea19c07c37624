//! Monte Carlo study: data generation under each scenario, replicate
//! orchestration and aggregation into per-parameter summaries.
//!
//! Replicate `r` draws from the sub-stream `(seed, r)`, so summaries do not
//! depend on the number of worker threads or on completion order.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::design::{covariate_w, CrossoverLayout};
use crate::em::{fit, param_names, FitOptions, FitResult, Scenario, ThetaState};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::skew_normal::{sn_sample, sn_sample_vector, SnRestrictedMultivariate, SnUnivariate};

/// Fixed effects shared by both simulation settings after the intercept:
/// period 2, period 3, treatment 2, treatment 3, responses 2-4, covariate w.
const BETA_TAIL: [f64; 8] = [2.4, 1.1, 0.9, 2.1, 1.5, 2.0, 3.4, 1.8];

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub scenario: Scenario,
    pub n_per_seq: usize,
    pub replicates: usize,
    pub seed: u64,
    pub true_theta: ThetaState,
    pub layout: CrossoverLayout,
    pub fit_options: FitOptions,
}

/// True parameters of the two simulation settings. Skew-normal errors:
/// β₀ = 2.1, σe² = 2, σs² = 0.64, λ = 3. Skew-normal effect: β₀ = 3.3,
/// σe² = 0.72, σs² = 3, λ = 4. A normal-baseline truth reuses the
/// error setting with λ = 0.
pub fn default_truth(scenario: Scenario) -> ThetaState {
    let (beta0, sigma_e2, sigma_s2, lambda) = match scenario {
        Scenario::ErrorSn => (2.1, 2.0, 0.64, 3.0),
        Scenario::EffectSn => (3.3, 0.72, 3.0, 4.0),
        Scenario::NormalBaseline => (2.1, 2.0, 0.64, 0.0),
    };
    let mut beta = vec![beta0];
    beta.extend_from_slice(&BETA_TAIL);
    ThetaState {
        beta: DVector::from_vec(beta),
        sigma_e2,
        sigma_s2,
        lambda,
        scenario,
    }
}

impl SimConfig {
    /// 3×3 crossover with four responses and covariate `w`.
    pub fn standard(scenario: Scenario, n_per_seq: usize, replicates: usize, seed: u64) -> Self {
        Self {
            scenario,
            n_per_seq,
            replicates,
            seed,
            true_theta: default_truth(scenario),
            layout: CrossoverLayout::three_by_three(n_per_seq),
            fit_options: FitOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.replicates == 0 {
            return Err(Error::InvalidParameter(
                "replicates must be at least 1".into(),
            ));
        }
        if !(self.true_theta.sigma_e2 > 0.0 && self.true_theta.sigma_s2 > 0.0) {
            return Err(Error::InvalidParameter(
                "true variance components must be positive".into(),
            ));
        }
        if self.true_theta.beta.len() != self.layout.n_fixed() {
            return Err(Error::Dimension {
                expected: self.layout.n_fixed(),
                found: self.true_theta.beta.len(),
            });
        }
        Ok(())
    }
}

/// Covariate values for subject `j` of a sequence: the block rule for `w`,
/// zero for any other declared covariate.
fn covariates_for(layout: &CrossoverLayout, seq_size: usize, j: usize) -> BTreeMap<String, f64> {
    layout
        .covariates
        .iter()
        .map(|c| {
            let v = if c == "w" {
                covariate_w(seq_size, j) as f64
            } else {
                0.0
            };
            (c.clone(), v)
        })
        .collect()
}

/// Draws one subject's random part `Z b + e` from `rng`: the random
/// effect first, then the error vector.
pub fn draw_random_part(truth: &ThetaState, pm: usize, rng: &mut RngStream) -> DVector<f64> {
    let (b, e) = match truth.scenario {
        Scenario::ErrorSn => {
            let b = truth.sigma_s2.sqrt() * rng.standard_normal();
            let mut lambda_vec = DVector::zeros(pm);
            lambda_vec[0] = truth.lambda;
            let dist =
                SnRestrictedMultivariate::new(DVector::zeros(pm), truth.sigma_e2, lambda_vec)
                    .expect("valid error distribution");
            (b, sn_sample_vector(&dist, rng))
        }
        Scenario::EffectSn => {
            let dist = SnUnivariate::new(0.0, truth.sigma_s2, truth.lambda)
                .expect("valid effect distribution");
            let b = sn_sample(&dist, rng);
            let sd = truth.sigma_e2.sqrt();
            (b, DVector::from_fn(pm, |_, _| sd * rng.standard_normal()))
        }
        Scenario::NormalBaseline => {
            let b = truth.sigma_s2.sqrt() * rng.standard_normal();
            let sd = truth.sigma_e2.sqrt();
            (b, DVector::from_fn(pm, |_, _| sd * rng.standard_normal()))
        }
    };
    e.add_scalar(b)
}

/// Simulates `layout` under `truth` from `rng`, subjects in sequence order.
pub fn simulate(
    layout: &CrossoverLayout,
    truth: &ThetaState,
    rng: &mut RngStream,
) -> Result<Dataset> {
    let pm = layout.obs_per_subject();
    let mut entries = Vec::with_capacity(layout.n_subjects());
    for (i, &n_i) in layout.n_per_seq.iter().enumerate() {
        for j in 1..=n_i {
            entries.push((i + 1, j, covariates_for(layout, n_i, j), DVector::zeros(pm)));
        }
    }
    let mut data = Dataset::new(layout.clone(), entries)?;
    for s in &mut data.subjects {
        s.y = &s.x * &truth.beta + draw_random_part(truth, pm, rng);
    }
    Ok(data)
}

pub fn generate_dataset(config: &SimConfig, replicate_index: u64) -> Result<Dataset> {
    let mut rng = RngStream::substream(config.seed, replicate_index);
    simulate(&config.layout, &config.true_theta, &mut rng)
}

/// Outcome of one model fit inside a replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub estimates: Vec<f64>,
    pub se: Vec<f64>,
    pub error: Option<String>,
}

impl FitSummary {
    fn from_fit(r: Result<FitResult>) -> Self {
        match r {
            Ok(f) => Self {
                converged: f.converged,
                iterations: f.iterations,
                loglik: f.loglik,
                aic: f.aic,
                bic: f.bic,
                estimates: f.estimates(),
                se: f.se.clone(),
                error: None,
            },
            Err(e) => Self {
                converged: false,
                iterations: 0,
                loglik: f64::NAN,
                aic: f64::NAN,
                bic: f64::NAN,
                estimates: vec![],
                se: vec![],
                error: Some(e.to_string()),
            },
        }
    }

    pub fn usable(&self) -> bool {
        self.converged && self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateResult {
    pub index: usize,
    pub skew: FitSummary,
    pub normal: FitSummary,
}

impl ReplicateResult {
    /// AIC comparison, when both fits converged.
    pub fn skew_selected(&self) -> Option<bool> {
        (self.skew.usable() && self.normal.usable()).then(|| self.skew.aic < self.normal.aic)
    }
}

/// Fraction of replicates in which the skew model has strictly smaller AIC.
pub fn selection_rate(aic_pairs: &[(f64, f64)]) -> f64 {
    if aic_pairs.is_empty() {
        return f64::NAN;
    }
    aic_pairs.iter().filter(|(sn, n)| sn < n).count() as f64 / aic_pairs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub parameter: String,
    pub model: String,
    pub true_value: f64,
    pub mean_estimate: f64,
    pub mean_se: f64,
    pub mean_abs_bias: f64,
    /// Standard deviation of the estimates across replicates.
    pub sd_estimate: f64,
    pub n_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub scenario: Scenario,
    pub n_per_seq: usize,
    pub replicates: usize,
    pub rows: Vec<SummaryRow>,
    pub sn_selected_rate: f64,
    pub replicates_converged: usize,
    pub normal_converged: usize,
}

impl McSummary {
    pub fn row(&self, model: &str, parameter: &str) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.parameter == parameter)
    }
}

pub fn run_replicate(config: &SimConfig, index: usize) -> Result<ReplicateResult> {
    let data = generate_dataset(config, index as u64)?;
    let skew_scenario = if config.scenario.is_skewed() {
        config.scenario
    } else {
        Scenario::ErrorSn
    };
    let skew = FitSummary::from_fit(fit(&data, skew_scenario, &config.fit_options));
    let normal = FitSummary::from_fit(fit(&data, Scenario::NormalBaseline, &config.fit_options));
    Ok(ReplicateResult {
        index,
        skew,
        normal,
    })
}

/// Runs every replicate (in parallel on the current rayon pool) and returns
/// them in index order.
pub fn run_replicates(config: &SimConfig) -> Result<Vec<ReplicateResult>> {
    config.validate()?;
    (0..config.replicates)
        .into_par_iter()
        .map(|r| run_replicate(config, r))
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn aggregate_model(
    model: &str,
    names: &[String],
    truth: &[f64],
    fits: &[&FitSummary],
) -> Vec<SummaryRow> {
    names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let est: Vec<f64> = fits
                .iter()
                .filter_map(|f| f.estimates.get(k).copied())
                .collect();
            let se: Vec<f64> = fits
                .iter()
                .filter_map(|f| f.se.get(k).copied())
                .filter(|s| s.is_finite())
                .collect();
            let n = est.len();
            let m = if n > 0 { mean(&est) } else { f64::NAN };
            let sd = if n > 1 {
                (est.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
            } else {
                0.0
            };
            let bias: Vec<f64> = est.iter().map(|e| (e - truth[k]).abs()).collect();
            SummaryRow {
                parameter: name.clone(),
                model: model.to_string(),
                true_value: truth[k],
                mean_estimate: m,
                mean_se: if se.is_empty() { f64::NAN } else { mean(&se) },
                mean_abs_bias: if n > 0 { mean(&bias) } else { f64::NAN },
                sd_estimate: sd,
                n_used: n,
            }
        })
        .collect()
}

pub fn summarize(config: &SimConfig, results: &[ReplicateResult]) -> McSummary {
    let names = param_names(
        &Dataset {
            layout: config.layout.clone(),
            subjects: vec![],
        },
        true,
    );
    let t = &config.true_theta;
    let mut truth: Vec<f64> = t.beta.iter().copied().collect();
    truth.extend([t.sigma_e2, t.sigma_s2, t.lambda]);

    let skew_fits: Vec<&FitSummary> = results
        .iter()
        .map(|r| &r.skew)
        .filter(|f| f.usable())
        .collect();
    let normal_fits: Vec<&FitSummary> = results
        .iter()
        .map(|r| &r.normal)
        .filter(|f| f.usable())
        .collect();
    let mut rows = aggregate_model("sn", &names, &truth, &skew_fits);
    rows.extend(aggregate_model(
        "normal",
        &names[..names.len() - 1],
        &truth,
        &normal_fits,
    ));

    let pairs: Vec<(f64, f64)> = results
        .iter()
        .filter(|r| r.skew_selected().is_some())
        .map(|r| (r.skew.aic, r.normal.aic))
        .collect();
    McSummary {
        scenario: config.scenario,
        n_per_seq: config.n_per_seq,
        replicates: config.replicates,
        rows,
        sn_selected_rate: selection_rate(&pairs),
        replicates_converged: skew_fits.len(),
        normal_converged: normal_fits.len(),
    }
}

pub fn run_monte_carlo(config: &SimConfig) -> Result<McSummary> {
    let results = run_replicates(config)?;
    Ok(summarize(config, &results))
}
