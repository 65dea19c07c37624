//! Marginal covariance `V`, skew direction `d` and their derivatives in
//! ξ = (σe², σs², λ).
//!
//! Errors SN:  V = σs² J + σe² (I - δδᵀ),  d = σe δ e₁
//! Effect SN:  V = σs² (1-δ²) J + σe² I,   d = σs δ 1
//!
//! `J` is the all-ones matrix (Z Zᵀ with Z = 1). `V` does not depend on the
//! subject, so one factorisation serves every subject.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{Scenario, Xi};
use crate::error::{Error, Result};
use crate::skew_normal::{delta_of_lambda, delta_prime, delta_second};

#[derive(Debug, Clone)]
pub struct Assembled {
    pub v: DMatrix<f64>,
    pub v_inv: DMatrix<f64>,
    pub log_det: f64,
    pub d: DVector<f64>,
}

impl Assembled {
    /// dᵀ V⁻¹ d
    pub fn d_quad(&self) -> f64 {
        self.d.dot(&(&self.v_inv * &self.d))
    }
}

/// `1 - δ²` computed without cancellation.
#[inline]
fn one_minus_delta2(lambda: f64) -> f64 {
    1.0 / (1.0 + lambda * lambda)
}

pub fn covariance(scenario: Scenario, xi: &Xi, pm: usize) -> DMatrix<f64> {
    let lambda = scenario.effective_lambda(xi.lambda);
    match scenario {
        Scenario::ErrorSn | Scenario::NormalBaseline => {
            let mut v = DMatrix::from_element(pm, pm, xi.sigma_s2);
            for i in 0..pm {
                v[(i, i)] += xi.sigma_e2;
            }
            v[(0, 0)] -= xi.sigma_e2 * (1.0 - one_minus_delta2(lambda));
            v
        }
        Scenario::EffectSn => {
            let mut v = DMatrix::from_element(pm, pm, xi.sigma_s2 * one_minus_delta2(lambda));
            for i in 0..pm {
                v[(i, i)] += xi.sigma_e2;
            }
            v
        }
    }
}

pub fn skew_direction(scenario: Scenario, xi: &Xi, pm: usize) -> DVector<f64> {
    let delta = delta_of_lambda(scenario.effective_lambda(xi.lambda));
    match scenario {
        Scenario::NormalBaseline => DVector::zeros(pm),
        Scenario::ErrorSn => {
            let mut d = DVector::zeros(pm);
            d[0] = xi.sigma_e2.sqrt() * delta;
            d
        }
        Scenario::EffectSn => DVector::from_element(pm, xi.sigma_s2.sqrt() * delta),
    }
}

/// Builds `V`, `V⁻¹`, `log|V|` and `d`; fails when `V` is not positive
/// definite.
pub fn assemble(scenario: Scenario, xi: &Xi, pm: usize) -> Result<Assembled> {
    if !(xi.sigma_e2 > 0.0 && xi.sigma_s2 > 0.0) || !xi.lambda.is_finite() {
        return Err(Error::NotPositiveDefinite);
    }
    let v = covariance(scenario, xi, pm);
    let chol = Cholesky::<f64, Dyn>::new(v.clone()).ok_or(Error::NotPositiveDefinite)?;
    let log_det = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|x| x.ln())
            .sum::<f64>();
    if !log_det.is_finite() {
        return Err(Error::NotPositiveDefinite);
    }
    let v_inv = chol.inverse();
    Ok(Assembled {
        v,
        v_inv,
        log_det,
        d: skew_direction(scenario, xi, pm),
    })
}

/// First and second derivatives of `V` and `d` with respect to ξ.
/// Entries for a frozen λ are still filled; callers select the free block.
pub struct Derivatives {
    pub v1: [DMatrix<f64>; 3],
    pub d1: [DVector<f64>; 3],
    /// Upper triangle `v2[a][b]`, `a ≤ b`, mirrored on construction.
    pub v2: [[DMatrix<f64>; 3]; 3],
    pub d2: [[DVector<f64>; 3]; 3],
}

pub fn derivatives(scenario: Scenario, xi: &Xi, pm: usize) -> Derivatives {
    let zero_m = || DMatrix::<f64>::zeros(pm, pm);
    let zero_v = || DVector::<f64>::zeros(pm);
    let mut v1 = [zero_m(), zero_m(), zero_m()];
    let mut d1 = [zero_v(), zero_v(), zero_v()];
    let mut v2: [[DMatrix<f64>; 3]; 3] = Default::default();
    let mut d2: [[DVector<f64>; 3]; 3] = Default::default();
    for a in 0..3 {
        for b in 0..3 {
            v2[a][b] = zero_m();
            d2[a][b] = zero_v();
        }
    }

    let lambda = scenario.effective_lambda(xi.lambda);
    let delta = delta_of_lambda(lambda);
    let dl = delta_prime(lambda);
    let dll = delta_second(lambda);
    let j = DMatrix::from_element(pm, pm, 1.0);

    match scenario {
        Scenario::ErrorSn | Scenario::NormalBaseline => {
            let se = xi.sigma_e2.sqrt();
            // R = I - δ² e₁e₁ᵀ, R_l = -2δδ_l e₁e₁ᵀ, R_ll = -2(δδ_ll + δ_l²) e₁e₁ᵀ
            let mut r = DMatrix::identity(pm, pm);
            r[(0, 0)] = one_minus_delta2(lambda);
            let mut r_l = zero_m();
            r_l[(0, 0)] = -2.0 * delta * dl;
            let mut r_ll = zero_m();
            r_ll[(0, 0)] = -2.0 * (delta * dll + dl * dl);

            v1[0] = r;
            v1[1] = j;
            v1[2] = &r_l * xi.sigma_e2;
            v2[0][2] = r_l;
            v2[2][2] = r_ll * xi.sigma_e2;

            d1[0][0] = delta / (2.0 * se);
            d1[2][0] = se * dl;
            d2[0][0][0] = -delta / (4.0 * se * se * se);
            d2[0][2][0] = dl / (2.0 * se);
            d2[2][2][0] = se * dll;
        }
        Scenario::EffectSn => {
            let ss = xi.sigma_s2.sqrt();
            let r = one_minus_delta2(lambda);
            let r_l = -2.0 * delta * dl;
            let r_ll = -2.0 * (delta * dll + dl * dl);

            v1[0] = DMatrix::identity(pm, pm);
            v1[1] = &j * r;
            v1[2] = &j * (xi.sigma_s2 * r_l);
            v2[1][2] = &j * r_l;
            v2[2][2] = &j * (xi.sigma_s2 * r_ll);

            d1[1] = DVector::from_element(pm, delta / (2.0 * ss));
            d1[2] = DVector::from_element(pm, ss * dl);
            d2[1][1] = DVector::from_element(pm, -delta / (4.0 * ss * ss * ss));
            d2[1][2] = DVector::from_element(pm, dl / (2.0 * ss));
            d2[2][2] = DVector::from_element(pm, ss * dll);
        }
    }
    if scenario == Scenario::NormalBaseline {
        // λ is pinned: nothing moves with it.
        v1[2].fill(0.0);
        d1[2].fill(0.0);
        for a in 0..3 {
            v2[a][2].fill(0.0);
            d2[a][2].fill(0.0);
        }
    }
    for a in 0..3 {
        for b in 0..a {
            v2[a][b] = v2[b][a].clone();
            d2[a][b] = d2[b][a].clone();
        }
    }
    Derivatives { v1, d1, v2, d2 }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xi(e: f64, s: f64, l: f64) -> Xi {
        Xi {
            sigma_e2: e,
            sigma_s2: s,
            lambda: l,
        }
    }

    #[test]
    fn zero_skew_is_compound_symmetry() {
        for sc in [
            Scenario::ErrorSn,
            Scenario::EffectSn,
            Scenario::NormalBaseline,
        ] {
            let a = assemble(sc, &xi(1.5, 0.7, 0.0), 4).unwrap();
            let mut want = DMatrix::from_element(4, 4, 0.7);
            for i in 0..4 {
                want[(i, i)] += 1.5;
            }
            assert!((a.v - want).abs().max() < 1e-15);
            assert_eq!(a.d, DVector::zeros(4));
        }
    }

    #[test]
    fn skew_direction_values() {
        let d = skew_direction(Scenario::ErrorSn, &xi(2.0, 0.64, 3.0), 12);
        assert!((d[0] - 1.341641).abs() < 1e-6);
        assert!(d.iter().skip(1).all(|v| *v == 0.0));
        let d = skew_direction(Scenario::EffectSn, &xi(0.72, 3.0, 4.0), 12);
        assert!(d.iter().all(|v| (v - 1.680336).abs() < 1e-6));
    }

    #[test]
    fn marginal_covariance_is_compound_symmetry() {
        // V + ddᵀ = σs² J + σe² I in both skew scenarios.
        for sc in [Scenario::ErrorSn, Scenario::EffectSn] {
            let x = xi(1.3, 0.4, -2.5);
            let a = assemble(sc, &x, 5).unwrap();
            let sigma = &a.v + &a.d * a.d.transpose();
            let want = covariance(Scenario::NormalBaseline, &x, 5);
            assert!((sigma - want).abs().max() < 1e-12);
        }
    }

    #[test]
    fn first_derivatives_match_differences() {
        let h = 1e-6;
        for sc in [Scenario::ErrorSn, Scenario::EffectSn] {
            let x = xi(1.7, 0.9, 1.3);
            let der = derivatives(sc, &x, 4);
            for k in 0..3 {
                let (mut up, mut dn) = (x, x);
                up.set(k, x.get(k) + h);
                dn.set(k, x.get(k) - h);
                let fd_v = (covariance(sc, &up, 4) - covariance(sc, &dn, 4)) / (2.0 * h);
                let fd_d = (skew_direction(sc, &up, 4) - skew_direction(sc, &dn, 4)) / (2.0 * h);
                assert!((fd_v - &der.v1[k]).abs().max() < 1e-7, "{sc:?} V_{k}");
                assert!((fd_d - &der.d1[k]).abs().max() < 1e-7, "{sc:?} d_{k}");
                for b in 0..3 {
                    let du = derivatives(sc, &up, 4);
                    let dd = derivatives(sc, &dn, 4);
                    let fd_v2 = (&du.v1[b] - &dd.v1[b]) / (2.0 * h);
                    let fd_d2 = (&du.d1[b] - &dd.d1[b]) / (2.0 * h);
                    assert!(
                        (fd_v2 - &der.v2[k][b]).abs().max() < 1e-6,
                        "{sc:?} V_{k}{b}"
                    );
                    assert!(
                        (fd_d2 - &der.d2[k][b]).abs().max() < 1e-6,
                        "{sc:?} d_{k}{b}"
                    );
                }
            }
        }
    }

    #[test]
    fn error_sn_second_derivative_pattern() {
        // Only the (σe², λ) and (λ, λ) blocks of V_ξξ are nonzero.
        let der = derivatives(Scenario::ErrorSn, &xi(2.0, 0.5, 0.0), 3);
        for a in 0..3 {
            for b in 0..3 {
                let nonzero = der.v2[a][b].abs().max() > 0.0;
                let allowed = matches!((a, b), (0, 2) | (2, 0) | (2, 2));
                assert!(!nonzero || allowed, "V_{a}{b}");
            }
        }
        assert!(der.v2[2][2].abs().max() > 0.0);
    }

    #[test]
    fn extreme_lambda_stays_positive_definite() {
        for sc in [Scenario::ErrorSn, Scenario::EffectSn] {
            assert!(assemble(sc, &xi(1.0, 1e-8, 1e9), 3).is_ok());
        }
        assert!(assemble(Scenario::ErrorSn, &xi(-1.0, 1.0, 0.0), 3).is_err());
    }
}
