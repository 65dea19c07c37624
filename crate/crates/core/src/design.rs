//! Crossover layouts and the per-subject fixed/random design matrices.
//!
//! Responses for one subject are stacked period-major, response-minor:
//! `(y_11, .., y_1m, y_21, .., y_pm)`. The fixed-effects design has an
//! intercept, `p-1` period indicators, `t-1` treatment indicators, `m-1`
//! response indicators and one constant column per subject covariate.
//! Level 1 of every factor is the reference.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverLayout {
    pub n_per_seq: Vec<usize>,
    pub periods: usize,
    pub treatments: usize,
    pub responses: usize,
    /// `assignment[i][u]` is the 1-based treatment given in period `u+1` of
    /// sequence `i+1`.
    pub assignment: Vec<Vec<usize>>,
    pub covariates: Vec<String>,
}

impl CrossoverLayout {
    pub fn new(
        n_per_seq: Vec<usize>,
        periods: usize,
        treatments: usize,
        responses: usize,
        assignment: Vec<Vec<usize>>,
        covariates: Vec<String>,
    ) -> Result<Self> {
        let layout = Self {
            n_per_seq,
            periods,
            treatments,
            responses,
            assignment,
            covariates,
        };
        layout.validate()?;
        Ok(layout)
    }

    /// The 3-sequence (ABC, BCA, CAB), 3-period, 4-response layout with a
    /// single subject covariate `w`, `n` subjects per sequence.
    pub fn three_by_three(n: usize) -> Self {
        Self {
            n_per_seq: vec![n; 3],
            periods: 3,
            treatments: 3,
            responses: 4,
            assignment: vec![vec![1, 2, 3], vec![2, 3, 1], vec![3, 1, 2]],
            covariates: vec!["w".to_string()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_seq.is_empty() {
            return Err(Error::Layout("at least one sequence is required".into()));
        }
        if self.periods == 0 || self.treatments == 0 || self.responses == 0 {
            return Err(Error::Layout(
                "periods, treatments and responses must be positive".into(),
            ));
        }
        if self.n_subjects() == 0 {
            return Err(Error::Layout("no subjects".into()));
        }
        if self.assignment.len() != self.n_per_seq.len() {
            return Err(Error::Layout(format!(
                "assignment has {} rows for {} sequences",
                self.assignment.len(),
                self.n_per_seq.len()
            )));
        }
        for (i, row) in self.assignment.iter().enumerate() {
            if row.len() != self.periods {
                return Err(Error::Layout(format!(
                    "sequence {} assigns {} periods, expected {}",
                    i + 1,
                    row.len(),
                    self.periods
                )));
            }
            if let Some(bad) = row.iter().find(|&&d| d == 0 || d > self.treatments) {
                return Err(Error::Layout(format!(
                    "sequence {} uses treatment {bad} outside 1..={}",
                    i + 1,
                    self.treatments
                )));
            }
        }
        Ok(())
    }

    pub fn sequences(&self) -> usize {
        self.n_per_seq.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.n_per_seq.iter().sum()
    }

    /// Observations per subject, `pm`.
    pub fn obs_per_subject(&self) -> usize {
        self.periods * self.responses
    }

    /// Number of fixed effects `q = p + t + m - 2 + #covariates`.
    pub fn n_fixed(&self) -> usize {
        self.periods + self.treatments + self.responses - 2 + self.covariates.len()
    }

    /// True when some sequence repeats a treatment although `p ≤ t`. Such
    /// tables are accepted; callers may log the flag.
    pub fn irregular_assignment(&self) -> bool {
        if self.periods > self.treatments {
            return false;
        }
        self.assignment.iter().any(|row| {
            let mut seen = vec![false; self.treatments + 1];
            row.iter().any(|&d| std::mem::replace(&mut seen[d], true))
        })
    }

    pub fn fixed_effects(&self) -> FixedEffectIndex {
        let mut names = vec!["intercept".to_string()];
        names.extend((2..=self.periods).map(|u| format!("period_{u}")));
        names.extend((2..=self.treatments).map(|l| format!("treatment_{l}")));
        names.extend((2..=self.responses).map(|v| format!("response_{v}")));
        names.extend(self.covariates.iter().cloned());
        FixedEffectIndex { names }
    }
}

/// Ordered `(period, response)` pairs, 1-based, period varying slowest.
pub fn response_order(layout: &CrossoverLayout) -> Vec<(usize, usize)> {
    (1..=layout.periods)
        .flat_map(|u| (1..=layout.responses).map(move |k| (u, k)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffectIndex {
    names: Vec<String>,
}

impl FixedEffectIndex {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, column: usize) -> &str {
        &self.names[column]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignPair {
    pub x: DMatrix<f64>,
    pub z: DVector<f64>,
}

/// Design matrices for subject `subject` of sequence `sequence` (both 1-based).
pub fn build_design(
    layout: &CrossoverLayout,
    sequence: usize,
    subject: usize,
    covariate_values: &BTreeMap<String, f64>,
) -> Result<DesignPair> {
    if sequence == 0
        || sequence > layout.sequences()
        || subject == 0
        || subject > layout.n_per_seq[sequence - 1]
    {
        return Err(Error::OutOfRange { sequence, subject });
    }
    if let Some(unknown) = covariate_values
        .keys()
        .find(|k| !layout.covariates.contains(k))
    {
        return Err(Error::UnknownCovariate(unknown.clone()));
    }
    let cov: Vec<f64> = layout
        .covariates
        .iter()
        .map(|c| {
            covariate_values
                .get(c)
                .copied()
                .ok_or_else(|| Error::MissingCovariate(c.clone()))
        })
        .collect::<Result<_>>()?;

    let (p, t, m) = (layout.periods, layout.treatments, layout.responses);
    let pm = p * m;
    let q = layout.n_fixed();
    let period_col = 1;
    let treat_col = period_col + p - 1;
    let resp_col = treat_col + t - 1;
    let cov_col = resp_col + m - 1;

    let mut x = DMatrix::zeros(pm, q);
    let row_assign = &layout.assignment[sequence - 1];
    for (row, (u, k)) in response_order(layout).into_iter().enumerate() {
        x[(row, 0)] = 1.0;
        if u >= 2 {
            x[(row, period_col + u - 2)] = 1.0;
        }
        let d = row_assign[u - 1];
        if d >= 2 {
            x[(row, treat_col + d - 2)] = 1.0;
        }
        if k >= 2 {
            x[(row, resp_col + k - 2)] = 1.0;
        }
        for (c, value) in cov.iter().enumerate() {
            x[(row, cov_col + c)] = *value;
        }
    }
    Ok(DesignPair {
        x,
        z: DVector::from_element(pm, 1.0),
    })
}

/// Subject-block covariate taking values 0, 1, 2. Sequences of 30 split
/// 10/10/10 and sequences of 50 split 18/16/16; any other size is cut into
/// equal thirds.
pub fn covariate_w(sequence_size: usize, subject: usize) -> u8 {
    match sequence_size {
        30 => match subject {
            1..=10 => 0,
            11..=20 => 1,
            _ => 2,
        },
        50 => match subject {
            1..=18 => 0,
            19..=34 => 1,
            _ => 2,
        },
        n => {
            let block = (subject.saturating_sub(1) * 3) / n.max(1);
            block.min(2) as u8
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two() -> CrossoverLayout {
        CrossoverLayout::new(vec![5, 5], 2, 2, 2, vec![vec![1, 2], vec![2, 1]], vec![]).unwrap()
    }

    #[test]
    fn ordering() {
        let l = two_by_two();
        assert_eq!(response_order(&l), vec![(1, 1), (1, 2), (2, 1), (2, 2)]);
        let one = CrossoverLayout::new(vec![1], 1, 1, 1, vec![vec![1]], vec![]).unwrap();
        assert_eq!(response_order(&one), vec![(1, 1)]);
        let big = CrossoverLayout::new(vec![1], 3, 3, 4, vec![vec![1, 2, 3]], vec![]).unwrap();
        let ord = response_order(&big);
        assert_eq!(ord.len(), 12);
        assert!(ord[..4].iter().all(|(u, _)| *u == 1));
    }

    #[test]
    fn worked_two_by_two_matrices() {
        let l = two_by_two();
        let none = BTreeMap::new();
        let d1 = build_design(&l, 1, 1, &none).unwrap();
        let want1 = DMatrix::from_row_slice(
            4,
            4,
            &[
                1., 0., 0., 0., 1., 0., 0., 1., 1., 1., 1., 0., 1., 1., 1., 1.,
            ],
        );
        assert_eq!(d1.x, want1);
        let d2 = build_design(&l, 2, 3, &none).unwrap();
        let want2 = DMatrix::from_row_slice(
            4,
            4,
            &[
                1., 0., 1., 0., 1., 0., 1., 1., 1., 1., 0., 0., 1., 1., 0., 1.,
            ],
        );
        assert_eq!(d2.x, want2);
        assert_eq!(d1.z, DVector::from_element(4, 1.0));
        assert_eq!(
            l.fixed_effects().names(),
            ["intercept", "period_2", "treatment_2", "response_2"]
        );
    }

    #[test]
    fn intercept_only() {
        let l = CrossoverLayout::new(vec![3], 1, 1, 1, vec![vec![1]], vec![]).unwrap();
        let d = build_design(&l, 1, 2, &BTreeMap::new()).unwrap();
        assert_eq!(d.x, DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn three_by_three_with_covariate() {
        let l = CrossoverLayout::three_by_three(30);
        let mut cov = BTreeMap::new();
        cov.insert("w".to_string(), 2.0);
        let d = build_design(&l, 1, 25, &cov).unwrap();
        assert_eq!((d.x.nrows(), d.x.ncols()), (12, 9));
        // sequence 1 is ABC: period u receives treatment u.
        // columns: 1, per2, per3, trt2, trt3, g2, g3, g4, w
        let mut want = DMatrix::zeros(12, 9);
        for u in 1..=3 {
            for k in 1..=4 {
                let r = (u - 1) * 4 + (k - 1);
                want[(r, 0)] = 1.0;
                if u >= 2 {
                    want[(r, u - 1)] = 1.0;
                    want[(r, u + 1)] = 1.0;
                }
                if k >= 2 {
                    want[(r, 3 + k)] = 1.0;
                }
                want[(r, 8)] = 2.0;
            }
        }
        assert_eq!(d.x, want);
    }

    #[test]
    fn design_errors() {
        let l = CrossoverLayout::three_by_three(30);
        let mut cov = BTreeMap::new();
        cov.insert("w".to_string(), 0.0);
        assert!(matches!(
            build_design(&l, 4, 1, &cov),
            Err(Error::OutOfRange { .. })
        ));
        assert!(matches!(
            build_design(&l, 1, 31, &cov),
            Err(Error::OutOfRange { .. })
        ));
        assert!(matches!(
            build_design(&l, 1, 1, &BTreeMap::new()),
            Err(Error::MissingCovariate(_))
        ));
        cov.insert("age".to_string(), 1.0);
        assert!(matches!(
            build_design(&l, 1, 1, &cov),
            Err(Error::UnknownCovariate(_))
        ));
    }

    #[test]
    fn layout_validation() {
        assert!(CrossoverLayout::new(vec![2], 2, 2, 1, vec![vec![1, 3]], vec![]).is_err());
        assert!(CrossoverLayout::new(vec![0], 1, 1, 1, vec![vec![1]], vec![]).is_err());
        assert!(CrossoverLayout::new(vec![2, 2], 2, 2, 1, vec![vec![1, 2]], vec![]).is_err());
        let irregular = CrossoverLayout::new(vec![2], 2, 2, 1, vec![vec![1, 1]], vec![]).unwrap();
        assert!(irregular.irregular_assignment());
        assert!(!CrossoverLayout::three_by_three(5).irregular_assignment());
    }

    #[test]
    fn covariate_blocks() {
        assert_eq!(covariate_w(30, 11), 1);
        assert_eq!(covariate_w(50, 35), 2);
        assert_eq!(covariate_w(30, 1), 0);
        assert_eq!(covariate_w(30, 10), 0);
        assert_eq!(covariate_w(30, 21), 2);
        assert_eq!(covariate_w(50, 18), 0);
        assert_eq!(covariate_w(50, 19), 1);
        assert_eq!(covariate_w(50, 34), 1);
        let counts = (1..=12).fold([0; 3], |mut c, j| {
            c[covariate_w(12, j) as usize] += 1;
            c
        });
        assert_eq!(counts, [4, 4, 4]);
    }

    #[test]
    fn pooled_design_full_rank() {
        let l = CrossoverLayout::three_by_three(2);
        let q = l.n_fixed();
        let mut xtx = DMatrix::zeros(q, q);
        for i in 1..=3 {
            for j in 1..=2 {
                let mut cov = BTreeMap::new();
                cov.insert("w".to_string(), covariate_w(2, j) as f64);
                let d = build_design(&l, i, j, &cov).unwrap();
                xtx += d.x.transpose() * &d.x;
                // treatment block: at most one 1 per row
                for r in 0..12 {
                    assert!(d.x.view((r, 3), (1, 2)).sum() <= 1.0);
                }
                // response indicators each appear once per period
                for c in 5..8 {
                    assert_eq!(d.x.column(c).sum(), 3.0);
                }
            }
        }
        assert_eq!(xtx.rank(1e-9), q);
    }
}
