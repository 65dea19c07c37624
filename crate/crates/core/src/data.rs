//! In-memory trial data: one response vector and design matrix per subject.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::design::{build_design, CrossoverLayout};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    /// 1-based sequence number.
    pub sequence: usize,
    /// 1-based position within the sequence.
    pub subject: usize,
    pub covariates: BTreeMap<String, f64>,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub layout: CrossoverLayout,
    pub subjects: Vec<Subject>,
}

impl Dataset {
    /// Builds the design for every `(sequence, subject, covariates, y)` entry.
    pub fn new(
        layout: CrossoverLayout,
        entries: Vec<(usize, usize, BTreeMap<String, f64>, DVector<f64>)>,
    ) -> Result<Self> {
        layout.validate()?;
        let pm = layout.obs_per_subject();
        let subjects = entries
            .into_iter()
            .map(|(sequence, subject, covariates, y)| {
                if y.len() != pm {
                    return Err(Error::Dimension {
                        expected: pm,
                        found: y.len(),
                    });
                }
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data(format!(
                        "non-finite response for sequence {sequence}, subject {subject}"
                    )));
                }
                let design = build_design(&layout, sequence, subject, &covariates)?;
                Ok(Subject {
                    sequence,
                    subject,
                    covariates,
                    y,
                    x: design.x,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if subjects.is_empty() {
            return Err(Error::Data("dataset has no subjects".into()));
        }
        Ok(Self { layout, subjects })
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn obs_per_subject(&self) -> usize {
        self.layout.obs_per_subject()
    }

    pub fn n_obs(&self) -> usize {
        self.n_subjects() * self.obs_per_subject()
    }

    pub fn n_fixed(&self) -> usize {
        self.layout.n_fixed()
    }

    /// Same subjects listed twice, used for information-additivity checks.
    pub fn duplicated(&self) -> Self {
        let mut subjects = self.subjects.clone();
        subjects.extend(self.subjects.iter().cloned());
        Self {
            layout: self.layout.clone(),
            subjects,
        }
    }
}
