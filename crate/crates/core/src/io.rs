//! Long-format CSV datasets and JSON fit reports.
//!
//! A dataset file has one row per scalar observation with the columns
//! `sequence, subject, period, treatment, response, value`; every further
//! column is a subject-level covariate. Indices are 1-based.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::design::{response_order, CrossoverLayout};
use crate::em::{FitResult, Scenario, ThetaState};
use crate::error::{Error, Result};

pub const REQUIRED_COLUMNS: [&str; 6] = [
    "sequence",
    "subject",
    "period",
    "treatment",
    "response",
    "value",
];

#[derive(Debug, Clone, PartialEq)]
pub struct LongRecord {
    pub sequence: usize,
    pub subject: usize,
    pub period: usize,
    pub treatment: usize,
    pub response_index: usize,
    /// `None` for an empty or `NA` cell.
    pub value: Option<f64>,
    pub covariates: BTreeMap<String, f64>,
}

/// A dataset read from disk. Subjects are renumbered 1..n within each
/// sequence in order of their file ids; `ids[k]` is the file's
/// `(sequence, subject)` for `dataset.subjects[k]`.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: Dataset,
    pub ids: Vec<(usize, usize)>,
    /// Subjects excluded for incomplete responses.
    pub dropped: Vec<(usize, usize)>,
}

fn parse_index(field: &str, column: &str, line: u64) -> Result<usize> {
    field
        .trim()
        .parse::<usize>()
        .ok()
        .filter(|&v| v > 0)
        .ok_or_else(|| {
            Error::Data(format!(
                "line {line}: `{column}` must be a positive integer, found `{field}`"
            ))
        })
}

fn parse_value(field: &str, column: &str, line: u64) -> Result<Option<f64>> {
    let f = field.trim();
    if f.is_empty() || f.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    match f.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(Error::Data(format!(
            "line {line}: `{column}` is not a finite number: `{field}`"
        ))),
    }
}

/// Parses the rows of a long CSV. Returns the covariate column names in
/// header order and the records.
pub fn parse_records<R: Read>(reader: R) -> Result<(Vec<String>, Vec<LongRecord>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("cannot read header: {e}")))?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Data("empty file: no header row".into()));
    }
    let mut pos = [0usize; 6];
    for (slot, name) in pos.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("missing required column `{name}`")))?;
    }
    let covariates: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !REQUIRED_COLUMNS.contains(h))
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Data(e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let get = |i: usize| row.get(i).unwrap_or("");
        let mut cov = BTreeMap::new();
        for (i, name) in &covariates {
            let v = parse_value(get(*i), name, line)?
                .ok_or_else(|| Error::Data(format!("line {line}: covariate `{name}` is empty")))?;
            cov.insert(name.clone(), v);
        }
        records.push(LongRecord {
            sequence: parse_index(get(pos[0]), "sequence", line)?,
            subject: parse_index(get(pos[1]), "subject", line)?,
            period: parse_index(get(pos[2]), "period", line)?,
            treatment: parse_index(get(pos[3]), "treatment", line)?,
            response_index: parse_index(get(pos[4]), "response", line)?,
            value: parse_value(get(pos[5]), "value", line)?,
            covariates: cov,
        });
    }
    if records.is_empty() {
        return Err(Error::Data("file has a header but no rows".into()));
    }
    Ok((covariates.into_iter().map(|(_, n)| n).collect(), records))
}

fn contiguous(values: &BTreeSet<usize>, what: &str) -> Result<usize> {
    let max = *values.iter().next_back().expect("non-empty");
    if values.len() != max {
        return Err(Error::Data(format!(
            "{what} values must be 1..={max} without gaps, found {values:?}"
        )));
    }
    Ok(max)
}

/// Infers the layout from `records` and builds the dataset, dropping
/// subjects that lack any (period, response) cell.
pub fn assemble_records(covariates: Vec<String>, records: &[LongRecord]) -> Result<LoadedData> {
    let seqs: BTreeSet<usize> = records.iter().map(|r| r.sequence).collect();
    let periods: BTreeSet<usize> = records.iter().map(|r| r.period).collect();
    let treats: BTreeSet<usize> = records.iter().map(|r| r.treatment).collect();
    let resps: BTreeSet<usize> = records.iter().map(|r| r.response_index).collect();
    let s = contiguous(&seqs, "sequence")?;
    let p = contiguous(&periods, "period")?;
    let t = contiguous(&treats, "treatment")?;
    let m = contiguous(&resps, "response")?;

    let mut assignment = vec![vec![0usize; p]; s];
    let mut cells: BTreeMap<(usize, usize), BTreeMap<(usize, usize), Option<f64>>> =
        BTreeMap::new();
    let mut subject_cov: BTreeMap<(usize, usize), BTreeMap<String, f64>> = BTreeMap::new();
    for r in records {
        let slot = &mut assignment[r.sequence - 1][r.period - 1];
        if *slot == 0 {
            *slot = r.treatment;
        } else if *slot != r.treatment {
            return Err(Error::Data(format!(
                "sequence {} period {} has treatments {} and {}",
                r.sequence, r.period, slot, r.treatment
            )));
        }
        let key = (r.sequence, r.subject);
        let subject = cells.entry(key).or_default();
        if subject
            .insert((r.period, r.response_index), r.value)
            .is_some()
        {
            return Err(Error::Data(format!(
                "duplicate record: sequence {}, subject {}, period {}, response {}",
                r.sequence, r.subject, r.period, r.response_index
            )));
        }
        match subject_cov.get(&key) {
            None => {
                subject_cov.insert(key, r.covariates.clone());
            }
            Some(c) if *c != r.covariates => {
                return Err(Error::Data(format!(
                    "covariates of sequence {}, subject {} vary between rows",
                    r.sequence, r.subject
                )));
            }
            Some(_) => {}
        }
    }
    if let Some((i, row)) = assignment
        .iter()
        .enumerate()
        .find(|(_, row)| row.contains(&0))
    {
        let u = row.iter().position(|&d| d == 0).expect("present") + 1;
        return Err(Error::Data(format!(
            "no treatment recorded for sequence {} period {u}",
            i + 1
        )));
    }

    let mut order = vec![];
    for u in 1..=p {
        for k in 1..=m {
            order.push((u, k));
        }
    }
    let mut kept: Vec<((usize, usize), DVector<f64>)> = Vec::new();
    let mut dropped = Vec::new();
    for (key, subject) in &cells {
        let values: Option<Vec<f64>> = order
            .iter()
            .map(|c| subject.get(c).copied().flatten())
            .collect();
        match values {
            Some(v) => kept.push((*key, DVector::from_vec(v))),
            None => {
                warn!(
                    "excluding sequence {} subject {}: incomplete responses",
                    key.0, key.1
                );
                dropped.push(*key);
            }
        }
    }

    let mut n_per_seq = vec![0usize; s];
    let mut entries = Vec::with_capacity(kept.len());
    let mut ids = Vec::with_capacity(kept.len());
    for (key, y) in kept {
        n_per_seq[key.0 - 1] += 1;
        entries.push((key.0, n_per_seq[key.0 - 1], subject_cov[&key].clone(), y));
        ids.push(key);
    }
    let layout = CrossoverLayout::new(n_per_seq, p, t, m, assignment, covariates)?;
    debug_assert_eq!(response_order(&layout), order);
    Ok(LoadedData {
        dataset: Dataset::new(layout, entries)?,
        ids,
        dropped,
    })
}

pub fn read_long_csv(path: &Path) -> Result<LoadedData> {
    let file = File::open(path)?;
    let (covariates, records) = parse_records(file)?;
    assemble_records(covariates, &records)
}

/// Writes `data` in long format; subject ids are the within-sequence indices.
pub fn write_long_csv<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Data(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = REQUIRED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(data.layout.covariates.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    let order = response_order(&data.layout);
    for s in &data.subjects {
        let assign = &data.layout.assignment[s.sequence - 1];
        for (row, &(u, k)) in order.iter().enumerate() {
            let mut rec = vec![
                s.sequence.to_string(),
                s.subject.to_string(),
                u.to_string(),
                assign[u - 1].to_string(),
                k.to_string(),
                s.y[row].to_string(),
            ];
            for c in &data.layout.covariates {
                rec.push(s.covariates[c].to_string());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_long_csv_file(data: &Dataset, path: &Path) -> Result<()> {
    write_long_csv(data, File::create(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterEstimate {
    pub name: String,
    pub estimate: f64,
    /// `null` when the information matrix was not positive definite.
    pub se: Option<f64>,
}

/// Machine-readable fit output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub scenario: Scenario,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub n_params: usize,
    pub n_obs: usize,
    pub n_subjects: usize,
    pub parameters: Vec<ParameterEstimate>,
    pub beta: Vec<f64>,
    pub sigma_e2: f64,
    pub sigma_s2: f64,
    /// Absent for the normal model.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub delta: Option<f64>,
    pub mean_offset: f64,
    pub intercept: f64,
    pub corrected_intercept: f64,
    pub layout: CrossoverLayout,
    pub seed: u64,
    pub trajectory: Vec<f64>,
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn new(result: &FitResult, data: &Dataset, seed: u64) -> Self {
        let theta = &result.theta;
        let skewed = theta.scenario.is_skewed();
        let parameters = result
            .param_names
            .iter()
            .zip(result.estimates())
            .zip(&result.se)
            .map(|((name, estimate), se)| ParameterEstimate {
                name: name.clone(),
                estimate,
                se: se.is_finite().then_some(*se),
            })
            .collect();
        Self {
            scenario: theta.scenario,
            converged: result.converged,
            iterations: result.iterations,
            loglik: result.loglik,
            aic: result.aic,
            bic: result.bic,
            n_params: result.k,
            n_obs: result.n_obs,
            n_subjects: data.n_subjects(),
            parameters,
            beta: theta.beta.iter().copied().collect(),
            sigma_e2: theta.sigma_e2,
            sigma_s2: theta.sigma_s2,
            lambda: skewed.then_some(theta.lambda),
            delta: skewed.then(|| theta.delta()),
            mean_offset: theta.mean_offset(),
            intercept: theta.beta[0],
            corrected_intercept: result.corrected_intercept,
            layout: data.layout.clone(),
            seed,
            trajectory: result.trajectory.clone(),
            warnings: result.warnings.clone(),
        }
    }

    pub fn theta(&self) -> ThetaState {
        ThetaState {
            beta: DVector::from_vec(self.beta.clone()),
            sigma_e2: self.sigma_e2,
            sigma_s2: self.sigma_s2,
            lambda: self.lambda.unwrap_or(0.0),
            scenario: self.scenario,
        }
    }

    /// Errors unless `data` has this fit's design dimensions.
    pub fn check_compatible(&self, data: &Dataset) -> Result<()> {
        if data.n_fixed() != self.beta.len() {
            return Err(Error::Dimension {
                expected: self.beta.len(),
                found: data.n_fixed(),
            });
        }
        let pm = self.layout.obs_per_subject();
        if data.obs_per_subject() != pm {
            return Err(Error::Dimension {
                expected: pm,
                found: data.obs_per_subject(),
            });
        }
        if data.layout.covariates != self.layout.covariates
            || data.layout.assignment != self.layout.assignment
        {
            return Err(Error::Data(
                "data layout differs from the layout the fit was made on".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(File::open(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "sequence,subject,period,treatment,response,value\n";

    fn two_by_two(skip_subject: Option<usize>) -> String {
        let mut s = HEADER.to_string();
        for seq in 1..=2usize {
            for subj in 1..=3usize {
                for period in 1..=2usize {
                    let treat = if seq == 1 { period } else { 3 - period };
                    for resp in 1..=2 {
                        let v =
                            if Some(subj) == skip_subject && seq == 1 && period == 2 && resp == 2 {
                                String::new()
                            } else {
                                format!(
                                    "{}",
                                    (seq * 100 + subj * 10 + period) as f64 + 0.5 * resp as f64
                                )
                            };
                        s += &format!("{seq},{subj},{period},{treat},{resp},{v}\n");
                    }
                }
            }
        }
        s
    }

    fn load(text: &str) -> Result<LoadedData> {
        let (cov, rec) = parse_records(text.as_bytes())?;
        assemble_records(cov, &rec)
    }

    #[test]
    fn infers_layout() {
        let d = load(&two_by_two(None)).unwrap();
        let l = &d.dataset.layout;
        assert_eq!(
            (l.sequences(), l.periods, l.treatments, l.responses),
            (2, 2, 2, 2)
        );
        assert_eq!(l.assignment, vec![vec![1, 2], vec![2, 1]]);
        assert_eq!(d.dataset.n_subjects(), 6);
        assert_eq!(
            d.dataset.subjects[0].y.as_slice(),
            &[111.5, 112.0, 112.5, 113.0]
        );
    }

    #[test]
    fn incomplete_subject_dropped() {
        let d = load(&two_by_two(Some(2))).unwrap();
        assert_eq!(d.dataset.n_subjects(), 5);
        assert_eq!(d.dropped, vec![(1, 2)]);
        assert_eq!(d.dataset.layout.n_per_seq, vec![2, 3]);
        assert_eq!(d.ids[1], (1, 3));
    }

    #[test]
    fn structured_errors() {
        assert!(matches!(load(""), Err(Error::Data(_))));
        assert!(matches!(load(HEADER), Err(Error::Data(_))));
        let bad = two_by_two(None).replacen("111.5", "abc", 1);
        assert!(load(&bad)
            .unwrap_err()
            .to_string()
            .contains("not a finite number"));
        let mut dup = two_by_two(None);
        dup += "1,1,1,1,1,9\n";
        assert!(load(&dup).unwrap_err().to_string().contains("duplicate"));
        let mut clash = two_by_two(None);
        clash += "1,9,1,2,1,9\n";
        assert!(load(&clash).unwrap_err().to_string().contains("treatments"));
        assert!(load("sequence,subject\n1,1\n").is_err());
    }

    #[test]
    fn covariates_round_trip() {
        let layout = CrossoverLayout::three_by_three(2);
        let entries = (0..6)
            .map(|i| {
                let cov = BTreeMap::from([("w".to_string(), (i % 3) as f64)]);
                (
                    i / 2 + 1,
                    i % 2 + 1,
                    cov,
                    DVector::from_fn(12, |r, _| 0.1 * r as f64 + i as f64 / 3.0),
                )
            })
            .collect();
        let data = Dataset::new(layout, entries).unwrap();
        let mut buf = Vec::new();
        write_long_csv(&data, &mut buf).unwrap();
        let back = load(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back.dataset, data);
    }
}
