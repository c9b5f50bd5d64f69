//! Observations `O = (W, A, Y)` and iid samples of them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single observed unit: covariates `w`, binary treatment `a`, outcome `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub w: Vec<f64>,
    pub a: u8,
    pub y: f64,
}

impl Observation {
    pub fn new(w: Vec<f64>, a: u8, y: f64) -> Result<Self> {
        let obs = Self { w, a, y };
        obs.validate()?;
        Ok(obs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.a > 1 {
            return Err(Error::InvalidObservation(format!(
                "treatment must be 0 or 1, got {}",
                self.a
            )));
        }
        if !self.y.is_finite() {
            return Err(Error::InvalidObservation(format!(
                "outcome must be finite, got {}",
                self.y
            )));
        }
        if let Some(bad) = self.w.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidObservation(format!(
                "covariates must be finite, got {bad}"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn untreated(&self) -> bool {
        self.a == 0
    }

    #[inline]
    pub fn treated(&self) -> bool {
        self.a == 1
    }
}

/// Exact identity of a covariate vector.
///
/// Values are compared bitwise after mapping `-0.0` to `0.0`, so two
/// covariate vectors are the same stratum only if they are the same floats.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CovKey(Vec<u64>);

impl CovKey {
    pub fn new(w: &[f64]) -> Self {
        CovKey(w.iter().map(|&v| canonical(v).to_bits()).collect())
    }
}

#[inline]
pub(crate) fn canonical(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v
    }
}

/// An iid sample `O_1, ..., O_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    rows: Vec<Observation>,
    covariate_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset with default covariate names `w1..wd`.
    pub fn new(rows: Vec<Observation>) -> Result<Self> {
        let dim = rows.first().map(|r| r.w.len()).ok_or(Error::EmptyDataset)?;
        let names = (1..=dim).map(|j| format!("w{j}")).collect();
        Self::with_names(rows, names)
    }

    pub fn with_names(rows: Vec<Observation>, covariate_names: Vec<String>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let dim = covariate_names.len();
        for (i, r) in rows.iter().enumerate() {
            r.validate()?;
            if r.w.len() != dim {
                return Err(Error::InvalidObservation(format!(
                    "row {} has {} covariates, expected {dim}",
                    i + 1,
                    r.w.len()
                )));
            }
        }
        Ok(Self {
            rows,
            covariate_names,
        })
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Observation> {
        self.rows.iter()
    }

    /// `P_n(A)`: the fraction of treated rows.
    pub fn treated_fraction(&self) -> f64 {
        self.rows.iter().filter(|r| r.treated()).count() as f64 / self.n() as f64
    }

    /// Rows selected by index, keeping covariate names. `None` if `idx` is empty.
    pub fn subset(&self, idx: &[usize]) -> Option<Dataset> {
        if idx.is_empty() {
            return None;
        }
        Some(Dataset {
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            covariate_names: self.covariate_names.clone(),
        })
    }

    /// Same rows with every outcome shifted by `c`.
    pub fn shift_outcomes(&self, c: f64) -> Dataset {
        Dataset {
            rows: self
                .rows
                .iter()
                .map(|r| Observation {
                    w: r.w.clone(),
                    a: r.a,
                    y: r.y + c,
                })
                .collect(),
            covariate_names: self.covariate_names.clone(),
        }
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a Observation;
    type IntoIter = std::slice::Iter<'a, Observation>;

    fn into_iter(self) -> Self::IntoIter {
        self.rows.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_binary_treatment() {
        assert!(Observation::new(vec![0.0], 2, 1.0).is_err());
        assert!(Observation::new(vec![f64::NAN], 0, 1.0).is_err());
        assert!(Observation::new(vec![0.0], 0, f64::INFINITY).is_err());
    }

    #[test]
    fn negative_zero_is_the_same_stratum() {
        assert_eq!(CovKey::new(&[-0.0, 1.0]), CovKey::new(&[0.0, 1.0]));
        assert_ne!(CovKey::new(&[0.1 + 0.2]), CovKey::new(&[0.3]));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(matches!(Dataset::new(vec![]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn ragged_rows_rejected() {
        let rows = vec![
            Observation::new(vec![0.0], 0, 1.0).unwrap(),
            Observation::new(vec![0.0, 1.0], 1, 1.0).unwrap(),
        ];
        assert!(Dataset::new(rows).is_err());
    }
}
