//! Finite-population data model.
//!
//! A [`Population`] holds both potential outcomes for every unit and is only
//! available in simulation. An [`ExperimentSample`] is what an experimenter
//! observes: covariates, the assignment, and one outcome per unit.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{AteError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    covariates: DMatrix<f64>,
    outcomes_treated: DVector<f64>,
    outcomes_control: DVector<f64>,
    true_ate: f64,
}

impl Population {
    pub fn new(
        covariates: DMatrix<f64>,
        outcomes_treated: DVector<f64>,
        outcomes_control: DVector<f64>,
    ) -> Result<Self> {
        let n = outcomes_treated.len();
        if n < 2 {
            return Err(AteError::InvalidInput(format!(
                "population needs at least 2 units, got {n}"
            )));
        }
        if outcomes_control.len() != n || covariates.nrows() != n {
            return Err(AteError::DimensionMismatch(format!(
                "covariates have {} rows, treated outcomes {}, control outcomes {}",
                covariates.nrows(),
                n,
                outcomes_control.len()
            )));
        }
        check_finite(covariates.as_slice())?;
        check_finite(outcomes_treated.as_slice())?;
        check_finite(outcomes_control.as_slice())?;
        let true_ate = outcomes_treated.mean() - outcomes_control.mean();
        Ok(Self {
            covariates,
            outcomes_treated,
            outcomes_control,
            true_ate,
        })
    }

    pub fn n(&self) -> usize {
        self.outcomes_treated.len()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn outcomes_treated(&self) -> &DVector<f64> {
        &self.outcomes_treated
    }

    pub fn outcomes_control(&self) -> &DVector<f64> {
        &self.outcomes_control
    }

    pub fn true_ate(&self) -> f64 {
        self.true_ate
    }

    /// Reveal `Y_i = T_i a_i + (1 - T_i) b_i` under `assignment`.
    pub fn reveal(&self, assignment: &[u8]) -> Result<ExperimentSample> {
        if assignment.len() != self.n() {
            return Err(AteError::DimensionMismatch(format!(
                "assignment length {} != population size {}",
                assignment.len(),
                self.n()
            )));
        }
        let observed = DVector::from_iterator(
            self.n(),
            assignment.iter().enumerate().map(|(i, &t)| {
                if t == 1 {
                    self.outcomes_treated[i]
                } else {
                    self.outcomes_control[i]
                }
            }),
        );
        ExperimentSample::new(self.covariates.clone(), assignment.to_vec(), observed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSample {
    covariates: DMatrix<f64>,
    assignment: Vec<u8>,
    observed: DVector<f64>,
    treated: Vec<usize>,
    control: Vec<usize>,
}

impl ExperimentSample {
    pub fn new(covariates: DMatrix<f64>, assignment: Vec<u8>, observed: DVector<f64>) -> Result<Self> {
        let n = assignment.len();
        if observed.len() != n || covariates.nrows() != n {
            return Err(AteError::DimensionMismatch(format!(
                "covariates have {} rows, assignment {}, outcomes {}",
                covariates.nrows(),
                n,
                observed.len()
            )));
        }
        if let Some(i) = assignment.iter().position(|&t| t > 1) {
            return Err(AteError::InvalidInput(format!(
                "assignment[{i}] = {} is not 0/1",
                assignment[i]
            )));
        }
        check_finite(covariates.as_slice())?;
        check_finite(observed.as_slice())?;
        let treated: Vec<usize> = (0..n).filter(|&i| assignment[i] == 1).collect();
        let control: Vec<usize> = (0..n).filter(|&i| assignment[i] == 0).collect();
        if treated.is_empty() || control.is_empty() {
            return Err(AteError::InvalidInput(format!(
                "need 1 <= n_A <= n-1, got n_A = {} with n = {n}",
                treated.len()
            )));
        }
        Ok(Self {
            covariates,
            assignment,
            observed,
            treated,
            control,
        })
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn n_treated(&self) -> usize {
        self.treated.len()
    }

    pub fn n_control(&self) -> usize {
        self.control.len()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn assignment(&self) -> &[u8] {
        &self.assignment
    }

    pub fn observed(&self) -> &DVector<f64> {
        &self.observed
    }

    pub fn treated_indices(&self) -> &[usize] {
        &self.treated
    }

    pub fn control_indices(&self) -> &[usize] {
        &self.control
    }

    pub fn group_indices(&self, group: Group) -> &[usize] {
        match group {
            Group::Treated => &self.treated,
            Group::Control => &self.control,
        }
    }

    /// Covariate rows and outcomes of one arm.
    pub fn group_data(&self, group: Group) -> (DMatrix<f64>, DVector<f64>) {
        let idx = self.group_indices(group);
        let x = self.covariates.select_rows(idx.iter());
        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.observed[i]));
        (x, y)
    }

    /// Full-sample covariate means.
    pub fn covariate_means(&self) -> DVector<f64> {
        column_means(&self.covariates)
    }

    /// Same sample with `shift` added to every treated outcome.
    pub fn with_treated_shift(&self, shift: f64) -> Self {
        let mut out = self.clone();
        for &i in &self.treated {
            out.observed[i] += shift;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Treated,
    Control,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Treated => "treated",
            Group::Control => "control",
        }
    }
}

pub fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows().max(1) as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

/// Elementwise `log(|x| + 1)`; the sign is discarded.
pub fn log_transform_column(values: &[f64]) -> Result<Vec<f64>> {
    check_finite(values)?;
    Ok(values.iter().map(|v| v.abs().ln_1p()).collect())
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(AteError::NonFinite { index }),
        None => Ok(()),
    }
}
