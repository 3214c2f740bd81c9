//! Design-matrix featurization.
//!
//! Raw covariates are expanded into main effects, squares of continuous
//! mains and pairwise interactions, then filtered and standardized.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{AteError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Main,
    Indicator,
    Quadratic,
    Interaction,
}

/// Column-oriented raw covariate table.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub indicator: Vec<bool>,
}

impl RawTable {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>, indicator: Vec<bool>) -> Result<Self> {
        if names.len() != columns.len() || names.len() != indicator.len() {
            return Err(AteError::DimensionMismatch(format!(
                "{} names, {} columns, {} indicator flags",
                names.len(),
                columns.len(),
                indicator.len()
            )));
        }
        let n = columns.first().map_or(0, Vec::len);
        for (name, col) in names.iter().zip(&columns) {
            if col.len() != n {
                return Err(AteError::DimensionMismatch(format!(
                    "column {name} has {} rows, expected {n}",
                    col.len()
                )));
            }
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(AteError::InvalidInput(format!("column {name} row {i} is not finite")));
            }
        }
        for ((name, col), &ind) in names.iter().zip(&columns).zip(&indicator) {
            if ind && col.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(AteError::InvalidInput(format!("indicator column {name} has values other than 0/1")));
            }
        }
        Ok(Self { names, columns, indicator })
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturizeOptions {
    pub include_quadratics: bool,
    pub include_interactions: bool,
    pub corr_threshold: f64,
    pub min_ones: usize,
    pub standardize: bool,
}

impl Default for FeaturizeOptions {
    fn default() -> Self {
        Self {
            include_quadratics: false,
            include_interactions: false,
            corr_threshold: 0.95,
            min_ones: 20,
            standardize: true,
        }
    }
}

impl FeaturizeOptions {
    /// Every candidate column is kept unless it is constant or a duplicate.
    pub fn unfiltered(include_quadratics: bool, include_interactions: bool) -> Self {
        Self {
            include_quadratics,
            include_interactions,
            corr_threshold: f64::INFINITY,
            min_ones: 0,
            standardize: true,
        }
    }
}

/// Affine map applied to a column: `stored = (raw - center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub center: f64,
    pub scale: f64,
}

impl Standardization {
    pub const IDENTITY: Self = Self { center: 0.0, scale: 1.0 };

    pub fn apply(&self, raw: f64) -> f64 {
        (raw - self.center) / self.scale
    }

    pub fn invert(&self, stored: f64) -> f64 {
        stored * self.scale + self.center
    }
}

/// Reason a candidate column was left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Dropped {
    Duplicate { column: String, duplicate_of: String },
    Correlated { column: String, main: String, correlation: f64 },
    Sparse { column: String, ones: usize },
    Constant { column: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    pub columns: DMatrix<f64>,
    pub column_names: Vec<String>,
    pub column_kinds: Vec<ColumnKind>,
    /// 0/1 columns: indicator mains and products of two indicators.
    pub binary: Vec<bool>,
    /// Raw column indices each output column is built from.
    pub sources: Vec<Vec<usize>>,
    pub standardization_record: Vec<Standardization>,
    pub dropped: Vec<Dropped>,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.columns.nrows()
    }

    pub fn n_columns(&self) -> usize {
        self.columns.ncols()
    }

    /// Column `j` on the scale it had before standardization.
    pub fn raw_column(&self, j: usize) -> Vec<f64> {
        let rec = self.standardization_record[j];
        self.columns.column(j).iter().map(|&v| rec.invert(v)).collect()
    }

    /// Maps coefficients fitted on the stored columns to the raw scale.
    /// Returns the raw slopes and the intercept shift `-sum(beta_j c_j / s_j)`.
    pub fn coefficients_to_raw(&self, beta: &[f64]) -> Result<(Vec<f64>, f64)> {
        if beta.len() != self.n_columns() {
            return Err(AteError::DimensionMismatch(format!(
                "{} coefficients for {} columns",
                beta.len(),
                self.n_columns()
            )));
        }
        let mut shift = 0.0;
        let raw = beta
            .iter()
            .zip(&self.standardization_record)
            .map(|(&b, rec)| {
                shift -= b * rec.center / rec.scale;
                b / rec.scale
            })
            .collect();
        Ok((raw, shift))
    }

    pub fn warnings(&self) -> impl Iterator<Item = String> + '_ {
        self.dropped.iter().filter_map(|d| match d {
            Dropped::Constant { column } => Some(format!("constant column {column} dropped")),
            _ => None,
        })
    }
}

struct Candidate {
    name: String,
    kind: ColumnKind,
    binary: bool,
    sources: Vec<usize>,
    values: Vec<f64>,
}

fn candidates(raw: &RawTable, opts: &FeaturizeOptions) -> Vec<Candidate> {
    let m = raw.n_columns();
    let mut out = Vec::new();
    for j in 0..m {
        out.push(Candidate {
            name: raw.names[j].clone(),
            kind: if raw.indicator[j] { ColumnKind::Indicator } else { ColumnKind::Main },
            binary: raw.indicator[j],
            sources: vec![j],
            values: raw.columns[j].clone(),
        });
    }
    if opts.include_quadratics {
        for j in (0..m).filter(|&j| !raw.indicator[j]) {
            out.push(Candidate {
                name: format!("{}^2", raw.names[j]),
                kind: ColumnKind::Quadratic,
                binary: false,
                sources: vec![j, j],
                values: raw.columns[j].iter().map(|v| v * v).collect(),
            });
        }
    }
    if opts.include_interactions {
        for j in 0..m {
            for k in j + 1..m {
                out.push(Candidate {
                    name: format!("{}:{}", raw.names[j], raw.names[k]),
                    kind: ColumnKind::Interaction,
                    binary: raw.indicator[j] && raw.indicator[k],
                    sources: vec![j, k],
                    values: raw.columns[j].iter().zip(&raw.columns[k]).map(|(a, b)| a * b).collect(),
                });
            }
        }
    }
    out
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

fn is_constant(values: &[f64]) -> bool {
    values.iter().all(|&v| v == values[0])
}

/// Pearson correlation; `None` when either column is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Expands, filters and standardizes `raw`.
///
/// Filters run in the order: exact duplicates, correlation of squares and
/// interactions with any main effect, sparse 0/1 columns, then constant
/// columns (only when standardizing). Binary columns are never rescaled.
pub fn build_design_matrix(raw: &RawTable, opts: &FeaturizeOptions) -> Result<DesignMatrix> {
    let n = raw.n_rows();
    if n < 2 {
        return Err(AteError::InvalidInput(format!("design needs at least 2 rows, got {n}")));
    }
    if !(opts.corr_threshold >= 0.0) {
        return Err(AteError::InvalidInput(format!(
            "corr_threshold must be non-negative, got {}",
            opts.corr_threshold
        )));
    }
    let mut dropped = Vec::new();

    let mut seen: HashMap<Vec<u64>, String> = HashMap::new();
    let mut kept = Vec::new();
    for cand in candidates(raw, opts) {
        let key: Vec<u64> = cand.values.iter().map(|v| (v + 0.0).to_bits()).collect();
        match seen.get(&key) {
            Some(first) => dropped.push(Dropped::Duplicate {
                column: cand.name,
                duplicate_of: first.clone(),
            }),
            None => {
                seen.insert(key, cand.name.clone());
                kept.push(cand);
            }
        }
    }

    let mains: Vec<usize> = (0..kept.len())
        .filter(|&i| matches!(kept[i].kind, ColumnKind::Main | ColumnKind::Indicator))
        .collect();
    let mut keep = vec![true; kept.len()];
    for i in 0..kept.len() {
        if matches!(kept[i].kind, ColumnKind::Main | ColumnKind::Indicator) {
            continue;
        }
        for &mi in &mains {
            if let Some(r) = pearson(&kept[i].values, &kept[mi].values) {
                if r.abs() > opts.corr_threshold {
                    dropped.push(Dropped::Correlated {
                        column: kept[i].name.clone(),
                        main: kept[mi].name.clone(),
                        correlation: r,
                    });
                    keep[i] = false;
                    break;
                }
            }
        }
    }

    for (i, cand) in kept.iter().enumerate() {
        if keep[i] && cand.binary {
            let ones = cand.values.iter().filter(|&&v| v == 1.0).count();
            if ones < opts.min_ones {
                dropped.push(Dropped::Sparse {
                    column: cand.name.clone(),
                    ones,
                });
                keep[i] = false;
            }
        }
    }

    if opts.standardize {
        for (i, cand) in kept.iter().enumerate() {
            if keep[i] && is_constant(&cand.values) {
                dropped.push(Dropped::Constant {
                    column: cand.name.clone(),
                });
                keep[i] = false;
            }
        }
    }

    let retained: Vec<Candidate> = kept.into_iter().zip(keep).filter(|(_, k)| *k).map(|(c, _)| c).collect();
    let mut columns = DMatrix::zeros(n, retained.len());
    let mut record = Vec::with_capacity(retained.len());
    for (j, cand) in retained.iter().enumerate() {
        let rec = if opts.standardize && !cand.binary {
            let (center, scale) = mean_sd(&cand.values);
            Standardization { center, scale }
        } else {
            Standardization::IDENTITY
        };
        for (i, &v) in cand.values.iter().enumerate() {
            columns[(i, j)] = rec.apply(v);
        }
        record.push(rec);
    }
    Ok(DesignMatrix {
        columns,
        column_names: retained.iter().map(|c| c.name.clone()).collect(),
        column_kinds: retained.iter().map(|c| c.kind).collect(),
        binary: retained.iter().map(|c| c.binary).collect(),
        sources: retained.iter().map(|c| c.sources.clone()).collect(),
        standardization_record: record,
        dropped,
    })
}
