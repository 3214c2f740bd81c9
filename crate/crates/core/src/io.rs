//! CSV and JSON-sidecar ingestion, and design-matrix output.
//!
//! Data files are RFC 4180 CSV with a header row. The sidecar names the
//! outcome and treatment columns and flags 0/1 indicator covariates:
//!
//! ```json
//! {"outcome": "y", "treatment": "t", "columns": {"female": {"indicator": true}}}
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{ColumnKind, DesignMatrix, Dropped, RawTable, Standardization};
use crate::error::{AteError, Result};
use crate::model::ExperimentSample;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    #[serde(default)]
    pub indicator: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treatment: Option<String>,
    #[serde(default)]
    pub columns: BTreeMap<String, ColumnMeta>,
}

impl DataMeta {
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        serde_json::from_reader(reader).map_err(|e| AteError::Parse(format!("metadata: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_reader(open(path)?)
    }

    fn is_indicator(&self, name: &str) -> bool {
        self.columns.get(name).is_some_and(|c| c.indicator)
    }
}

/// Numeric table in column-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| AteError::Io(format!("{}: {e}", path.display())))
}

impl Table {
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let names: Vec<String> = rdr
            .headers()
            .map_err(|e| AteError::Parse(format!("csv header: {e}")))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        if names.is_empty() || names.iter().all(String::is_empty) {
            return Err(AteError::Parse("csv header is empty".into()));
        }
        let mut sorted = names.clone();
        sorted.sort();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(AteError::Parse(format!("duplicate csv column {}", w[0])));
        }
        let mut columns = vec![Vec::new(); names.len()];
        for (row, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| AteError::Parse(format!("csv row {}: {e}", row + 2)))?;
            for (j, field) in record.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    AteError::Parse(format!("csv row {} column {}: cannot parse {field:?}", row + 2, names[j]))
                })?;
                if !v.is_finite() {
                    return Err(AteError::Parse(format!(
                        "csv row {} column {}: non-finite value",
                        row + 2,
                        names[j]
                    )));
                }
                columns[j].push(v);
            }
        }
        Ok(Self { names, columns })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_reader(open(path)?)
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|j| self.columns[j].as_slice())
            .ok_or_else(|| AteError::InvalidInput(format!("column {name} not found in csv")))
    }

    fn check_meta(&self, meta: &DataMeta) -> Result<()> {
        if let Some(name) = meta.columns.keys().find(|k| !self.names.contains(k)) {
            return Err(AteError::InvalidInput(format!("metadata names column {name} which is not in the csv")));
        }
        Ok(())
    }

    /// Covariate columns: everything except the outcome and treatment.
    pub fn covariates(&self, meta: &DataMeta) -> Result<RawTable> {
        self.check_meta(meta)?;
        let skip = [meta.outcome.as_deref(), meta.treatment.as_deref()];
        let keep: Vec<usize> = (0..self.names.len())
            .filter(|&j| !skip.contains(&Some(self.names[j].as_str())))
            .collect();
        RawTable::new(
            keep.iter().map(|&j| self.names[j].clone()).collect(),
            keep.iter().map(|&j| self.columns[j].clone()).collect(),
            keep.iter().map(|&j| meta.is_indicator(&self.names[j])).collect(),
        )
    }

    /// Builds an experiment sample and returns it with the covariate names.
    pub fn sample(&self, meta: &DataMeta) -> Result<(ExperimentSample, Vec<String>)> {
        let outcome = meta
            .outcome
            .as_deref()
            .ok_or_else(|| AteError::InvalidInput("metadata does not name an outcome column".into()))?;
        let treatment = meta
            .treatment
            .as_deref()
            .ok_or_else(|| AteError::InvalidInput("metadata does not name a treatment column".into()))?;
        if outcome == treatment {
            return Err(AteError::InvalidInput("outcome and treatment must be different columns".into()));
        }
        let y = self.column(outcome)?;
        let t = self.column(treatment)?;
        let assignment = t
            .iter()
            .enumerate()
            .map(|(i, &v)| match v {
                0.0 => Ok(0u8),
                1.0 => Ok(1u8),
                _ => Err(AteError::InvalidInput(format!(
                    "treatment column {treatment} row {} is {v}, expected 0 or 1",
                    i + 2
                ))),
            })
            .collect::<Result<Vec<u8>>>()?;
        let raw = self.covariates(meta)?;
        let n = self.n_rows();
        let x = DMatrix::from_fn(n, raw.n_columns(), |i, j| raw.columns[j][i]);
        let sample = ExperimentSample::new(x, assignment, DVector::from_column_slice(y))?;
        Ok((sample, raw.names))
    }
}

/// Metadata written next to a featurized CSV. It is a valid [`DataMeta`]
/// for the output file, plus the information needed to undo scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMetadata {
    #[serde(flatten)]
    pub data: DataMeta,
    pub design: DesignColumns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignColumns {
    pub names: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    pub sources: Vec<Vec<String>>,
    pub standardization_record: Vec<Standardization>,
    pub dropped: Vec<Dropped>,
}

impl DesignMetadata {
    pub fn new(design: &DesignMatrix, raw: &RawTable, meta: &DataMeta) -> Self {
        let columns = design
            .column_names
            .iter()
            .zip(&design.binary)
            .map(|(name, &b)| (name.clone(), ColumnMeta { indicator: b }))
            .collect();
        Self {
            data: DataMeta {
                outcome: meta.outcome.clone(),
                treatment: meta.treatment.clone(),
                columns,
            },
            design: DesignColumns {
                names: design.column_names.clone(),
                kinds: design.column_kinds.clone(),
                sources: design
                    .sources
                    .iter()
                    .map(|s| s.iter().map(|&j| raw.names[j].clone()).collect())
                    .collect(),
                standardization_record: design.standardization_record.clone(),
                dropped: design.dropped.clone(),
            },
        }
    }
}

/// Writes the design columns, then any passthrough columns (typically the
/// outcome and treatment) unchanged.
pub fn write_design_csv<W: Write>(writer: W, design: &DesignMatrix, passthrough: &[(&str, &[f64])]) -> Result<()> {
    let io_err = |e: csv::Error| AteError::Io(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    let header = design
        .column_names
        .iter()
        .map(String::as_str)
        .chain(passthrough.iter().map(|(n, _)| *n));
    w.write_record(header).map_err(io_err)?;
    let mut row = Vec::with_capacity(design.n_columns() + passthrough.len());
    for i in 0..design.n_rows() {
        row.clear();
        row.extend((0..design.n_columns()).map(|j| design.columns[(i, j)].to_string()));
        row.extend(passthrough.iter().map(|(_, c)| c[i].to_string()));
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(|e| AteError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design_matrix, FeaturizeOptions};

    const CSV: &str = "y,t,age,female\n1.5,1,30,1\n2.0,0,41,0\n0.5,1,25,0\n3.0,0,52,1\n";
    const META: &str = r#"{"outcome":"y","treatment":"t","columns":{"female":{"indicator":true}}}"#;

    #[test]
    fn reads_sample_and_names() {
        let table = Table::from_reader(CSV.as_bytes()).unwrap();
        let meta = DataMeta::from_reader(META.as_bytes()).unwrap();
        let (s, names) = table.sample(&meta).unwrap();
        assert_eq!(names, ["age", "female"]);
        assert_eq!(s.assignment(), &[1, 0, 1, 0]);
        assert_eq!(s.observed().as_slice(), &[1.5, 2.0, 0.5, 3.0]);
        assert_eq!(s.covariates()[(3, 0)], 52.0);
        let raw = table.covariates(&meta).unwrap();
        assert_eq!(raw.indicator, [false, true]);
    }

    #[test]
    fn input_errors_are_classified() {
        let meta = DataMeta::from_reader(META.as_bytes()).unwrap();
        let cases = [
            "y,t,age\n1,1,2\n2,0,x\n",
            "y,t,age\n1,1,2\n2,0\n",
            "y,t,age\n1,2,2\n2,0,3\n",
            "y,age\n1,2\n2,3\n",
            "y,t,y\n1,1,2\n",
        ];
        for csv in cases {
            let err = Table::from_reader(csv.as_bytes()).and_then(|t| t.sample(&meta).map(|_| ()));
            assert!(err.as_ref().is_err_and(AteError::is_input_error), "{csv}: {err:?}");
        }
        assert!(DataMeta::from_reader(&b"{not json"[..]).unwrap_err().is_input_error());
        let missing = DataMeta {
            outcome: Some("y".into()),
            ..DataMeta::default()
        };
        let t = Table::from_reader(CSV.as_bytes()).unwrap();
        assert!(t.sample(&missing).unwrap_err().is_input_error());
    }

    #[test]
    fn design_csv_round_trips_through_reader() {
        let csv = "a,b,y\n1,2,0.5\n2,1.5,1\n4,3,2\n7,1,3\n";
        let table = Table::from_reader(csv.as_bytes()).unwrap();
        let meta = DataMeta {
            outcome: Some("y".into()),
            ..DataMeta::default()
        };
        let raw = table.covariates(&meta).unwrap();
        let design = build_design_matrix(&raw, &FeaturizeOptions::unfiltered(true, true)).unwrap();
        let mut out = Vec::new();
        write_design_csv(&mut out, &design, &[("y", table.column("y").unwrap())]).unwrap();
        let back = Table::from_reader(out.as_slice()).unwrap();
        assert_eq!(back.names, ["a", "b", "a^2", "b^2", "a:b", "y"]);
        for j in 0..design.n_columns() {
            assert_eq!(back.columns[j], design.columns.column(j).iter().copied().collect::<Vec<_>>());
        }
        let md = DesignMetadata::new(&design, &raw, &meta);
        let json = serde_json::to_string(&md).unwrap();
        let as_meta = DataMeta::from_reader(json.as_bytes()).unwrap();
        assert_eq!(as_meta.outcome.as_deref(), Some("y"));
        let parsed: DesignMetadata = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, md);
        assert_eq!(parsed.design.sources[4], ["a", "b"]);
    }
}
