//! Trial and external-control data: the unified sample table, CSV ingestion,
//! source/arm partitioning and covariate standardization.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unified sample table for RCT rows and external controls (ECs).
///
/// Rows with `source == false` are external controls and are never treated.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    covariates: DMatrix<f64>,
    treatment: Vec<bool>,
    outcome: Vec<f64>,
    source: Vec<bool>,
    covariate_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        covariates: DMatrix<f64>,
        treatment: Vec<bool>,
        outcome: Vec<f64>,
        source: Vec<bool>,
    ) -> Result<Self> {
        let names = (0..covariates.ncols()).map(|j| format!("x{}", j + 1)).collect();
        Self::with_names(covariates, treatment, outcome, source, names)
    }

    pub fn with_names(
        covariates: DMatrix<f64>,
        treatment: Vec<bool>,
        outcome: Vec<f64>,
        source: Vec<bool>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = covariates.nrows();
        if n == 0 {
            return Err(Error::Empty);
        }
        if treatment.len() != n || outcome.len() != n || source.len() != n {
            return Err(Error::Shape(format!(
                "covariates have {n} rows but treatment/outcome/source have {}/{}/{}",
                treatment.len(),
                outcome.len(),
                source.len()
            )));
        }
        if covariate_names.len() != covariates.ncols() {
            return Err(Error::Shape(format!(
                "{} covariate names for {} columns",
                covariate_names.len(),
                covariates.ncols()
            )));
        }
        for i in 0..n {
            if !source[i] && treatment[i] {
                return Err(Error::TreatedExternalControl { row: i });
            }
            if !outcome[i].is_finite() {
                return Err(Error::NonFinite { row: i, column: "outcome".into() });
            }
            for j in 0..covariates.ncols() {
                if !covariates[(i, j)].is_finite() {
                    return Err(Error::NonFinite { row: i, column: covariate_names[j].clone() });
                }
            }
        }
        Ok(Self { covariates, treatment, outcome, source, covariate_names })
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    /// Number of covariates.
    pub fn d(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn treatment(&self) -> &[bool] {
        &self.treatment
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    /// `true` marks an RCT row, `false` an external control.
    pub fn source(&self) -> &[bool] {
        &self.source
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.covariates.row(i).transpose()
    }

    /// Copies the listed rows, in the given order, into a new table.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let covariates = self.covariates.select_rows(rows);
        Dataset {
            covariates,
            treatment: rows.iter().map(|&i| self.treatment[i]).collect(),
            outcome: rows.iter().map(|&i| self.outcome[i]).collect(),
            source: rows.iter().map(|&i| self.source[i]).collect(),
            covariate_names: self.covariate_names.clone(),
        }
    }

    /// Returns a copy with the outcomes of `rows` replaced by `values`.
    pub fn with_outcomes(&self, rows: &[usize], values: &[f64]) -> Result<Dataset> {
        if rows.len() != values.len() {
            return Err(Error::Shape(format!("{} rows but {} values", rows.len(), values.len())));
        }
        let mut out = self.clone();
        for (&i, &v) in rows.iter().zip(values) {
            if i >= out.n() {
                return Err(Error::Shape(format!("row {i} out of range")));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite { row: i, column: "outcome".into() });
            }
            out.outcome[i] = v;
        }
        Ok(out)
    }

    /// Stacks the rows of `other` below `self`. Covariate counts must agree.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.d() != other.d() {
            return Err(Error::Shape(format!("{} vs {} covariates", self.d(), other.d())));
        }
        let n = self.n() + other.n();
        let covariates = DMatrix::from_fn(n, self.d(), |i, j| {
            if i < self.n() {
                self.covariates[(i, j)]
            } else {
                other.covariates[(i - self.n(), j)]
            }
        });
        Ok(Dataset {
            covariates,
            treatment: [self.treatment.as_slice(), &other.treatment].concat(),
            outcome: [self.outcome.as_slice(), &other.outcome].concat(),
            source: [self.source.as_slice(), &other.source].concat(),
            covariate_names: self.covariate_names.clone(),
        })
    }
}

/// Column roles for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub covariates: Vec<String>,
    pub treatment: String,
    pub outcome: String,
    /// 1 = RCT, 0 = external control.
    pub source: String,
}

impl Schema {
    /// Parses `covariates=a,b,c;treatment=t;outcome=y;source=r`.
    pub fn parse_inline(spec: &str) -> Result<Self> {
        let mut map: HashMap<&str, &str> = HashMap::new();
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("schema entry `{part}` lacks `=`")))?;
            map.insert(k.trim(), v.trim());
        }
        let get = |key: &str| {
            map.get(key)
                .map(|s| s.to_string())
                .ok_or_else(|| Error::InvalidArgument(format!("schema is missing `{key}`")))
        };
        let covariates: Vec<String> = get("covariates")?
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if covariates.is_empty() {
            return Err(Error::InvalidArgument("schema lists no covariates".into()));
        }
        Ok(Schema {
            covariates,
            treatment: get("treatment")?,
            outcome: get("outcome")?,
            source: get("source")?,
        })
    }

    /// The schema used by [`write_csv`] for tables built in memory.
    pub fn for_dataset(ds: &Dataset) -> Self {
        Schema {
            covariates: ds.covariate_names().to_vec(),
            treatment: "treatment".into(),
            outcome: "outcome".into(),
            source: "source".into(),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|source| Error::Io { path: path.into(), source })?;
    let mut text = String::new();
    file.read_to_string(&mut text)
        .map_err(|source| Error::Io { path: path.into(), source })?;
    read_csv(text.as_bytes(), schema)
}

/// Parses CSV text with a header row. Invalid rows are a hard error.
pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let position = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let cov_pos: Vec<usize> = schema.covariates.iter().map(|c| position(c)).collect::<Result<_>>()?;
    let t_pos = position(&schema.treatment)?;
    let y_pos = position(&schema.outcome)?;
    let r_pos = position(&schema.source)?;

    let d = cov_pos.len();
    let mut flat = Vec::new();
    let mut treatment = Vec::new();
    let mut outcome = Vec::new();
    let mut source = Vec::new();

    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let cell = |pos: usize, column: &str| -> Result<f64> {
            let raw = record.get(pos).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| Error::NonNumeric {
                row,
                column: column.to_string(),
                value: raw.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row, column: column.to_string() });
            }
            Ok(v)
        };
        let binary = |pos: usize, column: &str| -> Result<bool> {
            let v = cell(pos, column)?;
            if v == 0.0 {
                Ok(false)
            } else if v == 1.0 {
                Ok(true)
            } else {
                Err(Error::NotBinary { row, column: column.to_string(), value: v })
            }
        };
        for (&pos, name) in cov_pos.iter().zip(&schema.covariates) {
            flat.push(cell(pos, name)?);
        }
        let a = binary(t_pos, &schema.treatment)?;
        let r = binary(r_pos, &schema.source)?;
        if !r && a {
            return Err(Error::TreatedExternalControl { row });
        }
        treatment.push(a);
        source.push(r);
        outcome.push(cell(y_pos, &schema.outcome)?);
    }
    if outcome.is_empty() {
        return Err(Error::Empty);
    }
    let covariates = DMatrix::from_row_slice(outcome.len(), d, &flat);
    Dataset::with_names(covariates, treatment, outcome, source, schema.covariates.clone())
}

pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>, schema: &Schema) -> Result<()> {
    let path = path.as_ref();
    let mut file = File::create(path).map_err(|source| Error::Io { path: path.into(), source })?;
    let mut buf = Vec::new();
    write_csv_to(ds, &mut buf, schema)?;
    file.write_all(&buf).map_err(|source| Error::Io { path: path.into(), source })
}

/// Floats are written in shortest round-trip form, so reading back is bit-exact.
pub fn write_csv_to<W: Write>(ds: &Dataset, writer: W, schema: &Schema) -> Result<()> {
    if schema.covariates.len() != ds.d() {
        return Err(Error::Shape(format!(
            "schema names {} covariates, dataset has {}",
            schema.covariates.len(),
            ds.d()
        )));
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    let mut header: Vec<&str> = schema.covariates.iter().map(String::as_str).collect();
    header.extend([schema.treatment.as_str(), schema.outcome.as_str(), schema.source.as_str()]);
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec: Vec<String> = (0..ds.d()).map(|j| ds.covariates[(i, j)].to_string()).collect();
        rec.push(u8::from(ds.treatment[i]).to_string());
        rec.push(ds.outcome[i].to_string());
        rec.push(u8::from(ds.source[i]).to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| Error::Io { path: "<writer>".into(), source })?;
    Ok(())
}

/// Per-column affine transform applied by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    pub column: String,
    pub mean: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub indices: Vec<usize>,
    pub records: Vec<ColumnScaling>,
}

impl Standardization {
    pub fn invert(&self, ds: &Dataset) -> Dataset {
        let mut out = ds.clone();
        for (&j, rec) in self.indices.iter().zip(&self.records) {
            for i in 0..out.n() {
                out.covariates[(i, j)] = out.covariates[(i, j)] * rec.scale + rec.mean;
            }
        }
        out
    }

    /// JSON sidecar: an array of `{"column", "mean", "scale"}` objects.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.records)?)
    }
}

/// Centers and scales the selected columns to sample mean 0 and sample
/// standard deviation 1. Binary indicators are usually left out.
pub fn standardize(ds: &Dataset, columns: &[usize]) -> Result<(Dataset, Standardization)> {
    let n = ds.n();
    if n < 2 {
        return Err(Error::InvalidArgument("standardization needs at least two rows".into()));
    }
    let mut out = ds.clone();
    let mut records = Vec::with_capacity(columns.len());
    for &j in columns {
        if j >= ds.d() {
            return Err(Error::InvalidArgument(format!("column {j} out of range")));
        }
        let col = ds.covariates.column(j);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let scale = var.sqrt();
        if !(scale > 0.0) || scale <= 1e-12 * mean.abs().max(1.0) {
            return Err(Error::ConstantColumn { column: j });
        }
        for i in 0..n {
            out.covariates[(i, j)] = (ds.covariates[(i, j)] - mean) / scale;
        }
        records.push(ColumnScaling { column: ds.covariate_names[j].clone(), mean, scale });
    }
    Ok((out, Standardization { indices: columns.to_vec(), records }))
}

/// Row partition by source and arm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DataSplit {
    pub rct_indices: Vec<usize>,
    pub rct_treated_indices: Vec<usize>,
    /// RCT controls, the set the control outcome model is trained on.
    pub rct_control_indices: Vec<usize>,
    pub ec_indices: Vec<usize>,
}

impl DataSplit {
    pub fn n_rct(&self) -> usize {
        self.rct_indices.len()
    }

    pub fn n_treated(&self) -> usize {
        self.rct_treated_indices.len()
    }

    pub fn n_control(&self) -> usize {
        self.rct_control_indices.len()
    }

    pub fn n_ec(&self) -> usize {
        self.ec_indices.len()
    }
}

/// Partitions rows without checking that the control arm is large enough
/// to fit an outcome model. See [`split`].
pub fn partition(ds: &Dataset) -> DataSplit {
    let mut s = DataSplit {
        rct_indices: Vec::new(),
        rct_treated_indices: Vec::new(),
        rct_control_indices: Vec::new(),
        ec_indices: Vec::new(),
    };
    for i in 0..ds.n() {
        match (ds.source[i], ds.treatment[i]) {
            (true, true) => {
                s.rct_indices.push(i);
                s.rct_treated_indices.push(i);
            }
            (true, false) => {
                s.rct_indices.push(i);
                s.rct_control_indices.push(i);
            }
            (false, _) => s.ec_indices.push(i),
        }
    }
    s
}

pub fn split(ds: &Dataset) -> Result<DataSplit> {
    let s = partition(ds);
    let required = ds.d() + 2;
    if s.n_control() < required {
        return Err(Error::TooFewControls { n_controls: s.n_control(), required });
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        Dataset::new(
            DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]),
            vec![true, false, false, false],
            vec![1.0, 2.0, 3.0, 4.0],
            vec![true, true, true, false],
        )
        .unwrap()
    }

    #[test]
    fn well_formed_csv_loads() {
        let text = "a,b,t,y,r\n1,2,1,3.5,1\n2,3,0,1,1\n3,4,0,2,1\n4,5,0,0.25,0\n";
        let schema = Schema::parse_inline("covariates=a,b;treatment=t;outcome=y;source=r").unwrap();
        let ds = read_csv(text.as_bytes(), &schema).unwrap();
        assert_eq!(ds.n(), 4);
        assert_eq!(ds.d(), 2);
        assert_eq!(ds.covariates()[(3, 1)], 5.0);
        assert_eq!(ds.source(), &[true, true, true, false]);
    }

    #[test]
    fn treated_ec_is_rejected() {
        let text = "a,t,y,r\n1,1,3.5,1\n2,1,1,0\n";
        let schema = Schema::parse_inline("covariates=a;treatment=t;outcome=y;source=r").unwrap();
        let err = read_csv(text.as_bytes(), &schema).unwrap_err();
        assert!(matches!(err, Error::TreatedExternalControl { row: 1 }));
        assert!(err.to_string().contains("EC row is treated"));
    }

    #[test]
    fn csv_errors() {
        let schema = Schema::parse_inline("covariates=a;treatment=t;outcome=y;source=r").unwrap();
        let missing = read_csv("a,t,y\n1,0,1\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(missing, Error::MissingColumn(ref c) if c == "r"));
        let bad = read_csv("a,t,y,r\n1,0,abc,1\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(bad, Error::NonNumeric { .. }));
        let empty = read_csv("a,t,y,r\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(empty, Error::Empty));
        let blank = read_csv("a,t,y,r\n1,0,,1\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(blank, Error::NonNumeric { .. }));
        let nonbinary = read_csv("a,t,y,r\n1,2,1,1\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(nonbinary, Error::NotBinary { .. }));
    }

    #[test]
    fn standardize_symmetric_column() {
        let ds = Dataset::new(
            DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]),
            vec![false; 3],
            vec![0.0; 3],
            vec![true; 3],
        )
        .unwrap();
        let (z, rec) = standardize(&ds, &[0]).unwrap();
        // sample sd of [1,2,3] is 1
        let sigma = 1.0;
        assert_eq!(rec.records[0].mean, 2.0);
        assert!((rec.records[0].scale - sigma).abs() < 1e-15);
        let col: Vec<f64> = z.covariates().column(0).iter().copied().collect();
        assert_eq!(col, vec![-1.0 / sigma, 0.0, 1.0 / sigma]);
        let (again, _) = standardize(&z, &[0]).unwrap();
        for (a, b) in again.covariates().iter().zip(z.covariates().iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_column_rejected() {
        let ds = Dataset::new(
            DMatrix::from_row_slice(3, 1, &[5.0, 5.0, 5.0]),
            vec![false; 3],
            vec![0.0; 3],
            vec![true; 3],
        )
        .unwrap();
        assert!(matches!(standardize(&ds, &[0]), Err(Error::ConstantColumn { column: 0 })));
    }

    #[test]
    fn sidecar_json_shape() {
        let ds = toy();
        let (_, rec) = standardize(&ds, &[0]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&rec.to_json().unwrap()).unwrap();
        assert_eq!(v[0]["column"], "x1");
        assert_eq!(v[0]["mean"], 1.5);
        assert!(v[0]["scale"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn split_tiny_case() {
        let ds = Dataset::new(
            DMatrix::zeros(3, 0),
            vec![true, false, false],
            vec![0.0; 3],
            vec![true, true, false],
        )
        .unwrap();
        let s = partition(&ds);
        assert_eq!(s.rct_indices, vec![0, 1]);
        assert_eq!(s.rct_control_indices, vec![1]);
        assert_eq!(s.ec_indices, vec![2]);
        // one control cannot support an intercept-plus-slope fit
        let err = split(&ds).unwrap_err();
        assert!(matches!(err, Error::TooFewControls { n_controls: 1, required: 2 }));

        let ds = Dataset::new(
            DMatrix::zeros(4, 0),
            vec![true, false, false, false],
            vec![0.0; 4],
            vec![true, true, true, false],
        )
        .unwrap();
        let s = split(&ds).unwrap();
        assert_eq!(s.rct_indices, vec![0, 1, 2]);
        assert_eq!(s.rct_control_indices, vec![1, 2]);
        assert_eq!(s.ec_indices, vec![3]);
    }

    #[test]
    fn all_rct_dataset_has_no_ecs() {
        let ds = toy().subset(&[0, 1, 2]);
        let s = partition(&ds);
        assert_eq!(s.n_ec(), 0);
        assert_eq!(s.n_control(), 2);
    }

    #[test]
    fn nonfinite_rejected() {
        let err = Dataset::new(
            DMatrix::from_row_slice(1, 1, &[f64::NAN]),
            vec![false],
            vec![0.0],
            vec![true],
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }
}
