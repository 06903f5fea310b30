use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::Records;
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "bgm-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Tabular samples. Every present column block has `n` rows; `u_hidden` is
/// the exogenous noise of a synthetic generator and never reaches a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scm: String,
    pub seed: u64,
    /// Instrument ids.
    pub i: Option<Array2<f64>>,
    pub z: Option<Array2<f64>>,
    pub x: Array2<f64>,
    pub v: Array2<f64>,
    pub u_hidden: Option<Array2<f64>>,
}

/// Width of every column block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub i: usize,
    pub z: usize,
    pub x: usize,
    pub v: usize,
    pub u_hidden: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format: String,
    version: u32,
    scm: String,
    seed: u64,
    n: usize,
    schema: Schema,
    columns: Vec<String>,
}

fn block_names(prefix: &str, suffix: &str, width: usize) -> Vec<String> {
    if width == 1 {
        vec![format!("{prefix}{suffix}")]
    } else {
        (0..width).map(|k| format!("{prefix}{k}{suffix}")).collect()
    }
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.v.nrows()
    }

    pub fn schema(&self) -> Schema {
        let w = |a: &Option<Array2<f64>>| a.as_ref().map_or(0, |a| a.ncols());
        Schema {
            i: w(&self.i),
            z: w(&self.z),
            x: self.x.ncols(),
            v: self.v.ncols(),
            u_hidden: w(&self.u_hidden),
        }
    }

    /// Column names in file order: `i, z..., x..., v..., u_hidden...`.
    pub fn column_names(&self) -> Vec<String> {
        let s = self.schema();
        let mut names = Vec::new();
        names.extend(block_names("i", "", s.i));
        names.extend(block_names("z", "", s.z));
        names.extend(block_names("x", "", s.x));
        names.extend(block_names("v", "", s.v));
        names.extend(block_names("u", "_hidden", s.u_hidden));
        names
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let blocks = [self.i.as_ref(), self.z.as_ref(), Some(&self.x), self.u_hidden.as_ref()];
        if blocks.iter().flatten().any(|b| b.nrows() != n) {
            return Err(Error::Schema("dataset columns have different lengths".into()));
        }
        if let Some(i) = &self.i {
            if i.ncols() != 1 {
                return Err(Error::Schema("the instrument column must be a single id".into()));
            }
        }
        Ok(())
    }

    /// Observed columns only.
    pub fn records(&self) -> Records<f64> {
        Records {
            i: self.i.clone(),
            z: self.z.clone(),
            x: self.x.clone(),
            v: self.v.clone(),
        }
    }

    pub fn hidden_u(&self) -> Result<&Array2<f64>> {
        self.u_hidden
            .as_ref()
            .ok_or_else(|| Error::OracleUnavailable(format!("dataset `{}` has no hidden exogenous column", self.scm)))
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let pick = |a: &Array2<f64>| a.select(Axis(0), rows);
        Self {
            scm: self.scm.clone(),
            seed: self.seed,
            i: self.i.as_ref().map(pick),
            z: self.z.as_ref().map(pick),
            x: pick(&self.x),
            v: pick(&self.v),
            u_hidden: self.u_hidden.as_ref().map(pick),
        }
    }

    /// First `n_first` rows and the remainder.
    pub fn split(&self, n_first: usize) -> (Self, Self) {
        let n_first = n_first.min(self.n());
        let a: Vec<usize> = (0..n_first).collect();
        let b: Vec<usize> = (n_first..self.n()).collect();
        (self.select(&a), self.select(&b))
    }

    fn matrix(&self) -> Array2<f64> {
        let blocks: Vec<_> = [self.i.as_ref(), self.z.as_ref(), Some(&self.x), Some(&self.v), self.u_hidden.as_ref()]
            .into_iter()
            .flatten()
            .map(|b| b.view())
            .collect();
        concatenate(Axis(1), &blocks).expect("validated row counts")
    }

    /// Path of the JSON sidecar belonging to a CSV path.
    pub fn sidecar_path(csv: &Path) -> PathBuf {
        csv.with_extension("json")
    }

    /// Writes the CSV and its JSON sidecar. Values use the shortest
    /// representation that parses back to the same bits.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        self.validate()?;
        let mut w = csv::Writer::from_path(csv_path)?;
        w.write_record(self.column_names())?;
        for row in self.matrix().rows() {
            w.write_record(row.iter().map(|t| format!("{t:?}")))?;
        }
        w.flush()?;
        let sidecar = Sidecar {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            scm: self.scm.clone(),
            seed: self.seed,
            n: self.n(),
            schema: self.schema(),
            columns: self.column_names(),
        };
        std::fs::write(Self::sidecar_path(csv_path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn read(csv_path: &Path) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(Self::sidecar_path(csv_path))?)?;
        if sidecar.format != DATASET_FORMAT {
            return Err(Error::Schema(format!("`{}` is not a dataset sidecar", sidecar.format)));
        }
        if sidecar.version != DATASET_VERSION {
            return Err(Error::Version {
                found: sidecar.version,
                expected: DATASET_VERSION,
            });
        }
        let s = sidecar.schema;
        let width = s.i + s.z + s.x + s.v + s.u_hidden;
        let mut r = csv::Reader::from_path(csv_path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != sidecar.columns || header.len() != width {
            return Err(Error::Schema(format!(
                "CSV header {header:?} does not match the sidecar columns {:?}",
                sidecar.columns
            )));
        }
        let mut data = Vec::with_capacity(sidecar.n * width);
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            for field in rec.iter() {
                data.push(field.trim().parse::<f64>().map_err(|_| {
                    Error::Schema(format!("row {}: `{field}` is not a number", line + 1))
                })?);
            }
        }
        let n = data.len() / width.max(1);
        if n != sidecar.n {
            return Err(Error::Schema(format!("sidecar declares {} rows, file has {n}", sidecar.n)));
        }
        let m = Array2::from_shape_vec((n, width), data).map_err(|e| Error::Schema(e.to_string()))?;
        let mut at = 0;
        let mut take = |w: usize| -> Option<Array2<f64>> {
            let block = (w > 0).then(|| m.slice(ndarray::s![.., at..at + w]).to_owned());
            at += w;
            block
        };
        let i = take(s.i);
        let z = take(s.z);
        let x = take(s.x).unwrap_or_else(|| Array2::zeros((n, 0)));
        let v = take(s.v).ok_or_else(|| Error::Schema("dataset has no v column".into()))?;
        let u_hidden = take(s.u_hidden);
        let ds = Dataset {
            scm: sidecar.scm,
            seed: sidecar.seed,
            i,
            z,
            x,
            v,
            u_hidden,
        };
        ds.validate()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn csv_roundtrip_is_bit_exact() {
        let ds = Dataset {
            scm: "toy".into(),
            seed: 3,
            i: Some(array![[1.0], [7.0]]),
            z: Some(array![[0.1 + 0.2], [-1e-300]]),
            x: array![[std::f64::consts::PI], [2.5]],
            v: array![[1.0, 2.0], [3.0, 1.0 / 3.0]],
            u_hidden: Some(array![[0.5, 0.25], [1e10, -0.0]]),
        };
        assert_eq!(ds.column_names(), ["i", "z", "x", "v0", "v1", "u0_hidden", "u1_hidden"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.write(&path).unwrap();
        let back = Dataset::read(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.z.unwrap()[[0, 0]].to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn header_mismatch_is_a_schema_error() {
        let ds = Dataset {
            scm: "toy".into(),
            seed: 0,
            i: None,
            z: None,
            x: array![[1.0]],
            v: array![[2.0]],
            u_hidden: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.write(&path).unwrap();
        std::fs::write(&path, "x,w\n1.0,2.0\n").unwrap();
        assert!(matches!(Dataset::read(&path), Err(Error::Schema(_))));
    }
}
