use serde::{Deserialize, Serialize};

use crate::error::{IvError, Result};

/// Dense row-major matrix used for model designs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DesignMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(IvError::Config(format!(
                "design buffer of length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(IvError::Config(format!("row {i} has {} entries, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Observations of `(covariates, z, d, y)` with binary instrument,
/// treatment and outcome. Covariate column 0 is the intercept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    names: Vec<String>,
    x: DesignMatrix,
    z: Vec<u8>,
    d: Vec<u8>,
    y: Vec<u8>,
}

pub const INTERCEPT: &str = "intercept";

impl Dataset {
    pub fn new(names: Vec<String>, x: DesignMatrix, z: Vec<u8>, d: Vec<u8>, y: Vec<u8>) -> Result<Self> {
        let n = x.rows();
        if n == 0 {
            return Err(IvError::Config("dataset must have at least one row".into()));
        }
        if names.len() != x.cols() {
            return Err(IvError::Config(format!(
                "{} covariate names for {} columns",
                names.len(),
                x.cols()
            )));
        }
        for (label, v) in [("z", &z), ("d", &d), ("y", &y)] {
            if v.len() != n {
                return Err(IvError::Config(format!("column {label} has {} rows, expected {n}", v.len())));
            }
            if let Some(i) = v.iter().position(|&b| b > 1) {
                return Err(IvError::Data {
                    row: i + 1,
                    column: label.into(),
                    reason: "not binary".into(),
                });
            }
        }
        if let Some(pos) = x.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(IvError::Data {
                row: pos / x.cols() + 1,
                column: names[pos % x.cols()].clone(),
                reason: "not finite".into(),
            });
        }
        Ok(Self { names, x, z, d, y })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn covariates(&self) -> &DesignMatrix {
        &self.x
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        self.x.row(i)
    }

    pub fn z(&self) -> &[u8] {
        &self.z
    }

    pub fn d(&self) -> &[u8] {
        &self.d
    }

    pub fn y(&self) -> &[u8] {
        &self.y
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Resolves covariate names to column indices.
    pub fn selector(&self, names: &[&str]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                self.column_index(n)
                    .ok_or_else(|| IvError::Config(format!("unknown covariate `{n}`")))
            })
            .collect()
    }

    /// Gathers the selected covariate columns into their own matrix.
    pub fn design(&self, selector: &[usize]) -> Result<DesignMatrix> {
        if let Some(&bad) = selector.iter().find(|&&j| j >= self.x.cols()) {
            return Err(IvError::SelectorOutOfRange {
                index: bad,
                len: self.x.cols(),
            });
        }
        Ok(DesignMatrix::from_fn(self.n(), selector.len(), |i, j| {
            self.x.get(i, selector[j])
        }))
    }

    /// Rows picked by index, with repetition (bootstrap resampling).
    pub fn subset(&self, indices: &[usize]) -> Self {
        let k = self.x.cols();
        let mut data = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            data.extend_from_slice(self.x.row(i));
        }
        Self {
            names: self.names.clone(),
            x: DesignMatrix {
                rows: indices.len(),
                cols: k,
                data,
            },
            z: indices.iter().map(|&i| self.z[i]).collect(),
            d: indices.iter().map(|&i| self.d[i]).collect(),
            y: indices.iter().map(|&i| self.y[i]).collect(),
        }
    }
}
