//! CSV ingestion and export, and the empirical IV-inequality diagnostic.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DesignMatrix, INTERCEPT};
use crate::error::{IvError, Result};
use crate::param::{check_delta, CellProbs};

const ROLES: [&str; 3] = ["y", "d", "z"];

fn binary(v: &str, row: usize, column: &str) -> Result<u8> {
    match v.trim() {
        "0" | "0.0" => Ok(0),
        "1" | "1.0" => Ok(1),
        "" => Err(missing(row, column)),
        _ => Err(IvError::Data {
            row,
            column: column.to_string(),
            reason: "not binary".into(),
        }),
    }
}

fn missing(row: usize, column: &str) -> IvError {
    IvError::Data {
        row,
        column: column.to_string(),
        reason: "missing value".into(),
    }
}

/// Parses a comma-separated table with header. Columns `y`, `d`, `z` must
/// be binary; every other column becomes a numeric covariate, after an
/// automatically prepended intercept. Rows are numbered from 1 after the
/// header in error messages.
pub fn read_csv<R: Read>(input: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut role_idx = [0usize; 3];
    for (k, role) in ROLES.iter().enumerate() {
        role_idx[k] = header
            .iter()
            .position(|h| h == role)
            .ok_or_else(|| IvError::Config(format!("header lacks required column `{role}`")))?;
    }
    let cov_idx: Vec<usize> = (0..header.len()).filter(|i| !role_idx.contains(i)).collect();
    let mut names = vec![INTERCEPT.to_string()];
    for &i in &cov_idx {
        let h = &header[i];
        if h == INTERCEPT || names.contains(h) {
            return Err(IvError::Config(format!("duplicate or reserved column name `{h}`")));
        }
        names.push(h.clone());
    }
    let k = names.len();
    let (mut x, mut y, mut d, mut z) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        if rec.len() != header.len() {
            return Err(IvError::Data {
                row,
                column: String::new(),
                reason: format!("has {} fields, header has {}", rec.len(), header.len()),
            });
        }
        y.push(binary(&rec[role_idx[0]], row, "y")?);
        d.push(binary(&rec[role_idx[1]], row, "d")?);
        z.push(binary(&rec[role_idx[2]], row, "z")?);
        x.push(1.0);
        for &i in &cov_idx {
            let v = rec[i].trim();
            if v.is_empty() || v.eq_ignore_ascii_case("na") {
                return Err(missing(row, &header[i]));
            }
            let f: f64 = v.parse().map_err(|_| IvError::Data {
                row,
                column: header[i].clone(),
                reason: format!("not numeric: `{v}`"),
            })?;
            if !f.is_finite() {
                return Err(IvError::Data {
                    row,
                    column: header[i].clone(),
                    reason: "not finite".into(),
                });
            }
            x.push(f);
        }
    }
    if y.is_empty() {
        return Err(IvError::Config("no data rows".into()));
    }
    let n = y.len();
    Dataset::new(names, DesignMatrix::new(n, k, x)?, z, d, y)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    read_csv(File::open(path)?)
}

/// Writes `y, d, z` and every covariate except the intercept. Values use
/// the shortest representation that parses back to the same double.
pub fn write_csv_to<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let cols: Vec<usize> = (0..data.names().len())
        .filter(|&j| data.names()[j] != INTERCEPT)
        .collect();
    let mut header: Vec<&str> = ROLES.to_vec();
    header.extend(cols.iter().map(|&j| data.names()[j].as_str()));
    w.write_record(&header)?;
    for i in 0..data.n() {
        let row = data.row(i);
        let mut rec = vec![data.y()[i].to_string(), data.d()[i].to_string(), data.z()[i].to_string()];
        rec.extend(cols.iter().map(|&j| row[j].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv_to(data, File::create(path)?)
}

/// How a stratum column is coarsened.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strata {
    /// Each distinct value is a level.
    Value(String),
    /// Levels -1, 0, 1 by sign.
    Sign(String),
}

impl Strata {
    /// `name` or `name:sign`.
    pub fn parse(spec: &str) -> Result<Self> {
        match spec.trim().split_once(':') {
            None => Ok(Strata::Value(spec.trim().to_string())),
            Some((name, "sign")) => Ok(Strata::Sign(name.to_string())),
            Some((_, m)) => Err(IvError::Config(format!("unknown stratum modifier `{m}`"))),
        }
    }

    fn name(&self) -> &str {
        match self {
            Strata::Value(n) | Strata::Sign(n) => n,
        }
    }

    fn level(&self, v: f64) -> f64 {
        match self {
            Strata::Value(_) => v,
            Strata::Sign(_) => {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Most levels a value-coded stratum column may take.
pub const MAX_LEVELS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumDiagnostic {
    pub levels: Vec<f64>,
    pub n: [usize; 2],
    /// Empirical `p(d, y | z)` indexed `[d][y][z]`.
    pub p: [[[f64; 2]; 2]; 2],
    /// Polytope slacks indexed `[d][y]`; a valid IV model needs all >= 0.
    pub slacks: [[f64; 2]; 2],
    /// Binomial standard errors of the slacks.
    pub se: [[f64; 2]; 2],
    /// `(d, y)` cells whose slack is below `-2 se`.
    pub flagged: Vec<(u8, u8)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IvDiagnostic {
    pub note: String,
    pub columns: Vec<String>,
    pub strata: Vec<StratumDiagnostic>,
    pub skipped: Vec<String>,
}

impl IvDiagnostic {
    pub fn any_flagged(&self) -> bool {
        self.strata.iter().any(|s| !s.flagged.is_empty())
    }
}

/// Per stratum of the given columns, the empirical cell frequencies given
/// each instrument arm and the slacks of the IV inequalities. Descriptive
/// only: slacks below two binomial standard errors are flagged, with no
/// multiplicity control.
pub fn diagnose_iv(data: &Dataset, strata: &[Strata]) -> Result<IvDiagnostic> {
    let idx: Vec<usize> = strata
        .iter()
        .map(|s| {
            data.column_index(s.name())
                .ok_or_else(|| IvError::Config(format!("unknown column `{}`", s.name())))
        })
        .collect::<Result<_>>()?;
    // level bits -> (levels, counts indexed [d][y][z])
    type Group = (Vec<f64>, [[[usize; 2]; 2]; 2]);
    let mut groups: BTreeMap<Vec<u64>, Group> = BTreeMap::new();
    for i in 0..data.n() {
        let row = data.row(i);
        let levels: Vec<f64> = strata.iter().zip(&idx).map(|(s, &j)| s.level(row[j])).collect();
        let key: Vec<u64> = levels.iter().map(|v| v.to_bits()).collect();
        let e = groups.entry(key).or_insert_with(|| (levels, [[[0; 2]; 2]; 2]));
        e.1[data.d()[i] as usize][data.y()[i] as usize][data.z()[i] as usize] += 1;
    }
    for (s, &j) in strata.iter().zip(&idx) {
        if matches!(s, Strata::Value(_)) {
            let mut distinct: Vec<u64> = (0..data.n()).map(|i| data.row(i)[j].to_bits()).collect();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() > MAX_LEVELS {
                return Err(IvError::Config(format!(
                    "column `{}` has {} levels; stratify a discrete column or use `{}:sign`",
                    s.name(),
                    distinct.len(),
                    s.name()
                )));
            }
        }
    }
    let mut out = IvDiagnostic {
        note: "descriptive check of the IV inequalities, not a formal test".into(),
        columns: strata.iter().map(|s| s.name().to_string()).collect(),
        strata: Vec::new(),
        skipped: Vec::new(),
    };
    let mut ordered: Vec<_> = groups.into_values().collect();
    ordered.sort_by(|a, b| {
        a.0.iter()
            .zip(&b.0)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    for (levels, counts) in ordered {
        let mut n = [0usize; 2];
        for z in 0..2 {
            n[z] = (0..2).flat_map(|d| (0..2).map(move |y| (d, y))).map(|(d, y)| counts[d][y][z]).sum();
        }
        if n[0] == 0 || n[1] == 0 {
            out.skipped.push(format!(
                "stratum {levels:?} skipped: no rows with z = {}",
                if n[0] == 0 { 0 } else { 1 }
            ));
            continue;
        }
        let cp = CellProbs::from_fn(|d, y, z| counts[d][y][z] as f64 / n[z] as f64);
        let chk = check_delta(&cp, 0.0);
        let mut se = [[0.0; 2]; 2];
        let mut flagged = Vec::new();
        for d in 0..2 {
            for y in 0..2 {
                let v: f64 = (0..2)
                    .map(|z| {
                        let p = cp.get(d, y, z);
                        p * (1.0 - p) / n[z] as f64
                    })
                    .sum();
                se[d][y] = v.sqrt();
                if chk.slacks[d][y] < -2.0 * se[d][y] {
                    flagged.push((d as u8, y as u8));
                }
            }
        }
        out.strata.push(StratumDiagnostic {
            levels,
            n,
            p: cp.p,
            slacks: chk.slacks,
            se,
            flagged,
        });
    }
    Ok(out)
}
