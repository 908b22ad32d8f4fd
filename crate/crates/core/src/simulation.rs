//! Data generation from the parametric simulation design and the covariate
//! scenarios used to mis-specify nuisance models.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DesignMatrix, INTERCEPT};
use crate::error::{IvError, Result};
use crate::models::{expit, Design, Link};
use crate::param::{inverse_map_unchecked, Scale, StructuralPoint};

pub const X2: &str = "x2";
pub const XDAG2: &str = "xdag2";
pub const XPRIME1: &str = "xprime1";
pub const XPRIME2: &str = "xprime2";

/// Coefficients of the data-generating curves on `X = (1, U)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpSpec {
    pub scale: Scale,
    pub alpha: [f64; 2],
    pub beta: [[f64; 2]; 4],
    pub eta: [f64; 2],
    pub gamma: [f64; 2],
    pub n: usize,
    pub seed: u64,
    /// No always-takers (`phi2 = 0`).
    pub one_sided: bool,
}

impl Default for DgpSpec {
    fn default() -> Self {
        Self {
            scale: Scale::Additive,
            alpha: [0.0, -1.0],
            beta: [[-0.4, 0.8]; 4],
            eta: [-0.4, 1.0],
            gamma: [0.1, -1.0],
            n: 1000,
            seed: 0,
            one_sided: false,
        }
    }
}

fn lin(c: [f64; 2], u: f64) -> f64 {
    c[0] + c[1] * u
}

impl DgpSpec {
    pub fn with_scale(scale: Scale) -> Self {
        Self {
            scale,
            ..Self::default()
        }
    }

    /// True structural point at `U = u`.
    pub fn structural(&self, u: f64) -> StructuralPoint {
        let theta = Link::for_theta(self.scale).apply(lin(self.alpha, u));
        StructuralPoint {
            theta,
            phi1: expit(lin(self.beta[0], u)),
            phi2: if self.one_sided { 0.0 } else { expit(lin(self.beta[1], u)) },
            phi3: expit(lin(self.beta[2], u)),
            phi4: if self.one_sided { 0.0 } else { expit(lin(self.beta[3], u)) },
            opco: lin(self.eta, u).exp(),
        }
    }

    pub fn instrument_probability(&self, u: f64) -> f64 {
        expit(lin(self.gamma, u))
    }
}

/// Draws a dataset with covariate columns
/// `intercept, x2, xdag2, xprime1, xprime2`.
pub fn generate_dataset(spec: &DgpSpec) -> Result<Dataset> {
    if spec.n == 0 {
        return Err(IvError::Config("sample size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    generate_with_rng(spec, &mut rng)
}

pub(crate) fn generate_with_rng<R: Rng>(spec: &DgpSpec, rng: &mut R) -> Result<Dataset> {
    let n = spec.n;
    let half = n / 2;
    let tenth = n / 10;
    let mut x = Vec::with_capacity(n * 5);
    let (mut z, mut d, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let u: f64 = rng.gen_range(-1.0..1.0);
        let udag: f64 = rng.gen_range(-1.0..1.0);
        let sp = spec.structural(u);
        let cp = inverse_map_unchecked(&sp, spec.scale);
        let zi = (rng.gen::<f64>() < spec.instrument_probability(u)) as usize;
        let r: f64 = rng.gen();
        // (d, y) cells in a fixed order; the last absorbs rounding
        let order = [(0, 0), (0, 1), (1, 0), (1, 1)];
        let mut acc = 0.0;
        let mut pick = order[3];
        for &(dd, yy) in &order[..3] {
            acc += cp.get(dd, yy, zi);
            if r < acc {
                pick = (dd, yy);
                break;
            }
        }
        x.extend_from_slice(&[
            1.0,
            u,
            udag,
            if i < half { 1.0 } else { 0.0 },
            if i < tenth { 0.0 } else { 1.0 },
        ]);
        z.push(zi as u8);
        d.push(pick.0 as u8);
        y.push(pick.1 as u8);
    }
    let names = [INTERCEPT, X2, XDAG2, XPRIME1, XPRIME2]
        .iter()
        .map(|s| s.to_string())
        .collect();
    Dataset::new(names, DesignMatrix::new(n, 5, x)?, z, d, y)
}

/// Covariate sets available to the analyst.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CovariateSet {
    X,
    Xdagger,
    Xprime,
}

impl CovariateSet {
    pub fn names(self) -> [&'static str; 2] {
        match self {
            CovariateSet::X => [INTERCEPT, X2],
            CovariateSet::Xdagger => [INTERCEPT, XDAG2],
            CovariateSet::Xprime => [XPRIME1, XPRIME2],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Bth,
    Psc,
    Opc,
    Bad,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Bth, Scenario::Psc, Scenario::Opc, Scenario::Bad];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Bth => "bth",
            Scenario::Psc => "psc",
            Scenario::Opc => "opc",
            Scenario::Bad => "bad",
        }
    }

    /// `(instrument covariates, nuisance covariates)`.
    pub fn covariates(self) -> (CovariateSet, CovariateSet) {
        match self {
            Scenario::Bth => (CovariateSet::X, CovariateSet::X),
            Scenario::Psc => (CovariateSet::X, CovariateSet::Xprime),
            Scenario::Opc => (CovariateSet::Xdagger, CovariateSet::X),
            Scenario::Bad => (CovariateSet::Xdagger, CovariateSet::Xprime),
        }
    }

    /// Whether the instrument density model uses the true covariates.
    pub fn instrument_correct(self) -> bool {
        self.covariates().0 == CovariateSet::X
    }

    /// Whether the outcome nuisance models use the true covariates.
    pub fn nuisance_correct(self) -> bool {
        self.covariates().1 == CovariateSet::X
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = IvError;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| IvError::Config(format!("unknown scenario `{s}`")))
    }
}

/// Whether the covariates are exactly those written by [`generate_dataset`].
pub fn has_simulation_layout(data: &Dataset) -> bool {
    data.names().iter().map(String::as_str).eq([INTERCEPT, X2, XDAG2, XPRIME1, XPRIME2])
}

/// Selectors for the target, nuisance and instrument models. The target
/// model always uses `X`.
pub fn build_scenario_design(data: &Dataset, scenario: Scenario) -> Result<Design> {
    let (inst, nuis) = scenario.covariates();
    let resolve = |set: CovariateSet| {
        data.selector(&set.names()).map_err(|_| {
            IvError::Config(format!(
                "scenario {scenario} needs columns {:?} which the dataset lacks",
                set.names()
            ))
        })
    };
    Ok(Design {
        theta: resolve(CovariateSet::X)?,
        nuisance: resolve(nuis)?,
        instrument: resolve(inst)?,
    })
}

/// `E{phi1(U)}` for `U ~ Uniform(-1, 1)` by composite Simpson quadrature.
pub fn instrument_strength_from_spec(spec: &DgpSpec) -> f64 {
    let m = 2000;
    let h = 2.0 / m as f64;
    let f = |u: f64| expit(lin(spec.beta[0], u));
    let mut s = f(-1.0) + f(1.0);
    for k in 1..m {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(-1.0 + k as f64 * h);
    }
    s * h / 3.0 / 2.0
}

/// Empirical `E{E(D|Z=1,X) - E(D|Z=0,X)}`: rows are split into `bins`
/// equal-count strata ordered by `column`, the arm difference in treatment
/// rates is taken within each stratum and averaged by stratum size. Strata
/// missing an instrument arm are dropped.
pub fn instrument_strength_from_data(data: &Dataset, column: &str, bins: usize) -> Result<f64> {
    let j = data
        .column_index(column)
        .ok_or_else(|| IvError::Config(format!("unknown covariate `{column}`")))?;
    if bins == 0 {
        return Err(IvError::Config("at least one bin required".into()));
    }
    let n = data.n();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| data.row(a)[j].total_cmp(&data.row(b)[j]));
    let (mut total, mut weight) = (0.0, 0usize);
    for b in 0..bins {
        let lo = b * n / bins;
        let hi = (b + 1) * n / bins;
        let mut cnt = [0usize; 2];
        let mut treated = [0usize; 2];
        for &i in &order[lo..hi] {
            let z = data.z()[i] as usize;
            cnt[z] += 1;
            treated[z] += data.d()[i] as usize;
        }
        if cnt[0] == 0 || cnt[1] == 0 {
            continue;
        }
        let diff = treated[1] as f64 / cnt[1] as f64 - treated[0] as f64 / cnt[0] as f64;
        total += diff * (hi - lo) as f64;
        weight += hi - lo;
    }
    if weight == 0 {
        return Err(IvError::DegenerateStratum("instrument arm"));
    }
    Ok(total / weight as f64)
}
