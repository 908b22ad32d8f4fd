//! Observed-data polytope, the structural parameterization and the exact
//! maps between them.
//!
//! At a fixed covariate value the observed law is the eight cell
//! probabilities `p(d, y | z)`. The structural coordinates are the target
//! contrast `theta`, four variation-independent nuisance probabilities and
//! the complier odds product. [`inverse_map`] and [`forward_map`] convert
//! between the two exactly.

use serde::{Deserialize, Serialize};

use crate::error::{IvError, Result};

/// Smallest multiplicative effect accepted before `theta^-1` blows up.
pub const THETA_FLOOR: f64 = 1e-10;

/// Default tolerance for [`check_delta`] on exact-arithmetic inputs.
pub const DELTA_TOL: f64 = 1e-9;

/// Below this complier probability the instrument is treated as irrelevant.
const PHI1_ZERO: f64 = 4.0 * f64::EPSILON;

/// Effect scale of the local average treatment effect.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Risk difference among compliers, domain `[-1, 1]`.
    Additive,
    /// Risk ratio among compliers, domain `(0, inf)`.
    Multiplicative,
}

impl Scale {
    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Additive => "additive",
            Scale::Multiplicative => "multiplicative",
        }
    }

    /// Whether `theta` lies in the (floored) target domain.
    pub fn contains(self, theta: f64) -> bool {
        match self {
            Scale::Additive => (-1.0..=1.0).contains(&theta),
            Scale::Multiplicative => theta.is_finite() && theta > THETA_FLOOR,
        }
    }

    pub(crate) fn check_theta(self, theta: f64) -> Result<()> {
        if self.contains(theta) {
            Ok(())
        } else {
            Err(IvError::Domain(format!(
                "theta = {theta} outside the {} domain",
                self.as_str()
            )))
        }
    }
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scale {
    type Err = IvError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "additive" | "add" | "late" => Ok(Scale::Additive),
            "multiplicative" | "mult" | "mlate" => Ok(Scale::Multiplicative),
            other => Err(IvError::Config(format!("unknown scale `{other}`"))),
        }
    }
}

/// Conditional cell probabilities `p(d, y | z)` at one covariate value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellProbs {
    /// Indexed `[d][y][z]`.
    pub p: [[[f64; 2]; 2]; 2],
}

impl CellProbs {
    pub fn new(p: [[[f64; 2]; 2]; 2]) -> Self {
        Self { p }
    }

    pub fn from_fn(mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut p = [[[0.0; 2]; 2]; 2];
        for (d, by_y) in p.iter_mut().enumerate() {
            for (y, by_z) in by_y.iter_mut().enumerate() {
                for (z, cell) in by_z.iter_mut().enumerate() {
                    *cell = f(d, y, z);
                }
            }
        }
        Self { p }
    }

    pub fn uniform() -> Self {
        Self::from_fn(|_, _, _| 0.25)
    }

    #[inline]
    pub fn get(&self, d: usize, y: usize, z: usize) -> f64 {
        self.p[d][y][z]
    }

    #[inline]
    pub fn set(&mut self, d: usize, y: usize, z: usize, value: f64) {
        self.p[d][y][z] = value;
    }
}

/// Image of the structural map at one covariate value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuralPoint {
    pub theta: f64,
    /// Complier probability.
    pub phi1: f64,
    /// Always-taker share among non-compliers.
    pub phi2: f64,
    /// Outcome risk among never-takers.
    pub phi3: f64,
    /// Outcome risk among always-takers.
    pub phi4: f64,
    /// Odds product of the two complier potential-outcome risks.
    pub opco: f64,
}

impl StructuralPoint {
    pub fn new(theta: f64, phi: [f64; 4], opco: f64) -> Self {
        Self {
            theta,
            phi1: phi[0],
            phi2: phi[1],
            phi3: phi[2],
            phi4: phi[3],
            opco,
        }
    }

    pub fn validate(&self, scale: Scale) -> Result<()> {
        scale.check_theta(self.theta)?;
        for (name, v) in [
            ("phi1", self.phi1),
            ("phi2", self.phi2),
            ("phi3", self.phi3),
            ("phi4", self.phi4),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(IvError::Domain(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.opco >= 0.0) || !self.opco.is_finite() {
            return Err(IvError::Domain(format!(
                "odds product {} must be finite and non-negative",
                self.opco
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.theta, self.phi1, self.phi2, self.phi3, self.phi4, self.opco,
        ]
    }
}

/// Complier potential-outcome risks `E{Y(0)|CO}` and `E{Y(1)|CO}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplierRisks {
    pub f0: f64,
    pub f1: f64,
}

/// Closed-form complier risks for a contrast and odds product.
///
/// Both closed-form roots are rationalized so the value is computed
/// without cancellation near `opco = 1`, where the textbook forms are `0/0`.
pub fn solve_complier_risks(theta: f64, opco: f64, scale: Scale) -> Result<ComplierRisks> {
    scale.check_theta(theta)?;
    if !(opco >= 0.0) || !opco.is_finite() {
        return Err(IvError::Domain(format!(
            "odds product {opco} must be finite and non-negative"
        )));
    }
    let (f0, f1) = complier_risks(theta, opco, scale);
    Ok(ComplierRisks { f0, f1 })
}

/// Unchecked root of the odds-product quadratic. A contrast outside its
/// domain gives NaN.
#[inline]
pub(crate) fn complier_risks(theta: f64, op: f64, scale: Scale) -> (f64, f64) {
    let in_domain = match scale {
        Scale::Additive => theta.abs() <= 1.0,
        Scale::Multiplicative => theta > 0.0,
    };
    if !in_domain {
        return (f64::NAN, f64::NAN);
    }
    match scale {
        Scale::Additive => {
            let lo = (-theta).max(0.0);
            let hi = (1.0 - theta).min(1.0);
            if op == 0.0 {
                return (lo, lo + theta);
            }
            let a = op * (2.0 - theta) + theta;
            let disc = theta * theta * (op - 1.0) * (op - 1.0) + 4.0 * op;
            let root = disc.max(0.0).sqrt();
            let f0 = if a >= 0.0 {
                2.0 * op * (1.0 - theta) / (a + root)
            } else {
                // a < 0 only when op < 1/3, far from the removable singularity
                (a - root) / (2.0 * (op - 1.0))
            };
            let f0 = f0.clamp(lo, hi);
            (f0, f0 + theta)
        }
        Scale::Multiplicative => {
            if op == 0.0 {
                return (0.0, 0.0);
            }
            let a = (theta + 1.0) * op;
            let disc = op * op * (theta - 1.0) * (theta - 1.0) + 4.0 * theta * op;
            let f0 = 2.0 * op / (a + disc.max(0.0).sqrt());
            let f0 = f0.clamp(0.0, (1.0 / theta).min(1.0));
            (f0, theta * f0)
        }
    }
}

/// Partial derivatives of the complier risks, by implicit differentiation
/// of `f0 f1 = op (1 - f0)(1 - f1)`.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct RiskPartials {
    pub df0_dtheta: f64,
    pub df0_dop: f64,
    pub df1_dtheta: f64,
    pub df1_dop: f64,
}

#[inline]
pub(crate) fn complier_risk_partials(
    theta: f64,
    op: f64,
    f0: f64,
    f1: f64,
    scale: Scale,
) -> RiskPartials {
    match scale {
        Scale::Additive => {
            let g_f0 = (f0 + f1) + op * ((1.0 - f0) + (1.0 - f1));
            if g_f0 <= 0.0 {
                return RiskPartials::default();
            }
            let df0_dtheta = -(f0 + op * (1.0 - f0)) / g_f0;
            let df0_dop = (1.0 - f0) * (1.0 - f1) / g_f0;
            RiskPartials {
                df0_dtheta,
                df0_dop,
                df1_dtheta: df0_dtheta + 1.0,
                df1_dop: df0_dop,
            }
        }
        Scale::Multiplicative => {
            let g_f0 = 2.0 * theta * f0 + op * ((1.0 - theta * f0) + theta * (1.0 - f0));
            if g_f0 <= 0.0 {
                return RiskPartials::default();
            }
            let df0_dtheta = -(f0 * f0 + op * (1.0 - f0) * f0) / g_f0;
            let df0_dop = (1.0 - f0) * (1.0 - f1) / g_f0;
            RiskPartials {
                df0_dtheta,
                df0_dop,
                df1_dtheta: f0 + theta * df0_dtheta,
                df1_dop: theta * df0_dop,
            }
        }
    }
}

/// Cell probabilities from a structural point.
pub fn inverse_map(sp: &StructuralPoint, scale: Scale) -> Result<CellProbs> {
    sp.validate(scale)?;
    Ok(inverse_map_unchecked(sp, scale))
}

#[inline]
pub(crate) fn inverse_map_unchecked(sp: &StructuralPoint, scale: Scale) -> CellProbs {
    let (f0, f1) = complier_risks(sp.theta, sp.opco, scale);
    cells_from_risks(sp, f0, f1)
}

#[inline]
pub(crate) fn cells_from_risks(sp: &StructuralPoint, f0: f64, f1: f64) -> CellProbs {
    let nc = 1.0 - sp.phi1;
    let nt = nc * (1.0 - sp.phi2);
    let at = nc * sp.phi2;
    let mut cp = CellProbs::new([[[0.0; 2]; 2]; 2]);
    // never-takers show up as (d=0) under z=1, always-takers as (d=1) under z=0
    cp.set(0, 1, 1, nt * sp.phi3);
    cp.set(0, 0, 1, nt * (1.0 - sp.phi3));
    cp.set(1, 1, 0, at * sp.phi4);
    cp.set(1, 0, 0, at * (1.0 - sp.phi4));
    cp.set(1, 1, 1, f1 * sp.phi1 + at * sp.phi4);
    cp.set(0, 1, 0, f0 * sp.phi1 + nt * sp.phi3);
    // complements written without cancellation
    cp.set(1, 0, 1, (1.0 - f1) * sp.phi1 + at * (1.0 - sp.phi4));
    cp.set(0, 0, 0, (1.0 - f0) * sp.phi1 + nt * (1.0 - sp.phi3));
    cp
}

/// Structural point from cell probabilities in the polytope.
///
/// An empty always-taker stratum (one-sided compliance) yields `phi2 = 0`
/// and `phi4 = 0`, matching the one-sided model convention.
pub fn forward_map(cp: &CellProbs, scale: Scale) -> Result<StructuralPoint> {
    let p = |d, y, z| cp.get(d, y, z);
    let nt_mass = p(0, 0, 1) + p(0, 1, 1);
    let at_mass = p(1, 0, 0) + p(1, 1, 0);
    let phi1 = 1.0 - nt_mass - at_mass;
    if phi1 <= PHI1_ZERO {
        return Err(IvError::InstrumentIrrelevant);
    }
    let nc_mass = nt_mass + at_mass;
    if nc_mass <= 0.0 {
        return Err(IvError::DegenerateStratum("phi2"));
    }
    let phi2 = at_mass / nc_mass;
    if nt_mass <= 0.0 {
        return Err(IvError::DegenerateStratum("phi3"));
    }
    let phi3 = p(0, 1, 1) / nt_mass;
    let phi4 = if at_mass > 0.0 {
        p(1, 1, 0) / at_mass
    } else {
        0.0
    };

    let co_y1_treated = p(1, 1, 1) - p(1, 1, 0);
    let co_y1_control = p(0, 1, 0) - p(0, 1, 1);
    let co_y0_treated = p(1, 0, 1) - p(1, 0, 0);
    let co_y0_control = p(0, 0, 0) - p(0, 0, 1);
    let op_den = co_y0_treated * co_y0_control;
    if op_den == 0.0 {
        return Err(IvError::DegenerateStratum("opco"));
    }
    let opco = co_y1_treated * co_y1_control / op_den;

    let theta = match scale {
        Scale::Additive => {
            let dy = (p(0, 1, 1) + p(1, 1, 1)) - (p(0, 1, 0) + p(1, 1, 0));
            let dd = (p(1, 0, 1) + p(1, 1, 1)) - (p(1, 0, 0) + p(1, 1, 0));
            dy / dd
        }
        Scale::Multiplicative => {
            let den = p(0, 1, 1) - p(0, 1, 0);
            if den == 0.0 {
                return Err(IvError::DegenerateStratum("theta"));
            }
            -co_y1_treated / den
        }
    };
    Ok(StructuralPoint {
        theta,
        phi1,
        phi2,
        phi3,
        phi4,
        opco,
    })
}

/// Membership report for the observed-data polytope.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaCheck {
    pub member: bool,
    /// `sum_{d,y} p(d,y|z) - 1` for z = 0, 1.
    pub residuals: [f64; 2],
    /// Indexed `[d][y]`: `p(1,y|1) - p(1,y|0)` for d = 1 and
    /// `p(0,y|0) - p(0,y|1)` for d = 0.
    pub slacks: [[f64; 2]; 2],
    pub min_entry: f64,
}

impl DeltaCheck {
    pub fn slack(&self, d: usize, y: usize) -> f64 {
        self.slacks[d][y]
    }

    pub fn min_slack(&self) -> f64 {
        self.slacks
            .iter()
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn check_delta(cp: &CellProbs, tol: f64) -> DeltaCheck {
    let mut residuals = [0.0; 2];
    for (z, r) in residuals.iter_mut().enumerate() {
        *r = cp.get(0, 0, z) + cp.get(0, 1, z) + cp.get(1, 0, z) + cp.get(1, 1, z) - 1.0;
    }
    let mut slacks = [[0.0; 2]; 2];
    for y in 0..2 {
        slacks[1][y] = cp.get(1, y, 1) - cp.get(1, y, 0);
        slacks[0][y] = cp.get(0, y, 0) - cp.get(0, y, 1);
    }
    let min_entry = cp.p.iter().flatten().flatten().copied().fold(f64::INFINITY, f64::min);
    let member = residuals.iter().all(|r| r.abs() <= tol)
        && slacks.iter().flatten().all(|&s| s >= -tol)
        && min_entry >= -tol;
    DeltaCheck {
        member,
        residuals,
        slacks,
        min_entry,
    }
}

/// Outcome, treatment and joint margins given each instrument arm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    /// `P(Y=1|z)`.
    pub y: [f64; 2],
    /// `P(D=1|z)`.
    pub d: [f64; 2],
    /// `P(DY=1|z)`.
    pub dy: [f64; 2],
}

pub fn conditional_margins(cp: &CellProbs) -> Margins {
    let mut m = Margins {
        y: [0.0; 2],
        d: [0.0; 2],
        dy: [0.0; 2],
    };
    for z in 0..2 {
        m.y[z] = cp.get(0, 1, z) + cp.get(1, 1, z);
        m.d[z] = cp.get(1, 0, z) + cp.get(1, 1, z);
        m.dy[z] = cp.get(1, 1, z);
    }
    m
}

/// Range of the instrument contrast `E(W|Z=1) - E(W|Z=0)` compatible with a
/// marginal mean `mean = E(W)` and instrument probability `pi = P(Z=1)`.
pub fn feasible_contrast_range(mean: f64, pi: f64) -> (f64, f64) {
    let lo = (-mean / (1.0 - pi)).max(-(1.0 - mean) / pi);
    let hi = ((1.0 - mean) / (1.0 - pi)).min(mean / pi);
    (lo, hi)
}
