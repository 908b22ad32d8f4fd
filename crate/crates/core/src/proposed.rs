//! Joint maximum likelihood under the variation-independent parameterization
//! and the doubly robust estimating equation built on it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{dot, Dataset, DesignMatrix};
use crate::error::{IvError, Result};
use crate::models::{CurveModel, Design, Link, ModelSet, Slot};
use crate::numopt::{fit_logistic, minimize_multistart, solve_moment, OptimConfig, SolveReport};
use crate::param::{
    cells_from_risks, complier_risk_partials, complier_risks, Scale, StructuralPoint, THETA_FLOOR,
};

/// Instrument probabilities are clipped to `[PI_CLIP, 1 - PI_CLIP]` before weighting.
pub const PI_CLIP: f64 = 1e-4;

/// Solves of the optimally weighted moment; each re-evaluates the weights at
/// the previous solution, starting from the identity-weighted solution.
const OPTIMAL_PASSES: usize = 2;

/// Floor for the conditional variance inside the optimal weight.
pub const VAR_FLOOR: f64 = 1e-6;

/// Outcome of any estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub alpha: Vec<f64>,
    /// Labelled nuisance coefficients (`beta1`, `eta`, `gamma`, `xi`, ...).
    pub nuisance: BTreeMap<String, Vec<f64>>,
    pub scale: Scale,
    pub converged: bool,
    pub loglik_or_residual: f64,
    pub estimator_tag: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl FitResult {
    pub(crate) fn new(tag: &str, scale: Scale, alpha: Vec<f64>) -> Self {
        Self {
            alpha,
            nuisance: BTreeMap::new(),
            scale,
            converged: true,
            loglik_or_residual: f64::NAN,
            estimator_tag: tag.to_string(),
            warnings: Vec::new(),
        }
    }

    pub(crate) fn absorb(&mut self, stage: &str, report: &SolveReport) {
        if !report.converged {
            self.converged = false;
            self.warnings.push(format!("{stage}: {}", report.message));
        }
        for w in &report.warnings {
            self.warnings.push(format!("{stage}: {w}"));
        }
    }

    /// Like `absorb`, but a non-converged stage only adds a warning.
    pub(crate) fn note(&mut self, stage: &str, report: &SolveReport) {
        let converged = self.converged;
        self.absorb(stage, report);
        self.converged = converged;
    }
}

#[inline]
pub(crate) fn eval_fast(c: &CurveModel, row: &[f64]) -> f64 {
    c.link.apply(predictor_fast(c, row))
}

#[inline]
pub(crate) fn predictor_fast(c: &CurveModel, row: &[f64]) -> f64 {
    c.coef.iter().zip(&c.selector).map(|(b, &j)| b * row[j]).sum()
}

pub(crate) fn check_selector(selector: &[usize], data: &Dataset) -> Result<()> {
    let k = data.covariates().cols();
    match selector.iter().find(|&&j| j >= k) {
        Some(&index) => Err(IvError::SelectorOutOfRange { index, len: k }),
        None => Ok(()),
    }
}

const COMPONENTS: [Slot; 6] = [Slot::Theta, Slot::Phi1, Slot::Phi2, Slot::Phi3, Slot::Phi4, Slot::Op];

/// Probability of the realized cell and its partial derivatives with respect
/// to `(theta, phi1, phi2, phi3, phi4, op)`.
fn cell_and_partials(sp: &StructuralPoint, scale: Scale, d: u8, y: u8, z: u8) -> (f64, [f64; 6]) {
    let (p1, p2, p3, p4) = (sp.phi1, sp.phi2, sp.phi3, sp.phi4);
    let nc = 1.0 - p1;
    let nt = nc * (1.0 - p2);
    let at = nc * p2;
    let complier = |f0: f64, f1: f64| complier_risk_partials(sp.theta, sp.opco, f0, f1, scale);
    match (d, y, z) {
        (0, 1, 1) => (nt * p3, [0.0, -(1.0 - p2) * p3, -nc * p3, nt, 0.0, 0.0]),
        (0, 0, 1) => (
            nt * (1.0 - p3),
            [0.0, -(1.0 - p2) * (1.0 - p3), -nc * (1.0 - p3), -nt, 0.0, 0.0],
        ),
        (1, 1, 0) => (at * p4, [0.0, -p2 * p4, nc * p4, 0.0, at, 0.0]),
        (1, 0, 0) => (at * (1.0 - p4), [0.0, -p2 * (1.0 - p4), nc * (1.0 - p4), 0.0, -at, 0.0]),
        (1, 1, 1) => {
            let (f0, f1) = complier_risks(sp.theta, sp.opco, scale);
            let r = complier(f0, f1);
            (
                f1 * p1 + at * p4,
                [p1 * r.df1_dtheta, f1 - p2 * p4, nc * p4, 0.0, at, p1 * r.df1_dop],
            )
        }
        (0, 1, 0) => {
            let (f0, f1) = complier_risks(sp.theta, sp.opco, scale);
            let r = complier(f0, f1);
            (
                f0 * p1 + nt * p3,
                [p1 * r.df0_dtheta, f0 - (1.0 - p2) * p3, -nc * p3, nt, 0.0, p1 * r.df0_dop],
            )
        }
        (1, 0, 1) => {
            let (f0, f1) = complier_risks(sp.theta, sp.opco, scale);
            let r = complier(f0, f1);
            (
                (1.0 - f1) * p1 + at * (1.0 - p4),
                [
                    -p1 * r.df1_dtheta,
                    (1.0 - f1) - p2 * (1.0 - p4),
                    nc * (1.0 - p4),
                    0.0,
                    -at,
                    -p1 * r.df1_dop,
                ],
            )
        }
        _ => {
            let (f0, f1) = complier_risks(sp.theta, sp.opco, scale);
            let r = complier(f0, f1);
            (
                (1.0 - f0) * p1 + nt * (1.0 - p3),
                [
                    -p1 * r.df0_dtheta,
                    (1.0 - f0) - (1.0 - p2) * (1.0 - p3),
                    -nc * (1.0 - p3),
                    -nt,
                    0.0,
                    -p1 * r.df0_dop,
                ],
            )
        }
    }
}

fn validate_for_data(ms: &ModelSet, data: &Dataset) -> Result<()> {
    ms.validate()?;
    for s in COMPONENTS {
        check_selector(&ms.curve(s).selector, data)?;
    }
    check_selector(&ms.instrument.selector, data)
}

/// Sum of negative log-likelihood contributions; the gradient (if requested)
/// is laid out as [`ModelSet::free_coefs`].
fn nll_impl(ms: &ModelSet, data: &Dataset, mut grad: Option<&mut [f64]>) -> f64 {
    let slots = ms.free_slots();
    let mut offsets = [usize::MAX; 6];
    let mut off = 0;
    for s in &slots {
        let idx = COMPONENTS.iter().position(|c| c == s).expect("slot listed");
        offsets[idx] = off;
        off += ms.curve(*s).coef.len();
    }
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut total = 0.0;
    let (z, d, y) = (data.z(), data.d(), data.y());
    for i in 0..data.n() {
        let row = data.row(i);
        let theta = eval_fast(&ms.theta, row);
        let phi1 = eval_fast(&ms.phi1, row);
        let phi3 = eval_fast(&ms.phi3, row);
        let (phi2, phi4) = if ms.one_sided {
            (0.0, 0.0)
        } else {
            (eval_fast(&ms.phi2, row), eval_fast(&ms.phi4, row))
        };
        let opco = eval_fast(&ms.op, row);
        if !opco.is_finite() || !theta.is_finite() {
            return f64::INFINITY;
        }
        if ms.scale == Scale::Multiplicative && theta <= THETA_FLOOR {
            return f64::INFINITY;
        }
        let sp = StructuralPoint {
            theta,
            phi1,
            phi2,
            phi3,
            phi4,
            opco,
        };
        let (p, dp) = cell_and_partials(&sp, ms.scale, d[i], y[i], z[i]);
        if !(p > 0.0) {
            return f64::INFINITY;
        }
        total -= p.ln();
        if let Some(g) = grad.as_deref_mut() {
            let values = [theta, phi1, phi2, phi3, phi4, opco];
            for c in 0..6 {
                if offsets[c] == usize::MAX || dp[c] == 0.0 {
                    continue;
                }
                let curve = ms.curve(COMPONENTS[c]);
                let factor = -dp[c] / p * curve.link.derivative(values[c]);
                for (k, &j) in curve.selector.iter().enumerate() {
                    g[offsets[c] + k] += factor * row[j];
                }
            }
        }
    }
    total
}

/// Negative log-likelihood `-sum_i log p(d_i, y_i | z_i, x_i)` and its
/// gradient over the free coefficients. Infeasible parameters give `+inf`.
pub fn joint_nll(ms: &ModelSet, data: &Dataset) -> Result<(f64, Vec<f64>)> {
    validate_for_data(ms, data)?;
    let mut g = vec![0.0; ms.n_free()];
    let v = nll_impl(ms, data, Some(&mut g));
    Ok((v, g))
}

/// Fitted model set of the joint likelihood.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleFit {
    pub models: ModelSet,
    pub report: SolveReport,
}

/// Maximizes the joint likelihood over the free coefficients, starting from
/// `ms_init` and then from jittered copies until one start converges.
pub fn fit_mle_models(ms_init: &ModelSet, data: &Dataset, cfg: &OptimConfig) -> Result<MleFit> {
    validate_for_data(ms_init, data)?;
    cfg.validate()?;
    let n = data.n() as f64;
    let mut work = ms_init.clone();
    let report = minimize_multistart(
        |c, g| {
            work.set_free_coefs(c).expect("dimension fixed");
            let v = nll_impl(&work, data, Some(g));
            g.iter_mut().for_each(|x| *x /= n);
            v / n
        },
        &ms_init.free_coefs(),
        cfg,
    );
    let mut models = ms_init.clone();
    models.set_free_coefs(&report.solution)?;
    Ok(MleFit { models, report })
}

pub(crate) fn nuisance_map(ms: &ModelSet) -> BTreeMap<String, Vec<f64>> {
    let mut m = BTreeMap::new();
    m.insert("beta1".to_string(), ms.phi1.coef.clone());
    m.insert("beta3".to_string(), ms.phi3.coef.clone());
    if !ms.one_sided {
        m.insert("beta2".to_string(), ms.phi2.coef.clone());
        m.insert("beta4".to_string(), ms.phi4.coef.clone());
    }
    m.insert("eta".to_string(), ms.op.coef.clone());
    m
}

pub(crate) fn mle_result(fit: &MleFit, n: usize) -> FitResult {
    let mut r = FitResult::new("mle", fit.models.scale, fit.models.theta.coef.clone());
    r.nuisance = nuisance_map(&fit.models);
    r.absorb("mle", &fit.report);
    r.loglik_or_residual = -fit.report.objective_or_residual * n as f64;
    r
}

/// Largest `|E(H | X) - P(Y = 1 | Z = 0, X)|` over the rows of `data` under
/// `ms`. Zero up to rounding when `ms` is one-sided.
pub fn one_sided_gap(ms: &ModelSet, data: &Dataset) -> Result<f64> {
    let mut gap: f64 = 0.0;
    for i in 0..data.n() {
        let sp = crate::models::eval_structural(ms, data.row(i))?;
        let cp = crate::param::inverse_map(&sp, ms.scale)?;
        let y0 = cp.get(0, 1, 0) + cp.get(1, 1, 0);
        gap = gap.max((expected_h_unchecked(&sp, ms.scale) - y0).abs());
    }
    Ok(gap)
}

/// Joint maximum likelihood estimator (tag `mle`).
pub fn fit_mle(ms_init: &ModelSet, data: &Dataset, cfg: &OptimConfig) -> Result<FitResult> {
    let fit = fit_mle_models(ms_init, data, cfg)?;
    Ok(mle_result(&fit, data.n()))
}

/// `H = Y - D theta` (additive) or `Y theta^-D` (multiplicative).
pub fn compute_h(y: u8, d: u8, theta: f64, scale: Scale) -> Result<f64> {
    scale.check_theta(theta)?;
    Ok(h_value(y, d, theta, scale))
}

#[inline]
pub(crate) fn h_value(y: u8, d: u8, theta: f64, scale: Scale) -> f64 {
    match scale {
        Scale::Additive => y as f64 - d as f64 * theta,
        Scale::Multiplicative => {
            if d == 1 {
                y as f64 / theta
            } else {
                y as f64
            }
        }
    }
}

#[inline]
pub(crate) fn expected_h_unchecked(sp: &StructuralPoint, scale: Scale) -> f64 {
    let (f0, _) = complier_risks(sp.theta, sp.opco, scale);
    let nc = 1.0 - sp.phi1;
    let nt = nc * (1.0 - sp.phi2);
    let at = nc * sp.phi2;
    match scale {
        Scale::Additive => f0 * sp.phi1 + nt * sp.phi3 + at * sp.phi4 - sp.theta * at,
        Scale::Multiplicative => f0 * sp.phi1 + at * sp.phi4 / sp.theta + nt * sp.phi3,
    }
}

/// `E(H | X)` implied by a structural point; it equals `E(H | Z = z, X)` for
/// both arms.
pub fn expected_h_given_x(sp: &StructuralPoint, scale: Scale) -> Result<f64> {
    sp.validate(scale)?;
    Ok(expected_h_unchecked(sp, scale))
}

/// `V(X) = sum_z v(z) / f(z | X)` with `v(z) = E(H^2 | z, X) - E(H | Z = 0, X)^2`,
/// before flooring.
pub fn omega_variance(sp: &StructuralPoint, pi: f64, scale: Scale) -> Result<f64> {
    sp.validate(scale)?;
    if !(pi > 0.0 && pi < 1.0) {
        return Err(IvError::Domain(format!("instrument probability {pi} outside (0, 1)")));
    }
    let (f0, f1) = complier_risks(sp.theta, sp.opco, scale);
    Ok(variance_unchecked(sp, f0, f1, pi, scale))
}

#[inline]
fn variance_unchecked(sp: &StructuralPoint, f0: f64, f1: f64, pi: f64, scale: Scale) -> f64 {
    let cp = cells_from_risks(sp, f0, f1);
    let t = sp.theta;
    let second = |z: usize| {
        let y1 = cp.get(0, 1, z) + cp.get(1, 1, z);
        let d1 = cp.get(1, 0, z) + cp.get(1, 1, z);
        let dy = cp.get(1, 1, z);
        match scale {
            Scale::Additive => y1 + t * t * d1 - 2.0 * t * dy,
            Scale::Multiplicative => dy / (t * t) + cp.get(0, 1, z),
        }
    };
    let mean0 = match scale {
        Scale::Additive => cp.get(0, 1, 0) + cp.get(1, 1, 0) - t * (cp.get(1, 0, 0) + cp.get(1, 1, 0)),
        Scale::Multiplicative => cp.get(1, 1, 0) / t + cp.get(0, 1, 0),
    };
    let m2 = mean0 * mean0;
    (second(1) - m2) / pi + (second(0) - m2) / (1.0 - pi)
}

/// Scalar `c` with `omega = c * dtheta/dalpha`, and whether `V` was floored.
#[inline]
pub(crate) fn omega_factor(sp: &StructuralPoint, pi: f64, scale: Scale) -> (f64, bool) {
    let (f0, f1) = complier_risks(sp.theta, sp.opco, scale);
    let v = variance_unchecked(sp, f0, f1, pi, scale);
    let (v, floored) = if v > VAR_FLOOR { (v, false) } else { (VAR_FLOOR, true) };
    let c = match scale {
        Scale::Additive => -sp.phi1 / v,
        Scale::Multiplicative => -f1 * sp.phi1 / (sp.theta * sp.theta * v),
    };
    (c, floored)
}

/// Optimal weight vector and a flag set when the variance was floored.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimalOmega {
    pub omega: Vec<f64>,
    pub floored: bool,
}

pub fn optimal_omega(sp: &StructuralPoint, pi: f64, grad_theta: &[f64], scale: Scale) -> Result<OptimalOmega> {
    sp.validate(scale)?;
    if !(pi > 0.0 && pi < 1.0) {
        return Err(IvError::Domain(format!("instrument probability {pi} outside (0, 1)")));
    }
    let (c, floored) = omega_factor(sp, pi, scale);
    Ok(OptimalOmega {
        omega: grad_theta.iter().map(|g| c * g).collect(),
        floored,
    })
}

/// Logistic instrument density fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstrumentFit {
    pub model: CurveModel,
    pub report: SolveReport,
}

impl InstrumentFit {
    /// Clipped `P(Z = 1 | X)` per row, and how many rows were clipped.
    pub fn probabilities(&self, data: &Dataset) -> (Vec<f64>, usize) {
        let mut clipped = 0;
        let p = (0..data.n())
            .map(|i| {
                let p = eval_fast(&self.model, data.row(i));
                let c = p.clamp(PI_CLIP, 1.0 - PI_CLIP);
                if c != p {
                    clipped += 1;
                }
                c
            })
            .collect();
        (p, clipped)
    }

    /// `(2Z - 1) / f(Z | X)` per row.
    pub fn inverse_weights(&self, data: &Dataset) -> (Vec<f64>, usize) {
        let (p, clipped) = self.probabilities(data);
        let w = p
            .iter()
            .zip(data.z())
            .map(|(&pi, &z)| if z == 1 { 1.0 / pi } else { -1.0 / (1.0 - pi) })
            .collect();
        (w, clipped)
    }
}

pub fn fit_instrument(data: &Dataset, selector: &[usize], cfg: &OptimConfig) -> Result<InstrumentFit> {
    let design = data.design(selector)?;
    let z: Vec<f64> = data.z().iter().map(|&v| v as f64).collect();
    let report = fit_logistic(&z, &design, cfg)?;
    Ok(InstrumentFit {
        model: CurveModel::new(Link::Expit, report.solution.clone(), selector.to_vec())?,
        report,
    })
}

/// Ingredients of `P_n s_i x_theta,i w_i {H_i(alpha) - E_i(alpha)}`.
pub(crate) struct DrMoment<'a> {
    pub data: &'a Dataset,
    pub theta: CurveModel,
    pub scale: Scale,
    /// `(2Z - 1) / f(Z | X)`.
    pub ipw: &'a [f64],
}

impl DrMoment<'_> {
    /// `eh(i, theta_i)` gives the fitted `E(H | X_i)`; `weight(i, theta_i)`
    /// gives the scalar multiplying `x_theta,i`.
    pub fn eval<E, W>(&self, alpha: &[f64], eh: &mut E, weight: &mut W) -> Vec<f64>
    where
        E: FnMut(usize, f64) -> f64,
        W: FnMut(usize, f64) -> f64,
    {
        let k = alpha.len();
        let mut acc = vec![0.0; k];
        for i in 0..self.data.n() {
            let Some(s) = self.row_scalar(i, alpha, eh, weight) else {
                return vec![f64::NAN; k];
            };
            let row = self.data.row(i);
            for (a, &j) in acc.iter_mut().zip(&self.theta.selector) {
                *a += s * row[j];
            }
        }
        let n = self.data.n() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Per-row contributions; `None` when theta leaves its domain.
    pub fn terms<E, W>(&self, alpha: &[f64], eh: &mut E, weight: &mut W) -> Option<Vec<Vec<f64>>>
    where
        E: FnMut(usize, f64) -> f64,
        W: FnMut(usize, f64) -> f64,
    {
        (0..self.data.n())
            .map(|i| {
                let s = self.row_scalar(i, alpha, eh, weight)?;
                let row = self.data.row(i);
                Some(self.theta.selector.iter().map(|&j| s * row[j]).collect())
            })
            .collect()
    }

    fn row_scalar<E, W>(&self, i: usize, alpha: &[f64], eh: &mut E, weight: &mut W) -> Option<f64>
    where
        E: FnMut(usize, f64) -> f64,
        W: FnMut(usize, f64) -> f64,
    {
        let row = self.data.row(i);
        let eta: f64 = alpha.iter().zip(&self.theta.selector).map(|(a, &j)| a * row[j]).sum();
        let theta = self.theta.link.apply(eta);
        if self.scale == Scale::Multiplicative && !(theta > THETA_FLOOR && theta.is_finite()) {
            return None;
        }
        let r = h_value(self.data.y()[i], self.data.d()[i], theta, self.scale) - eh(i, theta);
        Some(weight(i, theta) * self.ipw[i] * r)
    }
}

fn ipw_from(pi: &[f64], data: &Dataset) -> Result<Vec<f64>> {
    if pi.len() != data.n() {
        return Err(IvError::Config(format!("{} instrument probabilities for {} rows", pi.len(), data.n())));
    }
    Ok(pi
        .iter()
        .zip(data.z())
        .map(|(&p, &z)| {
            let p = p.clamp(PI_CLIP, 1.0 - PI_CLIP);
            if z == 1 {
                1.0 / p
            } else {
                -1.0 / (1.0 - p)
            }
        })
        .collect())
}

/// Per-row terms of the doubly robust estimating equation at `alpha`, with
/// the nuisance curves of `ms` and instrument probabilities `pi` held fixed.
/// Optimal weights are evaluated at `alpha`.
pub fn dr_moment_terms(ms: &ModelSet, pi: &[f64], data: &Dataset, alpha: &[f64], mode: WeightMode) -> Result<Vec<Vec<f64>>> {
    validate_for_data(ms, data)?;
    let ipw = ipw_from(pi, data)?;
    let scale = ms.scale;
    let moment = DrMoment {
        data,
        theta: ms.theta.clone(),
        scale,
        ipw: &ipw,
    };
    let point = |i: usize, theta: f64| -> Result<StructuralPoint> {
        let sp = crate::models::eval_structural(ms, data.row(i))?;
        Ok(StructuralPoint { theta, ..sp })
    };
    let points: Vec<StructuralPoint> = (0..data.n()).map(|i| point(i, 0.0)).collect::<Result<_>>()?;
    let link = ms.theta.link;
    let terms = moment.terms(
        alpha,
        &mut |i, theta| expected_h_unchecked(&StructuralPoint { theta, ..points[i] }, scale),
        &mut |i, theta| match mode {
            WeightMode::Identity => 1.0,
            WeightMode::Optimal => {
                omega_factor(&StructuralPoint { theta, ..points[i] }, pi[i], scale).0 * link.derivative(theta)
            }
        },
    );
    terms.ok_or_else(|| IvError::Domain("theta outside its domain at alpha".into()))
}

/// Per-row terms of the identity-weighted moment for an arbitrary fitted
/// `E(H | X)`, given as `eh(i, theta)`.
pub fn moment_terms_with<E>(
    data: &Dataset,
    theta_selector: &[usize],
    scale: Scale,
    pi: &[f64],
    alpha: &[f64],
    mut eh: E,
) -> Result<Vec<Vec<f64>>>
where
    E: FnMut(usize, f64) -> f64,
{
    check_selector(theta_selector, data)?;
    let ipw = ipw_from(pi, data)?;
    let moment = DrMoment {
        data,
        theta: CurveModel::zeros(Link::for_theta(scale), theta_selector.to_vec()),
        scale,
        ipw: &ipw,
    };
    moment
        .terms(alpha, &mut eh, &mut |_, _| 1.0)
        .ok_or_else(|| IvError::Domain("theta outside its domain at alpha".into()))
}

/// Solves the moment starting from each of `starts` in turn, keeping the
/// first converged solution or the smallest residual.
pub(crate) fn solve_from_starts<M>(mut m: M, starts: &[Vec<f64>], cfg: &OptimConfig) -> SolveReport
where
    M: FnMut(&[f64]) -> Vec<f64>,
{
    let mut best: Option<SolveReport> = None;
    for (k, x0) in starts.iter().enumerate() {
        let local = OptimConfig {
            restarts: if k + 1 == starts.len() { cfg.restarts } else { 0 },
            ..cfg.clone()
        };
        let rep = solve_moment(&mut m, x0, &local);
        if rep.converged {
            return rep;
        }
        if best
            .as_ref()
            .is_none_or(|b| rep.objective_or_residual < b.objective_or_residual || b.objective_or_residual.is_nan())
        {
            best = Some(rep);
        }
    }
    best.expect("at least one start")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    Identity,
    Optimal,
}

/// Doubly robust estimator (tags `dru`, `drw`) from precomputed stage-1 fits.
pub fn fit_dr_with_stage1(
    mle: &MleFit,
    instrument: &InstrumentFit,
    data: &Dataset,
    cfg: &OptimConfig,
    mode: WeightMode,
) -> Result<FitResult> {
    let ms = &mle.models;
    validate_for_data(ms, data)?;
    check_selector(&instrument.model.selector, data)?;
    let scale = ms.scale;
    let tag = match mode {
        WeightMode::Identity => "dru",
        WeightMode::Optimal => "drw",
    };
    let (pi, clipped) = instrument.probabilities(data);
    let (ipw, _) = instrument.inverse_weights(data);

    // nuisance curves are frozen at stage 1; only theta moves with alpha
    let frozen: Vec<StructuralPoint> = (0..data.n())
        .map(|i| {
            let row = data.row(i);
            let (phi2, phi4) = if ms.one_sided {
                (0.0, 0.0)
            } else {
                (eval_fast(&ms.phi2, row), eval_fast(&ms.phi4, row))
            };
            StructuralPoint {
                theta: 0.0,
                phi1: eval_fast(&ms.phi1, row),
                phi2,
                phi3: eval_fast(&ms.phi3, row),
                phi4,
                opco: eval_fast(&ms.op, row),
            }
        })
        .collect();
    let moment = DrMoment {
        data,
        theta: ms.theta.clone(),
        scale,
        ipw: &ipw,
    };
    let link = ms.theta.link;
    let eh = |i: usize, theta: f64| {
        let sp = StructuralPoint { theta, ..frozen[i] };
        expected_h_unchecked(&sp, scale)
    };
    // optimal weights are frozen at a preliminary alpha for each solve, so
    // that a saturating theta link cannot zero them out along the search
    let weights_at = |alpha: &[f64]| -> (Vec<f64>, usize) {
        let mut floored = 0;
        let w = (0..data.n())
            .map(|i| {
                let row = data.row(i);
                let theta = link.apply(alpha.iter().zip(&ms.theta.selector).map(|(a, &j)| a * row[j]).sum());
                let sp = StructuralPoint { theta, ..frozen[i] };
                let (c, f) = omega_factor(&sp, pi[i], scale);
                floored += f as usize;
                c * link.derivative(theta)
            })
            .collect();
        (w, floored)
    };
    let zero = vec![0.0; ms.theta.coef.len()];
    let identity = solve_from_starts(
        |alpha: &[f64]| moment.eval(alpha, &mut { eh }, &mut |_, _| 1.0),
        &[ms.theta.coef.clone(), zero.clone()],
        cfg,
    );
    let (report, floors) = match mode {
        WeightMode::Identity => (identity, 0),
        WeightMode::Optimal => {
            // the identity-weighted root is consistent whenever either
            // nuisance block is right, so it anchors the first weights
            let mut anchor = if identity.converged {
                identity.solution.clone()
            } else {
                ms.theta.coef.clone()
            };
            let mut out = None;
            for _ in 0..OPTIMAL_PASSES {
                let (w, floors) = weights_at(&anchor);
                let m = |alpha: &[f64]| moment.eval(alpha, &mut { eh }, &mut |i, _| w[i]);
                let rep = solve_from_starts(m, &[anchor.clone(), ms.theta.coef.clone(), zero.clone()], cfg);
                if rep.converged {
                    anchor = rep.solution.clone();
                }
                out = Some((rep, floors));
            }
            out.expect("at least one pass")
        }
    };

    let mut r = FitResult::new(tag, scale, report.solution.clone());
    r.nuisance = nuisance_map(ms);
    r.nuisance.insert("gamma".into(), instrument.model.coef.clone());
    r.absorb("stage 1 mle", &mle.report);
    r.absorb("instrument", &instrument.report);
    r.absorb("moment", &report);
    r.loglik_or_residual = report.objective_or_residual;
    if clipped > 0 {
        r.warnings.push(format!("{clipped} instrument probabilities clipped"));
    }
    if floors > 0 {
        r.warnings.push(format!("variance floored in {floors} rows"));
    }
    Ok(r)
}

/// Doubly robust estimator fitting its own stage-1 models.
pub fn fit_dr(ms_init: &ModelSet, data: &Dataset, cfg: &OptimConfig, mode: WeightMode) -> Result<FitResult> {
    let mle = fit_mle_models(ms_init, data, cfg)?;
    let instrument = fit_instrument(data, &ms_init.instrument.selector, cfg)?;
    fit_dr_with_stage1(&mle, &instrument, data, cfg, mode)
}

fn with_regressor(data: &Dataset, selector: &[usize], extra: &[u8]) -> DesignMatrix {
    let k = selector.len();
    DesignMatrix::from_fn(data.n(), k + 1, |i, j| {
        if j == 0 {
            extra[i] as f64
        } else {
            data.row(i)[selector[j - 1]]
        }
    })
}

fn as_f64(v: &[u8]) -> Vec<f64> {
    v.iter().map(|&b| b as f64).collect()
}

/// Doubly robust estimator built from marginal regressions
/// (tag `dru.simple`).
pub fn fit_dr_simple(data: &Dataset, design: &Design, scale: Scale, cfg: &OptimConfig) -> Result<FitResult> {
    check_selector(&design.theta, data)?;
    let instrument = fit_instrument(data, &design.instrument, cfg)?;
    fit_dr_simple_with_instrument(data, design, scale, &instrument, cfg)
}

pub(crate) fn fit_dr_simple_with_instrument(
    data: &Dataset,
    design: &Design,
    scale: Scale,
    instrument: &InstrumentFit,
    cfg: &OptimConfig,
) -> Result<FitResult> {
    let nuis = data.design(&design.nuisance)?;
    let d_fit = fit_logistic(&as_f64(data.d()), &nuis, cfg)?;
    let e_d: Vec<f64> = (0..data.n())
        .map(|i| crate::models::expit(dot(&d_fit.solution, nuis.row(i))))
        .collect();
    let mut r = FitResult::new("dru.simple", scale, Vec::new());
    r.nuisance.insert("vartheta".into(), d_fit.solution.clone());
    r.nuisance.insert("gamma".into(), instrument.model.coef.clone());
    r.absorb("E(D|X)", &d_fit);
    r.absorb("instrument", &instrument.report);

    // (a, b) with E(H | X) = a_i - theta b_i (additive) or a_i / theta + b_i
    let (a, b): (Vec<f64>, Vec<f64>) = match scale {
        Scale::Additive => {
            let y_fit = fit_logistic(&as_f64(data.y()), &nuis, cfg)?;
            r.absorb("E(Y|X)", &y_fit);
            r.nuisance.insert("varsigma".into(), y_fit.solution.clone());
            (0..data.n())
                .map(|i| (crate::models::expit(dot(&y_fit.solution, nuis.row(i))), e_d[i]))
                .unzip()
        }
        Scale::Multiplicative => {
            let with_d = with_regressor(data, &design.nuisance, data.d());
            let y_fit = fit_logistic(&as_f64(data.y()), &with_d, cfg)?;
            r.absorb("E(Y|D,X)", &y_fit);
            r.nuisance.insert("varpi".into(), y_fit.solution.clone());
            let (w1, w2) = y_fit.solution.split_first().expect("regressor column");
            (0..data.n())
                .map(|i| {
                    let base = dot(w2, nuis.row(i));
                    let y1 = crate::models::expit(w1 + base);
                    let y0 = crate::models::expit(base);
                    (e_d[i] * y1, (1.0 - e_d[i]) * y0)
                })
                .unzip()
        }
    };
    let (ipw, clipped) = instrument.inverse_weights(data);
    if clipped > 0 {
        r.warnings.push(format!("{clipped} instrument probabilities clipped"));
    }
    let moment = DrMoment {
        data,
        theta: CurveModel::zeros(Link::for_theta(scale), design.theta.clone()),
        scale,
        ipw: &ipw,
    };
    let m = |alpha: &[f64]| {
        moment.eval(
            alpha,
            &mut |i, theta| match scale {
                Scale::Additive => a[i] - theta * b[i],
                Scale::Multiplicative => a[i] / theta + b[i],
            },
            &mut |_, _| 1.0,
        )
    };
    let report = solve_from_starts(m, &[vec![0.0; design.theta.len()]], cfg);
    r.alpha = report.solution.clone();
    r.absorb("moment", &report);
    r.loglik_or_residual = report.objective_or_residual;
    Ok(r)
}
