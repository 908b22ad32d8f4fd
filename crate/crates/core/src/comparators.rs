//! Benchmark estimators: outcome regression and doubly robust estimators
//! with variation-dependent nuisance models, a two-stage risk-difference
//! likelihood, kappa-weighted least squares and the crude association.

use serde::{Deserialize, Serialize};

use crate::data::{dot, Dataset, DesignMatrix};
use crate::error::{IvError, Result};
use crate::models::{expit, CurveModel, Design, Link};
use crate::numopt::{
    fit_least_squares, fit_logistic, minimize_multistart, OptimConfig, SolveReport, VARIANCE_FLOOR,
};
use crate::param::{complier_risk_partials, complier_risks, Scale, THETA_FLOOR};
use crate::proposed::{
    check_selector, eval_fast, fit_instrument, h_value, solve_from_starts, DrMoment, FitResult,
    InstrumentFit,
};

/// Contrast and odds-product models of a binary outcome `W` against a binary
/// regressor `V`: `P(W=1|V=0,X) = f0(contrast, op)`, `P(W=1|V=1,X) = f1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdLinkSpec {
    /// `Tanh` (risk difference) or `Exp` (risk ratio).
    pub contrast: CurveModel,
    /// Log-linear odds product.
    pub op: CurveModel,
}

impl RdLinkSpec {
    pub fn zeros(contrast_link: Link, contrast_selector: Vec<usize>, op_selector: Vec<usize>) -> Self {
        Self {
            contrast: CurveModel::zeros(contrast_link, contrast_selector),
            op: CurveModel::zeros(Link::LogLinear, op_selector),
        }
    }

    fn scale(&self) -> Result<Scale> {
        match self.contrast.link {
            Link::Tanh => Ok(Scale::Additive),
            Link::Exp => Ok(Scale::Multiplicative),
            other => Err(IvError::Config(format!("contrast link {other:?} not supported"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdLinkFit {
    pub spec: RdLinkSpec,
    pub scale: Scale,
    pub report: SolveReport,
}

impl RdLinkFit {
    /// `(P(W=1|V=0,x), P(W=1|V=1,x))`, the contrast scaled by `multiplier`.
    /// A risk difference pushed outside `[-1, 1]` by the multiplier is
    /// clamped to it.
    pub fn arm_probabilities(&self, row: &[f64], multiplier: f64) -> (f64, f64) {
        let mut contrast = multiplier * eval_fast(&self.spec.contrast, row);
        if self.scale == Scale::Additive {
            contrast = contrast.clamp(-1.0, 1.0);
        }
        complier_risks(contrast, eval_fast(&self.spec.op, row), self.scale)
    }
}

fn rdlink_nll(
    spec: &RdLinkSpec,
    scale: Scale,
    outcome: &[u8],
    regressor: &[u8],
    data: &Dataset,
    multiplier: Option<&[f64]>,
    grad: &mut [f64],
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let kc = spec.contrast.coef.len();
    let mut total = 0.0;
    for i in 0..data.n() {
        let row = data.row(i);
        let link_value = eval_fast(&spec.contrast, row);
        let m = multiplier.map_or(1.0, |m| m[i]);
        let contrast = m * link_value;
        let op = eval_fast(&spec.op, row);
        if !op.is_finite() || !contrast.is_finite() {
            return f64::INFINITY;
        }
        let in_domain = match scale {
            Scale::Additive => contrast.abs() < 1.0,
            Scale::Multiplicative => contrast > THETA_FLOOR,
        };
        if !in_domain {
            return f64::INFINITY;
        }
        let (f0, f1) = complier_risks(contrast, op, scale);
        let r = complier_risk_partials(contrast, op, f0, f1, scale);
        let (p, dp_dc, dp_dop) = if regressor[i] == 1 {
            (f1, r.df1_dtheta, r.df1_dop)
        } else {
            (f0, r.df0_dtheta, r.df0_dop)
        };
        let (lik, sign) = if outcome[i] == 1 { (p, 1.0) } else { (1.0 - p, -1.0) };
        if !(lik > 0.0) {
            return f64::INFINITY;
        }
        total -= lik.ln();
        let gc = -sign * dp_dc / lik * m * spec.contrast.link.derivative(link_value);
        let go = -sign * dp_dop / lik * op;
        for (k, &j) in spec.contrast.selector.iter().enumerate() {
            grad[k] += gc * row[j];
        }
        for (k, &j) in spec.op.selector.iter().enumerate() {
            grad[kc + k] += go * row[j];
        }
    }
    total
}

/// Maximum likelihood fit of a contrast / odds-product binary regression.
/// `multiplier` rescales the contrast row by row (`contrast = m_i link(...)`).
pub fn fit_rdlink(
    outcome: &[u8],
    regressor: &[u8],
    data: &Dataset,
    spec: &RdLinkSpec,
    multiplier: Option<&[f64]>,
    cfg: &OptimConfig,
) -> Result<RdLinkFit> {
    let scale = spec.scale()?;
    let n = data.n();
    if outcome.len() != n || regressor.len() != n || multiplier.is_some_and(|m| m.len() != n) {
        return Err(IvError::Config("rdlink inputs must have one entry per row".into()));
    }
    if regressor.iter().chain(outcome).any(|&v| v > 1) {
        return Err(IvError::Config("rdlink outcome and regressor must be binary".into()));
    }
    check_selector(&spec.contrast.selector, data)?;
    check_selector(&spec.op.selector, data)?;
    let kc = spec.contrast.coef.len();
    let mut work = spec.clone();
    let x0: Vec<f64> = spec.contrast.coef.iter().chain(&spec.op.coef).copied().collect();
    let nf = n as f64;
    let report = minimize_multistart(
        |c, g| {
            work.contrast.coef.copy_from_slice(&c[..kc]);
            work.op.coef.copy_from_slice(&c[kc..]);
            let v = rdlink_nll(&work, scale, outcome, regressor, data, multiplier, g);
            g.iter_mut().for_each(|x| *x /= nf);
            v / nf
        },
        &x0,
        cfg,
    );
    let mut fitted = spec.clone();
    fitted.contrast.coef.copy_from_slice(&report.solution[..kc]);
    fitted.op.coef.copy_from_slice(&report.solution[kc..]);
    Ok(RdLinkFit {
        spec: fitted,
        scale,
        report,
    })
}

fn is_binary_column(data: &Dataset, j: usize) -> bool {
    (0..data.n()).all(|i| {
        let v = data.row(i)[j];
        v == 0.0 || v == 1.0
    })
}

/// Selected covariates plus powers `2..=max_power` of the last selected
/// column (skipped when that column is binary, where powers are collinear).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolyFeatures {
    pub selector: Vec<usize>,
    pub max_power: u32,
}

impl PolyFeatures {
    pub fn new(data: &Dataset, selector: &[usize], max_power: u32) -> Result<Self> {
        check_selector(selector, data)?;
        let last = *selector
            .last()
            .ok_or_else(|| IvError::Config("empty covariate selector".into()))?;
        let max_power = if is_binary_column(data, last) { 1 } else { max_power };
        Ok(Self {
            selector: selector.to_vec(),
            max_power,
        })
    }

    pub fn len(&self) -> usize {
        self.selector.len() + self.max_power.saturating_sub(1) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, row: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.selector.iter().map(|&j| row[j]));
        let last = row[*self.selector.last().expect("non-empty")];
        for p in 2..=self.max_power {
            out.push(last.powi(p as i32));
        }
    }

    pub fn design(&self, data: &Dataset) -> DesignMatrix {
        let mut buf = Vec::new();
        let mut all = Vec::with_capacity(data.n() * self.len());
        for i in 0..data.n() {
            self.row(data.row(i), &mut buf);
            all.extend_from_slice(&buf);
        }
        DesignMatrix::new(data.n(), self.len(), all).expect("shape consistent")
    }
}

/// `E(H | X; xi)`: cubic-linear on the additive scale, exp-quadratic on the
/// multiplicative scale.
fn outcome_features(data: &Dataset, selector: &[usize], scale: Scale) -> Result<PolyFeatures> {
    PolyFeatures::new(data, selector, if scale == Scale::Additive { 3 } else { 2 })
}

fn xi_link(scale: Scale) -> Link {
    match scale {
        Scale::Additive => Link::Linear,
        Scale::Multiplicative => Link::Exp,
    }
}

/// Stage output of the outcome-regression estimator, reused by the doubly
/// robust variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OgburnRegression {
    pub scale: Scale,
    pub features: PolyFeatures,
    pub xi: Vec<f64>,
    pub alpha: Vec<f64>,
    pub theta_selector: Vec<usize>,
    pub report: SolveReport,
}

impl OgburnRegression {
    /// Fitted `E(H | X_i; xi)` per row.
    pub fn expected_h(&self, data: &Dataset) -> Vec<f64> {
        let link = xi_link(self.scale);
        let mut buf = Vec::new();
        (0..data.n())
            .map(|i| {
                self.features.row(data.row(i), &mut buf);
                link.apply(dot(&self.xi, &buf))
            })
            .collect()
    }

    fn theta_model(&self) -> CurveModel {
        CurveModel {
            link: Link::for_theta(self.scale),
            coef: self.alpha.clone(),
            selector: self.theta_selector.clone(),
        }
    }
}

fn as_f64(v: &[u8]) -> Vec<f64> {
    v.iter().map(|&b| b as f64).collect()
}

/// Joint solve of the stacked outcome-regression moment for `(xi, alpha)`.
pub fn fit_reg_ogburn_models(
    data: &Dataset,
    design: &Design,
    scale: Scale,
    cfg: &OptimConfig,
) -> Result<OgburnRegression> {
    check_selector(&design.theta, data)?;
    let features = outcome_features(data, &design.nuisance, scale)?;
    let fdesign = features.design(data);
    let kx = features.len();
    let ka = design.theta.len();
    let link = xi_link(scale);
    let theta_link = Link::for_theta(scale);

    // start from the regression of Y on the features (H at alpha = 0)
    let y = as_f64(data.y());
    let lin = fit_least_squares(&y, &fdesign, false)?;
    let xi0 = match scale {
        Scale::Additive => lin.coef().to_vec(),
        Scale::Multiplicative => {
            let logs: Vec<f64> = (0..data.n())
                .map(|i| dot(lin.coef(), fdesign.row(i)).clamp(0.05, 1.0).ln())
                .collect();
            fit_least_squares(&logs, &fdesign, false)?.coef().to_vec()
        }
    };
    let (yv, dv, zv) = (data.y(), data.d(), data.z());
    let m = |p: &[f64]| {
        let (xi, alpha) = p.split_at(kx);
        let mut out = vec![0.0; kx + ka];
        for i in 0..data.n() {
            let row = data.row(i);
            let eta: f64 = alpha.iter().zip(&design.theta).map(|(a, &j)| a * row[j]).sum();
            let theta = theta_link.apply(eta);
            if scale == Scale::Multiplicative && !(theta > THETA_FLOOR && theta.is_finite()) {
                return vec![f64::NAN; kx + ka];
            }
            let f = fdesign.row(i);
            let e = link.apply(dot(xi, f));
            let r = h_value(yv[i], dv[i], theta, scale) - e;
            let de = link.derivative(e);
            for k in 0..kx {
                out[k] += f[k] * de * r;
            }
            let s = zv[i] as f64 * theta_link.derivative(theta) * r;
            for (k, &j) in design.theta.iter().enumerate() {
                out[kx + k] += s * row[j];
            }
        }
        let n = data.n() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    };
    let x0: Vec<f64> = xi0.iter().copied().chain(std::iter::repeat_n(0.0, ka)).collect();
    let report = solve_from_starts(m, &[x0], cfg);
    Ok(OgburnRegression {
        scale,
        features,
        xi: report.solution[..kx].to_vec(),
        alpha: report.solution[kx..].to_vec(),
        theta_selector: design.theta.clone(),
        report,
    })
}

/// Outcome-regression estimator with a variation-dependent `E(H | X)` model
/// (tag `reg.ogburn`).
pub fn fit_reg_ogburn(data: &Dataset, design: &Design, scale: Scale, cfg: &OptimConfig) -> Result<FitResult> {
    Ok(reg_ogburn_result(&fit_reg_ogburn_models(data, design, scale, cfg)?))
}

pub fn reg_ogburn_result(reg: &OgburnRegression) -> FitResult {
    let mut r = FitResult::new("reg.ogburn", reg.scale, reg.alpha.clone());
    r.nuisance.insert("xi".into(), reg.xi.clone());
    r.absorb("stacked moment", &reg.report);
    r.loglik_or_residual = reg.report.objective_or_residual;
    r
}

/// Stage 2 shared by the Ogburn doubly robust estimators:
/// `P_n s_i x_theta,i (2Z-1)/f(Z|X) {H(alpha) - E(H|X; xi_reg)} = 0`.
/// Unit scalars `s_i` give the identity-weighted estimator.
pub fn solve_ogburn_weighted(
    data: &Dataset,
    reg: &OgburnRegression,
    instrument: &InstrumentFit,
    scalars: &[f64],
    cfg: &OptimConfig,
) -> Result<SolveReport> {
    if scalars.len() != data.n() {
        return Err(IvError::Config("one weight per row required".into()));
    }
    let (ipw, _) = instrument.inverse_weights(data);
    let eh = reg.expected_h(data);
    let moment = DrMoment {
        data,
        theta: reg.theta_model(),
        scale: reg.scale,
        ipw: &ipw,
    };
    let m = |alpha: &[f64]| moment.eval(alpha, &mut |i, _| eh[i], &mut |i, _| scalars[i]);
    let zero = vec![0.0; reg.alpha.len()];
    Ok(solve_from_starts(m, &[reg.alpha.clone(), zero], cfg))
}

fn ogburn_result(
    tag: &str,
    reg: &OgburnRegression,
    instrument: &InstrumentFit,
    report: &SolveReport,
    data: &Dataset,
) -> FitResult {
    let mut r = FitResult::new(tag, reg.scale, report.solution.clone());
    r.nuisance.insert("xi".into(), reg.xi.clone());
    r.nuisance.insert("gamma".into(), instrument.model.coef.clone());
    // the weighted moment stays unbiased for any fixed xi, so a regression
    // stage that stopped at its least-residual point is not fatal here
    r.note("regression", &reg.report);
    r.absorb("instrument", &instrument.report);
    r.absorb("moment", report);
    r.loglik_or_residual = report.objective_or_residual;
    let (_, clipped) = instrument.probabilities(data);
    if clipped > 0 {
        r.warnings.push(format!("{clipped} instrument probabilities clipped"));
    }
    r
}

pub fn fit_dru_ogburn_with(
    data: &Dataset,
    reg: &OgburnRegression,
    instrument: &InstrumentFit,
    cfg: &OptimConfig,
) -> Result<FitResult> {
    let ones = vec![1.0; data.n()];
    let report = solve_ogburn_weighted(data, reg, instrument, &ones, cfg)?;
    Ok(ogburn_result("dru.ogburn", reg, instrument, &report, data))
}

/// Identity-weighted doubly robust estimator (tag `dru.ogburn`).
pub fn fit_dru_ogburn(data: &Dataset, design: &Design, scale: Scale, cfg: &OptimConfig) -> Result<FitResult> {
    let reg = fit_reg_ogburn_models(data, design, scale, cfg)?;
    let instrument = fit_instrument(data, &design.instrument, cfg)?;
    fit_dru_ogburn_with(data, &reg, &instrument, cfg)
}

/// Plug-in optimal weights for the Ogburn moment.
#[derive(Clone, Debug)]
pub struct OgburnWeights {
    /// `s_i`, so that `omega_i = s_i x_theta,i`.
    pub scalars: Vec<f64>,
    /// Labelled coefficients of the auxiliary models.
    pub coefs: Vec<(String, Vec<f64>)>,
    pub reports: Vec<SolveReport>,
    /// Rows whose variance was floored.
    pub floored: usize,
}

pub fn ogburn_optimal_scalars(
    data: &Dataset,
    design: &Design,
    reg: &OgburnRegression,
    instrument: &InstrumentFit,
    cfg: &OptimConfig,
) -> Result<OgburnWeights> {
    let scale = reg.scale;
    let n = data.n();
    let theta_model = reg.theta_model();
    let eh = reg.expected_h(data);
    let (ipw, _) = instrument.inverse_weights(data);
    let theta_reg: Vec<f64> = (0..n).map(|i| eval_fast(&theta_model, data.row(i))).collect();
    let targets: Vec<f64> = (0..n)
        .map(|i| {
            let r = (h_value(data.y()[i], data.d()[i], theta_reg[i], scale) - eh[i]) * ipw[i];
            r * r
        })
        .collect();
    let vfeat = PolyFeatures::new(data, &design.nuisance, 2)?;
    let vdesign = vfeat.design(data);
    let mut coefs = Vec::new();
    let mut reports = Vec::new();
    let mut floored = 0;

    let variance: Vec<f64> = match scale {
        Scale::Additive => {
            let ls = fit_least_squares(&targets, &vdesign, true)?;
            coefs.push(("zeta".to_string(), ls.coef().to_vec()));
            (0..n)
                .map(|i| {
                    let (v, f) = ls.predict(vdesign.row(i));
                    floored += f as usize;
                    v
                })
                .collect()
        }
        Scale::Multiplicative => {
            // exp-linear variance by nonlinear least squares, started from
            // the regression of log targets
            let logs: Vec<f64> = targets.iter().map(|t| t.max(VARIANCE_FLOOR).ln()).collect();
            let start = fit_least_squares(&logs, &vdesign, false)?;
            let nf = n as f64;
            let rep = minimize_multistart(
                |c, g| {
                    g.iter_mut().for_each(|v| *v = 0.0);
                    let mut total = 0.0;
                    for i in 0..n {
                        let row = vdesign.row(i);
                        let fit = dot(c, row).exp();
                        let r = targets[i] - fit;
                        total += r * r;
                        for (gk, x) in g.iter_mut().zip(row) {
                            *gk -= 2.0 * r * fit * x;
                        }
                    }
                    g.iter_mut().for_each(|v| *v /= nf);
                    total / nf
                },
                start.coef(),
                cfg,
            );
            let v = (0..n)
                .map(|i| {
                    let v = dot(&rep.solution, vdesign.row(i)).exp();
                    if v > VARIANCE_FLOOR {
                        v
                    } else {
                        floored += 1;
                        VARIANCE_FLOOR
                    }
                })
                .collect();
            coefs.push(("zeta".to_string(), rep.solution.clone()));
            reports.push(rep);
            v
        }
    };

    let scalars = match scale {
        Scale::Additive => {
            let spec = RdLinkSpec::zeros(Link::Tanh, design.nuisance.clone(), design.nuisance.clone());
            let dd = fit_rdlink(data.d(), data.z(), data, &spec, None, cfg)?;
            coefs.push(("psi".to_string(), dd.spec.contrast.coef.clone()));
            coefs.push(("psi_op".to_string(), dd.spec.op.coef.clone()));
            let s = (0..n)
                .map(|i| {
                    let delta_d = eval_fast(&dd.spec.contrast, data.row(i));
                    -(1.0 - theta_reg[i] * theta_reg[i]) * delta_d / variance[i]
                })
                .collect();
            reports.push(dd.report);
            s
        }
        Scale::Multiplicative => {
            // E(DY | Z, X) = expit(psi2 Z + psi3 x)
            let k = design.nuisance.len();
            let zd = DesignMatrix::from_fn(n, k + 1, |i, j| {
                if j == 0 {
                    data.z()[i] as f64
                } else {
                    data.row(i)[design.nuisance[j - 1]]
                }
            });
            let dy: Vec<f64> = (0..n).map(|i| (data.d()[i] & data.y()[i]) as f64).collect();
            let fit = fit_logistic(&dy, &zd, cfg)?;
            coefs.push(("psi".to_string(), fit.solution.clone()));
            let (psi2, psi3) = fit.solution.split_first().expect("instrument column");
            let s = (0..n)
                .map(|i| {
                    let base: f64 = psi3.iter().zip(&design.nuisance).map(|(p, &j)| p * data.row(i)[j]).sum();
                    let diff = expit(psi2 + base) - expit(base);
                    -diff / (theta_reg[i] * variance[i])
                })
                .collect();
            reports.push(fit);
            s
        }
    };
    Ok(OgburnWeights {
        scalars,
        coefs,
        reports,
        floored,
    })
}

pub fn fit_drw_ogburn_with(
    data: &Dataset,
    design: &Design,
    reg: &OgburnRegression,
    instrument: &InstrumentFit,
    cfg: &OptimConfig,
) -> Result<FitResult> {
    let OgburnWeights {
        scalars,
        coefs,
        reports,
        floored,
    } = ogburn_optimal_scalars(data, design, reg, instrument, cfg)?;
    let report = solve_ogburn_weighted(data, reg, instrument, &scalars, cfg)?;
    let mut r = ogburn_result("drw.ogburn", reg, instrument, &report, data);
    for (name, c) in coefs {
        r.nuisance.insert(name, c);
    }
    for rep in &reports {
        r.absorb("weight model", rep);
    }
    if floored > 0 {
        r.warnings.push(format!("variance floored in {floored} rows"));
    }
    Ok(r)
}

/// Plug-in optimally weighted doubly robust estimator (tag `drw.ogburn`).
pub fn fit_drw_ogburn(data: &Dataset, design: &Design, scale: Scale, cfg: &OptimConfig) -> Result<FitResult> {
    let reg = fit_reg_ogburn_models(data, design, scale, cfg)?;
    let instrument = fit_instrument(data, &design.instrument, cfg)?;
    fit_drw_ogburn_with(data, design, &reg, &instrument, cfg)
}

/// Two-stage risk-difference likelihood fits: `(delta^D, OP^D)` of D on Z,
/// then `(theta delta^D, OP^Y)` of Y on Z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WangFit {
    pub treatment: RdLinkFit,
    pub outcome: RdLinkFit,
    pub delta_d: Vec<f64>,
    pub irrelevant: bool,
}

fn require_additive(scale: Scale, tag: &str) -> Result<()> {
    if scale != Scale::Additive {
        return Err(IvError::Unsupported(format!("{tag} is defined on the additive scale only")));
    }
    Ok(())
}

/// Mean `|delta^D|` below which the outcome likelihood is treated as flat in alpha.
const IRRELEVANT_DELTA: f64 = 1e-4;

pub fn fit_wang_models(data: &Dataset, design: &Design, cfg: &OptimConfig) -> Result<WangFit> {
    check_selector(&design.theta, data)?;
    let spec_d = RdLinkSpec::zeros(Link::Tanh, design.nuisance.clone(), design.nuisance.clone());
    let treatment = fit_rdlink(data.d(), data.z(), data, &spec_d, None, cfg)?;
    let delta_d: Vec<f64> = (0..data.n())
        .map(|i| eval_fast(&treatment.spec.contrast, data.row(i)))
        .collect();
    let irrelevant = delta_d.iter().all(|v| v.abs() < IRRELEVANT_DELTA);
    let spec_y = RdLinkSpec::zeros(Link::Tanh, design.theta.clone(), design.nuisance.clone());
    let outcome = fit_rdlink(data.y(), data.z(), data, &spec_y, Some(&delta_d), cfg)?;
    Ok(WangFit {
        treatment,
        outcome,
        delta_d,
        irrelevant,
    })
}

fn wang_nuisance(r: &mut FitResult, w: &WangFit) {
    r.nuisance.insert("lambda".into(), w.treatment.spec.contrast.coef.clone());
    r.nuisance.insert("tau".into(), w.treatment.spec.op.coef.clone());
    r.nuisance.insert("kappa".into(), w.outcome.spec.op.coef.clone());
    r.absorb("treatment likelihood", &w.treatment.report);
    r.absorb("outcome likelihood", &w.outcome.report);
    if w.irrelevant {
        r.converged = false;
        r.warnings.push("instrument irrelevant: outcome likelihood flat in alpha".into());
    }
}

pub fn wang_mle_result(w: &WangFit) -> FitResult {
    let mut r = FitResult::new("mle.wang", Scale::Additive, w.outcome.spec.contrast.coef.clone());
    wang_nuisance(&mut r, w);
    r.loglik_or_residual = -w.outcome.report.objective_or_residual;
    r
}

/// Two-stage likelihood estimator, additive only (tag `mle.wang`).
pub fn fit_mle_wang(data: &Dataset, design: &Design, scale: Scale, cfg: &OptimConfig) -> Result<FitResult> {
    require_additive(scale, "mle.wang")?;
    Ok(wang_mle_result(&fit_wang_models(data, design, cfg)?))
}

pub fn fit_dru_wang_with(
    data: &Dataset,
    w: &WangFit,
    instrument: &InstrumentFit,
    cfg: &OptimConfig,
) -> Result<FitResult> {
    let n = data.n();
    let (e_d0, e_y0): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|i| {
            let row = data.row(i);
            let (d0, _) = w.treatment.arm_probabilities(row, 1.0);
            let (y0, _) = w.outcome.arm_probabilities(row, w.delta_d[i]);
            (d0, y0)
        })
        .unzip();
    let (ipw, clipped) = instrument.inverse_weights(data);
    let theta = CurveModel::zeros(Link::Tanh, w.outcome.spec.contrast.selector.clone());
    let moment = DrMoment {
        data,
        theta,
        scale: Scale::Additive,
        ipw: &ipw,
    };
    let m = |alpha: &[f64]| moment.eval(alpha, &mut |i, t| e_y0[i] - t * e_d0[i], &mut |_, _| 1.0);
    let start = w.outcome.spec.contrast.coef.clone();
    let zero = vec![0.0; start.len()];
    let report = solve_from_starts(m, &[start, zero], cfg);
    let mut r = FitResult::new("dru.wang", Scale::Additive, report.solution.clone());
    wang_nuisance(&mut r, w);
    r.nuisance.insert("gamma".into(), instrument.model.coef.clone());
    r.absorb("instrument", &instrument.report);
    r.absorb("moment", &report);
    r.loglik_or_residual = report.objective_or_residual;
    if clipped > 0 {
        r.warnings.push(format!("{clipped} instrument probabilities clipped"));
    }
    Ok(r)
}

/// Identity-weighted doubly robust estimator on the two-stage likelihood
/// nuisances, additive only (tag `dru.wang`).
pub fn fit_dru_wang(data: &Dataset, design: &Design, scale: Scale, cfg: &OptimConfig) -> Result<FitResult> {
    require_additive(scale, "dru.wang")?;
    let w = fit_wang_models(data, design, cfg)?;
    let instrument = fit_instrument(data, &design.instrument, cfg)?;
    fit_dru_wang_with(data, &w, &instrument, cfg)
}

/// Kappa weights `1 - D(1-Z)/(1-pi) - (1-D)Z/pi`.
pub fn abadie_weights(data: &Dataset, instrument: &InstrumentFit) -> (Vec<f64>, usize) {
    let (pi, clipped) = instrument.probabilities(data);
    let w = (0..data.n())
        .map(|i| {
            let (d, z) = (data.d()[i] as f64, data.z()[i] as f64);
            1.0 - d * (1.0 - z) / (1.0 - pi[i]) - (1.0 - d) * z / pi[i]
        })
        .collect();
    (w, clipped)
}

pub fn fit_ls_abadie_with(
    data: &Dataset,
    design: &Design,
    scale: Scale,
    instrument: &InstrumentFit,
    cfg: &OptimConfig,
) -> Result<FitResult> {
    check_selector(&design.theta, data)?;
    let (w, clipped) = abadie_weights(data, instrument);
    let sel = &design.theta;
    let k = sel.len();
    let n = data.n();
    let nf = n as f64;
    let theta_link = Link::for_theta(scale);
    let report = minimize_multistart(
        |c, g| {
            let (a, b) = c.split_at(k);
            g.iter_mut().for_each(|v| *v = 0.0);
            let mut total = 0.0;
            for i in 0..n {
                let row = data.row(i);
                let d = data.d()[i] as f64;
                let ta = theta_link.apply(sel.iter().zip(a).map(|(&j, c)| c * row[j]).sum());
                let e = expit(sel.iter().zip(b).map(|(&j, c)| c * row[j]).sum());
                let (m, dm_da, dm_db) = match scale {
                    Scale::Additive => (d * ta + e, d * (1.0 - ta * ta), e * (1.0 - e)),
                    Scale::Multiplicative => {
                        let f = if d == 1.0 { ta } else { 1.0 };
                        (f * e, d * f * e, f * e * (1.0 - e))
                    }
                };
                if !m.is_finite() {
                    return f64::INFINITY;
                }
                let r = data.y()[i] as f64 - m;
                total += w[i] * r * r;
                for (kk, &j) in sel.iter().enumerate() {
                    g[kk] -= 2.0 * w[i] * r * dm_da * row[j];
                    g[k + kk] -= 2.0 * w[i] * r * dm_db * row[j];
                }
            }
            g.iter_mut().for_each(|v| *v /= nf);
            total / nf
        },
        &vec![0.0; 2 * k],
        cfg,
    );
    let mut r = FitResult::new("ls.abadie", scale, report.solution[..k].to_vec());
    r.nuisance.insert("varphi".into(), report.solution[k..].to_vec());
    r.nuisance.insert("gamma".into(), instrument.model.coef.clone());
    r.absorb("instrument", &instrument.report);
    r.absorb("weighted least squares", &report);
    r.loglik_or_residual = report.objective_or_residual;
    if clipped > 0 {
        r.warnings.push(format!("{clipped} instrument probabilities clipped"));
    }
    Ok(r)
}

/// Kappa-weighted least squares on the complier response curve
/// (tag `ls.abadie`). The outcome model uses the target covariates.
pub fn fit_ls_abadie(data: &Dataset, design: &Design, scale: Scale, cfg: &OptimConfig) -> Result<FitResult> {
    let instrument = fit_instrument(data, &design.instrument, cfg)?;
    fit_ls_abadie_with(data, design, scale, &instrument, cfg)
}

/// Crude association of Y with D ignoring the instrument (tag `mle.crude`).
pub fn fit_mle_crude(data: &Dataset, design: &Design, scale: Scale, cfg: &OptimConfig) -> Result<FitResult> {
    let spec = RdLinkSpec::zeros(Link::for_theta(scale), design.theta.clone(), design.nuisance.clone());
    let fit = fit_rdlink(data.y(), data.d(), data, &spec, None, cfg)?;
    let nuis = data.design(&design.nuisance)?;
    let d_fit = fit_logistic(&as_f64(data.d()), &nuis, cfg)?;
    let mut r = FitResult::new("mle.crude", scale, fit.spec.contrast.coef.clone());
    r.nuisance.insert("rho".into(), fit.spec.op.coef.clone());
    r.nuisance.insert("upsilon".into(), d_fit.solution.clone());
    r.absorb("likelihood", &fit.report);
    r.absorb("E(D|X)", &d_fit);
    r.loglik_or_residual = -fit.report.objective_or_residual * data.n() as f64;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::INTERCEPT;

    fn balanced() -> Dataset {
        // arms of 8 rows each with outcome means 0.25 (v = 0) and 0.75 (v = 1)
        let n = 16;
        let x = DesignMatrix::from_fn(n, 1, |_, _| 1.0);
        let v: Vec<u8> = (0..n).map(|i| (i >= 8) as u8).collect();
        let w: Vec<u8> = (0..n)
            .map(|i| if i < 8 { (i < 2) as u8 } else { (i < 14) as u8 })
            .collect();
        Dataset::new(vec![INTERCEPT.into()], x, v.clone(), v, w).unwrap()
    }

    #[test]
    fn rdlink_recovers_arm_means() {
        let data = balanced();
        let spec = RdLinkSpec::zeros(Link::Tanh, vec![0], vec![0]);
        let cfg = OptimConfig {
            grad_tol: 1e-10,
            ..OptimConfig::default()
        };
        let fit = fit_rdlink(data.y(), data.z(), &data, &spec, None, &cfg).unwrap();
        assert!(fit.report.converged);
        let (p0, p1) = fit.arm_probabilities(data.row(0), 1.0);
        assert!((p0 - 0.25).abs() < 1e-8 && (p1 - 0.75).abs() < 1e-8);
    }

    #[test]
    fn rdlink_symmetric_null() {
        let n = 8;
        let x = DesignMatrix::from_fn(n, 1, |_, _| 1.0);
        let v: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let w: Vec<u8> = (0..n).map(|i| ((i / 2) % 2) as u8).collect();
        let data = Dataset::new(vec![INTERCEPT.into()], x, v.clone(), v, w).unwrap();
        let spec = RdLinkSpec::zeros(Link::Tanh, vec![0], vec![0]);
        let fit = fit_rdlink(data.y(), data.z(), &data, &spec, None, &OptimConfig::default()).unwrap();
        assert!(fit.report.solution.iter().all(|c| c.abs() < 1e-9));
        assert_eq!(fit.report.iterations, 0);
    }

    #[test]
    fn poly_features_skip_binary_powers() {
        let x = DesignMatrix::from_rows(&[vec![1.0, 0.5, 1.0], vec![1.0, -0.5, 0.0]]).unwrap();
        let data = Dataset::new(
            vec![INTERCEPT.into(), "u".into(), "b".into()],
            x,
            vec![0, 1],
            vec![0, 1],
            vec![0, 1],
        )
        .unwrap();
        let f = PolyFeatures::new(&data, &[0, 1], 3).unwrap();
        let mut buf = Vec::new();
        f.row(data.row(0), &mut buf);
        assert_eq!(buf, vec![1.0, 0.5, 0.25, 0.125]);
        assert_eq!(PolyFeatures::new(&data, &[0, 2], 3).unwrap().len(), 2);
    }

    #[test]
    fn abadie_weights_are_one_for_compliers() {
        let data = balanced();
        let inst = InstrumentFit {
            model: CurveModel::new(Link::Expit, vec![0.3], vec![0]).unwrap(),
            report: SolveReport {
                solution: vec![0.3],
                objective_or_residual: 0.0,
                converged: true,
                iterations: 0,
                message: String::new(),
                warnings: Vec::new(),
            },
        };
        let (w, _) = abadie_weights(&data, &inst);
        assert!(w.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn wang_requires_additive() {
        let data = balanced();
        let design = Design::uniform(vec![0]);
        assert!(matches!(
            fit_mle_wang(&data, &design, Scale::Multiplicative, &OptimConfig::default()),
            Err(IvError::Unsupported(_))
        ));
    }
}
