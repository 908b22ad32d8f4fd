//! Parametric curves `link(coef . x_selected)` for the target contrast,
//! the nuisance curves and the instrument density.

use serde::{Deserialize, Serialize};

use crate::error::{IvError, Result};
use crate::param::{Scale, StructuralPoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Tanh,
    Exp,
    Expit,
    /// Exponential link for odds products; kept distinct for reporting.
    LogLinear,
    Linear,
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Link {
    #[inline]
    pub fn apply(self, eta: f64) -> f64 {
        match self {
            Link::Tanh => eta.tanh(),
            Link::Exp | Link::LogLinear => eta.exp(),
            Link::Expit => expit(eta),
            Link::Linear => eta,
        }
    }

    /// Derivative with respect to the linear predictor, given the link value.
    #[inline]
    pub fn derivative(self, value: f64) -> f64 {
        match self {
            Link::Tanh => 1.0 - value * value,
            Link::Exp | Link::LogLinear => value,
            Link::Expit => value * (1.0 - value),
            Link::Linear => 1.0,
        }
    }

    /// Link used for the target contrast on each scale.
    pub fn for_theta(scale: Scale) -> Self {
        match scale {
            Scale::Additive => Link::Tanh,
            Scale::Multiplicative => Link::Exp,
        }
    }
}

/// One parametric curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveModel {
    pub link: Link,
    pub coef: Vec<f64>,
    /// Covariate columns the coefficients apply to.
    pub selector: Vec<usize>,
}

impl CurveModel {
    pub fn new(link: Link, coef: Vec<f64>, selector: Vec<usize>) -> Result<Self> {
        if coef.len() != selector.len() {
            return Err(IvError::Config(format!(
                "{} coefficients for {} selected covariates",
                coef.len(),
                selector.len()
            )));
        }
        Ok(Self {
            link,
            coef,
            selector,
        })
    }

    pub fn zeros(link: Link, selector: Vec<usize>) -> Self {
        Self {
            link,
            coef: vec![0.0; selector.len()],
            selector,
        }
    }

    pub fn linear_predictor(&self, row: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for (c, &j) in self.coef.iter().zip(&self.selector) {
            let x = row
                .get(j)
                .ok_or(IvError::SelectorOutOfRange { index: j, len: row.len() })?;
            acc += c * x;
        }
        Ok(acc)
    }

    pub fn eval(&self, row: &[f64]) -> Result<f64> {
        Ok(self.link.apply(self.linear_predictor(row)?))
    }

    pub fn selected(&self, row: &[f64]) -> Result<Vec<f64>> {
        self.selector
            .iter()
            .map(|&j| {
                row.get(j)
                    .copied()
                    .ok_or(IvError::SelectorOutOfRange { index: j, len: row.len() })
            })
            .collect()
    }
}

/// Covariate selectors for the three model families.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Design {
    /// Target contrast model.
    pub theta: Vec<usize>,
    /// Nuisance curves other than the instrument density.
    pub nuisance: Vec<usize>,
    /// Instrument density.
    pub instrument: Vec<usize>,
}

impl Design {
    pub fn uniform(selector: Vec<usize>) -> Self {
        Self {
            theta: selector.clone(),
            nuisance: selector.clone(),
            instrument: selector,
        }
    }
}

/// Full model specification for the likelihood-based estimators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSet {
    pub scale: Scale,
    pub theta: CurveModel,
    pub phi1: CurveModel,
    pub phi2: CurveModel,
    pub phi3: CurveModel,
    pub phi4: CurveModel,
    pub op: CurveModel,
    pub instrument: CurveModel,
    /// Fixes `phi2 = phi4 = 0`; their models are ignored.
    pub one_sided: bool,
}

/// Curve slots in the concatenated free-coefficient vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Slot {
    Theta,
    Phi1,
    Phi2,
    Phi3,
    Phi4,
    Op,
}

impl ModelSet {
    /// All-zero coefficients with the standard links.
    pub fn zeros(scale: Scale, design: &Design, one_sided: bool) -> Self {
        let nuis = || CurveModel::zeros(Link::Expit, design.nuisance.clone());
        Self {
            scale,
            theta: CurveModel::zeros(Link::for_theta(scale), design.theta.clone()),
            phi1: nuis(),
            phi2: nuis(),
            phi3: nuis(),
            phi4: nuis(),
            op: CurveModel::zeros(Link::LogLinear, design.nuisance.clone()),
            instrument: CurveModel::zeros(Link::Expit, design.instrument.clone()),
            one_sided,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.link != Link::for_theta(self.scale) {
            return Err(IvError::Config(format!(
                "theta link {:?} incompatible with {} scale",
                self.theta.link, self.scale
            )));
        }
        for (name, m) in [
            ("phi1", &self.phi1),
            ("phi2", &self.phi2),
            ("phi3", &self.phi3),
            ("phi4", &self.phi4),
            ("instrument", &self.instrument),
        ] {
            if m.link != Link::Expit {
                return Err(IvError::Config(format!("{name} requires the expit link")));
            }
        }
        if !matches!(self.op.link, Link::Exp | Link::LogLinear) {
            return Err(IvError::Config("odds product requires an exponential link".into()));
        }
        for m in [
            &self.theta,
            &self.phi1,
            &self.phi2,
            &self.phi3,
            &self.phi4,
            &self.op,
            &self.instrument,
        ] {
            if m.coef.len() != m.selector.len() {
                return Err(IvError::Config("coefficient/selector length mismatch".into()));
            }
        }
        Ok(())
    }

    pub(crate) fn free_slots(&self) -> Vec<Slot> {
        if self.one_sided {
            vec![Slot::Theta, Slot::Phi1, Slot::Phi3, Slot::Op]
        } else {
            vec![
                Slot::Theta,
                Slot::Phi1,
                Slot::Phi2,
                Slot::Phi3,
                Slot::Phi4,
                Slot::Op,
            ]
        }
    }

    pub(crate) fn curve(&self, slot: Slot) -> &CurveModel {
        match slot {
            Slot::Theta => &self.theta,
            Slot::Phi1 => &self.phi1,
            Slot::Phi2 => &self.phi2,
            Slot::Phi3 => &self.phi3,
            Slot::Phi4 => &self.phi4,
            Slot::Op => &self.op,
        }
    }

    fn curve_mut(&mut self, slot: Slot) -> &mut CurveModel {
        match slot {
            Slot::Theta => &mut self.theta,
            Slot::Phi1 => &mut self.phi1,
            Slot::Phi2 => &mut self.phi2,
            Slot::Phi3 => &mut self.phi3,
            Slot::Phi4 => &mut self.phi4,
            Slot::Op => &mut self.op,
        }
    }

    /// Concatenated coefficients of the likelihood curves (instrument excluded).
    pub fn free_coefs(&self) -> Vec<f64> {
        self.free_slots()
            .into_iter()
            .flat_map(|s| self.curve(s).coef.clone())
            .collect()
    }

    pub fn n_free(&self) -> usize {
        self.free_slots().into_iter().map(|s| self.curve(s).coef.len()).sum()
    }

    pub fn set_free_coefs(&mut self, coefs: &[f64]) -> Result<()> {
        if coefs.len() != self.n_free() {
            return Err(IvError::Config(format!(
                "expected {} free coefficients, got {}",
                self.n_free(),
                coefs.len()
            )));
        }
        let mut offset = 0;
        for s in self.free_slots() {
            let c = self.curve_mut(s);
            let k = c.coef.len();
            c.coef.copy_from_slice(&coefs[offset..offset + k]);
            offset += k;
        }
        Ok(())
    }
}

/// Structural point implied by the model set at one covariate row.
pub fn eval_structural(ms: &ModelSet, row: &[f64]) -> Result<StructuralPoint> {
    let theta = ms.theta.eval(row)?;
    let phi1 = ms.phi1.eval(row)?;
    let phi3 = ms.phi3.eval(row)?;
    let (phi2, phi4) = if ms.one_sided {
        (0.0, 0.0)
    } else {
        (ms.phi2.eval(row)?, ms.phi4.eval(row)?)
    };
    let opco = ms.op.eval(row)?;
    Ok(StructuralPoint {
        theta,
        phi1,
        phi2,
        phi3,
        phi4,
        opco,
    })
}

/// Gradient of `theta(x; alpha)` with respect to the target coefficients.
pub fn theta_gradient(ms: &ModelSet, row: &[f64]) -> Result<Vec<f64>> {
    let theta = ms.theta.eval(row)?;
    let scale = ms.theta.link.derivative(theta);
    Ok(ms.theta.selected(row)?.into_iter().map(|x| scale * x).collect())
}
