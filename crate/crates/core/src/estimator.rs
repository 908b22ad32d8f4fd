//! Estimator registry and a batch fitter that shares stage-1 fits between
//! estimators run on the same data.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::comparators::{
    fit_dru_ogburn_with, fit_dru_wang_with, fit_drw_ogburn_with, fit_ls_abadie_with, fit_mle_crude,
    fit_reg_ogburn_models, fit_wang_models, reg_ogburn_result, wang_mle_result, OgburnRegression, WangFit,
};
use crate::data::Dataset;
use crate::error::{IvError, Result};
use crate::models::{Design, ModelSet};
use crate::numopt::OptimConfig;
use crate::param::Scale;
use crate::proposed::{
    fit_dr_simple_with_instrument, fit_dr_with_stage1, fit_instrument, fit_mle_models, mle_result, FitResult,
    InstrumentFit, MleFit, WeightMode,
};
use crate::simulation::Scenario;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "mle")]
    Mle,
    #[serde(rename = "dru")]
    Dru,
    #[serde(rename = "drw")]
    Drw,
    #[serde(rename = "dru.simple")]
    DruSimple,
    #[serde(rename = "reg.ogburn")]
    RegOgburn,
    #[serde(rename = "dru.ogburn")]
    DruOgburn,
    #[serde(rename = "drw.ogburn")]
    DrwOgburn,
    #[serde(rename = "mle.wang")]
    MleWang,
    #[serde(rename = "dru.wang")]
    DruWang,
    #[serde(rename = "ls.abadie")]
    LsAbadie,
    #[serde(rename = "mle.crude")]
    MleCrude,
}

impl Estimator {
    pub const ALL: [Estimator; 11] = [
        Estimator::Mle,
        Estimator::Dru,
        Estimator::Drw,
        Estimator::DruSimple,
        Estimator::RegOgburn,
        Estimator::DruOgburn,
        Estimator::DrwOgburn,
        Estimator::MleWang,
        Estimator::DruWang,
        Estimator::LsAbadie,
        Estimator::MleCrude,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Estimator::Mle => "mle",
            Estimator::Dru => "dru",
            Estimator::Drw => "drw",
            Estimator::DruSimple => "dru.simple",
            Estimator::RegOgburn => "reg.ogburn",
            Estimator::DruOgburn => "dru.ogburn",
            Estimator::DrwOgburn => "drw.ogburn",
            Estimator::MleWang => "mle.wang",
            Estimator::DruWang => "dru.wang",
            Estimator::LsAbadie => "ls.abadie",
            Estimator::MleCrude => "mle.crude",
        }
    }

    pub fn supports_scale(self, scale: Scale) -> bool {
        !matches!(self, Estimator::MleWang | Estimator::DruWang) || scale == Scale::Additive
    }

    /// Weighted least squares only has `bth` and `bad`; the crude
    /// association has no nuisance models to mis-specify.
    pub fn supports_scenario(self, scenario: Scenario) -> bool {
        match self {
            Estimator::LsAbadie => matches!(scenario, Scenario::Bth | Scenario::Bad),
            Estimator::MleCrude => scenario == Scenario::Bth,
            _ => true,
        }
    }

    /// Row label in study tables, `tag.scenario` (the crude row is unlabelled).
    pub fn label(self, scenario: Scenario) -> String {
        match self {
            Estimator::MleCrude => self.tag().to_string(),
            _ => format!("{}.{}", self.tag(), scenario),
        }
    }

    pub fn check(self, scale: Scale, scenario: Option<Scenario>) -> Result<()> {
        if !self.supports_scale(scale) {
            return Err(IvError::Unsupported(format!("{self} is defined on the additive scale only")));
        }
        if let Some(sc) = scenario {
            if !self.supports_scenario(sc) {
                return Err(IvError::Unsupported(format!("{self} does not support scenario {sc}")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Estimator {
    type Err = IvError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Estimator::ALL
            .into_iter()
            .find(|e| e.tag() == s)
            .ok_or_else(|| IvError::Config(format!("unknown estimator `{s}`")))
    }
}

/// Shared settings for fitting on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub scale: Scale,
    /// Fix `phi2 = 0` in the likelihood models.
    pub one_sided: bool,
    pub optim: OptimConfig,
}

impl FitSettings {
    pub fn new(scale: Scale) -> Self {
        Self {
            scale,
            one_sided: false,
            optim: OptimConfig::default(),
        }
    }
}

/// Memoizes stage-1 fits on one dataset. The likelihood fit does not involve
/// the instrument model, so designs that differ only in their instrument
/// selector share it.
pub struct FitCache<'a> {
    data: &'a Dataset,
    settings: &'a FitSettings,
    mle: HashMap<(Vec<usize>, Vec<usize>), MleFit>,
    instrument: HashMap<Vec<usize>, InstrumentFit>,
    ogburn: HashMap<(Vec<usize>, Vec<usize>), OgburnRegression>,
    wang: HashMap<(Vec<usize>, Vec<usize>), WangFit>,
}

impl<'a> FitCache<'a> {
    pub fn new(data: &'a Dataset, settings: &'a FitSettings) -> Self {
        Self {
            data,
            settings,
            mle: HashMap::new(),
            instrument: HashMap::new(),
            ogburn: HashMap::new(),
            wang: HashMap::new(),
        }
    }

    fn key(design: &Design) -> (Vec<usize>, Vec<usize>) {
        (design.theta.clone(), design.nuisance.clone())
    }

    fn mle(&mut self, design: &Design) -> Result<&MleFit> {
        let key = Self::key(design);
        if !self.mle.contains_key(&key) {
            let ms = ModelSet::zeros(self.settings.scale, design, self.settings.one_sided);
            let fit = fit_mle_models(&ms, self.data, &self.settings.optim)?;
            self.mle.insert(key.clone(), fit);
        }
        Ok(&self.mle[&key])
    }

    fn instrument(&mut self, selector: &[usize]) -> Result<InstrumentFit> {
        if let Some(f) = self.instrument.get(selector) {
            return Ok(f.clone());
        }
        let fit = fit_instrument(self.data, selector, &self.settings.optim)?;
        self.instrument.insert(selector.to_vec(), fit.clone());
        Ok(fit)
    }

    fn ogburn(&mut self, design: &Design) -> Result<OgburnRegression> {
        let key = Self::key(design);
        if let Some(f) = self.ogburn.get(&key) {
            return Ok(f.clone());
        }
        let fit = fit_reg_ogburn_models(self.data, design, self.settings.scale, &self.settings.optim)?;
        self.ogburn.insert(key, fit.clone());
        Ok(fit)
    }

    fn wang(&mut self, design: &Design) -> Result<WangFit> {
        let key = Self::key(design);
        if let Some(f) = self.wang.get(&key) {
            return Ok(f.clone());
        }
        let fit = fit_wang_models(self.data, design, &self.settings.optim)?;
        self.wang.insert(key, fit.clone());
        Ok(fit)
    }

    pub fn fit(&mut self, estimator: Estimator, design: &Design) -> Result<FitResult> {
        let scale = self.settings.scale;
        estimator.check(scale, None)?;
        let cfg = self.settings.optim.clone();
        let data = self.data;
        match estimator {
            Estimator::Mle => Ok(mle_result(self.mle(design)?, data.n())),
            Estimator::Dru | Estimator::Drw => {
                let inst = self.instrument(&design.instrument)?;
                let mode = if estimator == Estimator::Dru {
                    WeightMode::Identity
                } else {
                    WeightMode::Optimal
                };
                let mle = self.mle(design)?;
                fit_dr_with_stage1(mle, &inst, data, &cfg, mode)
            }
            Estimator::DruSimple => {
                let inst = self.instrument(&design.instrument)?;
                fit_dr_simple_with_instrument(data, design, scale, &inst, &cfg)
            }
            Estimator::RegOgburn => Ok(reg_ogburn_result(&self.ogburn(design)?)),
            Estimator::DruOgburn => {
                let reg = self.ogburn(design)?;
                let inst = self.instrument(&design.instrument)?;
                fit_dru_ogburn_with(data, &reg, &inst, &cfg)
            }
            Estimator::DrwOgburn => {
                let reg = self.ogburn(design)?;
                let inst = self.instrument(&design.instrument)?;
                fit_drw_ogburn_with(data, design, &reg, &inst, &cfg)
            }
            Estimator::MleWang => Ok(wang_mle_result(&self.wang(design)?)),
            Estimator::DruWang => {
                let w = self.wang(design)?;
                let inst = self.instrument(&design.instrument)?;
                fit_dru_wang_with(data, &w, &inst, &cfg)
            }
            Estimator::LsAbadie => {
                let inst = self.instrument(&design.instrument)?;
                fit_ls_abadie_with(data, design, scale, &inst, &cfg)
            }
            Estimator::MleCrude => fit_mle_crude(data, design, scale, &cfg),
        }
    }
}

/// Fits one estimator.
pub fn fit_estimator(
    estimator: Estimator,
    data: &Dataset,
    design: &Design,
    settings: &FitSettings,
) -> Result<FitResult> {
    FitCache::new(data, settings).fit(estimator, design)
}

/// Fits every `(estimator, design)` job on one dataset, sharing stage-1 fits.
pub fn fit_batch(data: &Dataset, jobs: &[(Estimator, Design)], settings: &FitSettings) -> Vec<Result<FitResult>> {
    let mut cache = FitCache::new(data, settings);
    jobs.iter().map(|(e, d)| cache.fit(*e, d)).collect()
}
