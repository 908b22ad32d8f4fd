//! Quantile bootstrap intervals and the Monte Carlo study harness.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{IvError, Result};
use crate::estimator::{fit_batch, Estimator, FitSettings};
use crate::models::Design;
use crate::numopt::OptimConfig;
use crate::param::Scale;
use crate::proposed::FitResult;
use crate::simulation::{build_scenario_design, generate_with_rng, DgpSpec, Scenario};

/// Share of failed replicates above which an interval is flagged.
pub const UNRELIABLE_SHARE: f64 = 0.5;

/// Mixes `(master, index)` into an independent 64-bit seed (splitmix64).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// ChaCha stream `stream` of the generator seeded by `master`.
pub fn stream_rng(master: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

/// Sample quantile with linear interpolation between order statistics
/// (Hyndman and Fan type 7). `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub level: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub replicates: usize,
    pub failures: usize,
    pub unreliable: bool,
}

impl BootstrapCi {
    fn from_draws(draws: &[Option<Vec<f64>>], level: f64) -> Option<Self> {
        let ok: Vec<&Vec<f64>> = draws.iter().flatten().collect();
        let k = ok.first()?.len();
        let a = (1.0 - level) / 2.0;
        let (mut lower, mut upper) = (Vec::with_capacity(k), Vec::with_capacity(k));
        for j in 0..k {
            let mut col: Vec<f64> = ok.iter().map(|v| v[j]).collect();
            col.sort_by(f64::total_cmp);
            lower.push(quantile_sorted(&col, a));
            upper.push(quantile_sorted(&col, 1.0 - a));
        }
        let failures = draws.len() - ok.len();
        Some(Self {
            level,
            lower,
            upper,
            replicates: draws.len(),
            failures,
            unreliable: failures as f64 > UNRELIABLE_SHARE * draws.len() as f64,
        })
    }

    pub fn covers(&self, j: usize, value: f64) -> bool {
        self.lower[j] <= value && value <= self.upper[j]
    }
}

fn check_boot(b: usize, level: f64) -> Result<()> {
    if b < 2 {
        return Err(IvError::Config("bootstrap needs at least 2 replicates".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(IvError::Config(format!("confidence level {level} outside (0, 1)")));
    }
    Ok(())
}

/// Resample indices for replicate `b`.
fn resample(n: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut rng = stream_rng(seed, b as u64);
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

/// Runs `b` row resamples of `data` through `fit`, which returns one
/// estimate per output slot (`None` for a failed fit), and forms a quantile
/// interval per slot. Replicate `r` always sees the same resample for a
/// given seed, whatever the thread count.
pub fn bootstrap_many<F>(data: &Dataset, b: usize, level: f64, seed: u64, slots: usize, fit: F) -> Result<Vec<Option<BootstrapCi>>>
where
    F: Fn(&Dataset) -> Vec<Option<Vec<f64>>> + Sync,
{
    check_boot(b, level)?;
    let draws: Vec<Vec<Option<Vec<f64>>>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let sample = data.subset(&resample(data.n(), seed, r));
            let mut out = fit(&sample);
            out.resize(slots, None);
            out
        })
        .collect();
    Ok((0..slots)
        .map(|s| {
            let column: Vec<Option<Vec<f64>>> = draws.iter().map(|d| d[s].clone()).collect();
            BootstrapCi::from_draws(&column, level)
        })
        .collect())
}

/// Quantile bootstrap interval for a single estimator given as a closure.
/// Returns `None` in the interval slot when every replicate failed.
pub fn bootstrap_ci_with<F>(data: &Dataset, b: usize, level: f64, seed: u64, fit: F) -> Result<Option<BootstrapCi>>
where
    F: Fn(&Dataset) -> Option<Vec<f64>> + Sync,
{
    Ok(bootstrap_many(data, b, level, seed, 1, |d| vec![fit(d)])?.pop().flatten())
}

fn converged_alpha(r: Result<FitResult>) -> Option<Vec<f64>> {
    r.ok().filter(|f| f.converged && f.alpha.iter().all(|v| v.is_finite())).map(|f| f.alpha)
}

/// Quantile bootstrap interval for a registered estimator. Non-converged
/// replicates count as failures.
pub fn bootstrap_ci(
    data: &Dataset,
    estimator: Estimator,
    design: &Design,
    settings: &FitSettings,
    b: usize,
    level: f64,
    seed: u64,
) -> Result<Option<BootstrapCi>> {
    estimator.check(settings.scale, None)?;
    bootstrap_ci_with(data, b, level, seed, |d| {
        converged_alpha(crate::estimator::fit_estimator(estimator, d, design, settings))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub runs: usize,
    pub n: usize,
    /// Replicates per run for coverage; 0 skips the bootstrap.
    pub bootstrap_b: usize,
    pub ci_level: f64,
    pub scale: Scale,
    pub estimators: Vec<Estimator>,
    pub scenarios: Vec<Scenario>,
    pub seed: u64,
    pub one_sided: bool,
    pub optim: OptimConfig,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            runs: 500,
            n: 1000,
            bootstrap_b: 0,
            ci_level: 0.95,
            scale: Scale::Additive,
            estimators: vec![Estimator::Mle, Estimator::Dru, Estimator::Drw],
            scenarios: vec![Scenario::Bth],
            seed: 1,
            one_sided: false,
            optim: OptimConfig::default(),
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs < 1 {
            return Err(IvError::Config("runs must be at least 1".into()));
        }
        if self.n < 1 {
            return Err(IvError::Config("sample size must be at least 1".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(IvError::Config(format!("ci_level {} outside (0, 1)", self.ci_level)));
        }
        if self.bootstrap_b == 1 {
            return Err(IvError::Config("bootstrap needs at least 2 replicates".into()));
        }
        if self.estimators.is_empty() || self.scenarios.is_empty() {
            return Err(IvError::Config("empty estimator or scenario list".into()));
        }
        self.optim.validate()?;
        for e in &self.estimators {
            e.check(self.scale, None)?;
        }
        Ok(())
    }

    pub fn dgp(&self) -> DgpSpec {
        DgpSpec {
            n: self.n,
            seed: self.seed,
            one_sided: self.one_sided,
            ..DgpSpec::with_scale(self.scale)
        }
    }

    /// Valid `(estimator, scenario)` cells in table order; scenario-specific
    /// exclusions (weighted least squares, crude) are skipped silently.
    pub fn cells(&self) -> Vec<(Estimator, Scenario)> {
        let mut out = Vec::new();
        for &e in &self.estimators {
            for &s in &self.scenarios {
                if e.supports_scenario(s) {
                    out.push((e, s));
                }
            }
        }
        out
    }

    fn settings(&self) -> FitSettings {
        FitSettings {
            scale: self.scale,
            one_sided: self.one_sided,
            optim: self.optim.clone(),
        }
    }
}

/// One fit in one Monte Carlo run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub estimator: Estimator,
    pub scenario: Scenario,
    pub converged: bool,
    /// Empty when the fit errored.
    pub alpha: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<BootstrapCi>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    fn usable(&self) -> bool {
        self.converged && !self.alpha.is_empty() && self.alpha.iter().all(|v| v.is_finite())
    }
}

/// Summary for one coefficient of one `(estimator, scenario)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefSummary {
    pub truth: f64,
    pub bias: f64,
    /// `SD / sqrt(converged runs)`; absent with fewer than two runs.
    pub mc_se: Option<f64>,
    pub sd: Option<f64>,
    pub bias_over_sd: Option<f64>,
    pub coverage: Option<f64>,
    pub mean_ci_width: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub label: String,
    pub estimator: Estimator,
    pub scenario: Scenario,
    pub converged: usize,
    pub failures: usize,
    /// Runs whose interval was missing or flagged unreliable.
    pub ci_excluded: usize,
    pub coefficients: Vec<CoefSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub runs: usize,
    pub scale: Scale,
    pub truth: Vec<f64>,
    pub cells: Vec<CellSummary>,
}

impl McReport {
    pub fn cell(&self, estimator: Estimator, scenario: Scenario) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.estimator == estimator && c.scenario == scenario)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    Some((v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

/// Aggregates raw run records. The report depends on nothing else, so it
/// can always be recomputed from emitted raw output.
pub fn summarize(records: &[RunRecord], truth: &[f64], runs: usize, scale: Scale) -> McReport {
    let mut order: Vec<(Estimator, Scenario)> = Vec::new();
    let mut groups: BTreeMap<(Estimator, Scenario), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.estimator, r.scenario);
        if !groups.contains_key(&key) {
            order.push(key);
        }
        groups.entry(key).or_default().push(r);
    }
    let cells = order
        .into_iter()
        .map(|(e, s)| {
            let recs = &groups[&(e, s)];
            let ok: Vec<&&RunRecord> = recs.iter().filter(|r| r.usable()).collect();
            let with_ci: Vec<(&Vec<f64>, &BootstrapCi)> = ok
                .iter()
                .filter_map(|r| r.ci.as_ref().filter(|c| !c.unreliable).map(|c| (&r.alpha, c)))
                .collect();
            let any_ci = recs.iter().any(|r| r.ci.is_some());
            let coefficients = truth
                .iter()
                .enumerate()
                .map(|(j, &t)| {
                    let est: Vec<f64> = ok.iter().filter_map(|r| r.alpha.get(j).copied()).collect();
                    let bias = if est.is_empty() { f64::NAN } else { mean(&est) - t };
                    let sd = sample_sd(&est);
                    let (coverage, width) = if any_ci && !with_ci.is_empty() {
                        let m = with_ci.len() as f64;
                        let hit = with_ci.iter().filter(|(_, c)| c.covers(j, t)).count() as f64;
                        let w = with_ci.iter().map(|(_, c)| c.upper[j] - c.lower[j]).sum::<f64>();
                        (Some(hit / m), Some(w / m))
                    } else {
                        (None, None)
                    };
                    CoefSummary {
                        truth: t,
                        bias,
                        mc_se: sd.map(|s| s / (est.len() as f64).sqrt()),
                        sd,
                        bias_over_sd: sd.filter(|s| *s > 0.0).map(|s| bias / s),
                        coverage,
                        mean_ci_width: width,
                    }
                })
                .collect();
            CellSummary {
                label: e.label(s),
                estimator: e,
                scenario: s,
                converged: ok.len(),
                failures: recs.len() - ok.len(),
                ci_excluded: if any_ci { ok.len() - with_ci.len() } else { 0 },
                coefficients,
            }
        })
        .collect();
    McReport {
        runs,
        scale,
        truth: truth.to_vec(),
        cells,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McOutput {
    pub report: McReport,
    pub raw: Vec<RunRecord>,
}

/// Runs the study. Run `r` draws its data from stream `r` of the master
/// seed and its bootstrap from a seed derived from `(seed, r)`, so results
/// do not depend on the number of worker threads.
pub fn monte_carlo_study(cfg: &McConfig) -> Result<McOutput> {
    cfg.validate()?;
    let cells = cfg.cells();
    if cells.is_empty() {
        return Err(IvError::Config("no valid estimator and scenario combination".into()));
    }
    let spec = cfg.dgp();
    let settings = cfg.settings();
    let per_run: Vec<Result<Vec<RunRecord>>> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = stream_rng(cfg.seed, run as u64);
            let data = generate_with_rng(&spec, &mut rng)?;
            let jobs: Vec<(Estimator, Design)> = cells
                .iter()
                .map(|&(e, s)| Ok((e, build_scenario_design(&data, s)?)))
                .collect::<Result<_>>()?;
            let fits = fit_batch(&data, &jobs, &settings);
            let cis = if cfg.bootstrap_b > 0 {
                bootstrap_many(
                    &data,
                    cfg.bootstrap_b,
                    cfg.ci_level,
                    derive_seed(cfg.seed, run as u64),
                    jobs.len(),
                    |d| fit_batch(d, &jobs, &settings).into_iter().map(converged_alpha).collect(),
                )?
            } else {
                vec![None; jobs.len()]
            };
            Ok(fits
                .into_iter()
                .zip(cis)
                .zip(&cells)
                .map(|((fit, ci), &(estimator, scenario))| match fit {
                    Ok(f) => RunRecord {
                        run,
                        estimator,
                        scenario,
                        converged: f.converged,
                        alpha: f.alpha,
                        ci,
                        error: None,
                    },
                    Err(e) => RunRecord {
                        run,
                        estimator,
                        scenario,
                        converged: false,
                        alpha: Vec::new(),
                        ci,
                        error: Some(e.to_string()),
                    },
                })
                .collect())
        })
        .collect();
    let mut raw = Vec::with_capacity(cfg.runs * cells.len());
    for r in per_run {
        raw.extend(r?);
    }
    let truth = spec.alpha.to_vec();
    Ok(McOutput {
        report: summarize(&raw, &truth, cfg.runs, cfg.scale),
        raw,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Table layout: one `estimator.scenario` row, one column group per
/// coefficient.
pub fn write_report_csv<W: Write>(report: &McReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let k = report.truth.len();
    let mut header = vec!["label".to_string(), "estimator".into(), "scenario".into()];
    for j in 0..k {
        for f in ["bias", "mc_se", "sd", "bias_over_sd", "coverage", "mean_ci_width"] {
            header.push(format!("{f}_a{j}"));
        }
    }
    header.extend(["converged".into(), "failures".into(), "ci_excluded".into()]);
    w.write_record(&header)?;
    for c in &report.cells {
        let mut row = vec![c.label.clone(), c.estimator.to_string(), c.scenario.to_string()];
        for s in &c.coefficients {
            row.extend([
                s.bias.to_string(),
                opt(s.mc_se),
                opt(s.sd),
                opt(s.bias_over_sd),
                opt(s.coverage),
                opt(s.mean_ci_width),
            ]);
        }
        row.extend([c.converged.to_string(), c.failures.to_string(), c.ci_excluded.to_string()]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Raw records as CSV: one row per run and cell, with estimates and
/// interval bounds per coefficient.
pub fn write_raw_csv<W: Write>(raw: &[RunRecord], coefs: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["run", "estimator", "scenario", "converged"].map(String::from).to_vec();
    header.extend((0..coefs).map(|j| format!("a{j}")));
    for j in 0..coefs {
        header.push(format!("lower_a{j}"));
        header.push(format!("upper_a{j}"));
    }
    header.extend(["boot_failures", "boot_replicates", "error"].map(String::from));
    w.write_record(&header)?;
    for r in raw {
        let mut row = vec![
            r.run.to_string(),
            r.estimator.to_string(),
            r.scenario.to_string(),
            r.converged.to_string(),
        ];
        row.extend((0..coefs).map(|j| r.alpha.get(j).map(|v| v.to_string()).unwrap_or_default()));
        for j in 0..coefs {
            match &r.ci {
                Some(c) => {
                    row.push(c.lower[j].to_string());
                    row.push(c.upper[j].to_string());
                }
                None => row.extend([String::new(), String::new()]),
            }
        }
        match &r.ci {
            Some(c) => row.extend([c.failures.to_string(), c.replicates.to_string()]),
            None => row.extend([String::new(), String::new()]),
        }
        row.push(r.error.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(v: &str, row: usize, col: &str) -> Result<T> {
    v.trim().parse().map_err(|_| IvError::Data {
        row,
        column: col.to_string(),
        reason: format!("cannot parse `{v}`"),
    })
}

/// Reads the output of [`write_raw_csv`]. `level` is the nominal level the
/// intervals were built at.
pub fn read_raw_csv<R: Read>(input: R, level: f64) -> Result<Vec<RunRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| IvError::Config(format!("raw file lacks column `{name}`")));
    let (c_run, c_est, c_sc, c_conv) = (need("run")?, need("estimator")?, need("scenario")?, need("converged")?);
    let coefs = (0..).take_while(|j| col(&format!("a{j}")).is_some()).count();
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let get = |c: usize| rec.get(c).unwrap_or("");
        let mut alpha = Vec::new();
        for j in 0..coefs {
            let v = get(col(&format!("a{j}")).expect("counted"));
            if !v.is_empty() {
                alpha.push(parse_field::<f64>(v, row, &format!("a{j}"))?);
            }
        }
        let ci = match col("lower_a0").map(get) {
            Some(v) if !v.is_empty() => {
                let (mut lower, mut upper) = (Vec::new(), Vec::new());
                for j in 0..coefs {
                    lower.push(parse_field(get(need(&format!("lower_a{j}"))?), row, "lower")?);
                    upper.push(parse_field(get(need(&format!("upper_a{j}"))?), row, "upper")?);
                }
                let failures: usize = parse_field(get(need("boot_failures")?), row, "boot_failures")?;
                let replicates: usize = parse_field(get(need("boot_replicates")?), row, "boot_replicates")?;
                Some(BootstrapCi {
                    level,
                    lower,
                    upper,
                    replicates,
                    failures,
                    unreliable: failures as f64 > UNRELIABLE_SHARE * replicates as f64,
                })
            }
            _ => None,
        };
        let error = col("error").map(get).filter(|s| !s.is_empty()).map(String::from);
        out.push(RunRecord {
            run: parse_field(get(c_run), row, "run")?,
            estimator: get(c_est).parse()?,
            scenario: get(c_sc).parse()?,
            converged: parse_field(get(c_conv), row, "converged")?,
            alpha,
            ci,
            error,
        });
    }
    Ok(out)
}
