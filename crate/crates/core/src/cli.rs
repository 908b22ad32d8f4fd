//! Command-line surface: `simulate`, `fit`, `mc`, `diagnose`, `tables`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{Dataset, INTERCEPT};
use crate::error::{IvError, Result};
use crate::estimator::{Estimator, FitCache, FitSettings};
use crate::inference::{
    bootstrap_many, quantile_sorted, read_raw_csv, summarize, write_raw_csv, write_report_csv, BootstrapCi,
    McConfig, RunRecord,
};
use crate::io::{diagnose_iv, load_csv, write_csv, Strata};
use crate::models::{Design, ModelSet};
use crate::numopt::OptimConfig;
use crate::param::Scale;
use crate::proposed::one_sided_gap;
use crate::simulation::{build_scenario_design, generate_dataset, has_simulation_layout, DgpSpec, Scenario};

/// Version of every JSON document written by the CLI.
pub const SCHEMA_VERSION: u32 = 1;
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "ivlate", version, about = "Local average treatment effects with a binary outcome")]
struct Cli {
    /// Worker threads for parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a dataset from the simulation design and write it as CSV.
    Simulate(SimulateArgs),
    /// Fit estimators to a CSV file and write JSON.
    Fit(FitArgs),
    /// Run a Monte Carlo study.
    Mc(McArgs),
    /// Empirical check of the IV inequalities per stratum.
    Diagnose(DiagnoseArgs),
    /// Rebuild summary tables from raw Monte Carlo output.
    Tables(TablesArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value = "additive")]
    scale: Scale,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// No always-takers.
    #[arg(long)]
    one_sided: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "additive")]
    scale: Scale,
    /// Comma-separated estimator tags.
    #[arg(long, value_delimiter = ',', default_value = "mle")]
    estimator: Vec<Estimator>,
    /// Simulation scenario; needs the simulated covariate columns.
    #[arg(long, conflicts_with_all = ["theta", "nuisance", "instrument"])]
    scenario: Option<Scenario>,
    /// Covariates of the effect model (intercept added). Without any model
    /// flags, simulated files use the `bth` design and other files use all
    /// covariates.
    #[arg(long, value_delimiter = ',')]
    theta: Option<Vec<String>>,
    /// Covariates of the outcome nuisance models (default: all).
    #[arg(long, value_delimiter = ',')]
    nuisance: Option<Vec<String>>,
    /// Covariates of the instrument model (default: all).
    #[arg(long, value_delimiter = ',')]
    instrument: Option<Vec<String>>,
    /// Fix the always-taker share at zero.
    #[arg(long)]
    one_sided: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bootstrap replicates; 0 skips intervals.
    #[arg(long, default_value_t = 0)]
    boot: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// JSON output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Plot-ready CSV of estimates and intervals.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct McArgs {
    /// JSON study configuration; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scale: Option<Scale>,
    #[arg(long, value_delimiter = ',')]
    estimator: Option<Vec<Estimator>>,
    #[arg(long, value_delimiter = ',')]
    scenario: Option<Vec<Scenario>>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    boot: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    one_sided: bool,
    /// Output directory for report.csv, report.json, raw.csv and plot.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Stratum columns, `name` or `name:sign`.
    #[arg(long, value_delimiter = ',')]
    strata: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TablesArgs {
    /// raw.csv written by `mc`.
    #[arg(long)]
    raw: PathBuf,
    #[arg(long, default_value = "additive")]
    scale: Scale,
    /// True coefficients, comma-separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0,-1")]
    truth: Vec<f64>,
    /// Nominal level the intervals were built at.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// CSV output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status: 0 on success, 2 on usage errors, 1 otherwise.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Some(t) = cli.threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let res = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Mc(a) => mc(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Tables(a) => tables(a),
    };
    match res {
        Ok(()) => 0,
        Err(e @ (IvError::Config(_) | IvError::Unsupported(_))) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    match out {
        Some(p) => fs::write(p, s)?,
        None => io::stdout().write_all(s.as_bytes())?,
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let spec = DgpSpec {
        n: a.n,
        seed: a.seed,
        one_sided: a.one_sided,
        ..DgpSpec::with_scale(a.scale)
    };
    let data = generate_dataset(&spec)?;
    write_csv(&data, &a.out)?;
    eprintln!("wrote {} rows to {}", data.n(), a.out.display());
    Ok(())
}

fn selector(data: &Dataset, names: &Option<Vec<String>>) -> Result<Vec<usize>> {
    match names {
        None => Ok((0..data.names().len()).collect()),
        Some(list) => {
            let mut refs: Vec<&str> = vec![INTERCEPT];
            refs.extend(list.iter().map(String::as_str).filter(|s| *s != INTERCEPT));
            data.selector(&refs)
        }
    }
}

#[derive(Serialize)]
struct DesignNames {
    theta: Vec<String>,
    nuisance: Vec<String>,
    instrument: Vec<String>,
}

#[derive(Serialize)]
struct FitEntry {
    estimator: Estimator,
    coefficient_names: Vec<String>,
    alpha: Vec<f64>,
    converged: bool,
    loglik_or_residual: f64,
    nuisance: BTreeMap<String, Vec<f64>>,
    warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ci: Option<BootstrapCi>,
    /// `max |E(H|X) - E(Y|Z=0,X)|` under the fitted one-sided models.
    #[serde(skip_serializing_if = "Option::is_none")]
    one_sided_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize)]
struct FitOutput {
    schema_version: u32,
    version: &'static str,
    command: &'static str,
    seed: u64,
    scale: Scale,
    n: usize,
    one_sided: bool,
    design: DesignNames,
    fits: Vec<FitEntry>,
}

/// One-sided likelihood models rebuilt from an `mle` result.
fn one_sided_models(design: &Design, scale: Scale, r: &crate::proposed::FitResult) -> Option<ModelSet> {
    let mut ms = ModelSet::zeros(scale, design, true);
    ms.theta.coef = r.alpha.clone();
    ms.phi1.coef = r.nuisance.get("beta1")?.clone();
    ms.phi3.coef = r.nuisance.get("beta3")?.clone();
    ms.op.coef = r.nuisance.get("eta")?.clone();
    Some(ms)
}

fn fit(a: FitArgs) -> Result<()> {
    if !(a.level > 0.0 && a.level < 1.0) {
        return Err(IvError::Config(format!("level {} outside (0, 1)", a.level)));
    }
    if a.boot == 1 {
        return Err(IvError::Config("bootstrap needs at least 2 replicates".into()));
    }
    let data = load_csv(&a.input)?;
    // simulated files without explicit models get the correctly specified design
    let defaults = a.theta.is_none() && a.nuisance.is_none() && a.instrument.is_none();
    let scenario = a
        .scenario
        .or_else(|| (defaults && has_simulation_layout(&data)).then_some(Scenario::Bth));
    for e in &a.estimator {
        e.check(a.scale, scenario)?;
    }
    if a.one_sided {
        let zero_arm_treated = (0..data.n()).filter(|&i| data.z()[i] == 0 && data.d()[i] == 1).count();
        if zero_arm_treated > 0 {
            eprintln!("warning: {zero_arm_treated} rows have d = 1 and z = 0 under --one-sided");
        }
    }
    let design = match scenario {
        Some(s) => build_scenario_design(&data, s)?,
        None => Design {
            theta: selector(&data, &a.theta)?,
            nuisance: selector(&data, &a.nuisance)?,
            instrument: selector(&data, &a.instrument)?,
        },
    };
    let settings = FitSettings {
        scale: a.scale,
        one_sided: a.one_sided,
        optim: OptimConfig {
            seed: a.seed,
            ..OptimConfig::default()
        },
    };
    let names = |sel: &[usize]| sel.iter().map(|&j| data.names()[j].clone()).collect::<Vec<_>>();
    let mut cache = FitCache::new(&data, &settings);
    let results: Vec<_> = a.estimator.iter().map(|&e| cache.fit(e, &design)).collect();
    let cis = if a.boot > 0 {
        bootstrap_many(&data, a.boot, a.level, a.seed, a.estimator.len(), |d| {
            let mut c = FitCache::new(d, &settings);
            a.estimator
                .iter()
                .map(|&e| {
                    c.fit(e, &design)
                        .ok()
                        .filter(|f| f.converged && f.alpha.iter().all(|v| v.is_finite()))
                        .map(|f| f.alpha)
                })
                .collect()
        })?
    } else {
        vec![None; a.estimator.len()]
    };
    let mut fits = Vec::new();
    for ((&e, r), ci) in a.estimator.iter().zip(results).zip(cis) {
        fits.push(match r {
            Ok(r) => {
                let gap = if a.one_sided && e == Estimator::Mle {
                    one_sided_models(&design, a.scale, &r)
                        .map(|ms| one_sided_gap(&ms, &data))
                        .transpose()?
                } else {
                    None
                };
                FitEntry {
                    estimator: e,
                    coefficient_names: names(&design.theta),
                    alpha: r.alpha,
                    converged: r.converged,
                    loglik_or_residual: r.loglik_or_residual,
                    nuisance: r.nuisance,
                    warnings: r.warnings,
                    ci,
                    one_sided_gap: gap,
                    error: None,
                }
            }
            Err(err) => FitEntry {
                estimator: e,
                coefficient_names: names(&design.theta),
                alpha: Vec::new(),
                converged: false,
                loglik_or_residual: f64::NAN,
                nuisance: BTreeMap::new(),
                warnings: Vec::new(),
                ci,
                one_sided_gap: None,
                error: Some(err.to_string()),
            },
        });
    }
    if let Some(p) = &a.plot {
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(["estimator", "coefficient", "estimate", "lower", "upper"])?;
        for f in &fits {
            for (j, (name, v)) in f.coefficient_names.iter().zip(&f.alpha).enumerate() {
                let (lo, hi) = match &f.ci {
                    Some(c) => (c.lower[j].to_string(), c.upper[j].to_string()),
                    None => (String::new(), String::new()),
                };
                w.write_record([f.estimator.tag(), name, &v.to_string(), &lo, &hi])?;
            }
        }
        w.flush()?;
    }
    let out = FitOutput {
        schema_version: SCHEMA_VERSION,
        version: VERSION,
        command: "fit",
        seed: a.seed,
        scale: a.scale,
        n: data.n(),
        one_sided: a.one_sided,
        design: DesignNames {
            theta: names(&design.theta),
            nuisance: names(&design.nuisance),
            instrument: names(&design.instrument),
        },
        fits,
    };
    write_json(&out, a.out.as_deref())
}

#[derive(Serialize)]
struct McOutputJson<'a> {
    schema_version: u32,
    version: &'static str,
    command: &'static str,
    seed: u64,
    config: &'a McConfig,
    report: &'a crate::inference::McReport,
}

/// Per cell and coefficient: mean estimate and the 2.5% and 97.5% quantiles
/// of the converged Monte Carlo estimates.
fn write_mc_plot(raw: &[RunRecord], coefs: usize, path: &Path) -> Result<()> {
    let mut cells: Vec<(Estimator, Scenario)> = Vec::new();
    for r in raw {
        if !cells.contains(&(r.estimator, r.scenario)) {
            cells.push((r.estimator, r.scenario));
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "coefficient", "estimate", "lower", "upper"])?;
    for (e, s) in cells {
        for j in 0..coefs {
            let mut v: Vec<f64> = raw
                .iter()
                .filter(|r| r.estimator == e && r.scenario == s && r.converged)
                .filter_map(|r| r.alpha.get(j).copied())
                .filter(|x| x.is_finite())
                .collect();
            if v.is_empty() {
                continue;
            }
            v.sort_by(f64::total_cmp);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            w.write_record([
                e.label(s),
                format!("a{j}"),
                mean.to_string(),
                quantile_sorted(&v, 0.025).to_string(),
                quantile_sorted(&v, 0.975).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn mc(a: McArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_reader(File::open(p)?)
            .map_err(|e| IvError::Config(format!("malformed config {}: {e}", p.display())))?,
        None => McConfig::default(),
    };
    if let Some(v) = a.scale {
        cfg.scale = v;
    }
    if let Some(v) = a.estimator {
        cfg.estimators = v;
    }
    if let Some(v) = a.scenario {
        cfg.scenarios = v;
    }
    if let Some(v) = a.runs {
        cfg.runs = v;
    }
    if let Some(v) = a.n {
        cfg.n = v;
    }
    if let Some(v) = a.boot {
        cfg.bootstrap_b = v;
    }
    if let Some(v) = a.level {
        cfg.ci_level = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.one_sided |= a.one_sided;
    let out = crate::inference::monte_carlo_study(&cfg)?;
    fs::create_dir_all(&a.out)?;
    let coefs = out.report.truth.len();
    write_report_csv(&out.report, File::create(a.out.join("report.csv"))?)?;
    write_raw_csv(&out.raw, coefs, File::create(a.out.join("raw.csv"))?)?;
    write_mc_plot(&out.raw, coefs, &a.out.join("plot.csv"))?;
    let json = McOutputJson {
        schema_version: SCHEMA_VERSION,
        version: VERSION,
        command: "mc",
        seed: cfg.seed,
        config: &cfg,
        report: &out.report,
    };
    write_json(&json, Some(&a.out.join("report.json")))?;
    eprintln!("{} runs, {} cells, written to {}", cfg.runs, out.report.cells.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct DiagnoseOutput {
    schema_version: u32,
    version: &'static str,
    command: &'static str,
    n: usize,
    #[serde(flatten)]
    report: crate::io::IvDiagnostic,
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let data = load_csv(&a.input)?;
    let strata: Vec<Strata> = a.strata.iter().map(|s| Strata::parse(s)).collect::<Result<_>>()?;
    let report = diagnose_iv(&data, &strata)?;
    for s in &report.skipped {
        eprintln!("note: {s}");
    }
    let out = DiagnoseOutput {
        schema_version: SCHEMA_VERSION,
        version: VERSION,
        command: "diagnose",
        n: data.n(),
        report,
    };
    write_json(&out, a.out.as_deref())
}

fn tables(a: TablesArgs) -> Result<()> {
    let raw = read_raw_csv(File::open(&a.raw)?, a.level)?;
    let runs = raw.iter().map(|r| r.run + 1).max().unwrap_or(0);
    let report = summarize(&raw, &a.truth, runs, a.scale);
    match &a.out {
        Some(p) => write_report_csv(&report, File::create(p)?),
        None => write_report_csv(&report, io::stdout()),
    }
}
