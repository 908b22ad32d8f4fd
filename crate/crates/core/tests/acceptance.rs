//! Acceptance criteria, one test per criterion. Each prints a PASS or FAIL
//! line to stderr. Set `IVLATE_ACCEPTANCE_SMOKE=1` for a reduced run with
//! smaller samples and widened statistical bands.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ivlate::data::{Dataset, DesignMatrix};
use ivlate::inference::{monte_carlo_study, McConfig, McReport};
use ivlate::models::{expit, theta_gradient, Design, ModelSet};
use ivlate::numopt::{fit_logistic, logistic_nll, numeric_gradient, OptimConfig};
use ivlate::param::{
    check_delta, feasible_contrast_range, forward_map, inverse_map, solve_complier_risks, Scale, StructuralPoint,
    DELTA_TOL,
};
use ivlate::proposed::{dr_moment_terms, fit_instrument, fit_mle_models, joint_nll, moment_terms_with, WeightMode};
use ivlate::simulation::{
    build_scenario_design, generate_dataset, instrument_strength_from_data, DgpSpec, Scenario, X2,
};
use ivlate::Estimator;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SCALES: [Scale; 2] = [Scale::Additive, Scale::Multiplicative];

fn smoke() -> bool {
    std::env::var("IVLATE_ACCEPTANCE_SMOKE").is_ok_and(|v| v == "1")
}

fn size(full: usize, reduced: usize) -> usize {
    if smoke() {
        reduced
    } else {
        full
    }
}

fn report(name: &str, ok: bool, detail: String) {
    let tag = if ok { "PASS" } else { "FAIL" };
    let mode = if smoke() { " [smoke]" } else { "" };
    let line = format!("acceptance {tag} {name}{mode}: {detail}\n");
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(ok, "{name}: {detail}");
}

fn within(elapsed: Duration, secs: u64) -> bool {
    elapsed <= Duration::from_secs(secs)
}

#[test]
fn parameterization_bijection() {
    let start = Instant::now();
    let n = size(100_000, 5_000);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst, mut outside) = (0.0f64, 0usize);
    for scale in SCALES {
        for _ in 0..n {
            let theta = match scale {
                Scale::Additive => rng.gen_range(-0.98..0.98),
                Scale::Multiplicative => rng.gen_range(-3.0f64..3.0).exp(),
            };
            let phi = [(); 4].map(|_| rng.gen_range(0.02..0.98));
            let op = rng.gen_range(-4.0f64..4.0).exp();
            let sp = StructuralPoint::new(theta, phi, op);
            let cp = inverse_map(&sp, scale).unwrap();
            if !check_delta(&cp, DELTA_TOL).member {
                outside += 1;
            }
            let back = forward_map(&cp, scale).unwrap();
            for (a, b) in sp.as_array().iter().zip(back.as_array()) {
                worst = worst.max((a - b).abs() / a.abs().max(1.0));
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        "parameterization bijection",
        worst <= 1e-10 && outside == 0 && within(elapsed, 30),
        format!("{n} points per scale, max error {worst:.2e}, {outside} outside the polytope, {elapsed:.1?}"),
    );
}

/// Root of `f0 f1 = op (1 - f0)(1 - f1)` by bisection on f0.
fn bisect_risks(theta: f64, op: f64, scale: Scale) -> (f64, f64) {
    let f1_of = |f0: f64| match scale {
        Scale::Additive => f0 + theta,
        Scale::Multiplicative => theta * f0,
    };
    let (mut lo, mut hi) = match scale {
        Scale::Additive => ((-theta).max(0.0), (1.0 - theta).min(1.0)),
        Scale::Multiplicative => (0.0, (1.0 / theta).min(1.0)),
    };
    let g = |f0: f64| {
        let f1 = f1_of(f0);
        f0 * f1 - op * (1.0 - f0) * (1.0 - f1)
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let f0 = 0.5 * (lo + hi);
    (f0, f1_of(f0))
}

#[test]
fn complier_risks_match_bisection() {
    let start = Instant::now();
    let mut ops: Vec<f64> = (0..180).map(|k| (-7.0 + 14.0 * k as f64 / 179.0).exp()).collect();
    for e in [1e-6, 5e-7, 1e-7, 1e-8, 1e-9, 1e-10, 1e-11, 1e-12, 1e-13, 1e-14] {
        ops.push(1.0 + e);
        ops.push(1.0 - e);
    }
    let (mut worst, mut worst_near_one, mut count) = (0.0f64, 0.0f64, 0usize);
    for scale in SCALES {
        for k in 0..200 {
            let u = (k as f64 + 0.5) / 200.0;
            let theta = match scale {
                Scale::Additive => 2.0 * u - 1.0,
                Scale::Multiplicative => (10.0 * u - 5.0).exp(),
            };
            for &op in &ops {
                let r = solve_complier_risks(theta, op, scale).unwrap();
                let (b0, b1) = bisect_risks(theta, op, scale);
                let err = (r.f0 - b0).abs().max((r.f1 - b1).abs());
                worst = worst.max(err);
                if (op - 1.0).abs() < 1e-6 {
                    worst_near_one = worst_near_one.max(err);
                }
                count += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        "complier risks vs bisection",
        worst <= 1e-10 && within(elapsed, 60),
        format!("{count} grid points, max error {worst:.2e} ({worst_near_one:.2e} with |OP-1| < 1e-6), {elapsed:.1?}"),
    );
}

#[test]
fn dgp_instrument_strength() {
    let start = Instant::now();
    let n = size(1_000_000, 100_000);
    let tol = if smoke() { 0.01 } else { 0.003 };
    let spec = DgpSpec {
        n,
        seed: 5,
        ..DgpSpec::default()
    };
    let data = generate_dataset(&spec).unwrap();
    let delta = instrument_strength_from_data(&data, X2, 50).unwrap();
    let elapsed = start.elapsed();
    report(
        "dgp instrument strength",
        (delta - 0.406).abs() <= tol && within(elapsed, 60),
        format!("n = {n}, empirical {delta:.4} vs 0.406 +/- {tol}, {elapsed:.1?}"),
    );
}

/// Additive study shared by the bias, robustness and efficiency criteria.
fn additive_study() -> &'static McReport {
    static REPORT: OnceLock<McReport> = OnceLock::new();
    REPORT.get_or_init(|| {
        let cfg = McConfig {
            runs: size(500, 40),
            n: 1000,
            scale: Scale::Additive,
            estimators: vec![
                Estimator::Mle,
                Estimator::Dru,
                Estimator::Drw,
                Estimator::DruSimple,
                Estimator::DruOgburn,
                Estimator::LsAbadie,
                Estimator::MleCrude,
            ],
            scenarios: Scenario::ALL.to_vec(),
            seed: 1,
            ..McConfig::default()
        };
        monte_carlo_study(&cfg).unwrap().report
    })
}

/// `(bias, mc_se)` scaled by 100, the same units as the reference values.
fn bias_pct(r: &McReport, e: Estimator, s: Scenario, j: usize) -> (f64, f64) {
    let c = &r.cell(e, s).unwrap().coefficients[j];
    (100.0 * c.bias, 100.0 * c.mc_se.unwrap())
}

#[test]
fn additive_bias_bth() {
    let r = additive_study();
    // reference bias x 100 and its Monte Carlo SE x 100, for (alpha0, alpha1)
    let reference: [(Estimator, [(f64, f64); 2]); 5] = [
        (Estimator::Mle, [(0.28, 0.35), (-3.5, 0.78)]),
        (Estimator::Dru, [(1.3, 0.44), (-5.8, 1.0)]),
        (Estimator::Drw, [(0.55, 0.36), (-4.1, 0.82)]),
        (Estimator::DruSimple, [(1.3, 0.45), (-5.8, 1.0)]),
        (Estimator::LsAbadie, [(-0.19, 0.37), (-4.1, 0.93)]),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    let mut check = |label: String, (b, se): (f64, f64), (pb, pse): (f64, f64)| {
        let tol = 3.0 * (se * se + pse * pse).sqrt();
        let pass = (b - pb).abs() <= tol;
        ok &= pass;
        parts.push(format!("{label} {b:.2}({se:.2}) vs {pb}({pse}){}", if pass { "" } else { " !" }));
    };
    for (e, coefs) in reference {
        for (j, p) in coefs.into_iter().enumerate() {
            check(format!("{}.bth a{j}", e.tag()), bias_pct(r, e, Scenario::Bth, j), p);
        }
    }
    check(
        "mle.crude a1".into(),
        bias_pct(r, Estimator::MleCrude, Scenario::Bth, 1),
        (60.0, 0.19),
    );
    report(
        "additive biases under bth",
        ok,
        format!("{} runs, bias x100: {}", r.runs, parts.join("; ")),
    );
}

#[test]
fn double_robustness_signature() {
    let r = additive_study();
    let mut ok = true;
    let mut parts = Vec::new();
    for s in [Scenario::Psc, Scenario::Opc] {
        for j in 0..2 {
            let (b, se) = bias_pct(r, Estimator::Drw, s, j);
            let (b0, se0) = bias_pct(r, Estimator::Drw, Scenario::Bth, j);
            let pass = (b - b0).abs() <= 3.0 * (se * se + se0 * se0).sqrt();
            ok &= pass;
            parts.push(format!("drw.{s} a{j} {b:.2} vs bth {b0:.2}"));
        }
    }
    for e in [Estimator::Mle, Estimator::Drw] {
        let bias = r.cell(e, Scenario::Bad).unwrap().coefficients[0].bias;
        // the reference rows are negative
        let pass = bias < -0.08;
        ok &= pass;
        parts.push(format!("{}.bad a0 {bias:.3}", e.tag()));
    }
    report("double robustness signature", ok, parts.join("; "));
}

#[test]
fn efficiency_ordering() {
    let r = additive_study();
    let sd = |e: Estimator| r.cell(e, Scenario::Bth).unwrap().coefficients[1].sd.unwrap();
    let drw = sd(Estimator::Drw);
    let others = [Estimator::Dru, Estimator::DruOgburn, Estimator::DruSimple].map(|e| (e, sd(e)));
    let ok = others.iter().all(|&(_, s)| drw < s);
    let detail = others
        .iter()
        .map(|(e, s)| format!("{} {s:.4}", e.tag()))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        "efficiency ordering",
        ok,
        format!("sd of a1 under bth: drw {drw:.4} vs {detail}"),
    );
}

#[test]
fn bootstrap_coverage() {
    let start = Instant::now();
    let cfg = McConfig {
        runs: size(200, 30),
        bootstrap_b: size(200, 50),
        n: 1000,
        scale: Scale::Additive,
        estimators: vec![Estimator::Mle, Estimator::Drw],
        scenarios: vec![Scenario::Bth],
        seed: 7,
        ..McConfig::default()
    };
    let (lo, hi) = if smoke() { (0.80, 1.0) } else { (0.92, 0.98) };
    let r = monte_carlo_study(&cfg).unwrap().report;
    let mut ok = true;
    let mut parts = Vec::new();
    for e in [Estimator::Mle, Estimator::Drw] {
        let cell = r.cell(e, Scenario::Bth).unwrap();
        for (j, c) in cell.coefficients.iter().enumerate() {
            let cov = c.coverage.unwrap_or(f64::NAN);
            ok &= (lo..=hi).contains(&cov);
            parts.push(format!("{}.bth a{j} {:.1}%", e.tag(), 100.0 * cov));
        }
        parts.push(format!("{} excluded", cell.ci_excluded));
    }
    report(
        "bootstrap coverage",
        ok,
        format!(
            "{} runs x {} replicates, band [{lo}, {hi}]: {}, {:.1?}",
            cfg.runs,
            cfg.bootstrap_b,
            parts.join(", "),
            start.elapsed()
        ),
    );
}

/// Per-coefficient `|mean| / (sd / sqrt(n))` of moment terms.
fn standardized_means(terms: &[Vec<f64>]) -> Vec<f64> {
    let n = terms.len() as f64;
    let k = terms[0].len();
    (0..k)
        .map(|j| {
            let m = terms.iter().map(|t| t[j]).sum::<f64>() / n;
            let v = terms.iter().map(|t| (t[j] - m).powi(2)).sum::<f64>() / (n - 1.0);
            m.abs() / (v.sqrt() / n.sqrt())
        })
        .collect()
}

fn true_models(spec: &DgpSpec, data: &Dataset) -> ModelSet {
    let design = build_scenario_design(data, Scenario::Bth).unwrap();
    let mut ms = ModelSet::zeros(spec.scale, &design, false);
    ms.theta.coef = spec.alpha.to_vec();
    for (c, b) in [&mut ms.phi1, &mut ms.phi2, &mut ms.phi3, &mut ms.phi4].into_iter().zip(spec.beta) {
        c.coef = b.to_vec();
    }
    ms.op.coef = spec.eta.to_vec();
    ms.instrument.coef = spec.gamma.to_vec();
    ms
}

/// `(a, b)` with `E(H | X) = a - theta b` (additive) or `a / theta + b`,
/// from the true cell probabilities.
fn true_marginals(spec: &DgpSpec, data: &Dataset) -> (Vec<f64>, Vec<f64>) {
    (0..data.n())
        .map(|i| {
            let u = data.row(i)[1];
            let cp = inverse_map(&spec.structural(u), spec.scale).unwrap();
            let pi = spec.instrument_probability(u);
            let mix = |d: usize, y: usize| pi * cp.get(d, y, 1) + (1.0 - pi) * cp.get(d, y, 0);
            match spec.scale {
                Scale::Additive => (mix(0, 1) + mix(1, 1), mix(1, 0) + mix(1, 1)),
                Scale::Multiplicative => (mix(1, 1), mix(0, 1)),
            }
        })
        .collect()
}

/// The same `(a, b)` from logistic working models fitted on `aux` with the
/// covariates `sel`.
fn fitted_marginals(scale: Scale, aux: &Dataset, data: &Dataset, sel: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let cfg = OptimConfig::default();
    let as_f64 = |v: &[u8]| v.iter().map(|&b| b as f64).collect::<Vec<_>>();
    let dot = |c: &[f64], row: &[f64]| c.iter().zip(sel).map(|(c, &j)| c * row[j]).sum::<f64>();
    let d_fit = fit_logistic(&as_f64(aux.d()), &aux.design(sel).unwrap(), &cfg).unwrap();
    match scale {
        Scale::Additive => {
            let y_fit = fit_logistic(&as_f64(aux.y()), &aux.design(sel).unwrap(), &cfg).unwrap();
            (0..data.n())
                .map(|i| {
                    let row = data.row(i);
                    (expit(dot(&y_fit.solution, row)), expit(dot(&d_fit.solution, row)))
                })
                .unzip()
        }
        Scale::Multiplicative => {
            let design = DesignMatrix::from_fn(aux.n(), sel.len() + 1, |i, j| {
                if j == 0 {
                    aux.d()[i] as f64
                } else {
                    aux.row(i)[sel[j - 1]]
                }
            });
            let y_fit = fit_logistic(&as_f64(aux.y()), &design, &cfg).unwrap();
            let (w1, w2) = y_fit.solution.split_first().unwrap();
            (0..data.n())
                .map(|i| {
                    let row = data.row(i);
                    let ed = expit(dot(&d_fit.solution, row));
                    let base = dot(w2, row);
                    (ed * expit(w1 + base), (1.0 - ed) * expit(base))
                })
                .unzip()
        }
    }
}

#[test]
fn moment_mean_zero_at_truth() {
    let n = size(1_000_000, 100_000);
    let cfg = OptimConfig::default();
    let mut ok = true;
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for scale in SCALES {
        let spec = DgpSpec {
            n,
            seed: 31,
            ..DgpSpec::with_scale(scale)
        };
        let data = generate_dataset(&spec).unwrap();
        let aux = generate_dataset(&DgpSpec {
            n: 20_000,
            seed: 32,
            ..spec.clone()
        })
        .unwrap();
        let truth = true_models(&spec, &data);
        let pi_true: Vec<f64> = (0..n).map(|i| spec.instrument_probability(data.row(i)[1])).collect();

        // wrong instrument fitted on the dagger covariates
        let opc = build_scenario_design(&data, Scenario::Opc).unwrap();
        let pi_wrong = fit_instrument(&aux, &opc.instrument, &cfg).unwrap().probabilities(&data).0;
        // wrong nuisances fitted on the prime covariates
        let psc = build_scenario_design(&data, Scenario::Psc).unwrap();
        let wrong = fit_mle_models(&ModelSet::zeros(scale, &psc, false), &aux, &cfg).unwrap().models;
        let wrong = ModelSet {
            theta: truth.theta.clone(),
            ..wrong
        };

        let (ta, tb) = true_marginals(&spec, &data);
        let (wa, wb) = fitted_marginals(scale, &aux, &data, &psc.nuisance);
        type Case<'a> = (&'a str, &'a ModelSet, &'a [f64], (&'a [f64], &'a [f64]));
        let cases: [Case; 3] = [
            ("all correct", &truth, &pi_true, (&ta, &tb)),
            ("wrong instrument", &truth, &pi_wrong, (&ta, &tb)),
            ("wrong nuisances", &wrong, &pi_true, (&wa, &wb)),
        ];
        for (case, ms, pi, (a, b)) in cases {
            let mut variants = Vec::new();
            for (name, mode) in [("dru", WeightMode::Identity), ("drw", WeightMode::Optimal)] {
                variants.push((name, dr_moment_terms(ms, pi, &data, &spec.alpha, mode).unwrap()));
            }
            let simple = moment_terms_with(&data, &truth.theta.selector, scale, pi, &spec.alpha, |i, theta| match scale {
                Scale::Additive => a[i] - theta * b[i],
                Scale::Multiplicative => a[i] / theta + b[i],
            })
            .unwrap();
            variants.push(("dru.simple", simple));
            for (name, terms) in variants {
                let z = standardized_means(&terms);
                let m = z.iter().copied().fold(0.0, f64::max);
                worst = worst.max(m);
                ok &= m <= 4.0;
                lines.push(format!("{} {case} {name} {m:.2}", scale.as_str()));
            }
        }
    }
    report(
        "moment mean zero at truth",
        ok,
        format!("n = {n}, max |mean| / (sd / sqrt n) {worst:.2} (bound 4): {}", lines.join("; ")),
    );
}

/// Extremes of `a1 - a0` over `pi a1 + (1 - pi) a0 = mean`, `a0, a1` in
/// `[0, 1]`, by enumerating the vertices of the feasible segment.
fn lp_contrast_range(mean: f64, pi: f64) -> (f64, f64) {
    let eps = 1e-12;
    let mut candidates = Vec::new();
    for a1 in [0.0, 1.0] {
        candidates.push((a1, (mean - pi * a1) / (1.0 - pi)));
    }
    for a0 in [0.0, 1.0] {
        candidates.push(((mean - (1.0 - pi) * a0) / pi, a0));
    }
    let feasible = |v: f64| (-eps..=1.0 + eps).contains(&v);
    let deltas: Vec<f64> = candidates
        .into_iter()
        .filter(|&(a1, a0)| feasible(a1) && feasible(a0))
        .map(|(a1, a0)| a1 - a0)
        .collect();
    let lo = deltas.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

#[test]
fn feasibility_range_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    let draws = 10_000;
    for _ in 0..draws {
        let (a, b, pi): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
        if [a, b, pi].contains(&0.0) {
            continue;
        }
        for mean in [a, b] {
            let (lo, hi) = feasible_contrast_range(mean, pi);
            let (olo, ohi) = lp_contrast_range(mean, pi);
            worst = worst.max((lo - olo).abs()).max((hi - ohi).abs());
        }
    }
    report(
        "feasibility range oracle",
        worst <= 1e-9,
        format!("{draws} draws of (a, b, pi), max error {worst:.2e}"),
    );
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max);
    diff / scale.max(1e-8)
}

#[test]
fn gradient_checks() {
    let probes = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let step = 1e-6;

    let mut logistic = 0.0f64;
    for _ in 0..probes {
        let design = DesignMatrix::from_fn(60, 3, |_, j| if j == 0 { 1.0 } else { rng.gen_range(-2.0..2.0) });
        let y: Vec<f64> = (0..60).map(|_| rng.gen_range(0..2) as f64).collect();
        let beta: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let (_, g) = logistic_nll(&beta, &y, &design);
        let num = numeric_gradient(|b| logistic_nll(b, &y, &design).0, &beta, step);
        logistic = logistic.max(rel_error(&g, &num));
    }

    let mut joint = 0.0f64;
    let mut theta = 0.0f64;
    for scale in SCALES {
        let data = generate_dataset(&DgpSpec {
            n: 200,
            seed: 3,
            ..DgpSpec::with_scale(scale)
        })
        .unwrap();
        let design: Design = build_scenario_design(&data, Scenario::Bth).unwrap();
        for _ in 0..probes {
            let mut ms = ModelSet::zeros(scale, &design, false);
            let coefs: Vec<f64> = (0..ms.n_free()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            ms.set_free_coefs(&coefs).unwrap();
            let (_, g) = joint_nll(&ms, &data).unwrap();
            let mut work = ms.clone();
            let num = numeric_gradient(
                |c| {
                    work.set_free_coefs(c).unwrap();
                    joint_nll(&work, &data).unwrap().0
                },
                &coefs,
                step,
            );
            joint = joint.max(rel_error(&g, &num));

            let row = data.row(rng.gen_range(0..data.n())).to_vec();
            let g = theta_gradient(&ms, &row).unwrap();
            let mut work = ms.clone();
            let num = numeric_gradient(
                |a| {
                    work.theta.coef = a.to_vec();
                    work.theta.eval(&row).unwrap()
                },
                &ms.theta.coef,
                step,
            );
            theta = theta.max(rel_error(&g, &num));
        }
    }
    report(
        "gradient checks",
        logistic.max(joint).max(theta) <= 1e-5,
        format!(
            "{probes} probes each, max relative error: logistic nll {logistic:.2e}, joint nll {joint:.2e}, theta {theta:.2e}"
        ),
    );
}
