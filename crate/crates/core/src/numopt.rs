//! Numerical engines shared by the estimators: quasi-Newton minimization,
//! moment-equation root finding, logistic regression and least squares.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{dot, DesignMatrix};
use crate::error::{IvError, Result};
use crate::models::expit;

/// Coefficient sup-norm beyond which a logistic fit is declared separated.
pub const SEPARATION_CAP: f64 = 30.0;

/// Linear predictor magnitude at which a fitted probability is numerically 0 or 1.
const SEPARATION_ETA: f64 = 23.0;

/// Floor applied to fitted values of a positivity-restricted least squares fit.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-7,
            step_tol: 1e-12,
            restarts: 3,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || !(self.grad_tol > 0.0) || !(self.step_tol > 0.0) {
            return Err(IvError::Config(
                "max_iter must be >= 1 and tolerances positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub solution: Vec<f64>,
    pub objective_or_residual: f64,
    pub converged: bool,
    pub iterations: usize,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl SolveReport {
    fn failed(x: &[f64], value: f64, iterations: usize, message: &str) -> Self {
        Self {
            solution: x.to_vec(),
            objective_or_residual: value,
            converged: false,
            iterations,
            message: message.to_string(),
            warnings: Vec::new(),
        }
    }
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// BFGS with Armijo backtracking. `f` returns the objective and writes the
/// gradient into its second argument.
pub fn minimize_smooth<F>(mut f: F, x0: &[f64], cfg: &OptimConfig) -> SolveReport
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return SolveReport::failed(&x, fx, 0, "objective not finite at start");
    }

    let mut h = identity(n);
    let mut fresh_h = true;
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut dir = vec![0.0; n];

    for iter in 0..cfg.max_iter {
        if sup_norm(&g) <= cfg.grad_tol {
            return SolveReport {
                solution: x,
                objective_or_residual: fx,
                converged: true,
                iterations: iter,
                message: "gradient tolerance reached".into(),
                warnings: Vec::new(),
            };
        }

        mat_vec(&h, &g, &mut dir);
        dir.iter_mut().for_each(|v| *v = -*v);
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            h = identity(n);
            fresh_h = true;
            dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi);
            slope = -dot(&g, &g);
        }

        // a fresh identity metric gets a unit-length first step
        let mut step = if fresh_h {
            (1.0 / sup_norm(&dir)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = false;
        let mut f_new = f64::INFINITY;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + step * dir[i];
            }
            f_new = f(&x_new, &mut g_new);
            if f_new.is_finite()
                && g_new.iter().all(|v| v.is_finite())
                && f_new <= fx + 1e-4 * step * slope
            {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if !fresh_h {
                h = identity(n);
                fresh_h = true;
                continue;
            }
            return SolveReport::failed(&x, fx, iter, "line search failed");
        }

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        let f_change = fx - f_new;
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        fx = f_new;

        if sy > 1e-12 * (dot(&s, &s) * dot(&yv, &yv)).sqrt() {
            if fresh_h {
                let scale = sy / dot(&yv, &yv);
                h.iter_mut().for_each(|v| *v *= scale);
            }
            bfgs_update(&mut h, &s, &yv, sy);
            fresh_h = false;
        }

        if sup_norm(&s) <= cfg.step_tol * (1.0 + sup_norm(&x)) && f_change.abs() <= cfg.step_tol * (1.0 + fx.abs()) {
            let converged = sup_norm(&g) <= cfg.grad_tol;
            return SolveReport {
                solution: x,
                objective_or_residual: fx,
                converged,
                iterations: iter + 1,
                message: "step tolerance reached".into(),
                warnings: Vec::new(),
            };
        }
    }
    let converged = sup_norm(&g) <= cfg.grad_tol;
    SolveReport {
        solution: x,
        objective_or_residual: fx,
        converged,
        iterations: cfg.max_iter,
        message: "iteration limit reached".into(),
        warnings: Vec::new(),
    }
}

/// [`minimize_smooth`] from `x0`, then from `cfg.restarts` jittered copies
/// (uniform +-0.5, seeded by `cfg.seed`) until a start converges. Reports
/// the first converged start, else the lowest objective.
pub fn minimize_multistart<F>(mut f: F, x0: &[f64], cfg: &OptimConfig) -> SolveReport
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<SolveReport> = None;
    let mut total_iter = 0;
    for start in 0..=cfg.restarts {
        let init: Vec<f64> = if start == 0 {
            x0.to_vec()
        } else {
            x0.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect()
        };
        let rep = minimize_smooth(&mut f, &init, cfg);
        total_iter += rep.iterations;
        if rep.converged {
            return SolveReport {
                iterations: total_iter,
                ..rep
            };
        }
        if best.as_ref().is_none_or(|b| {
            rep.objective_or_residual < b.objective_or_residual || b.objective_or_residual.is_nan()
        }) {
            best = Some(rep);
        }
    }
    let mut rep = best.expect("at least one start");
    rep.iterations = total_iter;
    rep
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

fn mat_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for i in 0..n {
        out[i] = dot(&m[i * n..(i + 1) * n], v);
    }
}

/// Inverse-Hessian BFGS update.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let mut hy = vec![0.0; n];
    mat_vec(h, y, &mut hy);
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

/// Central-difference gradient of a scalar function.
pub fn numeric_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|j| {
            let h = step * (1.0 + x[j].abs());
            xp[j] = x[j] + h;
            let up = f(&xp);
            xp[j] = x[j] - h;
            let down = f(&xp);
            xp[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn numeric_jacobian<M: FnMut(&[f64]) -> Vec<f64>>(m: &mut M, x: &[f64]) -> Option<DMatrix<f64>> {
    let k = x.len();
    let mut jac = DMatrix::zeros(k, k);
    let mut xp = x.to_vec();
    for j in 0..k {
        let h = 1e-6 * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        let up = m(&xp);
        xp[j] = x[j] - h;
        let down = m(&xp);
        xp[j] = x[j];
        if up.len() != k || down.len() != k {
            return None;
        }
        for i in 0..k {
            let v = (up[i] - down[i]) / (2.0 * h);
            if !v.is_finite() {
                return None;
            }
            jac[(i, j)] = v;
        }
    }
    Some(jac)
}

fn half_sq_norm(r: &[f64]) -> f64 {
    if r.iter().all(|v| v.is_finite()) {
        0.5 * dot(r, r)
    } else {
        f64::INFINITY
    }
}

/// Solves the square system `m(x) = 0`.
///
/// Each start runs Levenberg-Marquardt on `||m||^2` with a central-difference
/// Jacobian; the damping vanishes near a root so the last steps are Newton
/// steps. Starts are `x0` followed by `cfg.restarts` jittered copies; the
/// first start reaching `||m||_inf <= grad_tol` wins, otherwise the start with
/// the smallest residual is reported.
pub fn solve_moment<M>(mut m: M, x0: &[f64], cfg: &OptimConfig) -> SolveReport
where
    M: FnMut(&[f64]) -> Vec<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<SolveReport> = None;
    let mut total_iter = 0;
    for start in 0..=cfg.restarts {
        let init: Vec<f64> = if start == 0 {
            x0.to_vec()
        } else {
            x0.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect()
        };
        let mut rep = levenberg_marquardt(&mut m, &init, cfg);
        total_iter += rep.iterations;
        rep.iterations = total_iter;
        if rep.converged {
            return rep;
        }
        let better = best
            .as_ref()
            .is_none_or(|b| rep.objective_or_residual < b.objective_or_residual || b.objective_or_residual.is_nan());
        if better {
            best = Some(rep);
        }
    }
    let mut rep = best.expect("at least one start");
    rep.iterations = total_iter;
    rep.message = format!("no root within tolerance after {} starts: {}", cfg.restarts + 1, rep.message);
    rep
}

fn levenberg_marquardt<M>(m: &mut M, x0: &[f64], cfg: &OptimConfig) -> SolveReport
where
    M: FnMut(&[f64]) -> Vec<f64>,
{
    let k = x0.len();
    let mut x = x0.to_vec();
    let mut r = m(&x);
    if r.len() != k {
        return SolveReport::failed(&x, f64::NAN, 0, "moment dimension does not match parameter dimension");
    }
    let mut cost = half_sq_norm(&r);
    if !cost.is_finite() {
        return SolveReport::failed(&x, f64::INFINITY, 0, "moment not finite at start");
    }
    let mut lambda = 1e-3;
    for iter in 0..cfg.max_iter {
        let resid = sup_norm(&r);
        if resid <= cfg.grad_tol {
            return SolveReport {
                solution: x,
                objective_or_residual: resid,
                converged: true,
                iterations: iter,
                message: "moment tolerance reached".into(),
                warnings: Vec::new(),
            };
        }
        let Some(jac) = numeric_jacobian(m, &x) else {
            return SolveReport::failed(&x, resid, iter, "jacobian not finite");
        };
        let rv = DVector::from_column_slice(&r);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * rv;
        let mut stepped = false;
        let mut delta_norm = 0.0;
        while lambda < 1e12 {
            let mut a = jtj.clone();
            for i in 0..k {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(delta) = a.lu().solve(&(-&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let x_try: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
            let r_try = m(&x_try);
            let c_try = if r_try.len() == k { half_sq_norm(&r_try) } else { f64::INFINITY };
            if c_try < cost {
                delta_norm = delta.amax();
                x = x_try;
                r = r_try;
                cost = c_try;
                lambda = (lambda * 0.1).max(1e-15);
                stepped = true;
                break;
            }
            lambda *= 10.0;
        }
        if !stepped {
            return SolveReport::failed(&x, sup_norm(&r), iter, "no descent step found");
        }
        if delta_norm <= cfg.step_tol * (1.0 + sup_norm(&x)) && sup_norm(&r) > cfg.grad_tol {
            return SolveReport::failed(&x, sup_norm(&r), iter + 1, "step tolerance reached away from a root");
        }
    }
    let resid = sup_norm(&r);
    SolveReport {
        converged: resid <= cfg.grad_tol,
        solution: x,
        objective_or_residual: resid,
        iterations: cfg.max_iter,
        message: "iteration limit reached".into(),
        warnings: Vec::new(),
    }
}

fn check_full_rank(design: &DesignMatrix) -> Result<()> {
    let n = design.rows();
    let k = design.cols();
    if n < k || k == 0 {
        return Err(IvError::RankDeficient);
    }
    let x = DMatrix::from_row_slice(n, k, design.as_slice());
    let sv = x.singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min <= max * 1e-10 {
        return Err(IvError::RankDeficient);
    }
    Ok(())
}

/// Mean Bernoulli negative log-likelihood of a logistic model and its gradient.
pub fn logistic_nll(beta: &[f64], y: &[f64], design: &DesignMatrix) -> (f64, Vec<f64>) {
    let n = design.rows();
    let mut grad = vec![0.0; beta.len()];
    let mut nll = 0.0;
    for i in 0..n {
        let row = design.row(i);
        let eta = dot(beta, row);
        // log(1 + e^eta) without overflow
        let softplus = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
        nll += softplus - y[i] * eta;
        let resid = expit(eta) - y[i];
        for (g, x) in grad.iter_mut().zip(row) {
            *g += resid * x;
        }
    }
    let nf = n as f64;
    grad.iter_mut().for_each(|g| *g /= nf);
    (nll / nf, grad)
}

/// Logistic regression by Newton-Raphson (iteratively reweighted least
/// squares) with step halving.
pub fn fit_logistic(y: &[f64], design: &DesignMatrix, cfg: &OptimConfig) -> Result<SolveReport> {
    let n = design.rows();
    let k = design.cols();
    if y.len() != n {
        return Err(IvError::Config("response and design lengths differ".into()));
    }
    check_full_rank(design)?;
    let mut beta = vec![0.0; k];
    let (mut nll, mut grad) = logistic_nll(&beta, y, design);
    let mut iterations = 0;
    let mut separated = false;
    let mut message = String::from("iteration limit reached");
    while iterations < cfg.max_iter {
        if sup_norm(&grad) <= cfg.grad_tol {
            message = "gradient tolerance reached".into();
            break;
        }
        iterations += 1;
        let mut info = DMatrix::<f64>::zeros(k, k);
        for i in 0..n {
            let row = design.row(i);
            let mu = expit(dot(&beta, row));
            let w = mu * (1.0 - mu);
            for a in 0..k {
                let wa = w * row[a];
                for b in a..k {
                    info[(a, b)] += wa * row[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }
        info /= n as f64;
        let g = DVector::from_column_slice(&grad);
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => {
                separated = sup_norm(&beta) > 1.0;
                message = "information matrix singular".into();
                break;
            }
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b - t * s).collect();
            let (c_nll, c_grad) = logistic_nll(&cand, y, design);
            if c_nll.is_finite() && c_nll <= nll + 1e-12 * nll.abs() {
                beta = cand;
                nll = c_nll;
                grad = c_grad;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if sup_norm(&beta) > SEPARATION_CAP {
            separated = true;
            message = "coefficient norm exceeded separation cap".into();
            break;
        }
        if !moved {
            message = "no decrease along Newton direction".into();
            break;
        }
    }
    // fitted probabilities numerically 0 or 1 also indicate separation
    if !separated {
        separated = (0..n).any(|i| dot(&beta, design.row(i)).abs() > SEPARATION_ETA);
    }
    let mut warnings = Vec::new();
    if separated {
        warnings.push("separation".to_string());
    }
    Ok(SolveReport {
        converged: !separated && sup_norm(&grad) <= cfg.grad_tol,
        solution: beta,
        objective_or_residual: nll,
        iterations,
        message,
        warnings,
    })
}

/// Ordinary least squares fit; with positivity the consumed fitted values
/// are floored at [`VARIANCE_FLOOR`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeastSquaresFit {
    pub report: SolveReport,
    pub positivity: bool,
}

impl LeastSquaresFit {
    pub fn coef(&self) -> &[f64] {
        &self.report.solution
    }

    /// Fitted value at a design row, and whether the floor was applied.
    pub fn predict(&self, row: &[f64]) -> (f64, bool) {
        let v = dot(self.coef(), row);
        if self.positivity && !(v >= VARIANCE_FLOOR) {
            (VARIANCE_FLOOR, true)
        } else {
            (v, false)
        }
    }
}

pub fn fit_least_squares(targets: &[f64], design: &DesignMatrix, positivity: bool) -> Result<LeastSquaresFit> {
    let n = design.rows();
    let k = design.cols();
    if targets.len() != n {
        return Err(IvError::Config("target and design lengths differ".into()));
    }
    check_full_rank(design)?;
    let x = DMatrix::from_row_slice(n, k, design.as_slice());
    let t = DVector::from_column_slice(targets);
    let svd = x.svd(true, true);
    let coef = svd.solve(&t, 1e-12).map_err(|_| IvError::RankDeficient)?;
    let resid = design_residual_ss(design, coef.as_slice(), targets);
    Ok(LeastSquaresFit {
        report: SolveReport {
            solution: coef.as_slice().to_vec(),
            objective_or_residual: resid,
            converged: true,
            iterations: 1,
            message: "least squares solution".into(),
            warnings: Vec::new(),
        },
        positivity,
    })
}

fn design_residual_ss(design: &DesignMatrix, coef: &[f64], targets: &[f64]) -> f64 {
    (0..design.rows())
        .map(|i| {
            let r = targets[i] - dot(coef, design.row(i));
            r * r
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> OptimConfig {
        OptimConfig {
            grad_tol: 1e-10,
            ..OptimConfig::default()
        }
    }

    #[test]
    fn quadratic() {
        let rep = minimize_smooth(
            |x, g| {
                g[0] = 2.0 * (x[0] - 3.0);
                (x[0] - 3.0).powi(2)
            },
            &[0.0],
            &cfg(),
        );
        assert!(rep.converged);
        assert!((rep.solution[0] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn constant_objective() {
        let rep = minimize_smooth(
            |_, g| {
                g[0] = 0.0;
                g[1] = 0.0;
                4.0
            },
            &[0.3, -1.0],
            &cfg(),
        );
        assert!(rep.converged);
        assert!(rep.iterations <= 1);
        assert_eq!(rep.solution, vec![0.3, -1.0]);
    }

    #[test]
    fn non_finite_start_fails_cleanly() {
        let rep = minimize_smooth(|_, _| f64::NAN, &[1.0], &cfg());
        assert!(!rep.converged);
    }

    #[test]
    fn linear_and_separable_moments() {
        let rep = solve_moment(|a| vec![a[0] - 2.0], &[0.0], &cfg());
        assert!(rep.converged);
        assert!((rep.solution[0] - 2.0).abs() < 1e-10);

        let rep = solve_moment(|a| vec![a[0] * a[0] - 1.0, a[1]], &[2.0, 1.0], &cfg());
        assert!(rep.converged);
        assert!((rep.solution[0] - 1.0).abs() < 1e-9);
        assert!(rep.solution[1].abs() < 1e-9);
    }

    #[test]
    fn rootless_moment_reports_best_residual() {
        let rep = solve_moment(|a| vec![a[0] * a[0] + 1.0], &[0.5], &cfg());
        assert!(!rep.converged);
        assert!((rep.objective_or_residual - 1.0).abs() < 1e-6);
    }

    #[test]
    fn logistic_intercept_only() {
        let y: Vec<f64> = (0..400).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let design = DesignMatrix::from_fn(400, 1, |_, _| 1.0);
        let rep = fit_logistic(&y, &design, &cfg()).unwrap();
        assert!(rep.converged);
        assert!((rep.solution[0] - (0.25f64 / 0.75).ln()).abs() < 1e-10);
    }

    #[test]
    fn logistic_all_ones_separates() {
        let y = vec![1.0; 50];
        let design = DesignMatrix::from_fn(50, 1, |_, _| 1.0);
        let rep = fit_logistic(&y, &design, &cfg()).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.warnings, vec!["separation".to_string()]);
    }

    #[test]
    fn logistic_rank_deficient() {
        let design = DesignMatrix::from_fn(10, 2, |_, _| 1.0);
        assert!(matches!(
            fit_logistic(&[0.0; 10], &design, &cfg()),
            Err(IvError::RankDeficient)
        ));
    }

    #[test]
    fn least_squares_exact_and_floored() {
        let design = DesignMatrix::from_fn(5, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let t: Vec<f64> = (0..5).map(|i| 1.0 - 2.0 * i as f64).collect();
        let fit = fit_least_squares(&t, &design, true).unwrap();
        assert!((fit.coef()[0] - 1.0).abs() < 1e-12);
        assert!((fit.coef()[1] + 2.0).abs() < 1e-12);
        let (v, floored) = fit.predict(&[1.0, 3.0]);
        assert!(floored);
        assert_eq!(v, VARIANCE_FLOOR);
        let (v, floored) = fit.predict(&[1.0, 0.0]);
        assert!(!floored);
        assert!((v - 1.0).abs() < 1e-12);
    }
}
