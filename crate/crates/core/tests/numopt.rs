use ivlate::data::DesignMatrix;
use ivlate::models::expit;
use ivlate::numopt::{
    fit_least_squares, fit_logistic, logistic_nll, minimize_smooth, numeric_gradient, solve_moment, OptimConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn rosenbrock_minimum() {
    let rep = minimize_smooth(
        |x, g| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        },
        &[-1.2, 1.0],
        &OptimConfig::default(),
    );
    assert!(rep.converged, "{}", rep.message);
    assert!((rep.solution[0] - 1.0).abs() < 1e-5 && (rep.solution[1] - 1.0).abs() < 1e-5);
}

#[test]
fn nonlinear_system_root() {
    let rep = solve_moment(
        |x| vec![x[0] * x[0] + x[1] * x[1] - 4.0, x[0] - x[1]],
        &[1.0, 0.5],
        &OptimConfig::default(),
    );
    assert!(rep.converged);
    let r = 2f64.sqrt();
    assert!((rep.solution[0] - r).abs() < 1e-7 && (rep.solution[1] - r).abs() < 1e-7);
}

#[test]
fn logistic_recovers_generating_coefficients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 50_000;
    let truth = [-0.3, 0.8, -0.5];
    let x = DesignMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.gen_range(-1.0..1.0) });
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let eta: f64 = truth.iter().zip(x.row(i)).map(|(b, v)| b * v).sum();
            (rng.gen::<f64>() < expit(eta)) as u8 as f64
        })
        .collect();
    let rep = fit_logistic(&y, &x, &OptimConfig::default()).unwrap();
    assert!(rep.converged);
    for (b, t) in rep.solution.iter().zip(truth) {
        assert!((b - t).abs() < 0.06, "{b} vs {t}");
    }
    let (_, g) = logistic_nll(&rep.solution, &y, &x);
    assert!(g.iter().all(|v| v.abs() < 1e-6 * n as f64));
}

#[test]
fn least_squares_simple_regression() {
    let xs = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
    let ys = [1.1, 2.9, 5.2, 7.1, 8.8, 11.2];
    let x = DesignMatrix::from_fn(xs.len(), 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
    let fit = fit_least_squares(&ys, &x, false).unwrap();
    // closed-form slope and intercept
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = xs.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let c = fit.coef();
    assert!((c[1] - slope).abs() < 1e-10);
    assert!((c[0] - (my - slope * mx)).abs() < 1e-10);
}

proptest! {
    #[test]
    fn logistic_gradient_matches_differences(
        beta in prop::collection::vec(-2.0..2.0f64, 3),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DesignMatrix::from_fn(40, 3, |_, j| if j == 0 { 1.0 } else { rng.gen_range(-2.0..2.0) });
        let y: Vec<f64> = (0..40).map(|_| rng.gen_range(0..2) as f64).collect();
        let (_, g) = logistic_nll(&beta, &y, &x);
        let num = numeric_gradient(|b| logistic_nll(b, &y, &x).0, &beta, 1e-6);
        let scale = num.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        for (a, b) in g.iter().zip(&num) {
            prop_assert!((a - b).abs() / scale <= 1e-5);
        }
    }
}
