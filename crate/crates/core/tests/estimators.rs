use ivlate::comparators::{
    fit_dru_ogburn_with, fit_rdlink, fit_reg_ogburn_models, solve_ogburn_weighted, RdLinkSpec,
};
use ivlate::models::{Link, ModelSet};
use ivlate::numopt::OptimConfig;
use ivlate::param::{inverse_map, Scale, StructuralPoint};
use ivlate::proposed::{expected_h_given_x, fit_instrument, fit_mle};
use ivlate::simulation::{build_scenario_design, generate_dataset, DgpSpec, Scenario};
use ivlate::{fit_batch, fit_estimator, Dataset, Estimator, FitSettings};
use proptest::prelude::*;

fn simulated(scale: Scale, n: usize, seed: u64) -> Dataset {
    generate_dataset(&DgpSpec {
        n,
        seed,
        ..DgpSpec::with_scale(scale)
    })
    .unwrap()
}

#[test]
fn mle_consistent_at_large_n() {
    for scale in [Scale::Additive, Scale::Multiplicative] {
        let data = simulated(scale, 20_000, 9);
        let design = build_scenario_design(&data, Scenario::Bth).unwrap();
        let fit = fit_estimator(Estimator::Mle, &data, &design, &FitSettings::new(scale)).unwrap();
        assert!(fit.converged);
        assert!(fit.alpha[0].abs() < 0.1 && (fit.alpha[1] + 1.0).abs() < 0.15, "{scale:?}: {:?}", fit.alpha);
    }
}

#[test]
fn batch_matches_single_fits() {
    let data = simulated(Scale::Additive, 800, 2);
    let settings = FitSettings::new(Scale::Additive);
    let jobs: Vec<_> = [Estimator::Mle, Estimator::Drw, Estimator::DruOgburn, Estimator::LsAbadie]
        .into_iter()
        .flat_map(|e| {
            [Scenario::Bth, Scenario::Bad]
                .map(|s| (e, build_scenario_design(&data, s).unwrap()))
        })
        .collect();
    let batch = fit_batch(&data, &jobs, &settings);
    for ((e, d), b) in jobs.iter().zip(batch) {
        let single = fit_estimator(*e, &data, d, &settings).unwrap();
        assert_eq!(single, b.unwrap(), "{e}");
    }
}

#[test]
fn every_estimator_is_reproducible() {
    for scale in [Scale::Additive, Scale::Multiplicative] {
        let data = simulated(scale, 600, 12);
        let design = build_scenario_design(&data, Scenario::Bth).unwrap();
        let settings = FitSettings::new(scale);
        for e in Estimator::ALL.into_iter().filter(|e| e.supports_scale(scale)) {
            let a = fit_estimator(e, &data, &design, &settings).unwrap();
            let b = fit_estimator(e, &data, &design, &settings).unwrap();
            assert_eq!(a, b, "{e}");
        }
    }
}

#[test]
fn mle_invariant_to_row_order() {
    let data = simulated(Scale::Additive, 1000, 5);
    let rev: Vec<usize> = (0..data.n()).rev().collect();
    let permuted = data.subset(&rev);
    let design = build_scenario_design(&data, Scenario::Bth).unwrap();
    let cfg = OptimConfig::default();
    let init = ModelSet::zeros(Scale::Additive, &design, false);
    let a = fit_mle(&init, &data, &cfg).unwrap();
    let b = fit_mle(&init, &permuted, &cfg).unwrap();
    for (x, y) in a.alpha.iter().zip(&b.alpha) {
        assert!((x - y).abs() < 1e-6, "{x} vs {y}");
    }
}

#[test]
fn unit_weights_reduce_weighted_ogburn_to_identity() {
    let data = simulated(Scale::Additive, 1000, 21);
    let design = build_scenario_design(&data, Scenario::Bth).unwrap();
    let cfg = OptimConfig::default();
    let reg = fit_reg_ogburn_models(&data, &design, Scale::Additive, &cfg).unwrap();
    let inst = fit_instrument(&data, &design.instrument, &cfg).unwrap();
    let ones = vec![1.0; data.n()];
    let weighted = solve_ogburn_weighted(&data, &reg, &inst, &ones, &cfg).unwrap();
    let identity = fit_dru_ogburn_with(&data, &reg, &inst, &cfg).unwrap();
    assert_eq!(weighted.solution, identity.alpha);
}

#[test]
fn one_sided_fit_has_no_always_takers() {
    let data = generate_dataset(&DgpSpec {
        n: 2000,
        seed: 8,
        one_sided: true,
        ..DgpSpec::default()
    })
    .unwrap();
    assert!(data.z().iter().zip(data.d()).all(|(&z, &d)| z == 1 || d == 0));
    let design = build_scenario_design(&data, Scenario::Bth).unwrap();
    let settings = FitSettings {
        one_sided: true,
        ..FitSettings::new(Scale::Additive)
    };
    let fit = fit_estimator(Estimator::Mle, &data, &design, &settings).unwrap();
    assert!(fit.converged);
    assert!(!fit.nuisance.contains_key("beta2"));
    let drw = fit_estimator(Estimator::Drw, &data, &design, &settings).unwrap();
    assert!(drw.converged);
}

#[test]
fn unsupported_pairs_are_rejected() {
    let data = simulated(Scale::Multiplicative, 300, 1);
    let design = build_scenario_design(&data, Scenario::Bth).unwrap();
    let settings = FitSettings::new(Scale::Multiplicative);
    assert!(fit_estimator(Estimator::MleWang, &data, &design, &settings).is_err());
    assert!(fit_estimator(Estimator::DruWang, &data, &design, &settings).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn one_sided_expected_h_is_control_arm_risk(
        multiplicative in any::<bool>(),
        u in 0.0..1.0f64,
        phi in prop::array::uniform3(0.02..0.98f64),
        lop in -3.0..3.0f64,
    ) {
        let (scale, theta) = if multiplicative {
            (Scale::Multiplicative, (4.0 * u - 2.0).exp())
        } else {
            (Scale::Additive, 1.9 * u - 0.95)
        };
        let sp = StructuralPoint::new(theta, [phi[0], 0.0, phi[1], phi[2]], lop.exp());
        let cp = inverse_map(&sp, scale).unwrap();
        let y0 = cp.get(0, 1, 0) + cp.get(1, 1, 0);
        prop_assert!((expected_h_given_x(&sp, scale).unwrap() - y0).abs() <= 1e-10);
    }

    #[test]
    fn rdlink_arm_probabilities_in_unit_interval(
        seed in 0u64..50,
        multiplicative in any::<bool>(),
        m in 0.05..2.0f64,
        x in -3.0..3.0f64,
    ) {
        let scale = if multiplicative { Scale::Multiplicative } else { Scale::Additive };
        let data = simulated(scale, 300, seed);
        let spec = RdLinkSpec::zeros(Link::for_theta(scale), vec![0, 1], vec![0, 1]);
        let fit = fit_rdlink(data.y(), data.z(), &data, &spec, None, &OptimConfig::default()).unwrap();
        let (p0, p1) = fit.arm_probabilities(&[1.0, x, 0.0, 0.0, 0.0], m);
        prop_assert!((0.0..=1.0).contains(&p0) && (0.0..=1.0).contains(&p1));
    }
}
