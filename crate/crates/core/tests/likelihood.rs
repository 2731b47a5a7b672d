mod common;

use common::*;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scc_mediate::correction::{adjust_to_star, unadjust_from_star, PrevalenceDesign, Theta};
use scc_mediate::logistic::{bernoulli_loglik, fit_logistic};
use scc_mediate::mest::fit_m;
use scc_mediate::mle::{covariance_ml, fit_ml, gradient, hessian, loglik, CovarianceKind, MlOptions};
use scc_mediate::sim::SimScenario;

#[test]
fn loglik_matches_enumeration_on_tiny_datasets() {
    let gap = likelihood_gap(21, 200);
    assert!(gap < 1e-10, "gap {gap:e}");
}

#[test]
fn null_model_unit_contributes_two_log_halves() {
    let part = toy_partition(&[(1, 1, 0, 1, 1, 0)]);
    let theta = Theta::zeros(&part.layout);
    let prev = PrevalenceDesign::from_proportions(&[0.3], &[0.3]).unwrap();
    assert!((loglik(&theta, &part, &prev).unwrap() - 2.0 * 0.5f64.ln()).abs() < 1e-12);
}

#[test]
fn loglik_decouples_without_mediator_effect() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let units = random_toy_units(&mut rng, 40);
    let part = toy_partition(&units);
    let prev = PrevalenceDesign::from_proportions(&[0.02, 0.05], &[0.4, 0.3]).unwrap();
    let mut pop = ToyPopulation::random(&mut rng);
    pop.beta.insert("m", 0.0);
    pop.beta.insert("a:m", 0.0);
    let theta = pop.theta(&part.layout);
    let beta_star = adjust_to_star(&theta.beta, &part.layout, &prev).unwrap();
    let eta_y = &part.x_y * &beta_star;
    let eta_m = &part.x_m * &theta.delta;
    let separate: f64 = (0..part.n())
        .map(|i| bernoulli_loglik(part.y[i], eta_y[i]) + bernoulli_loglik(part.m[i], eta_m[i]))
        .sum();
    assert!((loglik(&theta, &part, &prev).unwrap() - separate).abs() < 1e-12);
}

#[test]
fn gradient_matches_finite_differences_in_both_scenarios() {
    for scn in [SimScenario::scenario1(false), SimScenario::scenario2(false)] {
        let gap = gradient_gap(&scn, 20, 23);
        assert!(gap < 1e-6, "{}: {gap:e}", scn.name);
    }
}

#[test]
fn gradient_on_toy_designs_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..20 {
        let units = random_toy_units(&mut rng, 60);
        let part = toy_partition(&units);
        let prev = PrevalenceDesign::from_proportions(&[0.01, 0.2], &[0.5, 0.35]).unwrap();
        let x = ToyPopulation::random(&mut rng).theta(&part.layout).to_vector();
        let layout = part.layout.clone();
        let g = gradient(&Theta::from_vector(&x, &layout).unwrap(), &part, &prev).unwrap();
        let mut f = |v: &DVector<f64>| loglik(&Theta::from_vector(v, &layout).unwrap(), &part, &prev).unwrap();
        for j in 0..x.len() {
            assert!(rel_err(g[j], five_point(&mut f, &x, j, 1e-3)) < 1e-6);
        }
    }
}

#[test]
fn decoupled_fits_are_stationary_when_mediator_effect_is_fixed_at_zero() {
    let (part, prev) = scenario_sample(&SimScenario::scenario1(false), 25, 0);
    let layout = &part.layout;
    let d0 = layout.d_beta0;
    let x0 = part.x_y0.clone();
    let outcome = fit_logistic(&x0, &part.y, None, None).unwrap();
    let mediator = fit_logistic(&part.x_m, &part.m, None, None).unwrap();
    let mut beta_star = DVector::zeros(layout.d_beta());
    beta_star.rows_mut(0, d0).copy_from(&outcome.coefficients);
    let beta = unadjust_from_star(&beta_star, layout, &prev).unwrap();
    let theta = Theta::new(beta, mediator.coefficients.clone(), layout).unwrap();
    let g = gradient(&theta, &part, &prev).unwrap();
    for j in (0..d0).chain(layout.d_beta()..layout.d_theta()) {
        assert!(g[j].abs() < 1e-6, "component {j}: {}", g[j]);
    }
}

#[test]
fn hessian_matches_second_differences_of_loglik() {
    let (part, prev) = scenario_sample(&SimScenario::scenario2(false), 26, 0);
    let layout = part.layout.clone();
    let x = fit_m(&part, &prev).unwrap().theta.to_vector();
    let h = hessian(&Theta::from_vector(&x, &layout).unwrap(), &part, &prev, 1e-5).unwrap();
    let f = |v: &DVector<f64>| loglik(&Theta::from_vector(v, &layout).unwrap(), &part, &prev).unwrap();
    let e = 1e-3;
    for i in 0..x.len() {
        for j in 0..=i {
            let at = |si: f64, sj: f64| {
                let mut v = x.clone();
                v[i] += si * e;
                v[j] += sj * e;
                f(&v)
            };
            let fd = (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * e * e);
            assert!(rel_err(h[(i, j)], fd) < 1e-4, "({i},{j}): {} vs {fd}", h[(i, j)]);
        }
    }
}

#[test]
fn ml_estimate_is_a_local_maximum_and_beats_m() {
    for (k, scn) in [SimScenario::scenario1(false), SimScenario::scenario2(false)].iter().enumerate() {
        let (part, prev) = scenario_sample(scn, 27, k as u64);
        let layout = part.layout.clone();
        let ml = fit_ml(&part, &prev, &MlOptions::default()).unwrap();
        let m = fit_m(&part, &prev).unwrap();
        assert!(ml.converged);
        assert!(ml.loglik >= m.loglik - 1e-9);
        assert!(gradient(&ml.theta, &part, &prev).unwrap().amax() < 1e-6);
        let center = ml.theta.to_vector();
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        for _ in 0..100 {
            let dir = DVector::from_fn(center.len(), |_, _| rng.random_range(-1.0..1.0));
            let r = rng.random_range(0.0..0.1);
            let probe = &center + dir.normalize() * r;
            assert!(loglik(&Theta::from_vector(&probe, &layout).unwrap(), &part, &prev).unwrap() <= ml.loglik + 1e-9);
        }
    }
}

#[test]
fn ml_and_m_agree_on_a_large_sample() {
    let mut scn = SimScenario::scenario1(false);
    scn.n_cases = 1000;
    scn.n_controls = 5000;
    scn.population_size = 3_000_000;
    let (part, prev) = scenario_sample(&scn, 29, 0);
    let ml = fit_ml(&part, &prev, &MlOptions::default()).unwrap();
    let m = fit_m(&part, &prev).unwrap();
    let gap = (ml.theta.to_vector() - m.theta.to_vector()).amax();
    assert!(gap < 0.05, "max gap {gap}");
}

#[test]
fn sandwich_and_hessian_covariances_agree_on_a_large_sample() {
    let mut scn = SimScenario::scenario1(false);
    scn.n_cases = 1000;
    scn.n_controls = 5000;
    scn.population_size = 3_000_000;
    let (part, prev) = scenario_sample(&scn, 30, 0);
    let ml = fit_ml(&part, &prev, &MlOptions::default()).unwrap();
    let h = covariance_ml(&ml.theta, &part, &prev, CovarianceKind::Hessian).unwrap();
    let s = covariance_ml(&ml.theta, &part, &prev, CovarianceKind::Sandwich).unwrap();
    for j in 0..h.nrows() {
        let ratio = s[(j, j)] / h[(j, j)];
        assert!((0.7..=1.4).contains(&ratio), "parameter {j}: ratio {ratio}");
    }
}

#[test]
fn multi_start_is_reproducible_and_records_every_start() {
    let (part, prev) = scenario_sample(&SimScenario::scenario1(false), 31, 0);
    let opts = MlOptions {
        seed: 99,
        ..MlOptions::default()
    };
    let a = fit_ml(&part, &prev, &opts).unwrap();
    let b = fit_ml(&part, &prev, &opts).unwrap();
    assert_eq!(a.theta, b.theta);
    assert_eq!(a.covariance, b.covariance);
    assert_eq!(a.diagnostics.start_logliks.len(), opts.n_starts);
    assert!(!a.diagnostics.dispersion);
}

#[test]
fn invalid_ml_options_are_rejected() {
    let (part, prev) = scenario_sample(&SimScenario::scenario1(false), 32, 0);
    let opts = MlOptions {
        n_starts: 0,
        ..MlOptions::default()
    };
    assert!(fit_ml(&part, &prev, &opts).is_err());
}
