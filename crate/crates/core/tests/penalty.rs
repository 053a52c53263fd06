use hmm_order::scad::DEFAULT_A;
use hmm_order::{scad_derivative, scad_value, PenaltyConfig};
use proptest::prelude::*;

#[test]
fn derivative_matches_finite_differences_away_from_kinks() {
    let a = DEFAULT_A;
    for &lambda in &[0.05, 0.3, 1.0, 2.5] {
        for &m in &[1.0, 10.0] {
            let kinks = [0.0, lambda, a * lambda];
            let top = 1.5 * a * lambda;
            for k in 0..=2000 {
                let eta = top * k as f64 / 2000.0;
                if kinks.iter().any(|&c| (eta - c).abs() <= 1e-3) {
                    continue;
                }
                let h = 1e-6 * lambda.max(1.0);
                let fd = (scad_value(eta + h, lambda, m, a).unwrap() - scad_value(eta - h, lambda, m, a).unwrap()) / (2.0 * h);
                let d = scad_derivative(eta, lambda, m, a).unwrap();
                assert!((fd - d).abs() < 1e-6, "λ = {lambda}, m = {m}, η = {eta}: {fd} vs {d}");
            }
        }
    }
}

#[test]
fn derivative_vanishes_beyond_a_lambda() {
    for &lambda in &[0.01, 0.7, 3.0] {
        for k in 0..100 {
            let eta = DEFAULT_A * lambda * (1.0 + k as f64 / 10.0);
            assert_eq!(scad_derivative(eta, lambda, 1.0, DEFAULT_A).unwrap(), 0.0);
        }
    }
}

#[test]
fn invalid_arguments_are_domain_errors() {
    assert!(scad_value(-1.0, 1.0, 1.0, 3.7).is_err());
    assert!(scad_derivative(1.0, 1.0, 1.0, 2.0).is_err());
    assert!(scad_value(1.0, -0.5, 1.0, 3.7).is_err());
    assert!(PenaltyConfig::new(1.0, 0.0).is_err());
}

proptest! {
    #[test]
    fn penalty_is_nondecreasing_concave_and_bounded(lambda in 0.01f64..5.0, x in 0.0f64..30.0, y in 0.0f64..30.0) {
        let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
        let p = |e: f64| scad_value(e, lambda, 1.0, DEFAULT_A).unwrap();
        let d = |e: f64| scad_derivative(e, lambda, 1.0, DEFAULT_A).unwrap();
        prop_assert!(p(lo) <= p(hi) + 1e-12);
        prop_assert!(d(lo) + 1e-12 >= d(hi));
        prop_assert!(d(lo) >= 0.0 && d(lo) <= lambda);
        prop_assert!(p(hi) <= lambda * lambda * (DEFAULT_A + 1.0) / 2.0 + 1e-12);
        prop_assert_eq!(p(0.0), 0.0);
    }

    #[test]
    fn linearization_majorizes(lambda in 0.01f64..5.0, at in 0.0f64..20.0, eta in 0.0f64..20.0) {
        let pen = PenaltyConfig::new(lambda, 1.0).unwrap();
        prop_assert!(pen.linearized(eta, at) + 1e-9 >= pen.value(eta));
        prop_assert!((pen.linearized(at, at) - pen.value(at)).abs() < 1e-12);
    }

    #[test]
    fn multiplier_scales_linearly(lambda in 0.01f64..5.0, eta in 0.0f64..20.0, m in 1.0f64..50.0) {
        let one = scad_value(eta, lambda, 1.0, DEFAULT_A).unwrap();
        let many = scad_value(eta, lambda, m, DEFAULT_A).unwrap();
        prop_assert!((many - m * one).abs() <= 1e-12 * many.abs().max(1.0));
    }
}
