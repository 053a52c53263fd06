use hmm_order::em::{count_distinct_states, fit_dpmle, fit_mle, penalized_objective, FitOptions, PenaltyGeometry};
use hmm_order::selection::{dpmle_order_select, random_init, EmissionSpec, SearchOptions};
use hmm_order::sim::{simulate, ScenarioConfig};
use hmm_order::{log_likelihood, EmissionParams, Family, PenaltyConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scenario1(t: usize, seed: u64) -> hmm_order::ObservationSet {
    simulate(&ScenarioConfig::new(1, t, seed)).unwrap().data.without_covariates()
}

fn nondecreasing(trace: &[f64], tol: f64) -> bool {
    trace.windows(2).all(|w| w[1] >= w[0] - tol)
}

#[test]
fn mle_trace_is_monotone_and_matches_the_likelihood() {
    let obs = scenario1(800, 3);
    let spec = EmissionSpec::new(vec![Family::Gamma]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in 1..=4 {
        let init = random_init(&obs, n, &spec, &mut rng).unwrap();
        let fit = fit_mle(&obs, &init, &FitOptions::default()).unwrap();
        assert!(nondecreasing(&fit.trace, 1e-8), "order {n}: {:?}", fit.trace);
        let ll = log_likelihood(&obs, &fit.params).unwrap();
        assert!((ll - fit.loglik).abs() < 1e-8 * ll.abs());
    }
}

#[test]
fn penalized_trace_is_monotone_and_ends_at_the_objective() {
    let obs = scenario1(600, 4);
    let spec = EmissionSpec::new(vec![Family::Gamma]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let init = random_init(&obs, 4, &spec, &mut rng).unwrap();
        let pen = PenaltyConfig::from_log_m_lambda(rng.random_range(1.0..5.0), rng.random_range(1.0..5.0), 1).unwrap();
        let fit = fit_dpmle(&obs, &init, &pen, &FitOptions::default()).unwrap();
        assert!(nondecreasing(&fit.trace, 1e-8));
        let last = *fit.trace.last().unwrap();
        let obj = penalized_objective(&obs, &fit.params, &pen, &fit.geometry).unwrap();
        assert!((obj - last).abs() < 1e-6 * obj.abs(), "{obj} vs {last}");
        assert!(fit.n_hat >= 1 && fit.n_hat <= 4);
        assert_eq!(fit.merged.num_states(), fit.n_hat);
    }
}

#[test]
fn fused_means_are_counted_once() {
    let e = EmissionParams::gamma(&[1.0, 3.0, 3.0 + 1e-9, 5.5], &[2.0; 4]).unwrap();
    let geometry = PenaltyGeometry::from_emissions(&e);
    let g = count_distinct_states(&e, &geometry, 1e-3);
    assert_eq!(g.n_hat(), 3);
    assert_eq!(g.groups, vec![vec![0], vec![1, 2], vec![3]]);
}

#[test]
fn penalized_selection_finds_three_states() {
    let obs = scenario1(2000, 8);
    let spec = EmissionSpec::new(vec![Family::Gamma]);
    let search = SearchOptions {
        draws: 6,
        seed: 2,
        ..SearchOptions::default()
    };
    let r = dpmle_order_select(&obs, &spec, 4, 4, &search, &FitOptions::default()).unwrap();
    assert_eq!(r.best.n_hat, 3);
    assert_eq!(r.report.candidates.len(), 6 * r.report.candidates.iter().map(|c| c.start.unwrap() + 1).max().unwrap());
}

#[test]
fn mismatched_initial_values_are_rejected() {
    let obs = scenario1(100, 1);
    let spec = EmissionSpec::new(vec![Family::Normal]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let init = random_init(&obs, 2, &spec, &mut rng).unwrap();
    let mut opts = FitOptions::default();
    assert!(fit_mle(&obs, &init, &opts).is_ok());
    opts.nonstationary = true;
    assert!(fit_mle(&obs, &init, &opts).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn em_never_decreases_the_likelihood(seed in any::<u64>(), n in 1usize..4) {
        let obs = scenario1(300, seed % 1000);
        let spec = EmissionSpec::new(vec![Family::Gamma]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = random_init(&obs, n, &spec, &mut rng).unwrap();
        let fit = fit_mle(&obs, &init, &FitOptions { max_iter: 100, ..FitOptions::default() }).unwrap();
        prop_assert!(nondecreasing(&fit.trace, 1e-8));
        prop_assert!(fit.params.validate().is_ok());
    }
}
