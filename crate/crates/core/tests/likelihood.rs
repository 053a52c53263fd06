mod common;

use common::{enumerate_loglik, enumerate_viterbi, log_sum, random_model, random_series};
use hmm_order::{forward_backward, log_likelihood, viterbi, ChannelKind, ObservationSet};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn forward_matches_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.random_range(1..=3);
        let t = rng.random_range(2..=8);
        let gamma = rng.random_bool(0.5);
        let p = random_model(&mut rng, n, gamma);
        let obs = random_series(&mut rng, t, gamma);
        let fwd = log_likelihood(&obs, &p).unwrap();
        let brute = enumerate_loglik(&obs, &p);
        assert!((fwd - brute).abs() < 1e-10, "n = {n}, t = {t}: {fwd} vs {brute}");
    }
}

#[test]
fn viterbi_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let n = rng.random_range(2..=3);
        let t = rng.random_range(2..=7);
        let p = random_model(&mut rng, n, true);
        let obs = random_series(&mut rng, t, true);
        let (path, _) = enumerate_viterbi(&obs, &p);
        assert_eq!(viterbi(&obs, &p).unwrap()[0], path);
    }
}

#[test]
fn long_series_do_not_underflow() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let p = random_model(&mut rng, 3, true);
    let obs = random_series(&mut rng, 20_000, true);
    let fb = forward_backward(&obs, &p).unwrap();
    assert!(fb.loglik.is_finite());
    assert!((fb.loglik - log_likelihood(&obs, &p).unwrap()).abs() < 1e-8 * fb.loglik.abs());
}

#[test]
fn missing_everywhere_gives_zero_loglik() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let p = random_model(&mut rng, 2, true);
    let mut obs = ObservationSet::univariate(ChannelKind::Step, &[1.0, 2.0, 3.0]).unwrap();
    for row in &mut obs.series[0].values {
        row[0] = None;
    }
    assert!(log_likelihood(&obs, &p).unwrap().abs() < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_beta_identity_holds_at_every_time(seed in any::<u64>(), n in 1usize..5, t in 2usize..60, gamma in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_model(&mut rng, n, gamma);
        let obs = random_series(&mut rng, t, gamma);
        let fb = forward_backward(&obs, &p).unwrap();
        let s = &fb.series[0];
        for k in 0..t {
            let terms: Vec<f64> = (0..n).map(|j| s.log_alpha(n, k, j) + s.log_beta(n, k, j)).collect();
            prop_assert!((log_sum(&terms) - fb.loglik).abs() < 1e-9);
        }
    }

    #[test]
    fn posteriors_are_distributions(seed in any::<u64>(), n in 1usize..5, t in 1usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_model(&mut rng, n, true);
        let obs = random_series(&mut rng, t, true);
        let fb = forward_backward(&obs, &p).unwrap();
        for k in 0..t {
            let row: Vec<f64> = (0..n).map(|j| fb.posterior(0, k, j)).collect();
            prop_assert!(row.iter().all(|&x| (0.0..=1.0 + 1e-12).contains(&x)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn viterbi_paths_are_valid_states(seed in any::<u64>(), n in 1usize..5, t in 1usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_model(&mut rng, n, false);
        let obs = random_series(&mut rng, t, false);
        let path = &viterbi(&obs, &p).unwrap()[0];
        prop_assert_eq!(path.len(), t);
        prop_assert!(path.iter().all(|&s| s < n));
    }

    #[test]
    fn relabeling_states_keeps_the_likelihood(seed in any::<u64>(), t in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_model(&mut rng, 3, true);
        let obs = random_series(&mut rng, t, true);
        let q = p.permuted(&[2, 0, 1]);
        let (a, b) = (log_likelihood(&obs, &p).unwrap(), log_likelihood(&obs, &q).unwrap());
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }
}
