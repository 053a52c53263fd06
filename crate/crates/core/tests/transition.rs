mod common;

use common::random_tpm;
use hmm_order::em::merge_model;
use hmm_order::{stationary_distribution, ChannelParams, EmissionParams, ParameterVector, SquareMatrix, TransitionModel};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn residual(pi: &[f64], g: &SquareMatrix) -> f64 {
    let n = pi.len();
    (0..n)
        .map(|j| ((0..n).map(|i| pi[i] * g.row(i)[j]).sum::<f64>() - pi[j]).abs())
        .fold(0.0, f64::max)
}

#[test]
fn stationary_distribution_of_random_chains() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for k in 0..100 {
        let n = 2 + k % 5;
        let g = random_tpm(&mut rng, n);
        let pi = stationary_distribution(&g).unwrap();
        assert!(residual(&pi, &g) < 1e-12);
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn symmetric_three_state_chain_is_uniform() {
    let g = SquareMatrix::from_rows(&[vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1], vec![0.1, 0.1, 0.8]]).unwrap();
    for p in stationary_distribution(&g).unwrap() {
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn reducible_chain_is_reported() {
    let g = SquareMatrix::identity(2);
    assert!(stationary_distribution(&g).is_err());
}

fn four_state(rows: [[f64; 4]; 4], means: [f64; 4]) -> ParameterVector {
    let g = SquareMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
    ParameterVector::stationary(g, EmissionParams::gamma(&means, &[2.0; 4]).unwrap()).unwrap()
}

fn merged_rows(p: &ParameterVector) -> Vec<Vec<f64>> {
    match &p.transition {
        TransitionModel::Homogeneous { gamma } => gamma.to_rows(),
        _ => unreachable!(),
    }
}

fn means(p: &ParameterVector) -> Vec<f64> {
    p.emissions
        .states
        .iter()
        .map(|s| match s.channels[0] {
            ChannelParams::Gamma { mean, .. } => mean,
            _ => unreachable!(),
        })
        .collect()
}

#[test]
fn merging_two_adjacent_states() {
    let p = four_state(
        [
            [0.5, 0.25, 0.125, 0.125],
            [0.25, 0.5, 0.125, 0.125],
            [0.125, 0.125, 0.5, 0.25],
            [0.125, 0.125, 0.25, 0.5],
        ],
        [1.0, 1.5, 3.0, 5.5],
    );
    let m = merge_model(&p, &[vec![0, 1], vec![2], vec![3]], &[1.0, 3.0, 1.0, 1.0], None).unwrap();
    assert_eq!(
        merged_rows(&m),
        vec![vec![0.75, 0.125, 0.125], vec![0.25, 0.5, 0.25], vec![0.25, 0.25, 0.5]]
    );
    assert_eq!(means(&m), vec![1.375, 3.0, 5.5]);
}

#[test]
fn merging_into_two_pairs() {
    let p = four_state(
        [
            [0.5, 0.25, 0.125, 0.125],
            [0.25, 0.5, 0.125, 0.125],
            [0.125, 0.125, 0.5, 0.25],
            [0.125, 0.125, 0.25, 0.5],
        ],
        [1.0, 1.0, 5.0, 6.0],
    );
    let m = merge_model(&p, &[vec![2, 3], vec![0, 1]], &[1.0, 1.0, 1.0, 1.0], None).unwrap();
    assert_eq!(merged_rows(&m), vec![vec![0.75, 0.25], vec![0.25, 0.75]]);
    assert_eq!(means(&m), vec![1.0, 5.5]);
    assert!(m.delta.iter().all(|d| (d - 0.5).abs() < 1e-12));
}

#[test]
fn merging_three_states_with_sparse_rows() {
    let p = four_state(
        [
            [0.5, 0.25, 0.125, 0.125],
            [0.25, 0.25, 0.25, 0.25],
            [0.0, 0.5, 0.25, 0.25],
            [0.5, 0.0, 0.0, 0.5],
        ],
        [1.0, 2.0, 3.0, 5.0],
    );
    let m = merge_model(&p, &[vec![0], vec![1, 2, 3]], &[4.0, 1.0, 1.0, 2.0], None).unwrap();
    assert_eq!(merged_rows(&m), vec![vec![0.5, 0.5], vec![0.25, 0.75]]);
    assert_eq!(means(&m), vec![1.0, 3.75]);
}

#[test]
fn merging_rejects_bad_groupings() {
    let p = four_state([[0.25; 4]; 4], [1.0, 2.0, 3.0, 4.0]);
    assert!(merge_model(&p, &[vec![0, 1], vec![2]], &[1.0; 4], None).is_err());
    assert!(merge_model(&p, &[vec![0, 1], vec![1, 2, 3]], &[1.0; 4], None).is_err());
    assert!(merge_model(&p, &[vec![0, 1], vec![], vec![2, 3]], &[1.0; 4], None).is_err());
}

fn arb_groups(n: usize) -> impl Strategy<Value = Vec<Vec<usize>>> {
    proptest::collection::vec(0..n, n).prop_map(move |labels| {
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut ids: Vec<usize> = Vec::new();
        for (i, l) in labels.into_iter().enumerate() {
            match ids.iter().position(|&x| x == l) {
                Some(k) => groups[k].push(i),
                None => {
                    ids.push(l);
                    groups.push(vec![i]);
                }
            }
        }
        groups
    })
}

proptest! {
    #[test]
    fn merged_rows_are_distributions(seed in any::<u64>(), groups in arb_groups(5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_tpm(&mut rng, 5);
        let p = ParameterVector::stationary(g, EmissionParams::gamma(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0; 5]).unwrap()).unwrap();
        let m = merge_model(&p, &groups, &[1.0; 5], None).unwrap();
        prop_assert_eq!(m.num_states(), groups.len());
        for row in merged_rows(&m) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
        prop_assert!((m.delta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stationary_distribution_is_a_fixed_point(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_tpm(&mut rng, n);
        let pi = stationary_distribution(&g).unwrap();
        prop_assert!(residual(&pi, &g) < 1e-12);
        prop_assert!(pi.iter().all(|&p| p > 0.0));
    }
}
