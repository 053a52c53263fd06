#![allow(dead_code)]

use hmm_order::{ChannelKind, EmissionParams, ObservationSet, ParameterVector, SquareMatrix, TransitionModel};
use rand::Rng;

pub fn random_simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

pub fn random_tpm<R: Rng>(rng: &mut R, n: usize) -> SquareMatrix {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| random_simplex(rng, n)).collect();
    SquareMatrix::from_rows(&rows).unwrap()
}

/// Random homogeneous model with an arbitrary (non-stationary) initial distribution.
pub fn random_model<R: Rng>(rng: &mut R, n: usize, gamma: bool) -> ParameterVector {
    let emissions = if gamma {
        let means: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..5.0)).collect();
        let shapes: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..5.0)).collect();
        EmissionParams::gamma(&means, &shapes).unwrap()
    } else {
        let means: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sds: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        EmissionParams::normal(&means, &sds).unwrap()
    };
    ParameterVector::new(
        random_simplex(rng, n),
        TransitionModel::Homogeneous {
            gamma: random_tpm(rng, n),
        },
        emissions,
    )
    .unwrap()
}

pub fn random_series<R: Rng>(rng: &mut R, t: usize, gamma: bool) -> ObservationSet {
    let (kind, values): (ChannelKind, Vec<f64>) = if gamma {
        (ChannelKind::Step, (0..t).map(|_| rng.random_range(0.05..8.0)).collect())
    } else {
        (ChannelKind::Real, (0..t).map(|_| rng.random_range(-5.0..5.0)).collect())
    };
    ObservationSet::univariate(kind, &values).unwrap()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-likelihood of the first series by summing over every state path.
pub fn enumerate_loglik(obs: &ObservationSet, p: &ParameterVector) -> f64 {
    let n = p.num_states();
    let rows = &obs.series[0].values;
    let t = rows.len();
    let gamma = match &p.transition {
        TransitionModel::Homogeneous { gamma } => gamma.clone(),
        _ => panic!("homogeneous models only"),
    };
    let lf = |j: usize, k: usize| p.emissions.states[j].log_density(&rows[k]);
    let total = n.pow(t as u32);
    let mut terms = Vec::with_capacity(total);
    let mut path = vec![0usize; t];
    for code in 0..total {
        let mut c = code;
        for s in path.iter_mut() {
            *s = c % n;
            c /= n;
        }
        let mut lp = p.delta[path[0]].ln() + lf(path[0], 0);
        for k in 1..t {
            lp += gamma.row(path[k - 1])[path[k]].ln() + lf(path[k], k);
        }
        terms.push(lp);
    }
    log_sum_exp(&terms)
}

/// Most probable path of the first series by exhaustive search.
pub fn enumerate_viterbi(obs: &ObservationSet, p: &ParameterVector) -> (Vec<usize>, f64) {
    let n = p.num_states();
    let rows = &obs.series[0].values;
    let t = rows.len();
    let gamma = match &p.transition {
        TransitionModel::Homogeneous { gamma } => gamma.clone(),
        _ => panic!("homogeneous models only"),
    };
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut path = vec![0usize; t];
    for code in 0..n.pow(t as u32) {
        let mut c = code;
        for s in path.iter_mut() {
            *s = c % n;
            c /= n;
        }
        let mut lp = p.delta[path[0]].ln() + p.emissions.states[path[0]].log_density(&rows[0]);
        for k in 1..t {
            lp += gamma.row(path[k - 1])[path[k]].ln() + p.emissions.states[path[k]].log_density(&rows[k]);
        }
        if lp > best.1 {
            best = (path.clone(), lp);
        }
    }
    best
}

pub fn log_sum(v: &[f64]) -> f64 {
    log_sum_exp(v)
}
