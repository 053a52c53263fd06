//! Generators for the six simulation scenarios.
//!
//! 1. homogeneous three-state gamma HMM;
//! 2. scenario 1 plus additive uniform errors on a fraction of time points;
//! 3. two-component discrete random effect on the tpm;
//! 4. log-normal individual means for state 3;
//! 5. AR(1) drift of the state-1 mean;
//! 6. cosinor time-of-day transition probabilities.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Channel, ChannelKind, ObservationSet, Series};
use crate::emission::ChannelParams;
use crate::error::{Error, Result};
use crate::matrix::SquareMatrix;
use crate::transition::{stationary_distribution, LogitCoefficients, TransitionModel};

/// Name of the time-of-day covariate attached to every simulated series.
pub const TIME_OF_DAY: &str = "tod";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub scenario: u8,
    /// Length of each series.
    pub t: usize,
    /// Number of individuals; `None` uses the scenario default (1 or 10).
    pub m: Option<usize>,
    pub seed: u64,
    pub means: [f64; 3],
    pub shapes: [f64; 3],
    pub gamma: [[f64; 3]; 3],
    pub outlier_fraction: f64,
    pub outlier_range: (f64, f64),
    pub gamma2: [[f64; 3]; 3],
    pub mixture_weights: [f64; 2],
    /// Variance of log μ₃ across individuals.
    pub lognormal_log_var: f64,
    pub ar_persistence: f64,
    /// Stationary sd of the AR(1) mean path as a fraction of the base mean.
    pub ar_sd_fraction: f64,
    pub ar_floor: f64,
    /// Off-diagonal baseline logit of the cosinor tpm.
    pub cosinor_intercept: f64,
    pub cosinor_amplitude: f64,
    /// Steps per cycle (96 quarter hours per day).
    pub cosinor_period: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: 1,
            t: 5000,
            m: None,
            seed: 1,
            means: [1.0, 3.0, 5.5],
            shapes: [1.5, 4.0, 12.0],
            gamma: [[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]],
            outlier_fraction: 0.005,
            outlier_range: (10.0, 20.0),
            gamma2: [[0.1, 0.1, 0.8], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]],
            mixture_weights: [0.5, 0.5],
            lognormal_log_var: 0.15,
            ar_persistence: 0.85,
            ar_sd_fraction: 0.15,
            ar_floor: 0.05,
            cosinor_intercept: (0.1_f64 / 0.8).ln(),
            cosinor_amplitude: 1.0,
            cosinor_period: 96,
        }
    }
}

impl ScenarioConfig {
    pub fn new(scenario: u8, t: usize, seed: u64) -> Self {
        Self {
            scenario,
            t,
            seed,
            ..Self::default()
        }
    }

    pub fn individuals(&self) -> usize {
        self.m.unwrap_or(match self.scenario {
            3..=5 => 10,
            _ => 1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=6).contains(&self.scenario) {
            return Err(Error::Config(format!("scenario must be 1–6, got {}", self.scenario)));
        }
        if self.t < 2 {
            return Err(Error::Config(format!("series length must be ≥ 2, got {}", self.t)));
        }
        if self.individuals() == 0 {
            return Err(Error::Config("at least one individual is required".into()));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(Error::Config(format!("outlier fraction {} outside [0, 1]", self.outlier_fraction)));
        }
        if self.outlier_range.0 > self.outlier_range.1 {
            return Err(Error::Config("outlier interval is reversed".into()));
        }
        let w = self.mixture_weights;
        if w.iter().any(|&x| x < 0.0) || (w[0] + w[1] - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights {w:?} must sum to 1")));
        }
        for (name, g) in [("gamma", &self.gamma), ("gamma2", &self.gamma2)] {
            if !tpm(g).is_row_stochastic(1e-12) {
                return Err(Error::Config(format!("{name} is not row-stochastic")));
            }
        }
        if self.means.iter().chain(&self.shapes).any(|&x| !(x > 0.0)) {
            return Err(Error::Config("means and shapes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ar_persistence.abs()) || self.lognormal_log_var < 0.0 {
            return Err(Error::Config("AR persistence must be in (−1, 1) and log variance ≥ 0".into()));
        }
        if self.cosinor_period == 0 {
            return Err(Error::Config("cosinor period must be positive".into()));
        }
        Ok(())
    }

    /// Logit coefficients of the generating cosinor tpm, with covariates
    /// `(cos(2πt/P), sin(2πt/P))`. Transitions into state `j` peak at phase
    /// `2π j / 3`.
    pub fn cosinor_coefficients(&self) -> LogitCoefficients {
        let mut beta = LogitCoefficients::zeros(3, 2);
        for i in 0..3 {
            for j in (0..3).filter(|&j| j != i) {
                let phase = 2.0 * PI * j as f64 / 3.0;
                *beta.get_mut(i, j, 0) = self.cosinor_intercept;
                *beta.get_mut(i, j, 1) = self.cosinor_amplitude * phase.cos();
                *beta.get_mut(i, j, 2) = self.cosinor_amplitude * phase.sin();
            }
        }
        beta
    }

    /// Cosinor covariates at time `t` (1-based).
    pub fn cosinor_row(&self, t: usize) -> Vec<f64> {
        let w = 2.0 * PI * t as f64 / self.cosinor_period as f64;
        vec![w.cos(), w.sin()]
    }

    /// Generating tpm for the move into time `t` (1-based) in scenario 6.
    pub fn cosinor_tpm(&self, t: usize) -> SquareMatrix {
        let model = TransitionModel::CovariateLogit {
            beta: self.cosinor_coefficients(),
        };
        crate::transition::transition_matrix_at(&model, Some(&self.cosinor_row(t))).expect("valid cosinor model")
    }
}

fn tpm(g: &[[f64; 3]; 3]) -> SquareMatrix {
    SquareMatrix::from_rows(&g.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).expect("3×3")
}

/// Linear time-of-day index 1..=period for 1-based time `t`.
pub fn time_of_day(t: usize, period: usize) -> f64 {
    ((t - 1) % period + 1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualTruth {
    pub id: String,
    /// Hidden states, 1-based.
    pub states: Vec<usize>,
    /// Random-effect component (scenario 3), 1-based.
    pub component: Option<usize>,
    /// Individual state-3 mean (scenario 4).
    pub state3_mean: Option<f64>,
    /// Time-varying state-1 mean (scenario 5).
    pub state1_mean_path: Option<Vec<f64>>,
    /// Contaminated time points (scenario 2), 1-based, with the added error.
    pub contaminated: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub config: ScenarioConfig,
    pub individuals: Vec<IndividualTruth>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub data: ObservationSet,
    pub truth: Truth,
}

fn draw_index<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Simulates one scenario. Identical configurations give bit-identical output.
pub fn simulate(config: &ScenarioConfig) -> Result<Simulation> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let m = config.individuals();
    let t_len = config.t;
    let base_gamma = tpm(&config.gamma);
    let gamma2 = tpm(&config.gamma2);
    let mut series = Vec::with_capacity(m);
    let mut truths = Vec::with_capacity(m);
    for ind in 0..m {
        let id = format!("ind{}", ind + 1);
        let mut means = config.means;
        let mut truth = IndividualTruth {
            id: id.clone(),
            states: Vec::with_capacity(t_len),
            component: None,
            state3_mean: None,
            state1_mean_path: None,
            contaminated: Vec::new(),
        };
        let mut gamma = &base_gamma;
        if config.scenario == 3 {
            let k = draw_index(&config.mixture_weights, &mut rng);
            truth.component = Some(k + 1);
            if k == 1 {
                gamma = &gamma2;
            }
        }
        if config.scenario == 4 {
            let ln = LogNormal::new(config.means[2].ln(), config.lognormal_log_var.sqrt())
                .map_err(|e| Error::Config(e.to_string()))?;
            means[2] = ln.sample(&mut rng);
            truth.state3_mean = Some(means[2]);
        }
        let ar_path = if config.scenario == 5 {
            let base = config.means[0];
            let phi = config.ar_persistence;
            let sd = config.ar_sd_fraction * base;
            let innov = Normal::new(0.0, sd * (1.0 - phi * phi).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
            let start = Normal::new(0.0, sd).map_err(|e| Error::Config(e.to_string()))?;
            let mut dev = start.sample(&mut rng);
            let mut path = Vec::with_capacity(t_len);
            for _ in 0..t_len {
                path.push((base + dev).max(config.ar_floor));
                dev = phi * dev + innov.sample(&mut rng);
            }
            Some(path)
        } else {
            None
        };
        let delta = if config.scenario == 6 {
            stationary_distribution(&config.cosinor_tpm(1))?
        } else {
            stationary_distribution(gamma)?
        };
        let mut state = draw_index(&delta, &mut rng);
        let mut values = Vec::with_capacity(t_len);
        let mut covs = Vec::with_capacity(t_len);
        for t in 1..=t_len {
            if t > 1 {
                state = if config.scenario == 6 {
                    let g = config.cosinor_tpm(t);
                    draw_index(g.row(state), &mut rng)
                } else {
                    draw_index(gamma.row(state), &mut rng)
                };
            }
            let mean = match (&ar_path, state) {
                (Some(p), 0) => p[t - 1],
                _ => means[state],
            };
            let y = ChannelParams::Gamma {
                mean,
                shape: config.shapes[state],
            }
            .sample(&mut rng);
            truth.states.push(state + 1);
            values.push(vec![Some(y)]);
            covs.push(vec![time_of_day(t, config.cosinor_period)]);
        }
        truth.state1_mean_path = ar_path;
        series.push(Series {
            id,
            values,
            covariates: Some(covs),
        });
        truths.push(truth);
    }
    if config.scenario == 2 {
        let total = t_len * m;
        let k = (config.outlier_fraction * total as f64).round() as usize;
        let (lo, hi) = config.outlier_range;
        let mut picked = sample(&mut rng, total, k).into_vec();
        picked.sort_unstable();
        for idx in picked {
            let (s, t) = (idx / t_len, idx % t_len);
            let e = if hi > lo { rng.random_range(lo..hi) } else { lo };
            if let Some(y) = series[s].values[t][0].as_mut() {
                *y += e;
            }
            truths[s].contaminated.push((t + 1, e));
        }
    }
    let data = ObservationSet::new(
        vec![Channel {
            name: "step".into(),
            kind: ChannelKind::Step,
        }],
        vec![TIME_OF_DAY.into()],
        series,
    )?;
    Ok(Simulation {
        data,
        truth: Truth {
            config: config.clone(),
            individuals: truths,
        },
    })
}

/// Empirical summary of one state's emissions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSummary {
    pub state: usize,
    pub count: usize,
    pub mean: Option<f64>,
    /// Method-of-moments gamma shape, mean² / variance.
    pub shape: Option<f64>,
    pub expected_mean: f64,
    pub expected_shape: f64,
    /// Half-width of an approximate 95% interval for the mean.
    pub mean_half_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionSummary {
    /// Random-effect component (1-based) or `None` for all individuals.
    pub component: Option<usize>,
    pub counts: Vec<Vec<usize>>,
    /// Row-normalized counts; `None` where a row has no transitions.
    pub frequencies: Vec<Vec<Option<f64>>>,
    pub expected: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub scenario: u8,
    pub states: Vec<StateSummary>,
    pub occupancy: Vec<f64>,
    pub transitions: Vec<TransitionSummary>,
    /// Scenario 6: fraction of individuals-times in each state per time of day.
    pub occupancy_by_time: Option<Vec<Vec<Option<f64>>>>,
}

/// Compares generated data with the generating configuration.
pub fn empirical_checks(data: &ObservationSet, truth: &Truth) -> SimReport {
    let cfg = &truth.config;
    let mut sums = [(0usize, 0.0, 0.0); 3];
    let mut occ = [0usize; 3];
    for (s, tr) in data.series.iter().zip(&truth.individuals) {
        let contaminated: std::collections::HashSet<usize> = tr.contaminated.iter().map(|c| c.0).collect();
        for (t, (row, &st)) in s.values.iter().zip(&tr.states).enumerate() {
            occ[st - 1] += 1;
            if contaminated.contains(&(t + 1)) {
                continue;
            }
            if let Some(y) = row[0] {
                let e = &mut sums[st - 1];
                e.0 += 1;
                e.1 += y;
                e.2 += y * y;
            }
        }
    }
    let expected_means: Vec<f64> = (0..3)
        .map(|j| match (cfg.scenario, j) {
            (4, 2) => {
                let ms: Vec<f64> = truth.individuals.iter().filter_map(|i| i.state3_mean).collect();
                ms.iter().sum::<f64>() / ms.len().max(1) as f64
            }
            _ => cfg.means[j],
        })
        .collect();
    let states = (0..3)
        .map(|j| {
            let (n, s1, s2) = sums[j];
            let mean = (n > 0).then(|| s1 / n as f64);
            let var = (n > 1).then(|| (s2 - s1 * s1 / n as f64) / (n - 1) as f64);
            StateSummary {
                state: j + 1,
                count: n,
                mean,
                shape: match (mean, var) {
                    (Some(m), Some(v)) if v > 0.0 => Some(m * m / v),
                    _ => None,
                },
                expected_mean: expected_means[j],
                expected_shape: cfg.shapes[j],
                mean_half_width: var.map(|v| 1.96 * (v / n as f64).sqrt()),
            }
        })
        .collect();
    let total: usize = occ.iter().sum();
    let occupancy = occ.iter().map(|&c| c as f64 / total.max(1) as f64).collect();
    let components: Vec<Option<usize>> = if cfg.scenario == 3 { vec![Some(1), Some(2)] } else { vec![None] };
    let transitions = components
        .into_iter()
        .map(|comp| {
            let mut counts = vec![vec![0usize; 3]; 3];
            for tr in truth.individuals.iter().filter(|i| comp.is_none() || i.component == comp) {
                for w in tr.states.windows(2) {
                    counts[w[0] - 1][w[1] - 1] += 1;
                }
            }
            let frequencies = counts
                .iter()
                .map(|r| {
                    let s: usize = r.iter().sum();
                    r.iter().map(|&c| (s > 0).then(|| c as f64 / s as f64)).collect()
                })
                .collect();
            let expected = match (cfg.scenario, comp) {
                (6, _) => None,
                (3, Some(2)) => Some(cfg.gamma2.iter().map(|r| r.to_vec()).collect()),
                _ => Some(cfg.gamma.iter().map(|r| r.to_vec()).collect()),
            };
            TransitionSummary {
                component: comp,
                counts,
                frequencies,
                expected,
            }
        })
        .collect();
    let occupancy_by_time = (cfg.scenario == 6).then(|| {
        let p = cfg.cosinor_period;
        let mut c = vec![[0usize; 3]; p];
        for tr in &truth.individuals {
            for (t, &st) in tr.states.iter().enumerate() {
                c[t % p][st - 1] += 1;
            }
        }
        c.iter()
            .map(|r| {
                let s: usize = r.iter().sum();
                r.iter().map(|&x| (s > 0).then(|| x as f64 / s as f64)).collect()
            })
            .collect()
    });
    SimReport {
        scenario: cfg.scenario,
        states,
        occupancy,
        transitions,
        occupancy_by_time,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unknown_scenario() {
        assert!(matches!(simulate(&ScenarioConfig::new(7, 10, 1)), Err(Error::Config(_))));
        assert!(matches!(simulate(&ScenarioConfig::new(1, 1, 1)), Err(Error::Config(_))));
    }

    #[test]
    fn default_individual_counts() {
        for (s, m) in [(1, 1), (2, 1), (3, 10), (4, 10), (5, 10), (6, 1)] {
            let sim = simulate(&ScenarioConfig::new(s, 20, 3)).unwrap();
            assert_eq!(sim.data.series.len(), m);
            assert!(sim.data.series.iter().all(|s| s.len() == 20));
        }
    }

    #[test]
    fn cosinor_tpm_is_periodic() {
        let cfg = ScenarioConfig::new(6, 10, 1);
        for t in 1..=96 {
            let a = cfg.cosinor_tpm(t);
            let b = cfg.cosinor_tpm(t + 96);
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn time_of_day_cycles() {
        assert_eq!(time_of_day(1, 96), 1.0);
        assert_eq!(time_of_day(96, 96), 96.0);
        assert_eq!(time_of_day(97, 96), 1.0);
    }
}
