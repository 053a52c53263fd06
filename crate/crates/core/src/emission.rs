//! State-dependent (emission) distributions.
//!
//! Each state emits a vector of conditionally independent channels. A channel
//! is gamma (mean/shape parameterization), normal, or von Mises. Every family
//! has one *penalized* component (gamma/normal mean, von Mises concentration)
//! and one *nuisance* component updated by plain weighted maximum likelihood.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ChannelKind, ObservationSet, Series};
use crate::error::{Error, Result};
use crate::special::{bessel_ratio, bessel_ratio_derivative, digamma, inverse_bessel_ratio, ln_gamma, log_bessel_i0, trigamma};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Zero step lengths are floored here before entering a gamma density.
pub const GAMMA_ZERO_FLOOR: f64 = 1e-8;
const MIN_WEIGHT: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gamma,
    Normal,
    VonMises,
}

impl Family {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gamma" => Ok(Family::Gamma),
            "normal" | "gaussian" => Ok(Family::Normal),
            "vonmises" | "von_mises" | "von-mises" | "vm" => Ok(Family::VonMises),
            other => Err(Error::Config(format!("unknown emission family '{other}'"))),
        }
    }

    pub fn natural_channel_kind(self) -> ChannelKind {
        match self {
            Family::Gamma => ChannelKind::Step,
            Family::Normal => ChannelKind::Real,
            Family::VonMises => ChannelKind::Angle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ChannelParams {
    Gamma { mean: f64, shape: f64 },
    Normal { mean: f64, sd: f64 },
    VonMises { mean: f64, kappa: f64 },
}

impl ChannelParams {
    pub fn family(&self) -> Family {
        match self {
            ChannelParams::Gamma { .. } => Family::Gamma,
            ChannelParams::Normal { .. } => Family::Normal,
            ChannelParams::VonMises { .. } => Family::VonMises,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ChannelParams::Gamma { mean, shape } => mean > 0.0 && shape > 0.0 && mean.is_finite() && shape.is_finite(),
            ChannelParams::Normal { mean, sd } => mean.is_finite() && sd > 0.0 && sd.is_finite(),
            ChannelParams::VonMises { mean, kappa } => {
                mean > -PI && mean <= PI && kappa >= 0.0 && kappa.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid emission parameters {self:?}")))
        }
    }

    pub fn log_density(&self, y: f64) -> f64 {
        match *self {
            ChannelParams::Gamma { mean, shape } => {
                let y = y.max(GAMMA_ZERO_FLOOR);
                (shape - 1.0) * y.ln() - shape * y / mean + shape * (shape / mean).ln() - ln_gamma(shape)
            }
            ChannelParams::Normal { mean, sd } => {
                let z = (y - mean) / sd;
                -0.5 * z * z - sd.ln() - 0.5 * LN_2PI
            }
            ChannelParams::VonMises { mean, kappa } => {
                kappa * (y - mean).cos() - LN_2PI - log_bessel_i0(kappa)
            }
        }
    }

    /// The component subject to the fusion penalty.
    pub fn penalized(&self) -> f64 {
        match *self {
            ChannelParams::Gamma { mean, .. } | ChannelParams::Normal { mean, .. } => mean,
            ChannelParams::VonMises { kappa, .. } => kappa,
        }
    }

    pub fn with_penalized(mut self, v: f64) -> Self {
        match &mut self {
            ChannelParams::Gamma { mean, .. } | ChannelParams::Normal { mean, .. } => *mean = v,
            ChannelParams::VonMises { kappa, .. } => *kappa = v,
        }
        self
    }

    /// Lower bound of the penalized component.
    pub fn penalized_lower_bound(&self) -> f64 {
        match self {
            ChannelParams::Gamma { .. } => 1e-8,
            ChannelParams::Normal { .. } => f64::NEG_INFINITY,
            ChannelParams::VonMises { .. } => 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ChannelParams::Gamma { mean, shape } => {
                Gamma::new(shape, mean / shape).expect("valid gamma").sample(rng)
            }
            ChannelParams::Normal { mean, sd } => Normal::new(mean, sd).expect("valid normal").sample(rng),
            ChannelParams::VonMises { mean, kappa } => sample_von_mises(mean, kappa, rng),
        }
    }

    /// Expected weighted log-likelihood Σ_t w_t log f(y_t) from sufficient statistics.
    pub fn weighted_loglik(&self, st: &ChannelStats) -> f64 {
        if st.w <= 0.0 {
            return 0.0;
        }
        match *self {
            ChannelParams::Gamma { mean, shape } => {
                st.w * (shape * (shape / mean).ln() - ln_gamma(shape)) + (shape - 1.0) * st.log_sum
                    - shape * st.sum / mean
            }
            ChannelParams::Normal { mean, sd } => {
                let ss = st.sq_sum - 2.0 * mean * st.sum + mean * mean * st.w;
                -st.w * (sd.ln() + 0.5 * LN_2PI) - ss / (2.0 * sd * sd)
            }
            ChannelParams::VonMises { mean, kappa } => {
                kappa * (mean.cos() * st.cos_sum + mean.sin() * st.sin_sum)
                    - st.w * (LN_2PI + log_bessel_i0(kappa))
            }
        }
    }

    /// Value, first and second derivative of the weighted log-likelihood as a
    /// function of the penalized component, other components held fixed.
    pub fn penalized_profile(&self, st: &ChannelStats, v: f64) -> (f64, f64, f64) {
        if st.w <= MIN_WEIGHT {
            return (0.0, 0.0, 0.0);
        }
        match *self {
            ChannelParams::Gamma { shape, .. } => {
                let val = -shape * st.w * v.ln() - shape * st.sum / v;
                let d1 = shape * (st.sum - st.w * v) / (v * v);
                let d2 = shape * (st.w * v - 2.0 * st.sum) / (v * v * v);
                (val, d1, d2)
            }
            ChannelParams::Normal { sd, .. } => {
                let s2 = sd * sd;
                let val = -(st.w * v * v - 2.0 * v * st.sum) / (2.0 * s2);
                (val, (st.sum - st.w * v) / s2, -st.w / s2)
            }
            ChannelParams::VonMises { mean, .. } => {
                let r = mean.cos() * st.cos_sum + mean.sin() * st.sin_sum;
                let val = v * r - st.w * log_bessel_i0(v);
                (val, r - st.w * bessel_ratio(v), -st.w * bessel_ratio_derivative(v))
            }
        }
    }

    /// Full weighted maximum-likelihood update of both components.
    pub fn mle_update(&self, st: &ChannelStats) -> Self {
        if st.w <= MIN_WEIGHT {
            return *self;
        }
        let located = match *self {
            ChannelParams::Gamma { shape, .. } => ChannelParams::Gamma {
                mean: (st.sum / st.w).max(GAMMA_ZERO_FLOOR),
                shape,
            },
            ChannelParams::Normal { sd, .. } => ChannelParams::Normal {
                mean: st.sum / st.w,
                sd,
            },
            ChannelParams::VonMises { kappa, .. } => ChannelParams::VonMises {
                mean: circular_mean(st.sin_sum, st.cos_sum),
                kappa,
            },
        };
        match located {
            ChannelParams::VonMises { mean, .. } => {
                let r = (mean.cos() * st.cos_sum + mean.sin() * st.sin_sum) / st.w;
                ChannelParams::VonMises {
                    mean,
                    kappa: inverse_bessel_ratio(r).min(1e6),
                }
            }
            other => other.nuisance_update(st),
        }
    }

    /// Weighted maximum-likelihood update of the nuisance component only,
    /// keeping the penalized component fixed. Never decreases the weighted
    /// log-likelihood.
    pub fn nuisance_update(&self, st: &ChannelStats) -> Self {
        if st.w <= MIN_WEIGHT {
            return *self;
        }
        let cand = match *self {
            ChannelParams::Gamma { mean, shape } => ChannelParams::Gamma {
                mean,
                shape: gamma_shape_given_mean(st, mean, shape),
            },
            ChannelParams::Normal { mean, .. } => {
                let ss = (st.sq_sum - 2.0 * mean * st.sum + mean * mean * st.w).max(0.0);
                ChannelParams::Normal {
                    mean,
                    sd: (ss / st.w).sqrt().max(1e-8),
                }
            }
            ChannelParams::VonMises { kappa, .. } => ChannelParams::VonMises {
                mean: circular_mean(st.sin_sum, st.cos_sum),
                kappa,
            },
        };
        if cand.weighted_loglik(st) >= self.weighted_loglik(st) {
            cand
        } else {
            *self
        }
    }
}

fn circular_mean(sin_sum: f64, cos_sum: f64) -> f64 {
    if sin_sum == 0.0 && cos_sum == 0.0 {
        return 0.0;
    }
    let m = sin_sum.atan2(cos_sum);
    if m <= -PI {
        PI
    } else {
        m
    }
}

/// Maximizes the weighted gamma log-likelihood over the shape with the mean fixed.
/// Solves log s − ψ(s) = r with Newton's method on log s.
fn gamma_shape_given_mean(st: &ChannelStats, mean: f64, current: f64) -> f64 {
    let r = mean.ln() - 1.0 - st.log_sum / st.w + st.sum / (mean * st.w);
    if !(r > 0.0) || !r.is_finite() {
        return current;
    }
    let mut s = (3.0 - r + ((r - 3.0).powi(2) + 24.0 * r).sqrt()) / (12.0 * r);
    if !s.is_finite() || s <= 0.0 {
        s = current;
    }
    let mut x = s.ln();
    for _ in 0..100 {
        let s = x.exp();
        let h = s.ln() - digamma(s) - r;
        // d/dx (log s − ψ(s)) = 1 − s ψ₁(s)
        let dh = 1.0 - s * trigamma(s);
        if dh == 0.0 {
            break;
        }
        let step = (h / dh).clamp(-2.0, 2.0);
        x -= step;
        if step.abs() < 1e-13 {
            break;
        }
    }
    x.exp().clamp(1e-4, 1e7)
}

/// Best & Fisher (1979) rejection sampler.
fn sample_von_mises<R: Rng + ?Sized>(mean: f64, kappa: f64, rng: &mut R) -> f64 {
    let wrap = |x: f64| crate::wrap_angle(x);
    if kappa < 1e-8 {
        return wrap(rng.random_range(-PI..PI));
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.random();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        let u2: f64 = rng.random();
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let u3: f64 = rng.random();
            let theta = if u3 > 0.5 { f.acos() } else { -f.acos() };
            return wrap(mean + theta);
        }
    }
}

/// Weighted sufficient statistics of one channel for one state.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ChannelStats {
    pub w: f64,
    pub sum: f64,
    pub log_sum: f64,
    pub sq_sum: f64,
    pub cos_sum: f64,
    pub sin_sum: f64,
}

impl ChannelStats {
    pub fn add(&mut self, family: Family, y: f64, w: f64) {
        self.w += w;
        match family {
            Family::Gamma => {
                let y = y.max(GAMMA_ZERO_FLOOR);
                self.sum += w * y;
                self.log_sum += w * y.ln();
            }
            Family::Normal => {
                self.sum += w * y;
                self.sq_sum += w * y * y;
            }
            Family::VonMises => {
                self.cos_sum += w * y.cos();
                self.sin_sum += w * y.sin();
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEmission {
    pub channels: Vec<ChannelParams>,
}

impl StateEmission {
    pub fn log_density(&self, row: &[Option<f64>]) -> f64 {
        self.channels
            .iter()
            .zip(row)
            .filter_map(|(p, y)| y.map(|y| p.log_density(y)))
            .sum()
    }

    pub fn penalized_vector(&self) -> Vec<f64> {
        self.channels.iter().map(ChannelParams::penalized).collect()
    }
}

/// Log-density with the parameter-only terms evaluated once.
enum DensityTerms {
    Gamma { a: f64, rate: f64, c: f64 },
    Normal { mean: f64, prec: f64, c: f64 },
    VonMises { mean: f64, kappa: f64, c: f64 },
}

impl DensityTerms {
    fn new(p: &ChannelParams) -> Self {
        match *p {
            ChannelParams::Gamma { mean, shape } => DensityTerms::Gamma {
                a: shape - 1.0,
                rate: shape / mean,
                c: shape * (shape / mean).ln() - ln_gamma(shape),
            },
            ChannelParams::Normal { mean, sd } => DensityTerms::Normal {
                mean,
                prec: 1.0 / (sd * sd),
                c: -sd.ln() - 0.5 * LN_2PI,
            },
            ChannelParams::VonMises { mean, kappa } => DensityTerms::VonMises {
                mean,
                kappa,
                c: -LN_2PI - log_bessel_i0(kappa),
            },
        }
    }

    /// `ly` is ln y after flooring, used by the gamma family only.
    #[inline]
    fn eval(&self, y: f64, ly: f64) -> f64 {
        match *self {
            DensityTerms::Gamma { a, rate, c } => a * ly - rate * y.max(GAMMA_ZERO_FLOOR) + c,
            DensityTerms::Normal { mean, prec, c } => -0.5 * (y - mean) * (y - mean) * prec + c,
            DensityTerms::VonMises { mean, kappa, c } => kappa * (y - mean).cos() + c,
        }
    }
}

/// Per-state emission parameters; all states share the same channel families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionParams {
    pub states: Vec<StateEmission>,
}

impl EmissionParams {
    pub fn new(states: Vec<StateEmission>) -> Result<Self> {
        let e = Self { states };
        e.validate()?;
        Ok(e)
    }

    /// Univariate gamma emissions from parallel mean/shape slices.
    pub fn gamma(means: &[f64], shapes: &[f64]) -> Result<Self> {
        if means.len() != shapes.len() {
            return Err(Error::Dimension("means and shapes differ in length".into()));
        }
        Self::new(
            means
                .iter()
                .zip(shapes)
                .map(|(&mean, &shape)| StateEmission {
                    channels: vec![ChannelParams::Gamma { mean, shape }],
                })
                .collect(),
        )
    }

    /// Univariate normal emissions.
    pub fn normal(means: &[f64], sds: &[f64]) -> Result<Self> {
        if means.len() != sds.len() {
            return Err(Error::Dimension("means and sds differ in length".into()));
        }
        Self::new(
            means
                .iter()
                .zip(sds)
                .map(|(&mean, &sd)| StateEmission {
                    channels: vec![ChannelParams::Normal { mean, sd }],
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .states
            .first()
            .ok_or_else(|| Error::Dimension("emission parameters need at least one state".into()))?;
        let fams = first.channels.iter().map(ChannelParams::family).collect::<Vec<_>>();
        if fams.is_empty() {
            return Err(Error::Dimension("emission state has no channels".into()));
        }
        for (j, s) in self.states.iter().enumerate() {
            let f = s.channels.iter().map(ChannelParams::family).collect::<Vec<_>>();
            if f != fams {
                return Err(Error::Dimension(format!(
                    "state {j} has channel families {f:?}, expected {fams:?}"
                )));
            }
            for p in &s.channels {
                p.validate()?;
            }
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn families(&self) -> Vec<Family> {
        self.states[0].channels.iter().map(ChannelParams::family).collect()
    }

    /// dim(θ₁): scalar parameters per state (two per channel).
    pub fn params_per_state(&self) -> usize {
        2 * self.states[0].channels.len()
    }

    pub fn check_against(&self, obs: &ObservationSet) -> Result<()> {
        if self.states[0].channels.len() != obs.num_channels() {
            return Err(Error::Dimension(format!(
                "emissions have {} channels, data has {}",
                self.states[0].channels.len(),
                obs.num_channels()
            )));
        }
        Ok(())
    }

    /// `T × N` row-major matrix of log f_j(y_t); missing channels contribute 0.
    pub fn log_emission_matrix(&self, series: &Series) -> Vec<f64> {
        let n = self.states.len();
        let mut out = vec![0.0; series.len() * n];
        let n_ch = self.states.first().map_or(0, |s| s.channels.len());
        for c in 0..n_ch {
            let terms: Vec<DensityTerms> = self.states.iter().map(|s| DensityTerms::new(&s.channels[c])).collect();
            for (t, row) in series.values.iter().enumerate() {
                let Some(y) = row[c] else { continue };
                let ly = match terms[0] {
                    DensityTerms::Gamma { .. } => y.max(GAMMA_ZERO_FLOOR).ln(),
                    _ => 0.0,
                };
                for (j, d) in terms.iter().enumerate() {
                    out[t * n + j] += d.eval(y, ly);
                }
            }
        }
        out
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            states: perm.iter().map(|&i| self.states[i].clone()).collect(),
        }
    }
}

/// Accumulates per-state, per-channel weighted statistics.
pub fn accumulate_stats(
    obs: &ObservationSet,
    families: &[Family],
    posteriors: &[Vec<f64>],
    n: usize,
) -> Vec<Vec<ChannelStats>> {
    let mut stats = vec![vec![ChannelStats::default(); families.len()]; n];
    for (series, post) in obs.series.iter().zip(posteriors) {
        for (t, row) in series.values.iter().enumerate() {
            for (c, y) in row.iter().enumerate() {
                if let Some(y) = *y {
                    for (j, st) in stats.iter_mut().enumerate() {
                        st[c].add(families[c], y, post[t * n + j]);
                    }
                }
            }
        }
    }
    stats
}
