//! Information criteria, baseline order selection and the hyperparameter
//! search for the penalized fit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ObservationSet;
use crate::em::{fit_dpmle, fit_mle, DpmleFit, FitOptions, MleFit};
use crate::emission::{ChannelParams, EmissionParams, Family, StateEmission};
use crate::error::{Error, Result};
use crate::matrix::SquareMatrix;
use crate::scad::PenaltyConfig;
use crate::transition::{stationary_distribution, ParameterVector, TransitionModel};

/// k = dim(θ₁)·N̂ + N̂(N̂−1), with the transition block multiplied by C+1 and
/// N̂−1 initial probabilities added for covariate models.
pub fn num_params(n_hat: usize, emission_dim: usize, covariates: usize, nonstationary: bool) -> usize {
    let trans = n_hat * n_hat.saturating_sub(1);
    if nonstationary {
        emission_dim * n_hat + trans * (covariates + 1) + n_hat.saturating_sub(1)
    } else {
        emission_dim * n_hat + trans
    }
}

pub fn aic(loglik: f64, k: usize) -> f64 {
    -2.0 * loglik + 2.0 * k as f64
}

pub fn bic(loglik: f64, k: usize, n: usize) -> f64 {
    -2.0 * loglik + k as f64 * (n as f64).ln()
}

/// BIC-form score of a penalized fit, used to pick (λ, C_N).
pub fn nic(loglik: f64, k: usize, n: usize) -> f64 {
    bic(loglik, k, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Aic,
    Bic,
    Nic,
    DpmleStationary,
    DpmleNonstationary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub order: usize,
    /// Index of the starting value, for penalized fits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<usize>,
    pub lambda: Option<f64>,
    pub c_n: Option<f64>,
    pub loglik: f64,
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub method: Method,
    pub candidates: Vec<Candidate>,
    /// Index into `candidates` of the minimizer.
    pub selected: usize,
}

impl CriterionReport {
    /// Picks the minimum; ties go to smaller k, then smaller λ, then the
    /// earlier candidate.
    pub fn new(method: Method, candidates: Vec<Candidate>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Fitting(format!("no candidates for {method:?}")));
        }
        if let Some(c) = candidates.iter().find(|c| !c.value.is_finite()) {
            return Err(Error::Numeric(format!("criterion value for order {} is not finite", c.order)));
        }
        let mut selected = 0;
        for (i, c) in candidates.iter().enumerate().skip(1) {
            let b = &candidates[selected];
            let better = c.value < b.value
                || (c.value == b.value
                    && (c.k < b.k || (c.k == b.k && c.lambda.unwrap_or(0.0) < b.lambda.unwrap_or(0.0))));
            if better {
                selected = i;
            }
        }
        Ok(Self {
            method,
            candidates,
            selected,
        })
    }

    pub fn best(&self) -> &Candidate {
        &self.candidates[self.selected]
    }
}

/// Which log-likelihood enters NIC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NicLikelihood {
    /// The penalized estimate at the upper order.
    #[default]
    Unmerged,
    /// The merged model of order N̂.
    Merged,
}

/// Per-state parameter template for random initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionSpec {
    pub families: Vec<Family>,
}

impl EmissionSpec {
    pub fn new(families: Vec<Family>) -> Self {
        Self { families }
    }

    pub fn dim(&self) -> usize {
        2 * self.families.len()
    }
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo.ln()..hi.ln()).exp()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let f = pos - lo as f64;
    sorted[lo] * (1.0 - f) + sorted[hi] * f
}

/// Random starting values: means at jittered stratified data quantiles,
/// shapes and concentrations log-uniform on [0.5, 20], Γ diagonal uniform
/// on [0.6, 0.95] with the remainder split at random.
pub fn random_init<R: Rng>(obs: &ObservationSet, n: usize, spec: &EmissionSpec, rng: &mut R) -> Result<ParameterVector> {
    if n == 0 {
        return Err(Error::Config("order must be at least 1".into()));
    }
    if spec.families.len() != obs.num_channels() {
        return Err(Error::Dimension(format!(
            "emission spec has {} channels, data has {}",
            spec.families.len(),
            obs.num_channels()
        )));
    }
    let mut states: Vec<StateEmission> = (0..n).map(|_| StateEmission { channels: Vec::new() }).collect();
    for (c, &fam) in spec.families.iter().enumerate() {
        let mut vals = obs.channel_values(c);
        if vals.is_empty() {
            return Err(Error::InvalidData(format!("channel {c} has no observations")));
        }
        vals.sort_by(f64::total_cmp);
        let spread = {
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt().max(1e-6)
        };
        for (j, st) in states.iter_mut().enumerate() {
            let q = (j as f64 + rng.random_range(0.1..0.9)) / n as f64;
            let loc = quantile(&vals, q);
            let p = match fam {
                Family::Gamma => ChannelParams::Gamma {
                    mean: loc.max(1e-3),
                    shape: log_uniform(rng, 0.5, 20.0),
                },
                Family::Normal => ChannelParams::Normal {
                    mean: loc,
                    sd: spread * log_uniform(rng, 0.1, 1.0),
                },
                Family::VonMises => ChannelParams::VonMises {
                    mean: if rng.random_bool(0.5) { 0.0 } else { std::f64::consts::PI },
                    kappa: log_uniform(rng, 0.5, 20.0),
                },
            };
            st.channels.push(p);
        }
    }
    let mut gamma = SquareMatrix::zeros(n);
    for i in 0..n {
        if n == 1 {
            gamma[(0, 0)] = 1.0;
            break;
        }
        let d = rng.random_range(0.6..0.95);
        let w: Vec<f64> = (0..n - 1).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = w.iter().sum();
        let mut k = 0;
        for j in 0..n {
            gamma[(i, j)] = if i == j {
                d
            } else {
                k += 1;
                (1.0 - d) * w[k - 1] / s
            };
        }
    }
    let emissions = EmissionParams::new(states)?;
    let delta = stationary_distribution(&gamma)?;
    ParameterVector::new(delta, TransitionModel::Homogeneous { gamma }, emissions)
}

/// Seed of restart `r` at order `n`, independent of scheduling.
fn restart_seed(seed: u64, n: usize, r: usize) -> u64 {
    seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (r as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Homogeneous EM fits from `restarts` random starting values at order `n`,
/// best first, with fits that reached the same optimum kept once.
pub fn mle_starts(
    obs: &ObservationSet,
    n: usize,
    spec: &EmissionSpec,
    restarts: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<Vec<MleFit>> {
    let mut homogeneous = *opts;
    homogeneous.nonstationary = false;
    let fits: Vec<Option<MleFit>> = (0..restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(seed, n, r));
            let init = random_init(obs, n, spec, &mut rng).ok()?;
            fit_mle(obs, &init, &homogeneous).ok()
        })
        .collect();
    let mut fits: Vec<MleFit> = fits.into_iter().flatten().filter(|f| f.loglik.is_finite()).collect();
    if fits.is_empty() {
        return Err(Error::Fitting(format!("every restart failed at order {n}")));
    }
    fits.sort_by(|a, b| b.loglik.total_cmp(&a.loglik));
    let mut kept: Vec<MleFit> = Vec::with_capacity(fits.len());
    for f in fits {
        if !kept.iter().any(|k| same_optimum(k, &f)) {
            kept.push(f);
        }
    }
    Ok(kept)
}

fn same_optimum(a: &MleFit, b: &MleFit) -> bool {
    let sorted = |f: &MleFit| {
        let mut v: Vec<Vec<f64>> = f.params.emissions.states.iter().map(|s| s.penalized_vector()).collect();
        v.sort_by(|x, y| x.iter().zip(y).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
        v
    };
    let (va, vb) = (sorted(a), sorted(b));
    (a.loglik - b.loglik).abs() <= 1e-6 * a.loglik.abs().max(1.0)
        && va.iter().flatten().zip(vb.iter().flatten()).all(|(p, q)| (p - q).abs() <= 1e-3 * p.abs().max(1.0))
}

/// Best of `restarts` EM runs from random starting values at order `n`.
pub fn best_mle(
    obs: &ObservationSet,
    n: usize,
    spec: &EmissionSpec,
    restarts: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<MleFit> {
    let best = mle_starts(obs, n, spec, restarts, seed, opts)?.swap_remove(0);
    if opts.nonstationary {
        fit_mle(obs, &best.params, opts)
    } else {
        Ok(best)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IcSelection {
    pub fits: Vec<MleFit>,
    pub aic: CriterionReport,
    pub bic: CriterionReport,
}

impl IcSelection {
    pub fn fit_for(&self, order: usize) -> Option<&MleFit> {
        self.fits.iter().find(|f| f.params.num_states() == order)
    }
}

/// Fits each order from random restarts and scores the best fits by AIC and BIC.
pub fn ic_order_select(
    obs: &ObservationSet,
    orders: &[usize],
    spec: &EmissionSpec,
    restarts: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<IcSelection> {
    if orders.is_empty() {
        return Err(Error::Config("order list is empty".into()));
    }
    let n_obs = obs.total_len();
    let mut fits = Vec::with_capacity(orders.len());
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for &n in orders {
        let fit = best_mle(obs, n, spec, restarts, seed, opts)?;
        let k = num_params(n, spec.dim(), obs.num_covariates(), opts.nonstationary);
        let cand = |value| Candidate {
            order: n,
            start: None,
            lambda: None,
            c_n: None,
            loglik: fit.loglik,
            k,
            value,
        };
        a.push(cand(aic(fit.loglik, k)));
        b.push(cand(bic(fit.loglik, k, n_obs)));
        fits.push(fit);
    }
    Ok(IcSelection {
        fits,
        aic: CriterionReport::new(Method::Aic, a)?,
        bic: CriterionReport::new(Method::Bic, b)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchBounds {
    /// Interval of log(Mλ).
    pub log_m_lambda: (f64, f64),
    pub c_n: (f64, f64),
}

impl Default for SearchBounds {
    fn default() -> Self {
        Self {
            log_m_lambda: (1.0, 5.0),
            c_n: (1.0, 5.0),
        }
    }
}

impl SearchBounds {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.log_m_lambda;
        let (c, d) = self.c_n;
        if !(a <= b) || !(c <= d) || !(c > 0.0) || !a.is_finite() || !b.is_finite() || !d.is_finite() {
            return Err(Error::Config(format!("invalid search bounds {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub draws: usize,
    pub bounds: SearchBounds,
    pub seed: u64,
    pub likelihood: NicLikelihood,
    /// SCAD shape constant.
    pub a: f64,
    /// Relative gap below which fitted states count as one.
    pub merge_tol: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            draws: 50,
            bounds: SearchBounds::default(),
            seed: 0,
            likelihood: NicLikelihood::default(),
            a: crate::scad::DEFAULT_A,
            merge_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NicSearch {
    pub best: DpmleFit,
    pub report: CriterionReport,
    /// Draws whose fit failed, with the error message.
    pub failures: Vec<(f64, f64, String)>,
}

/// Draws the (log Mλ, C_N) pairs of a search.
pub fn draw_hyperparameters(opts: &SearchOptions) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let sample = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
    (0..opts.draws.max(1))
        .map(|_| {
            let l = sample(&mut rng, opts.bounds.log_m_lambda);
            let c = sample(&mut rng, opts.bounds.c_n);
            (l, c)
        })
        .collect()
}

/// NIC score of a penalized fit.
pub fn nic_of(fit: &DpmleFit, obs: &ObservationSet, source: NicLikelihood, nonstationary: bool) -> (f64, usize, f64) {
    let dim = fit.params.emissions.params_per_state();
    let k = num_params(fit.n_hat, dim, obs.num_covariates(), nonstationary);
    let ll = match source {
        NicLikelihood::Unmerged => fit.loglik,
        NicLikelihood::Merged => fit.merged_loglik,
    };
    (nic(ll, k, obs.total_len()), k, ll)
}

/// Random search over (λ, C_N): one penalized fit per draw and starting
/// value, all scored together by NIC.
pub fn nic_search(
    obs: &ObservationSet,
    inits: &[ParameterVector],
    search: &SearchOptions,
    fit_opts: &FitOptions,
) -> Result<NicSearch> {
    search.bounds.validate()?;
    if inits.is_empty() {
        return Err(Error::Config("no starting values for the penalized fit".into()));
    }
    let m = obs.series.len();
    let draws = draw_hyperparameters(search);
    let jobs: Vec<(usize, f64, f64)> = draws
        .iter()
        .flat_map(|&(l, c)| (0..inits.len()).map(move |s| (s, l, c)))
        .collect();
    let results: Vec<Result<DpmleFit>> = jobs
        .par_iter()
        .map(|&(s, l, c)| {
            let mut pen = PenaltyConfig::from_log_m_lambda(l, c, m)?;
            pen.a = search.a;
            pen.merge_tol = search.merge_tol;
            pen.validate()?;
            fit_dpmle(obs, &inits[s], &pen, fit_opts)
        })
        .collect();
    let mut candidates = Vec::new();
    let mut fits = Vec::new();
    let mut failures = Vec::new();
    for (&(s, l, c), r) in jobs.iter().zip(results) {
        match r {
            Ok(fit) => {
                let (value, k, ll) = nic_of(&fit, obs, search.likelihood, fit_opts.nonstationary);
                candidates.push(Candidate {
                    order: fit.n_hat,
                    start: Some(s),
                    lambda: Some(fit.penalty.lambda),
                    c_n: Some(c),
                    loglik: ll,
                    k,
                    value,
                });
                fits.push(fit);
            }
            Err(e) => failures.push((l, c, e.to_string())),
        }
    }
    if fits.is_empty() {
        let msg = failures
            .iter()
            .map(|(l, c, e)| format!("(log Mλ = {l:.3}, C_N = {c:.3}): {e}"))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::Fitting(format!("every penalized fit failed: {msg}")));
    }
    let method = if fit_opts.nonstationary {
        Method::DpmleNonstationary
    } else {
        Method::DpmleStationary
    };
    let report = CriterionReport::new(method, candidates)?;
    let best = fits.swap_remove(report.selected);
    Ok(NicSearch { best, report, failures })
}

/// Full penalized order selection: homogeneous MLEs at `n_upper` from
/// `restarts` random starts serve as starting values for the (λ, C_N) search.
/// The covariate model is fitted when `fit_opts.nonstationary` is set.
pub fn dpmle_order_select(
    obs: &ObservationSet,
    spec: &EmissionSpec,
    n_upper: usize,
    restarts: usize,
    search: &SearchOptions,
    fit_opts: &FitOptions,
) -> Result<NicSearch> {
    let plain = obs.without_covariates();
    let starts = mle_starts(&plain, n_upper, spec, restarts, search.seed, fit_opts)?;
    let inits: Vec<ParameterVector> = starts.into_iter().map(|f| f.params).collect();
    if fit_opts.nonstationary {
        nic_search(obs, &inits, search, fit_opts)
    } else {
        nic_search(&plain, &inits, search, fit_opts)
    }
}
