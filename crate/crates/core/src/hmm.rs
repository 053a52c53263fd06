//! Forward–backward recursions, likelihood, decoding and occupancy.
//!
//! All recursions run in log space. Each step shifts by the running maximum
//! before exponentiating, so long series neither underflow nor overflow.

use crate::data::{ObservationSet, Series};
use crate::error::{Error, Result};
use crate::transition::{series_transitions, ParameterVector, SeriesTransitions};

/// Forward–backward output for one series, in scaled form. Matrices are
/// `T × N`, row-major. Row t of `alpha` is normalized to sum to one and
/// log α_t(j) = `log_scale_alpha[t]` + ln `alpha[t][j]`; likewise for β.
#[derive(Debug, Clone)]
pub struct SeriesFb {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub log_scale_alpha: Vec<f64>,
    pub log_scale_beta: Vec<f64>,
    pub loglik: f64,
    pub posterior: Vec<f64>,
    /// exp(log f_j(y_t) − max_k log f_k(y_t)).
    pub(crate) emis: Vec<f64>,
}

impl SeriesFb {
    pub fn len(&self, n: usize) -> usize {
        self.posterior.len() / n
    }

    pub fn log_alpha(&self, n: usize, t: usize, j: usize) -> f64 {
        self.log_scale_alpha[t] + self.alpha[t * n + j].ln()
    }

    pub fn log_beta(&self, n: usize, t: usize, j: usize) -> f64 {
        self.log_scale_beta[t] + self.beta[t * n + j].ln()
    }
}

#[derive(Debug, Clone)]
pub struct FbResult {
    pub n_states: usize,
    pub series: Vec<SeriesFb>,
    /// Σ over series of the per-series log-likelihoods.
    pub loglik: f64,
}

impl FbResult {
    /// P[S_t = j | y] for series `m`.
    pub fn posterior(&self, m: usize, t: usize, j: usize) -> f64 {
        self.series[m].posterior[t * self.n_states + j]
    }
}

/// Emissions shifted by their per-time maximum, and the shifts.
fn scaled_emissions(log_emis: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let len = log_emis.len() / n;
    let mut e = vec![0.0; len * n];
    let mut shift = vec![0.0; len];
    for t in 0..len {
        let row = &log_emis[t * n..(t + 1) * n];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        shift[t] = m;
        if m > f64::NEG_INFINITY {
            for (x, &l) in e[t * n..(t + 1) * n].iter_mut().zip(row) {
                *x = (l - m).exp();
            }
        }
    }
    (e, shift)
}

/// Normalized forward variables and their cumulative log scales.
fn forward_scaled(
    e: &[f64],
    shift: &[f64],
    delta: &[f64],
    trans: &SeriesTransitions<'_>,
    n: usize,
    series_idx: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let len = shift.len();
    let mut a = vec![0.0; len * n];
    let mut scale = vec![0.0; len];
    let mut acc = 0.0;
    for t in 0..len {
        let (prev, cur) = a.split_at_mut(t * n);
        let cur = &mut cur[..n];
        if t == 0 {
            for j in 0..n {
                cur[j] = delta[j] * e[j];
            }
        } else {
            let prev = &prev[(t - 1) * n..];
            let g = trans.at(t);
            for j in 0..n {
                let mut s = 0.0;
                for (i, &p) in prev.iter().enumerate() {
                    s += p * g[(i, j)];
                }
                cur[j] = s * e[t * n + j];
            }
        }
        let c: f64 = cur.iter().sum();
        if !(c > 0.0) || !c.is_finite() || shift[t] == f64::NEG_INFINITY {
            return Err(Error::Underflow { series: series_idx, t });
        }
        cur.iter_mut().for_each(|x| *x /= c);
        acc += c.ln() + shift[t];
        scale[t] = acc;
    }
    if !acc.is_finite() {
        return Err(Error::Underflow {
            series: series_idx,
            t: len - 1,
        });
    }
    Ok((a, scale))
}

fn backward_scaled(e: &[f64], shift: &[f64], trans: &SeriesTransitions<'_>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let len = shift.len();
    let mut b = vec![1.0; len * n];
    let mut scale = vec![0.0; len];
    let mut acc = 0.0;
    let mut w = vec![0.0; n];
    for t in (0..len.saturating_sub(1)).rev() {
        let (cur, next) = b.split_at_mut((t + 1) * n);
        let next = &next[..n];
        for k in 0..n {
            w[k] = e[(t + 1) * n + k] * next[k];
        }
        let g = trans.at(t + 1);
        let cur = &mut cur[t * n..];
        let mut mx = 0.0_f64;
        for i in 0..n {
            let mut s = 0.0;
            for (k, &x) in w.iter().enumerate() {
                s += g[(i, k)] * x;
            }
            cur[i] = s;
            mx = mx.max(s);
        }
        if mx > 0.0 && mx.is_finite() {
            cur.iter_mut().for_each(|x| *x /= mx);
            acc += mx.ln() + shift[t + 1];
        } else {
            acc = f64::NEG_INFINITY;
        }
        scale[t] = acc;
    }
    (b, scale)
}

pub(crate) fn series_fb_from_log_emis(
    log_emis: &[f64],
    delta: &[f64],
    trans: &SeriesTransitions<'_>,
    n: usize,
    series_idx: usize,
) -> Result<SeriesFb> {
    let (emis, shift) = scaled_emissions(log_emis, n);
    let (alpha, log_scale_alpha) = forward_scaled(&emis, &shift, delta, trans, n, series_idx)?;
    let (beta, log_scale_beta) = backward_scaled(&emis, &shift, trans, n);
    let loglik = *log_scale_alpha.last().unwrap_or(&0.0);
    let mut posterior: Vec<f64> = alpha.iter().zip(&beta).map(|(a, b)| a * b).collect();
    normalize_rows(&mut posterior, n);
    Ok(SeriesFb {
        alpha,
        beta,
        log_scale_alpha,
        log_scale_beta,
        loglik,
        posterior,
        emis,
    })
}

/// Log-likelihood of one series from the forward pass.
pub(crate) fn forward_loglik(
    log_emis: &[f64],
    delta: &[f64],
    trans: &SeriesTransitions<'_>,
    n: usize,
    series_idx: usize,
) -> Result<f64> {
    let (emis, shift) = scaled_emissions(log_emis, n);
    let (_, scale) = forward_scaled(&emis, &shift, delta, trans, n, series_idx)?;
    Ok(*scale.last().unwrap_or(&0.0))
}

fn normalize_rows(p: &mut [f64], n: usize) {
    for row in p.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|x| *x /= s);
        }
    }
}

fn prepare<'a>(
    obs: &ObservationSet,
    params: &'a ParameterVector,
    series: &Series,
) -> Result<(Vec<f64>, SeriesTransitions<'a>)> {
    params.check_against(obs)?;
    let le = params.emissions.log_emission_matrix(series);
    if le.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::Numeric(format!("emission density not evaluable in series '{}'", series.id)));
    }
    Ok((le, series_transitions(&params.transition, series)?))
}

pub fn forward_backward(obs: &ObservationSet, params: &ParameterVector) -> Result<FbResult> {
    let n = params.num_states();
    let mut series = Vec::with_capacity(obs.series.len());
    let mut total = 0.0;
    for (m, s) in obs.series.iter().enumerate() {
        let (le, tr) = prepare(obs, params, s)?;
        let fb = series_fb_from_log_emis(&le, &params.delta, &tr, n, m)?;
        total += fb.loglik;
        series.push(fb);
    }
    Ok(FbResult {
        n_states: n,
        series,
        loglik: total,
    })
}

/// Total log-likelihood from the forward pass only.
pub fn log_likelihood(obs: &ObservationSet, params: &ParameterVector) -> Result<f64> {
    let n = params.num_states();
    let mut total = 0.0;
    for (m, s) in obs.series.iter().enumerate() {
        let (le, tr) = prepare(obs, params, s)?;
        total += forward_loglik(&le, &params.delta, &tr, n, m)?;
    }
    Ok(total)
}

/// Most likely state path per series (0-based labels). Ties go to the lower index.
pub fn viterbi(obs: &ObservationSet, params: &ParameterVector) -> Result<Vec<Vec<usize>>> {
    let n = params.num_states();
    let mut paths = Vec::with_capacity(obs.series.len());
    for (m, s) in obs.series.iter().enumerate() {
        let (le, tr) = prepare(obs, params, s)?;
        let len = s.len();
        let mut score = vec![0.0; n];
        for j in 0..n {
            score[j] = params.delta[j].ln() + le[j];
        }
        let mut back = vec![0usize; len * n];
        let mut next = vec![0.0; n];
        for t in 1..len {
            let g = tr.at(t);
            for j in 0..n {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for i in 0..n {
                    let v = score[i] + g[(i, j)].ln();
                    if v > best {
                        best = v;
                        arg = i;
                    }
                }
                next[j] = best + le[t * n + j];
                back[t * n + j] = arg;
            }
            if next.iter().all(|&x| x == f64::NEG_INFINITY) {
                return Err(Error::Underflow { series: m, t });
            }
            std::mem::swap(&mut score, &mut next);
        }
        let mut state = 0;
        let mut best = f64::NEG_INFINITY;
        for (j, &v) in score.iter().enumerate() {
            if v > best {
                best = v;
                state = j;
            }
        }
        if best == f64::NEG_INFINITY {
            return Err(Error::Underflow { series: m, t: len - 1 });
        }
        let mut path = vec![0; len];
        path[len - 1] = state;
        for t in (1..len).rev() {
            state = back[t * n + state];
            path[t - 1] = state;
        }
        paths.push(path);
    }
    Ok(paths)
}

/// Time-averaged posterior state probabilities, pooled over series with
/// weights proportional to series length.
pub fn occupancy_from_fb(fb: &FbResult) -> Vec<f64> {
    let n = fb.n_states;
    let mut occ = vec![0.0; n];
    let mut total = 0usize;
    for s in &fb.series {
        for row in s.posterior.chunks(n) {
            for (o, p) in occ.iter_mut().zip(row) {
                *o += p;
            }
        }
        total += s.posterior.len() / n;
    }
    occ.iter_mut().for_each(|o| *o /= total as f64);
    occ
}

pub fn occupancy_estimate(obs: &ObservationSet, params: &ParameterVector) -> Result<Vec<f64>> {
    Ok(occupancy_from_fb(&forward_backward(obs, params)?))
}
