//! Double-penalized EM: E-step statistics, transition and emission M-steps,
//! Group-Sort-Fuse ordering, state counting and merging.
//!
//! The penalized objective is
//! `ℓ(Ψ) + C_N Σ_j log π_j − Σ_a p_λ(η_a)`, where `π` is the stationary
//! distribution (homogeneous models) or the time-averaged posterior occupancy
//! (covariate models) and `η_a` are consecutive gaps between the penalized
//! emission parameters under the GSF ordering.

use nalgebra::{DMatrix, DVector};
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::ObservationSet;
use crate::emission::{accumulate_stats, ChannelParams, ChannelStats, EmissionParams, StateEmission};
use crate::error::{Error, Result};
use crate::hmm::series_fb_from_log_emis;
use crate::matrix::SquareMatrix;
use crate::optim::{maximize_bfgs, maximize_bfgs_from, maximize_projected_newton, OptimOptions};
use crate::scad::PenaltyConfig;
use crate::transition::{
    series_transitions, softmax_into, stationary_distribution, transition_matrix_at, LogitCoefficients,
    ParameterVector, TransitionModel,
};

/// Smoothing of the Euclidean norm in the multivariate fusion step.
const NORM_SMOOTHING: f64 = 1e-9;

/// Posterior state and transition weights.
#[derive(Debug, Clone)]
pub struct EStepStats {
    pub n_states: usize,
    /// Per series, `T × N` row-major: û_j(t).
    pub u: Vec<Vec<f64>>,
    /// Per series, `T × N × N`: v̂_jk(t) for the move from `t−1` to `t`.
    /// The block at `t = 0` is zero.
    pub v: Vec<Vec<f64>>,
    pub loglik: f64,
}

impl EStepStats {
    /// Σ_m û(1) over series.
    pub fn initial_weights(&self) -> Vec<f64> {
        let n = self.n_states;
        let mut w = vec![0.0; n];
        for u in &self.u {
            for (a, b) in w.iter_mut().zip(&u[..n]) {
                *a += b;
            }
        }
        w
    }

    /// Σ_t û_j(t) pooled over series.
    pub fn state_totals(&self) -> Vec<f64> {
        let n = self.n_states;
        let mut w = vec![0.0; n];
        for u in &self.u {
            for row in u.chunks(n) {
                for (a, b) in w.iter_mut().zip(row) {
                    *a += b;
                }
            }
        }
        w
    }

    /// Σ_t v̂_jk(t) pooled over series.
    pub fn transition_totals(&self) -> SquareMatrix {
        let n = self.n_states;
        let mut out = SquareMatrix::zeros(n);
        for v in &self.v {
            for block in v.chunks(n * n).skip(1) {
                for (i, x) in block.iter().enumerate() {
                    out[(i / n, i % n)] += x;
                }
            }
        }
        out
    }

    /// Pooled time-averaged occupancy π̂.
    pub fn occupancy(&self) -> Vec<f64> {
        let total: usize = self.u.iter().map(|u| u.len() / self.n_states).sum();
        self.state_totals().into_iter().map(|x| x / total as f64).collect()
    }
}

pub fn e_step(obs: &ObservationSet, params: &ParameterVector) -> Result<EStepStats> {
    params.check_against(obs)?;
    let n = params.num_states();
    let mut u = Vec::with_capacity(obs.series.len());
    let mut v = Vec::with_capacity(obs.series.len());
    let mut loglik = 0.0;
    let mut b = vec![0.0; n];
    for (m, series) in obs.series.iter().enumerate() {
        let le = params.emissions.log_emission_matrix(series);
        if le.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(Error::Numeric(format!("emission density not evaluable in series '{}'", series.id)));
        }
        let tr = series_transitions(&params.transition, series)?;
        let fb = series_fb_from_log_emis(&le, &params.delta, &tr, n, m)?;
        let len = series.len();
        let mut vs = vec![0.0; len * n * n];
        for t in 1..len {
            let a = &fb.alpha[(t - 1) * n..t * n];
            for k in 0..n {
                b[k] = fb.emis[t * n + k] * fb.beta[t * n + k];
            }
            let g = tr.at(t);
            let block = &mut vs[t * n * n..(t + 1) * n * n];
            let mut z = 0.0;
            for i in 0..n {
                for k in 0..n {
                    let x = a[i] * g[(i, k)] * b[k];
                    block[i * n + k] = x;
                    z += x;
                }
            }
            if z > 0.0 {
                block.iter_mut().for_each(|x| *x /= z);
            }
        }
        loglik += fb.loglik;
        u.push(fb.posterior);
        v.push(vs);
    }
    Ok(EStepStats {
        n_states: n,
        u,
        v,
        loglik,
    })
}

/// Result of the homogeneous transition M-step.
#[derive(Debug, Clone)]
pub struct TransitionUpdate {
    pub gamma: SquareMatrix,
    pub pi: Vec<f64>,
    pub converged: bool,
}

fn tpm_from_free_logits(x: &[f64], n: usize) -> SquareMatrix {
    let mut g = SquareMatrix::zeros(n);
    let mut logits = vec![0.0; n];
    let mut k = 0;
    for i in 0..n {
        for (j, l) in logits.iter_mut().enumerate() {
            if i == j {
                *l = 0.0;
            } else {
                *l = x[k];
                k += 1;
            }
        }
        softmax_into(&logits, g.row_mut(i));
    }
    g
}

fn free_logits_from_tpm(g: &SquareMatrix) -> Vec<f64> {
    LogitCoefficients::from_tpm(g, 0).free_values()
}

/// Σ_j c_j log π_j(Γ) + Σ_ij V_ij log γ_ij and its gradient in the
/// off-diagonal logits.
fn stationary_objective(x: &[f64], grad: &mut [f64], n: usize, c: &[f64], v: &SquareMatrix) -> f64 {
    let g = tpm_from_free_logits(x, n);
    let mut a = DMatrix::<f64>::from_element(n, n, 1.0);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] += if i == j { 1.0 } else { 0.0 } - g[(i, j)];
        }
    }
    let Some(ainv) = a.try_inverse() else {
        return f64::NEG_INFINITY;
    };
    let pi: Vec<f64> = (0..n).map(|j| (0..n).map(|i| ainv[(i, j)]).sum()).collect();
    let mut value = 0.0;
    for j in 0..n {
        if c[j] > 0.0 {
            if !(pi[j] > 0.0) {
                return f64::NEG_INFINITY;
            }
            value += c[j] * pi[j].ln();
        }
    }
    for i in 0..n {
        for j in 0..n {
            let w = v[(i, j)];
            if w > 0.0 {
                if !(g[(i, j)] > 0.0) {
                    return f64::NEG_INFINITY;
                }
                value += w * g[(i, j)].ln();
            }
        }
    }
    // r_k = Σ_j (A⁻¹)_kj c_j / π_j
    let r: Vec<f64> = (0..n)
        .map(|k| {
            (0..n)
                .filter(|&j| c[j] > 0.0)
                .map(|j| ainv[(k, j)] * c[j] / pi[j])
                .sum()
        })
        .collect();
    let mut k = 0;
    let mut gp = vec![0.0; n];
    for i in 0..n {
        for l in 0..n {
            gp[l] = v[(i, l)] + g[(i, l)] * pi[i] * r[l];
        }
        let row_sum: f64 = gp.iter().sum();
        for l in 0..n {
            if l != i {
                grad[k] = gp[l] - g[(i, l)] * row_sum;
                k += 1;
            }
        }
    }
    value
}

/// Maximizes `Σ_j (û_j(1) + C_N) log π_j(Γ) + Σ_t Σ_ij v̂_ij(t) log γ_ij`
/// over row-stochastic Γ, starting from the better of `current` and the
/// Baum–Welch ratio.
pub fn m_step_transition_stationary(
    stats: &EStepStats,
    c_n: f64,
    current: &SquareMatrix,
    opts: OptimOptions,
) -> Result<TransitionUpdate> {
    let n = stats.n_states;
    if current.dim() != n {
        return Err(Error::Dimension(format!("Γ has {} states, statistics {n}", current.dim())));
    }
    if n == 1 {
        return Ok(TransitionUpdate {
            gamma: SquareMatrix::identity(1),
            pi: vec![1.0],
            converged: true,
        });
    }
    let c: Vec<f64> = stats.initial_weights().into_iter().map(|u| u + c_n).collect();
    let v = stats.transition_totals();
    let mut bw = SquareMatrix::zeros(n);
    for i in 0..n {
        let s: f64 = v.row(i).iter().sum();
        for j in 0..n {
            bw[(i, j)] = if s > 0.0 { (v[(i, j)] / s).max(1e-10) } else { 1.0 / n as f64 };
        }
        let s: f64 = bw.row(i).iter().sum();
        bw.row_mut(i).iter_mut().for_each(|x| *x /= s);
    }
    let mut scratch = vec![0.0; n * (n - 1)];
    let x_cur = free_logits_from_tpm(current);
    let x_bw = free_logits_from_tpm(&bw);
    let f_cur = stationary_objective(&x_cur, &mut scratch, n, &c, &v);
    let f_bw = stationary_objective(&x_bw, &mut scratch, n, &c, &v);
    let x0 = if f_bw > f_cur { x_bw } else { x_cur };
    let res = maximize_bfgs(|x, g| stationary_objective(x, g, n, &c, &v), &x0, opts);
    if !res.value.is_finite() {
        return Err(Error::Numeric("transition objective is not finite".into()));
    }
    let gamma = tpm_from_free_logits(&res.x, n);
    let pi = stationary_distribution(&gamma)?;
    Ok(TransitionUpdate {
        gamma,
        pi,
        converged: res.converged,
    })
}

/// Objective of the covariate transition step, with the other parameters
/// frozen. Works in standardized covariate coordinates. Time points sharing
/// a covariate row share a tpm, so tpms and the v̂ sums are kept per distinct
/// row.
struct LogitProblem<'a> {
    n: usize,
    n_cov: usize,
    c_n: f64,
    delta: &'a [f64],
    /// Per series `T × N` emission densities scaled by their row maximum.
    emis: Vec<Vec<f64>>,
    /// Distinct standardized covariate rows, `U × C`.
    rows: Vec<f64>,
    /// Per series, the distinct-row index of each time point.
    ids: Vec<Vec<usize>>,
    /// Σ_t v̂(t) over the time points of each distinct row, `U × N × N`.
    vsum: Vec<f64>,
    total_len: f64,
    mean: Vec<f64>,
    sd: Vec<f64>,
}

impl<'a> LogitProblem<'a> {
    fn new(obs: &ObservationSet, stats: &'a EStepStats, c_n: f64, params: &'a ParameterVector) -> Result<Self> {
        let n = params.num_states();
        let n_cov = obs.num_covariates();
        let mut mean = vec![0.0; n_cov];
        let mut sq = vec![0.0; n_cov];
        let mut cnt = 0.0_f64;
        for s in &obs.series {
            if let Some(cov) = &s.covariates {
                for row in cov {
                    for (c, &x) in row.iter().enumerate() {
                        mean[c] += x;
                        sq[c] += x * x;
                    }
                    cnt += 1.0;
                }
            }
        }
        let mut sd = vec![1.0; n_cov];
        for c in 0..n_cov {
            mean[c] /= cnt.max(1.0);
            let var = sq[c] / cnt.max(1.0) - mean[c] * mean[c];
            if var > 1e-24 {
                sd[c] = var.sqrt();
            }
        }
        let nn = n * n;
        let mut emis = Vec::with_capacity(obs.series.len());
        let mut rows = Vec::new();
        let mut ids = Vec::with_capacity(obs.series.len());
        let mut vsum: Vec<f64> = Vec::new();
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut z = vec![0.0; n_cov];
        for (m, s) in obs.series.iter().enumerate() {
            let mut le = params.emissions.log_emission_matrix(s);
            for row in le.chunks_mut(n) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !mx.is_finite() {
                    return Err(Error::Numeric(format!("emission density not evaluable in series '{}'", s.id)));
                }
                row.iter_mut().for_each(|x| *x = (*x - mx).exp());
            }
            emis.push(le);
            let mut id = vec![0; s.len()];
            for t in 0..s.len() {
                if let Some(cov) = &s.covariates {
                    for c in 0..n_cov {
                        z[c] = (cov[t][c] - mean[c]) / sd[c];
                    }
                }
                let key: Vec<u64> = z.iter().map(|x| x.to_bits()).collect();
                let u = *seen.entry(key).or_insert_with(|| {
                    rows.extend_from_slice(&z);
                    vsum.resize(vsum.len() + nn, 0.0);
                    vsum.len() / nn - 1
                });
                id[t] = u;
                if t > 0 {
                    let block = &stats.v[m][t * nn..(t + 1) * nn];
                    for (a, b) in vsum[u * nn..(u + 1) * nn].iter_mut().zip(block) {
                        *a += b;
                    }
                }
            }
            ids.push(id);
        }
        Ok(Self {
            n,
            n_cov,
            c_n,
            delta: &params.delta,
            emis,
            rows,
            ids,
            vsum,
            total_len: obs.total_len() as f64,
            mean,
            sd,
        })
    }

    fn num_rows(&self) -> usize {
        self.vsum.len() / (self.n * self.n)
    }

    fn row(&self, u: usize) -> &[f64] {
        &self.rows[u * self.n_cov..(u + 1) * self.n_cov]
    }

    fn to_standard(&self, beta: &LogitCoefficients) -> Vec<f64> {
        let mut x = beta.free_values();
        let p = self.n_cov + 1;
        for block in x.chunks_mut(p) {
            for c in 0..self.n_cov {
                block[0] += block[c + 1] * self.mean[c];
                block[c + 1] *= self.sd[c];
            }
        }
        x
    }

    fn to_beta(&self, x: &[f64]) -> LogitCoefficients {
        let mut v = x.to_vec();
        let p = self.n_cov + 1;
        for block in v.chunks_mut(p) {
            for c in 0..self.n_cov {
                block[c + 1] /= self.sd[c];
                block[0] -= block[c + 1] * self.mean[c];
            }
        }
        let mut beta = LogitCoefficients::zeros(self.n, self.n_cov);
        beta.set_free_values(&v);
        beta
    }

    /// Row-major tpm and log-tpm at standardized covariates `z`.
    fn tpm_at(&self, x: &[f64], z: &[f64], g: &mut [f64], lg: &mut [f64]) {
        let n = self.n;
        let p = self.n_cov + 1;
        let mut k = 0;
        for i in 0..n {
            let logits = &mut lg[i * n..(i + 1) * n];
            for (j, l) in logits.iter_mut().enumerate() {
                if i == j {
                    *l = 0.0;
                } else {
                    let b = &x[k * p..(k + 1) * p];
                    *l = b[0] + b[1..].iter().zip(z).map(|(a, w)| a * w).sum::<f64>();
                    k += 1;
                }
            }
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let row = &mut g[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (o, &l) in row.iter_mut().zip(logits.iter()) {
                *o = (l - mx).exp();
                sum += *o;
            }
            row.iter_mut().for_each(|o| *o /= sum);
            let lse = mx + sum.ln();
            logits.iter_mut().for_each(|l| *l -= lse);
        }
    }

    /// Value and gradient in standardized coordinates.
    fn eval(&self, x: &[f64], grad: &mut [f64], with_occupancy: bool) -> f64 {
        let n = self.n;
        let nn = n * n;
        let nu = self.num_rows();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut gu = vec![0.0; nu * nn];
        let mut lgu = vec![0.0; nu * nn];
        for u in 0..nu {
            self.tpm_at(x, self.row(u), &mut gu[u * nn..(u + 1) * nn], &mut lgu[u * nn..(u + 1) * nn]);
        }
        // Σ v̂ log γ; its logit derivative is collected per row in `dcu`
        let mut value = 0.0;
        let mut dcu = vec![0.0; nu * nn];
        for u in 0..nu {
            let vs = &self.vsum[u * nn..(u + 1) * nn];
            let g = &gu[u * nn..(u + 1) * nn];
            let lg = &lgu[u * nn..(u + 1) * nn];
            let dc = &mut dcu[u * nn..(u + 1) * nn];
            for i in 0..n {
                let mut row = 0.0;
                for k in 0..n {
                    let w = vs[i * n + k];
                    if w > 0.0 {
                        value += w * lg[i * n + k];
                    }
                    row += w;
                }
                for l in 0..n {
                    dc[i * n + l] = vs[i * n + l] - g[i * n + l] * row;
                }
            }
        }
        if with_occupancy && self.c_n != 0.0 {
            match self.occupancy_term(&gu, &mut dcu) {
                Some(v) => value += v,
                None => return f64::NEG_INFINITY,
            }
        }
        for u in 0..nu {
            self.accumulate(&dcu[u * nn..(u + 1) * nn], self.row(u), grad);
        }
        value
    }

    /// C_N Σ_j log π̂_j, adding its logit derivative into `dcu`.
    fn occupancy_term(&self, gu: &[f64], dcu: &mut [f64]) -> Option<f64> {
        let n = self.n;
        let nn = n * n;
        let mut fbs = Vec::with_capacity(self.ids.len());
        let mut occ = vec![0.0; n];
        for (m, ids) in self.ids.iter().enumerate() {
            let fb = ScaledFb::run(self.delta, gu, ids, &self.emis[m], n);
            for row in fb.post.chunks(n) {
                for (o, q) in occ.iter_mut().zip(row) {
                    *o += q;
                }
            }
            fbs.push(fb);
        }
        occ.iter_mut().for_each(|o| *o /= self.total_len);
        if occ.iter().any(|&o| !(o > 0.0)) {
            return None;
        }
        let value = self.c_n * occ.iter().map(|o| o.ln()).sum::<f64>();
        let w: Vec<f64> = occ.iter().map(|o| self.c_n / (self.total_len * o)).collect();
        let mut xi = vec![0.0; nn];
        for (m, ids) in self.ids.iter().enumerate() {
            let fb = &fbs[m];
            let e = &self.emis[m];
            let len = ids.len();
            let g_at = |t: usize| &gu[ids[t] * nn..(ids[t] + 1) * nn];
            let eh: f64 = fb
                .post
                .chunks(n)
                .map(|row| row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            // forward expectations of the accumulated reward
            let mut fa = vec![0.0; len * n];
            fa[..n].copy_from_slice(&w);
            for t in 1..len {
                let g = g_at(t);
                for k in 0..n {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for i in 0..n {
                        let q = fb.alpha[(t - 1) * n + i] * g[i * n + k];
                        num += q * fa[(t - 1) * n + i];
                        den += q;
                    }
                    fa[t * n + k] = if den > 0.0 { num / den } else { 0.0 } + w[k];
                }
            }
            // backward expectations of the future reward
            let mut fbk = vec![0.0; len * n];
            for t in (0..len.saturating_sub(1)).rev() {
                let g = g_at(t + 1);
                for j in 0..n {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for k in 0..n {
                        let q = g[j * n + k] * e[(t + 1) * n + k] * fb.beta[(t + 1) * n + k];
                        num += q * (w[k] + fbk[(t + 1) * n + k]);
                        den += q;
                    }
                    fbk[t * n + j] = if den > 0.0 { num / den } else { 0.0 };
                }
            }
            for t in 1..len {
                let g = g_at(t);
                let mut z = 0.0;
                for i in 0..n {
                    for k in 0..n {
                        let q = fb.alpha[(t - 1) * n + i] * g[i * n + k] * e[t * n + k] * fb.beta[t * n + k];
                        xi[i * n + k] = q;
                        z += q;
                    }
                }
                if z <= 0.0 {
                    continue;
                }
                let dc = &mut dcu[ids[t] * nn..(ids[t] + 1) * nn];
                for i in 0..n {
                    let mut row = 0.0;
                    for k in 0..n {
                        let d = xi[i * n + k] / z * (fa[(t - 1) * n + i] + w[k] + fbk[t * n + k] - eh);
                        xi[i * n + k] = d;
                        row += d;
                    }
                    for l in 0..n {
                        dc[i * n + l] += xi[i * n + l] - g[i * n + l] * row;
                    }
                }
            }
        }
        Some(value)
    }

    /// Inverse of the negative Hessian of the Σ v̂ log γ term at `x`, or None
    /// when it is not positive definite.
    fn inverse_hessian_guess(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let n = self.n;
        let nn = n * n;
        let p = self.n_cov + 1;
        let d = x.len();
        let mut hess = DMatrix::<f64>::zeros(d, d);
        let mut g = vec![0.0; nn];
        let mut lg = vec![0.0; nn];
        let mut zt = vec![1.0; p];
        for u in 0..self.num_rows() {
            self.tpm_at(x, self.row(u), &mut g, &mut lg);
            zt[1..].copy_from_slice(self.row(u));
            let vs = &self.vsum[u * nn..(u + 1) * nn];
            for i in 0..n {
                let r: f64 = vs[i * n..(i + 1) * n].iter().sum();
                if r <= 0.0 {
                    continue;
                }
                // free logits of row i occupy blocks base..base+n-1
                let base = i * (n - 1);
                let others: Vec<usize> = (0..n).filter(|&l| l != i).collect();
                for (a, &l) in others.iter().enumerate() {
                    for (b, &l2) in others.iter().enumerate() {
                        let w = r * (if l == l2 { g[i * n + l] } else { 0.0 } - g[i * n + l] * g[i * n + l2]);
                        for c1 in 0..p {
                            for c2 in 0..p {
                                hess[((base + a) * p + c1, (base + b) * p + c2)] += w * zt[c1] * zt[c2];
                            }
                        }
                    }
                }
            }
        }
        let ridge = 1e-8 * hess.diagonal().max().max(1e-8);
        for k in 0..d {
            hess[(k, k)] += ridge;
        }
        hess.cholesky().map(|c| c.inverse())
    }

    /// Adds the logit gradient of one covariate row to the coefficient gradient.
    fn accumulate(&self, dc: &[f64], z: &[f64], grad: &mut [f64]) {
        let n = self.n;
        let p = self.n_cov + 1;
        let mut k = 0;
        for i in 0..n {
            for l in 0..n {
                if l == i {
                    continue;
                }
                let d = dc[i * n + l];
                let gb = &mut grad[k * p..(k + 1) * p];
                gb[0] += d;
                for (g, w) in gb[1..].iter_mut().zip(z) {
                    *g += d * w;
                }
                k += 1;
            }
        }
    }
}

/// Forward–backward in probability space with per-step normalization,
/// used where gradients of posterior quantities are needed. The tpm into
/// time t is block `ids[t]` of `gu`.
struct ScaledFb {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    post: Vec<f64>,
}

impl ScaledFb {
    fn run(delta: &[f64], gu: &[f64], ids: &[usize], e: &[f64], n: usize) -> Self {
        let nn = n * n;
        let len = ids.len();
        let mut alpha = vec![0.0; len * n];
        let mut beta = vec![1.0; len * n];
        for j in 0..n {
            alpha[j] = delta[j] * e[j];
        }
        normalize(&mut alpha[..n]);
        for t in 1..len {
            let g = &gu[ids[t] * nn..(ids[t] + 1) * nn];
            for k in 0..n {
                let mut s = 0.0;
                for i in 0..n {
                    s += alpha[(t - 1) * n + i] * g[i * n + k];
                }
                alpha[t * n + k] = s * e[t * n + k];
            }
            normalize(&mut alpha[t * n..(t + 1) * n]);
        }
        for t in (0..len.saturating_sub(1)).rev() {
            let g = &gu[ids[t + 1] * nn..(ids[t + 1] + 1) * nn];
            for i in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += g[i * n + k] * e[(t + 1) * n + k] * beta[(t + 1) * n + k];
                }
                beta[t * n + i] = s;
            }
            normalize(&mut beta[t * n..(t + 1) * n]);
        }
        let mut post: Vec<f64> = alpha.iter().zip(&beta).map(|(a, b)| a * b).collect();
        for row in post.chunks_mut(n) {
            normalize(row);
        }
        Self { alpha, beta, post }
    }
}

fn normalize(x: &mut [f64]) {
    let s: f64 = x.iter().sum();
    if s > 0.0 {
        x.iter_mut().for_each(|v| *v /= s);
    }
}

/// Value of the covariate transition-step objective
/// `Σ_t Σ_ij v̂_ij(t) log γ_ij(t) + C_N Σ_j log π̂_j(β)` with emissions and δ
/// frozen at `params`.
pub fn nonstationary_transition_objective(
    obs: &ObservationSet,
    stats: &EStepStats,
    c_n: f64,
    params: &ParameterVector,
    beta: &LogitCoefficients,
) -> Result<f64> {
    let prob = LogitProblem::new(obs, stats, c_n, params)?;
    let x = prob.to_standard(beta);
    let mut g = vec![0.0; x.len()];
    Ok(prob.eval(&x, &mut g, true))
}

/// Gradient of [`nonstationary_transition_objective`] with respect to the
/// free coefficients, in [`LogitCoefficients::free_values`] order.
pub fn nonstationary_transition_gradient(
    obs: &ObservationSet,
    stats: &EStepStats,
    c_n: f64,
    params: &ParameterVector,
    beta: &LogitCoefficients,
) -> Result<Vec<f64>> {
    let prob = LogitProblem::new(obs, stats, c_n, params)?;
    let x = prob.to_standard(beta);
    let mut g = vec![0.0; x.len()];
    prob.eval(&x, &mut g, true);
    // chain rule back to raw coefficients: x_0 = β_0 + Σ β_c m_c, x_c = β_c s_c
    let p = prob.n_cov + 1;
    for block in g.chunks_mut(p) {
        let g0 = block[0];
        for c in 0..prob.n_cov {
            block[c + 1] = g0 * prob.mean[c] + block[c + 1] * prob.sd[c];
        }
    }
    Ok(g)
}

/// Ascent step on the covariate transition objective starting at the
/// current coefficients.
pub fn m_step_transition_nonstationary(
    obs: &ObservationSet,
    stats: &EStepStats,
    c_n: f64,
    params: &ParameterVector,
    opts: OptimOptions,
) -> Result<LogitCoefficients> {
    let TransitionModel::CovariateLogit { beta } = &params.transition else {
        return Err(Error::Config("covariate transition step needs a logit transition model".into()));
    };
    if beta.num_covariates() != obs.num_covariates() {
        return Err(Error::Dimension(format!(
            "model uses {} covariates, data has {}",
            beta.num_covariates(),
            obs.num_covariates()
        )));
    }
    if params.num_states() == 1 {
        return Ok(beta.clone());
    }
    let prob = LogitProblem::new(obs, stats, c_n, params)?;
    let x0 = prob.to_standard(beta);
    let h0 = prob.inverse_hessian_guess(&x0);
    let res = maximize_bfgs_from(|x, g| prob.eval(x, g, true), &x0, h0, opts);
    if !res.value.is_finite() {
        return Err(Error::Numeric("covariate transition objective is not finite".into()));
    }
    Ok(prob.to_beta(&res.x))
}

/// Per-channel scales used to make penalized components comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyGeometry {
    pub scales: Vec<f64>,
}

impl PenaltyGeometry {
    /// Unit scale for a single channel; otherwise the cross-state standard
    /// deviation of each penalized component.
    pub fn from_emissions(e: &EmissionParams) -> Self {
        let c = e.states[0].channels.len();
        if c == 1 {
            return Self { scales: vec![1.0] };
        }
        let n = e.num_states() as f64;
        let scales = (0..c)
            .map(|ch| {
                let vals: Vec<f64> = e.states.iter().map(|s| s.channels[ch].penalized()).collect();
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                if var > 1e-20 {
                    var.sqrt()
                } else {
                    mean.abs().max(1.0)
                }
            })
            .collect();
        Self { scales }
    }

    pub fn is_scalar(&self) -> bool {
        self.scales.len() == 1
    }

    fn vector(&self, s: &StateEmission) -> Vec<f64> {
        s.channels
            .iter()
            .zip(&self.scales)
            .map(|(p, sc)| p.penalized() / sc)
            .collect()
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Group-Sort-Fuse ordering: `τ[k]` is the state at position `k`.
///
/// One-dimensional inputs are sorted ascending; otherwise the chain starts
/// at the smallest norm and repeatedly moves to the nearest unchosen vector.
/// Ties go to the lower index.
pub fn gsf_order(vectors: &[Vec<f64>]) -> Vec<usize> {
    let n = vectors.len();
    let mut idx: Vec<usize> = (0..n).collect();
    if n == 0 {
        return idx;
    }
    if vectors[0].len() == 1 {
        idx.sort_by(|&a, &b| vectors[a][0].total_cmp(&vectors[b][0]));
        return idx;
    }
    let zero = vec![0.0; vectors[0].len()];
    let mut order = Vec::with_capacity(n);
    let mut used = vec![false; n];
    let mut prev = &zero;
    for _ in 0..n {
        let mut best = usize::MAX;
        let mut bd = f64::INFINITY;
        for j in 0..n {
            if !used[j] {
                let d = dist(&vectors[j], prev);
                if d < bd {
                    bd = d;
                    best = j;
                }
            }
        }
        used[best] = true;
        order.push(best);
        prev = &vectors[best];
    }
    order
}

/// GSF ordering of the penalized emission components.
pub fn emission_order(e: &EmissionParams, geometry: &PenaltyGeometry) -> Vec<usize> {
    let vs: Vec<Vec<f64>> = e.states.iter().map(|s| geometry.vector(s)).collect();
    gsf_order(&vs)
}

/// Consecutive gaps η_a under the ordering `order`.
pub fn ordered_gaps(e: &EmissionParams, geometry: &PenaltyGeometry, order: &[usize]) -> Vec<f64> {
    order
        .windows(2)
        .map(|w| {
            let a = geometry.vector(&e.states[w[0]]);
            let b = geometry.vector(&e.states[w[1]]);
            if geometry.is_scalar() {
                (b[0] - a[0]).max(0.0)
            } else {
                dist(&a, &b)
            }
        })
        .collect()
}

/// Σ_a p_λ(η_a) at the GSF ordering of `e`.
pub fn fusion_penalty(e: &EmissionParams, geometry: &PenaltyGeometry, penalty: &PenaltyConfig) -> f64 {
    let order = emission_order(e, geometry);
    ordered_gaps(e, geometry, &order).iter().map(|&g| penalty.value(g)).sum()
}

/// States grouped by fused penalized parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grouping {
    /// GSF ordering of the states.
    pub order: Vec<usize>,
    /// Groups of original state indices, listed in GSF order.
    pub groups: Vec<Vec<usize>>,
}

impl Grouping {
    pub fn n_hat(&self) -> usize {
        self.groups.len()
    }

    pub fn identity(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            groups: (0..n).map(|i| vec![i]).collect(),
        }
    }
}

/// Counts distinct penalized parameter values. Consecutive states under the
/// GSF ordering whose gap is at most `merge_tol` times the total spread are
/// put in one group.
pub fn count_distinct_states(e: &EmissionParams, geometry: &PenaltyGeometry, merge_tol: f64) -> Grouping {
    let order = emission_order(e, geometry);
    let gaps = ordered_gaps(e, geometry, &order);
    let spread: f64 = gaps.iter().sum();
    let threshold = merge_tol * spread;
    let mut groups = vec![vec![order[0]]];
    for (k, &g) in gaps.iter().enumerate() {
        if g <= threshold {
            groups.last_mut().expect("nonempty").push(order[k + 1]);
        } else {
            groups.push(vec![order[k + 1]]);
        }
    }
    Grouping { order, groups }
}

fn weighted_mean(vals: &[f64], w: &[f64]) -> f64 {
    vals.iter().zip(w).map(|(v, w)| v * w).sum::<f64>() / w.iter().sum::<f64>()
}

fn merge_channel(params: &[ChannelParams], w: &[f64]) -> ChannelParams {
    match params[0] {
        ChannelParams::Gamma { .. } => {
            let (mut m, mut s) = (Vec::new(), Vec::new());
            for p in params {
                if let ChannelParams::Gamma { mean, shape } = *p {
                    m.push(mean);
                    s.push(shape);
                }
            }
            ChannelParams::Gamma {
                mean: weighted_mean(&m, w),
                shape: weighted_mean(&s, w),
            }
        }
        ChannelParams::Normal { .. } => {
            let (mut m, mut s) = (Vec::new(), Vec::new());
            for p in params {
                if let ChannelParams::Normal { mean, sd } = *p {
                    m.push(mean);
                    s.push(sd);
                }
            }
            ChannelParams::Normal {
                mean: weighted_mean(&m, w),
                sd: weighted_mean(&s, w),
            }
        }
        ChannelParams::VonMises { .. } => {
            let (mut c, mut sn, mut k) = (0.0, 0.0, Vec::new());
            for (p, &wi) in params.iter().zip(w) {
                if let ChannelParams::VonMises { mean, kappa } = *p {
                    c += wi * mean.cos();
                    sn += wi * mean.sin();
                    k.push(kappa);
                }
            }
            let mean = if c == 0.0 && sn == 0.0 { 0.0 } else { crate::wrap_angle(sn.atan2(c)) };
            ChannelParams::VonMises {
                mean,
                kappa: weighted_mean(&k, w),
            }
        }
    }
}

fn merge_tpm(g: &SquareMatrix, groups: &[Vec<usize>]) -> SquareMatrix {
    let k = groups.len();
    let mut out = SquareMatrix::zeros(k);
    for (a, ga) in groups.iter().enumerate() {
        for (b, gb) in groups.iter().enumerate() {
            let s: f64 = ga.iter().flat_map(|&i| gb.iter().map(move |&j| (i, j))).map(|(i, j)| g[(i, j)]).sum();
            out[(a, b)] = s / ga.len() as f64;
        }
        let z: f64 = out.row(a).iter().sum();
        out.row_mut(a).iter_mut().for_each(|x| *x /= z);
    }
    out
}

/// Merges fused states. Transition probabilities between groups `A → B`
/// are `(1/|A|) Σ_{i∈A} Σ_{j∈B} γ_ij`; emission parameters are averaged with
/// weights `weights` (posterior state totals). Groups are listed in the
/// output in order of their smallest member. Logit models are refitted by
/// least squares to the merged logits over the observed covariate rows.
pub fn merge_model(
    params: &ParameterVector,
    groups: &[Vec<usize>],
    weights: &[f64],
    obs: Option<&ObservationSet>,
) -> Result<ParameterVector> {
    let n = params.num_states();
    let mut seen = vec![false; n];
    for g in groups {
        if g.is_empty() {
            return Err(Error::Fitting("empty state group".into()));
        }
        for &i in g {
            if i >= n || seen[i] {
                return Err(Error::Fitting(format!("state {i} is missing from or repeated in the grouping")));
            }
            seen[i] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Fitting("grouping does not cover every state".into()));
    }
    let mut groups: Vec<Vec<usize>> = groups
        .iter()
        .map(|g| {
            let mut g = g.clone();
            g.sort_unstable();
            g
        })
        .collect();
    groups.sort_by_key(|g| g[0]);
    if groups.len() == n {
        return Ok(params.clone());
    }
    let states = groups
        .iter()
        .map(|g| {
            let mut w: Vec<f64> = g.iter().map(|&i| weights.get(i).copied().unwrap_or(0.0).max(0.0)).collect();
            if w.iter().sum::<f64>() <= 0.0 {
                w.iter_mut().for_each(|x| *x = 1.0);
            }
            let n_ch = params.emissions.states[0].channels.len();
            StateEmission {
                channels: (0..n_ch)
                    .map(|c| {
                        let ps: Vec<ChannelParams> =
                            g.iter().map(|&i| params.emissions.states[i].channels[c]).collect();
                        merge_channel(&ps, &w)
                    })
                    .collect(),
            }
        })
        .collect();
    let emissions = EmissionParams::new(states)?;
    let delta_sum: Vec<f64> = groups.iter().map(|g| g.iter().map(|&i| params.delta[i]).sum()).collect();
    match &params.transition {
        TransitionModel::Homogeneous { gamma } => {
            let merged = merge_tpm(gamma, &groups);
            let delta = if params.is_stationary() {
                stationary_distribution(&merged).unwrap_or(delta_sum)
            } else {
                delta_sum
            };
            let s: f64 = delta.iter().sum();
            let delta = delta.into_iter().map(|d| d / s).collect();
            ParameterVector::new(delta, TransitionModel::Homogeneous { gamma: merged }, emissions)
        }
        TransitionModel::CovariateLogit { beta } => {
            let merged = merge_logit(beta, &groups, obs)?;
            let s: f64 = delta_sum.iter().sum();
            ParameterVector::new(
                delta_sum.into_iter().map(|d| d / s).collect(),
                TransitionModel::CovariateLogit { beta: merged },
                emissions,
            )
        }
    }
}

fn merge_logit(beta: &LogitCoefficients, groups: &[Vec<usize>], obs: Option<&ObservationSet>) -> Result<LogitCoefficients> {
    let n_cov = beta.num_covariates();
    let k = groups.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    if let Some(obs) = obs {
        for s in &obs.series {
            if let Some(cov) = &s.covariates {
                rows.extend(cov.iter().skip(1).cloned());
            }
        }
    }
    if rows.is_empty() {
        rows.push(vec![0.0; n_cov]);
    }
    let model = TransitionModel::CovariateLogit { beta: beta.clone() };
    let p = n_cov + 1;
    // design and responses for every off-diagonal merged cell
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = vec![DVector::<f64>::zeros(p); k * k];
    let mut design = vec![0.0; p];
    for row in &rows {
        let g = transition_matrix_at(&model, Some(row))?;
        let mg = merge_tpm(&g, groups);
        design[0] = 1.0;
        design[1..].copy_from_slice(row);
        for a in 0..p {
            for b in 0..p {
                xtx[(a, b)] += design[a] * design[b];
            }
        }
        for i in 0..k {
            let diag = mg[(i, i)].max(1e-300);
            for j in 0..k {
                if i != j {
                    let y = (mg[(i, j)].max(1e-300) / diag).ln();
                    for a in 0..p {
                        xty[i * k + j][a] += design[a] * y;
                    }
                }
            }
        }
    }
    // ridge-stabilized normal equations; constant covariates stay solvable
    for a in 0..p {
        xtx[(a, a)] += 1e-10 * (1.0 + xtx[(a, a)]);
    }
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::Singular("covariate design is singular".into()))?;
    let mut out = LogitCoefficients::zeros(k, n_cov);
    for i in 0..k {
        for j in 0..k {
            if i != j {
                let sol = chol.solve(&xty[i * k + j]);
                for a in 0..p {
                    *out.get_mut(i, j, a) = sol[a];
                }
            }
        }
    }
    Ok(out)
}

/// Full weighted-MLE emission update.
pub fn m_step_emission_mle(obs: &ObservationSet, stats: &EStepStats, current: &EmissionParams) -> EmissionParams {
    let n = current.num_states();
    let st = accumulate_stats(obs, &current.families(), &stats.u, n);
    EmissionParams {
        states: current
            .states
            .iter()
            .zip(&st)
            .map(|(s, cs)| StateEmission {
                channels: s.channels.iter().zip(cs).map(|(p, c)| p.mle_update(c)).collect(),
            })
            .collect(),
    }
}

/// Nuisance update followed by the LLA-penalized update of the penalized
/// components, with the GSF ordering `order` of the current iterate held
/// fixed.
pub fn m_step_emission_penalized(
    obs: &ObservationSet,
    stats: &EStepStats,
    penalty: &PenaltyConfig,
    current: &EmissionParams,
    order: &[usize],
    geometry: &PenaltyGeometry,
) -> Result<EmissionParams> {
    let n = current.num_states();
    if order.len() != n {
        return Err(Error::Dimension(format!("ordering has {} entries for {n} states", order.len())));
    }
    let st = accumulate_stats(obs, &current.families(), &stats.u, n);
    let mut e = EmissionParams {
        states: current
            .states
            .iter()
            .zip(&st)
            .map(|(s, cs)| StateEmission {
                channels: s.channels.iter().zip(cs).map(|(p, c)| p.nuisance_update(c)).collect(),
            })
            .collect(),
    };
    if n == 1 {
        return Ok(e);
    }
    let weights: Vec<f64> = ordered_gaps(&e, geometry, order)
        .iter()
        .map(|&g| penalty.derivative(g))
        .collect();
    if geometry.is_scalar() {
        penalized_scalar_update(&mut e, &st, order, &weights);
    } else {
        penalized_vector_update(&mut e, &st, order, &weights, geometry);
    }
    e.validate()?;
    Ok(e)
}

/// One channel: variables are the smallest value and the non-negative gaps,
/// so fused gaps land exactly on zero.
fn penalized_scalar_update(e: &mut EmissionParams, st: &[Vec<ChannelStats>], order: &[usize], w: &[f64]) {
    let n = order.len();
    let params: Vec<ChannelParams> = order.iter().map(|&j| e.states[j].channels[0]).collect();
    let stats: Vec<ChannelStats> = order.iter().map(|&j| st[j][0]).collect();
    let mut x0 = vec![params[0].penalized()];
    for k in 1..n {
        x0.push((params[k].penalized() - params[k - 1].penalized()).max(0.0));
    }
    let mut lower = vec![0.0; n];
    lower[0] = params[0].penalized_lower_bound();
    let f = |x: &[f64]| {
        let mut val = 0.0;
        let mut d1 = vec![0.0; n];
        let mut d2 = vec![0.0; n];
        let mut v = 0.0;
        for k in 0..n {
            v += x[k];
            let (a, b, c) = params[k].penalized_profile(&stats[k], v);
            val += a;
            d1[k] = b;
            d2[k] = c;
        }
        for a in 1..n {
            val -= w[a - 1] * x[a];
        }
        // suffix sums: position k depends on x_0..x_k
        let mut grad = vec![0.0; n];
        let mut hs = vec![0.0; n];
        let (mut s1, mut s2) = (0.0, 0.0);
        for k in (0..n).rev() {
            s1 += d1[k];
            s2 += d2[k];
            grad[k] = s1 - if k > 0 { w[k - 1] } else { 0.0 };
            hs[k] = s2;
        }
        let mut hess = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                hess[a * n + b] = hs[a.max(b)];
            }
        }
        (val, grad, hess)
    };
    let res = maximize_projected_newton(f, &x0, &lower, OptimOptions { max_iter: 100, grad_tol: 1e-10 });
    let mut v = 0.0;
    for (k, &j) in order.iter().enumerate() {
        v += res.x[k];
        e.states[j].channels[0] = params[k].with_penalized(v);
    }
}

/// Several channels: every penalized component is a variable and each gap is
/// the (smoothed) Euclidean distance between consecutive standardized vectors.
fn penalized_vector_update(
    e: &mut EmissionParams,
    st: &[Vec<ChannelStats>],
    order: &[usize],
    w: &[f64],
    geometry: &PenaltyGeometry,
) {
    let n = order.len();
    let c = geometry.scales.len();
    let d = n * c;
    let params: Vec<Vec<ChannelParams>> = order.iter().map(|&j| e.states[j].channels.clone()).collect();
    let stats: Vec<Vec<ChannelStats>> = order.iter().map(|&j| st[j].clone()).collect();
    let x0: Vec<f64> = params.iter().flat_map(|p| p.iter().map(ChannelParams::penalized)).collect();
    let lower: Vec<f64> = params
        .iter()
        .flat_map(|p| p.iter().map(ChannelParams::penalized_lower_bound))
        .collect();
    let sc = &geometry.scales;
    let f = |x: &[f64]| {
        let mut val = 0.0;
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        for k in 0..n {
            for ch in 0..c {
                let i = k * c + ch;
                let (a, b, h) = params[k][ch].penalized_profile(&stats[k][ch], x[i]);
                val += a;
                grad[i] += b;
                hess[i * d + i] += h;
            }
        }
        for a in 0..n - 1 {
            if w[a] == 0.0 {
                continue;
            }
            let diff: Vec<f64> = (0..c).map(|ch| (x[(a + 1) * c + ch] - x[a * c + ch]) / sc[ch]).collect();
            let phi = (diff.iter().map(|v| v * v).sum::<f64>() + NORM_SMOOTHING * NORM_SMOOTHING).sqrt();
            val -= w[a] * phi;
            for p in 0..c {
                let gp = w[a] * diff[p] / phi / sc[p];
                grad[(a + 1) * c + p] -= gp;
                grad[a * c + p] += gp;
                for q in 0..c {
                    let delta = if p == q { 1.0 } else { 0.0 };
                    let h = w[a] * (delta - diff[p] * diff[q] / (phi * phi)) / phi / (sc[p] * sc[q]);
                    // ∂²/∂x_{a+1,p}∂x_{a+1,q} etc. with signs from ±1/s
                    hess[((a + 1) * c + p) * d + (a + 1) * c + q] -= h;
                    hess[(a * c + p) * d + a * c + q] -= h;
                    hess[((a + 1) * c + p) * d + a * c + q] += h;
                    hess[(a * c + p) * d + (a + 1) * c + q] += h;
                }
            }
        }
        (val, grad, hess)
    };
    let res = maximize_projected_newton(f, &x0, &lower, OptimOptions { max_iter: 100, grad_tol: 1e-10 });
    for (k, &j) in order.iter().enumerate() {
        for ch in 0..c {
            e.states[j].channels[ch] = params[k][ch].with_penalized(res.x[k * c + ch]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Relative change of the objective below which the fit stops.
    pub tol: f64,
    /// Fit a covariate (logit) transition model.
    pub nonstationary: bool,
    /// Inner iterations of the homogeneous transition step.
    pub transition_iter: usize,
    /// Inner iterations of the covariate transition step.
    pub logit_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-6,
            nonstationary: false,
            transition_iter: 50,
            logit_iter: 10,
        }
    }
}

/// Converged (or best) penalized fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpmleFit {
    /// Estimate at the upper order, states relabeled into GSF order.
    pub params: ParameterVector,
    pub penalty: PenaltyConfig,
    pub geometry: PenaltyGeometry,
    /// Penalized objective after each EM iteration (entry 0 is the start).
    pub trace: Vec<f64>,
    /// Unpenalized log-likelihood of `params`.
    pub loglik: f64,
    pub grouping: Grouping,
    pub n_hat: usize,
    pub merged: ParameterVector,
    /// Unpenalized log-likelihood of `merged`.
    pub merged_loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Unpenalized maximum-likelihood fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MleFit {
    pub params: ParameterVector,
    pub loglik: f64,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Puts the initial values into the form the fitter iterates on.
fn prepare_init(obs: &ObservationSet, init: &ParameterVector, opts: &FitOptions) -> Result<ParameterVector> {
    init.validate()?;
    init.emissions.check_against(obs)?;
    let mut p = init.clone();
    if opts.nonstationary {
        if let TransitionModel::Homogeneous { gamma } = &p.transition {
            if !obs.has_covariates() {
                return Err(Error::Config("covariate model requested but the data have no covariates".into()));
            }
            p.transition = TransitionModel::CovariateLogit {
                beta: LogitCoefficients::from_tpm(gamma, obs.num_covariates()),
            };
        }
    } else {
        match &p.transition {
            TransitionModel::Homogeneous { gamma } => p.delta = stationary_distribution(gamma)?,
            TransitionModel::CovariateLogit { .. } => {
                return Err(Error::Config("homogeneous fit requested with a covariate transition model".into()))
            }
        }
    }
    p.check_against(obs)?;
    Ok(p)
}

fn occupancy_weight(params: &ParameterVector, stats: &EStepStats) -> Result<Vec<f64>> {
    match &params.transition {
        TransitionModel::Homogeneous { gamma } => stationary_distribution(gamma),
        TransitionModel::CovariateLogit { .. } => Ok(stats.occupancy()),
    }
}

/// Penalized objective at `params`, using the E-step statistics computed there.
pub fn penalized_objective_from_stats(
    params: &ParameterVector,
    stats: &EStepStats,
    penalty: &PenaltyConfig,
    geometry: &PenaltyGeometry,
) -> Result<f64> {
    let pi = occupancy_weight(params, stats)?;
    let barrier: f64 = pi.iter().map(|p| p.ln()).sum();
    Ok(stats.loglik + penalty.c_n * barrier - fusion_penalty(&params.emissions, geometry, penalty))
}

/// Penalized objective `ℓ + C_N Σ log π − Σ p_λ(η)`.
pub fn penalized_objective(
    obs: &ObservationSet,
    params: &ParameterVector,
    penalty: &PenaltyConfig,
    geometry: &PenaltyGeometry,
) -> Result<f64> {
    let stats = e_step(obs, params)?;
    penalized_objective_from_stats(params, &stats, penalty, geometry)
}

struct EmRun {
    params: ParameterVector,
    stats: EStepStats,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn em_iterate(
    obs: &ObservationSet,
    init: ParameterVector,
    penalty: Option<(&PenaltyConfig, &PenaltyGeometry)>,
    opts: &FitOptions,
) -> Result<EmRun> {
    let c_n = penalty.map_or(0.0, |(p, _)| p.c_n);
    let objective = |p: &ParameterVector, s: &EStepStats| -> Result<f64> {
        match penalty {
            Some((pen, geo)) => penalized_objective_from_stats(p, s, pen, geo),
            None => Ok(s.loglik),
        }
    };
    let mut params = init;
    let mut stats = e_step(obs, &params)?;
    let mut obj = objective(&params, &stats)?;
    let mut trace = vec![obj];
    let mut best: Option<(f64, ParameterVector, EStepStats)> = None;
    let mut converged = false;
    let mut iterations = 0;
    let t_opts = OptimOptions {
        max_iter: opts.transition_iter,
        grad_tol: 1e-9,
    };
    let l_opts = OptimOptions {
        max_iter: opts.logit_iter,
        grad_tol: 1e-9,
    };
    while iterations < opts.max_iter {
        iterations += 1;
        let mut next = params.clone();
        match &params.transition {
            TransitionModel::Homogeneous { gamma } => {
                let up = m_step_transition_stationary(&stats, c_n, gamma, t_opts)?;
                next.delta = up.pi;
                next.transition = TransitionModel::Homogeneous { gamma: up.gamma };
            }
            TransitionModel::CovariateLogit { .. } => {
                let beta = m_step_transition_nonstationary(obs, &stats, c_n, &params, l_opts)?;
                let mut d = stats.initial_weights();
                let s: f64 = d.iter().sum();
                d.iter_mut().for_each(|x| *x /= s);
                next.delta = d;
                next.transition = TransitionModel::CovariateLogit { beta };
            }
        }
        next.emissions = match penalty {
            Some((pen, geo)) => {
                let order = emission_order(&params.emissions, geo);
                m_step_emission_penalized(obs, &stats, pen, &params.emissions, &order, geo)?
            }
            None => m_step_emission_mle(obs, &stats, &params.emissions),
        };
        let next_stats = e_step(obs, &next)?;
        let next_obj = objective(&next, &next_stats)?;
        trace.push(next_obj);
        if next_obj < obj && best.as_ref().is_none_or(|b| obj > b.0) {
            best = Some((obj, params.clone(), stats.clone()));
        }
        let change = (next_obj - obj).abs();
        params = next;
        stats = next_stats;
        let prev = obj;
        obj = next_obj;
        if change <= opts.tol * prev.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        if let Some((b, p, s)) = best {
            if b > obj {
                params = p;
                stats = s;
            }
        }
    }
    Ok(EmRun {
        params,
        stats,
        trace,
        iterations,
        converged,
    })
}

/// Classical EM for the unpenalized model. Homogeneous models keep δ at the
/// stationary distribution of Γ.
pub fn fit_mle(obs: &ObservationSet, init: &ParameterVector, opts: &FitOptions) -> Result<MleFit> {
    let init = prepare_init(obs, init, opts)?;
    let run = em_iterate(obs, init, None, opts)?;
    Ok(MleFit {
        loglik: run.stats.loglik,
        params: run.params,
        trace: run.trace,
        iterations: run.iterations,
        converged: run.converged,
    })
}

/// Double-penalized EM from `init` (whose order is the upper bound), followed
/// by counting distinct states and merging fused ones.
pub fn fit_dpmle(
    obs: &ObservationSet,
    init: &ParameterVector,
    penalty: &PenaltyConfig,
    opts: &FitOptions,
) -> Result<DpmleFit> {
    penalty.validate()?;
    let init = prepare_init(obs, init, opts)?;
    let geometry = PenaltyGeometry::from_emissions(&init.emissions);
    let run = em_iterate(obs, init, Some((penalty, &geometry)), opts)?;
    let order = emission_order(&run.params.emissions, &geometry);
    let params = run.params.permuted(&order);
    let totals = run.stats.state_totals();
    let totals: Vec<f64> = order.iter().map(|&i| totals[i]).collect();
    let grouping = count_distinct_states(&params.emissions, &geometry, penalty.merge_tol);
    let merged = merge_model(&params, &grouping.groups, &totals, Some(obs))?;
    let merged_loglik = crate::hmm::log_likelihood(obs, &merged)?;
    Ok(DpmleFit {
        loglik: run.stats.loglik,
        n_hat: grouping.n_hat(),
        params,
        penalty: *penalty,
        geometry,
        trace: run.trace,
        grouping,
        merged,
        merged_loglik,
        iterations: run.iterations,
        converged: run.converged,
    })
}
