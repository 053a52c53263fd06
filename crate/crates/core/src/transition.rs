//! Transition models, the stationary distribution and the full parameter vector.

use serde::{Deserialize, Serialize};

use crate::data::{ObservationSet, Series};
use crate::emission::EmissionParams;
use crate::error::{Error, Result};
use crate::matrix::SquareMatrix;

/// Multinomial-logit regression coefficients for a covariate-driven tpm.
///
/// Off-diagonal logits are `c_ij = β_0^{ij} + Σ_c β_c^{ij} ω_c`; diagonal
/// logits are fixed at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitCoefficients {
    n: usize,
    n_cov: usize,
    /// Flattened `[i][j][c]`, `c = 0` being the intercept. Diagonal blocks are zero.
    coef: Vec<f64>,
}

impl LogitCoefficients {
    pub fn zeros(n: usize, n_cov: usize) -> Self {
        Self {
            n,
            n_cov,
            coef: vec![0.0; n * n * (n_cov + 1)],
        }
    }

    /// Intercepts reproducing `gamma` exactly, slopes zero.
    pub fn from_tpm(gamma: &SquareMatrix, n_cov: usize) -> Self {
        let n = gamma.dim();
        let mut out = Self::zeros(n, n_cov);
        for i in 0..n {
            let diag = gamma[(i, i)].max(1e-300);
            for j in 0..n {
                if i != j {
                    *out.get_mut(i, j, 0) = (gamma[(i, j)].max(1e-300) / diag).ln().max(-40.0);
                }
            }
        }
        out
    }

    pub fn num_states(&self) -> usize {
        self.n
    }

    pub fn num_covariates(&self) -> usize {
        self.n_cov
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> usize {
        (i * self.n + j) * (self.n_cov + 1)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.coef[self.offset(i, j) + c]
    }

    /// Panics on diagonal cells, which are fixed reference categories.
    #[inline]
    pub fn get_mut(&mut self, i: usize, j: usize, c: usize) -> &mut f64 {
        assert_ne!(i, j, "diagonal logits are fixed at zero");
        let o = self.offset(i, j);
        &mut self.coef[o + c]
    }

    /// Free coefficients in canonical order `(i, j ≠ i, c)`.
    pub fn free_values(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n * (self.n - 1) * (self.n_cov + 1));
        for i in 0..self.n {
            for j in (0..self.n).filter(|&j| j != i) {
                let o = self.offset(i, j);
                v.extend_from_slice(&self.coef[o..o + self.n_cov + 1]);
            }
        }
        v
    }

    pub fn set_free_values(&mut self, v: &[f64]) {
        let mut k = 0;
        for i in 0..self.n {
            for j in 0..self.n {
                if j == i {
                    continue;
                }
                let o = self.offset(i, j);
                self.coef[o..o + self.n_cov + 1].copy_from_slice(&v[k..k + self.n_cov + 1]);
                k += self.n_cov + 1;
            }
        }
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(self.n, self.n_cov);
        for (a, &i) in perm.iter().enumerate() {
            for (b, &j) in perm.iter().enumerate() {
                if a != b {
                    for c in 0..=self.n_cov {
                        *out.get_mut(a, b, c) = self.get(i, j, c);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransitionModel {
    Homogeneous { gamma: SquareMatrix },
    CovariateLogit { beta: LogitCoefficients },
}

impl TransitionModel {
    pub fn num_states(&self) -> usize {
        match self {
            TransitionModel::Homogeneous { gamma } => gamma.dim(),
            TransitionModel::CovariateLogit { beta } => beta.num_states(),
        }
    }

    pub fn is_homogeneous(&self) -> bool {
        matches!(self, TransitionModel::Homogeneous { .. })
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        match self {
            TransitionModel::Homogeneous { gamma } => TransitionModel::Homogeneous {
                gamma: gamma.permuted(perm),
            },
            TransitionModel::CovariateLogit { beta } => TransitionModel::CovariateLogit {
                beta: beta.permuted(perm),
            },
        }
    }
}

/// Transition matrix in force at one time point.
///
/// Homogeneous models ignore `covariates`; logit models require a row whose
/// length equals the number of covariates.
pub fn transition_matrix_at(model: &TransitionModel, covariates: Option<&[f64]>) -> Result<SquareMatrix> {
    match model {
        TransitionModel::Homogeneous { gamma } => Ok(gamma.clone()),
        TransitionModel::CovariateLogit { beta } => {
            let row = covariates.unwrap_or(&[]);
            if row.len() != beta.num_covariates() {
                return Err(Error::Dimension(format!(
                    "covariate row has {} entries, model expects {}",
                    row.len(),
                    beta.num_covariates()
                )));
            }
            let mut out = SquareMatrix::zeros(beta.num_states());
            logit_tpm_into(beta, row, &mut out)?;
            Ok(out)
        }
    }
}

pub(crate) fn logit_tpm_into(beta: &LogitCoefficients, row: &[f64], out: &mut SquareMatrix) -> Result<()> {
    let n = beta.num_states();
    let mut logits = vec![0.0; n];
    for i in 0..n {
        for (j, l) in logits.iter_mut().enumerate() {
            *l = if i == j {
                0.0
            } else {
                let mut c = beta.get(i, j, 0);
                for (k, w) in row.iter().enumerate() {
                    c += beta.get(i, j, k + 1) * w;
                }
                c
            };
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Numeric(format!("non-finite transition logit in row {i}")));
        }
        softmax_into(&logits, out.row_mut(i));
    }
    Ok(())
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Solves π = 1 (I − Γ + U)⁻¹ with U the all-ones matrix.
pub fn stationary_distribution(gamma: &SquareMatrix) -> Result<Vec<f64>> {
    let n = gamma.dim();
    if n == 0 {
        return Err(Error::Dimension("empty transition matrix".into()));
    }
    if gamma.as_slice().iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite transition probability".into()));
    }
    let mut a = gamma.to_nalgebra();
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = if i == j { 1.0 } else { 0.0 } - a[(i, j)] + 1.0;
        }
    }
    // π A = 1  ⇔  Aᵀ πᵀ = 1
    let lu = a.transpose().lu();
    let ones = nalgebra::DVector::from_element(n, 1.0);
    let pi = lu
        .solve(&ones)
        .ok_or_else(|| Error::Singular("I - Γ + U is not invertible (reducible chain)".into()))?;
    let pi: Vec<f64> = pi.iter().copied().collect();
    if pi.iter().any(|p| !p.is_finite()) {
        return Err(Error::Singular("stationary solve produced non-finite values".into()));
    }
    let cond_check = pi.iter().map(|p| p.abs()).sum::<f64>();
    if cond_check > 1e6 {
        return Err(Error::Singular("I - Γ + U is numerically singular".into()));
    }
    Ok(pi.into_iter().map(|p| p.max(0.0)).collect())
}

/// Transition matrices for one series, indexed by the time of arrival.
pub(crate) enum SeriesTransitions<'a> {
    Fixed(&'a SquareMatrix),
    /// Entry `t` governs the move from `t-1` to `t`; entry 0 is unused.
    Varying(Vec<SquareMatrix>),
}

impl SeriesTransitions<'_> {
    #[inline]
    pub fn at(&self, t: usize) -> &SquareMatrix {
        match self {
            SeriesTransitions::Fixed(g) => g,
            SeriesTransitions::Varying(v) => &v[t],
        }
    }
}

pub(crate) fn series_transitions<'a>(model: &'a TransitionModel, series: &Series) -> Result<SeriesTransitions<'a>> {
    match model {
        TransitionModel::Homogeneous { gamma } => Ok(SeriesTransitions::Fixed(gamma)),
        TransitionModel::CovariateLogit { beta } => {
            let n = beta.num_states();
            let cov = series.covariates.as_ref();
            if cov.is_none() && beta.num_covariates() > 0 {
                return Err(Error::Dimension("logit transition model needs covariates".into()));
            }
            let mut out = Vec::with_capacity(series.len());
            out.push(SquareMatrix::identity(n));
            for t in 1..series.len() {
                let row = cov.map(|c| c[t].as_slice()).unwrap_or(&[]);
                if row.len() != beta.num_covariates() {
                    return Err(Error::Dimension(format!(
                        "covariate row has {} entries, model expects {}",
                        row.len(),
                        beta.num_covariates()
                    )));
                }
                let mut g = SquareMatrix::zeros(n);
                logit_tpm_into(beta, row, &mut g)?;
                out.push(g);
            }
            Ok(SeriesTransitions::Varying(out))
        }
    }
}

/// Ψ = (δ, transition model, emission parameters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub delta: Vec<f64>,
    pub transition: TransitionModel,
    pub emissions: EmissionParams,
}

impl ParameterVector {
    pub fn new(delta: Vec<f64>, transition: TransitionModel, emissions: EmissionParams) -> Result<Self> {
        let p = Self {
            delta,
            transition,
            emissions,
        };
        p.validate()?;
        Ok(p)
    }

    /// Homogeneous model with δ set to the stationary distribution of Γ.
    pub fn stationary(gamma: SquareMatrix, emissions: EmissionParams) -> Result<Self> {
        let delta = stationary_distribution(&gamma)?;
        Self::new(delta, TransitionModel::Homogeneous { gamma }, emissions)
    }

    pub fn num_states(&self) -> usize {
        self.delta.len()
    }

    pub fn is_stationary(&self) -> bool {
        self.transition.is_homogeneous()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.delta.len();
        if n == 0 {
            return Err(Error::Dimension("model needs at least one state".into()));
        }
        if self.transition.num_states() != n || self.emissions.num_states() != n {
            return Err(Error::Dimension(format!(
                "δ has {n} states, transitions {}, emissions {}",
                self.transition.num_states(),
                self.emissions.num_states()
            )));
        }
        if self.delta.iter().any(|&d| !(0.0..=1.0 + 1e-12).contains(&d))
            || (self.delta.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Domain(format!("δ = {:?} is not a probability vector", self.delta)));
        }
        if let TransitionModel::Homogeneous { gamma } = &self.transition {
            if !gamma.is_row_stochastic(1e-9) {
                return Err(Error::Domain("Γ is not row-stochastic".into()));
            }
        }
        self.emissions.validate()
    }

    pub fn check_against(&self, obs: &ObservationSet) -> Result<()> {
        self.emissions.check_against(obs)?;
        if let TransitionModel::CovariateLogit { beta } = &self.transition {
            if beta.num_covariates() != obs.num_covariates() {
                return Err(Error::Dimension(format!(
                    "model uses {} covariates, data has {}",
                    beta.num_covariates(),
                    obs.num_covariates()
                )));
            }
        }
        Ok(())
    }

    /// Relabels states: new state `k` is old state `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            delta: perm.iter().map(|&i| self.delta[i]).collect(),
            transition: self.transition.permuted(perm),
            emissions: self.emissions.permuted(perm),
        }
    }
}
