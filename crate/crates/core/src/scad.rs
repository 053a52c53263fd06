//! SCAD penalty: derivative, value and local linear approximation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default SCAD shape constant.
pub const DEFAULT_A: f64 = 3.7;

fn check(eta: f64, lambda: f64, m: f64, a: f64) -> Result<()> {
    if !(eta >= 0.0) {
        return Err(Error::Domain(format!("SCAD argument must be ≥ 0, got {eta}")));
    }
    if !(a > 2.0) || !(lambda >= 0.0) || !(m >= 1.0) {
        return Err(Error::Domain(format!(
            "SCAD requires a > 2, λ ≥ 0, m ≥ 1 (got a = {a}, λ = {lambda}, m = {m})"
        )));
    }
    Ok(())
}

/// p'_λ(η) = mλ on [0, λ], mλ(aλ − η)₊ / ((a − 1)λ) beyond.
pub fn scad_derivative(eta: f64, lambda: f64, m: f64, a: f64) -> Result<f64> {
    check(eta, lambda, m, a)?;
    Ok(derivative_unchecked(eta, lambda, m, a))
}

/// p_λ(η) with p_λ(0) = 0, obtained by integrating the derivative.
pub fn scad_value(eta: f64, lambda: f64, m: f64, a: f64) -> Result<f64> {
    check(eta, lambda, m, a)?;
    Ok(value_unchecked(eta, lambda, m, a))
}

#[inline]
pub(crate) fn derivative_unchecked(eta: f64, lambda: f64, m: f64, a: f64) -> f64 {
    if eta <= lambda {
        m * lambda
    } else if eta < a * lambda {
        m * (a * lambda - eta) / (a - 1.0)
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn value_unchecked(eta: f64, lambda: f64, m: f64, a: f64) -> f64 {
    if eta <= lambda {
        m * lambda * eta
    } else if eta <= a * lambda {
        m * (2.0 * a * lambda * eta - eta * eta - lambda * lambda) / (2.0 * (a - 1.0))
    } else {
        m * lambda * lambda * (a + 1.0) / 2.0
    }
}

/// Hyperparameters of the double penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// λ_M, the SCAD scale.
    pub lambda: f64,
    /// C_N, weight of the log stationary-probability penalty.
    pub c_n: f64,
    /// SCAD shape constant a > 2.
    pub a: f64,
    /// Relative tolerance used to decide that two fitted values are equal.
    pub merge_tol: f64,
    /// Sample-size multiplier of the SCAD penalty (number of individuals).
    pub m: f64,
}

impl PenaltyConfig {
    pub fn new(lambda: f64, c_n: f64) -> Result<Self> {
        let p = Self {
            lambda,
            c_n,
            a: DEFAULT_A,
            merge_tol: 1e-3,
            m: 1.0,
        };
        p.validate()?;
        Ok(p)
    }

    /// Builds the config from the searched quantity log(Mλ_M).
    pub fn from_log_m_lambda(log_m_lambda: f64, c_n: f64, m: usize) -> Result<Self> {
        let m = m.max(1) as f64;
        let mut p = Self::new(log_m_lambda.exp() / m, c_n)?;
        p.m = m;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 2.0) {
            return Err(Error::Config(format!("SCAD constant a must exceed 2, got {}", self.a)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("λ must be ≥ 0, got {}", self.lambda)));
        }
        if !(self.c_n > 0.0) || !self.c_n.is_finite() {
            return Err(Error::Config(format!("C_N must be > 0, got {}", self.c_n)));
        }
        if !(self.merge_tol > 0.0) {
            return Err(Error::Config(format!("merge_tol must be > 0, got {}", self.merge_tol)));
        }
        if !(self.m >= 1.0) {
            return Err(Error::Config(format!("penalty multiplier must be ≥ 1, got {}", self.m)));
        }
        Ok(())
    }

    pub fn value(&self, eta: f64) -> f64 {
        value_unchecked(eta.max(0.0), self.lambda, self.m, self.a)
    }

    pub fn derivative(&self, eta: f64) -> f64 {
        derivative_unchecked(eta.max(0.0), self.lambda, self.m, self.a)
    }

    /// p̃(η; η̂) = p(η̂) + p'(η̂)(η − η̂), a majorizer of the concave SCAD.
    pub fn linearized(&self, eta: f64, at: f64) -> f64 {
        self.value(at) + self.derivative(at) * (eta - at)
    }
}
