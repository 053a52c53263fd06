//! Special functions needed by the emission families.

use std::f64::consts::PI;

pub use statrs::function::gamma::{digamma, ln_gamma};

/// Trigamma function ψ₁(x) for x > 0.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 12.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv
        + 0.5 * inv2
        + inv * inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0))))
}

const SERIES_LIMIT: f64 = 50.0;

/// Power series for exp(-x) I_0(x) and exp(-x) I_1(x), valid for moderate x.
fn scaled_bessel_series(x: f64) -> (f64, f64) {
    let q = 0.25 * x * x;
    let mut t0 = (-x).exp();
    let mut t1 = 0.5 * x * t0;
    let (mut i0, mut i1) = (t0, t1);
    let mut k = 1.0;
    loop {
        t0 *= q / (k * k);
        t1 *= q / (k * (k + 1.0));
        i0 += t0;
        i1 += t1;
        if t0 < 1e-17 * i0 && t1 <= 1e-17 * i1.max(f64::MIN_POSITIVE) && k > x {
            break;
        }
        k += 1.0;
        if k > 500.0 {
            break;
        }
    }
    (i0, i1)
}

/// Asymptotic bracket of I_ν(x) √(2πx) e^{-x}.
fn asymptotic_factor(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..=10 {
        let kf = k as f64;
        let odd = 2.0 * kf - 1.0;
        term *= -(mu - odd * odd) / (kf * 8.0 * x);
        sum += term;
    }
    sum
}

/// log I_0(x) for x ≥ 0.
pub fn log_bessel_i0(x: f64) -> f64 {
    if x < SERIES_LIMIT {
        let (i0, _) = scaled_bessel_series(x);
        x + i0.ln()
    } else {
        x - 0.5 * (2.0 * PI * x).ln() + asymptotic_factor(0.0, x).ln()
    }
}

/// Ratio A(x) = I_1(x) / I_0(x) for x ≥ 0.
pub fn bessel_ratio(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x < SERIES_LIMIT {
        let (i0, i1) = scaled_bessel_series(x);
        i1 / i0
    } else {
        asymptotic_factor(1.0, x) / asymptotic_factor(0.0, x)
    }
}

/// Derivative of [`bessel_ratio`]: A'(x) = 1 - A(x)/x - A(x)².
pub fn bessel_ratio_derivative(x: f64) -> f64 {
    if x <= 1e-8 {
        return 0.5;
    }
    let a = bessel_ratio(x);
    1.0 - a / x - a * a
}

/// Solves A(κ) = r for κ ≥ 0 by safeguarded Newton iteration.
pub fn inverse_bessel_ratio(r: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    let r = r.min(1.0 - 1e-12);
    // Best & Fisher style starting value.
    let mut k = if r < 0.53 {
        2.0 * r + r.powi(3) + 5.0 * r.powi(5) / 6.0
    } else if r < 0.85 {
        -0.4 + 1.39 * r + 0.43 / (1.0 - r)
    } else {
        1.0 / (r.powi(3) - 4.0 * r.powi(2) + 3.0 * r)
    };
    for _ in 0..100 {
        let f = bessel_ratio(k) - r;
        let d = bessel_ratio_derivative(k).max(1e-300);
        let mut next = k - f / d;
        if next <= 0.0 {
            next = 0.5 * k;
        }
        if (next - k).abs() <= 1e-12 * k.max(1.0) {
            return next;
        }
        k = next;
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn trigamma_reference_values() {
        assert_relative_eq!(trigamma(1.0), PI * PI / 6.0, epsilon = 1e-12);
        assert_relative_eq!(trigamma(0.5), PI * PI / 2.0, epsilon = 1e-12);
        // ψ₁(x) - ψ₁(x+1) = 1/x²
        assert_relative_eq!(trigamma(3.3) - trigamma(4.3), 1.0 / (3.3 * 3.3), epsilon = 1e-13);
    }

    #[test]
    fn trigamma_is_derivative_of_digamma() {
        for &x in &[0.3, 1.7, 5.0, 40.0] {
            let h = 1e-5 * x;
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert_relative_eq!(trigamma(x), fd, max_relative = 1e-7);
        }
    }

    #[test]
    fn bessel_known_values() {
        // I0(1) = 1.2660658777520082, I1(1) = 0.5651591039924851
        assert_relative_eq!(log_bessel_i0(1.0), 1.2660658777520082f64.ln(), epsilon = 1e-14);
        assert_relative_eq!(bessel_ratio(1.0), 0.5651591039924851 / 1.2660658777520082, epsilon = 1e-14);
        assert_eq!(log_bessel_i0(0.0), 0.0);
    }

    #[test]
    fn bessel_branches_agree_at_switch() {
        let x = SERIES_LIMIT;
        let (i0, i1) = scaled_bessel_series(x);
        let f0 = asymptotic_factor(0.0, x);
        let f1 = asymptotic_factor(1.0, x);
        let series_log = x + i0.ln();
        let asym_log = x - 0.5 * (2.0 * PI * x).ln() + f0.ln();
        assert!((series_log - asym_log).abs() < 1e-12, "{series_log} vs {asym_log}");
        assert!((i1 / i0 - f1 / f0).abs() < 1e-13);
    }

    #[test]
    fn ratio_inverse_round_trips() {
        for &k in &[0.01, 0.4, 2.0, 7.5, 30.0, 120.0] {
            let r = bessel_ratio(k);
            assert_relative_eq!(inverse_bessel_ratio(r), k, max_relative = 1e-7);
        }
    }
}
