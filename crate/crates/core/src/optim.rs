//! Small dense optimizers used inside the M-steps.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct OptimOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            grad_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Maximizes `f` with BFGS and an Armijo backtracking line search.
///
/// `f(x, grad)` returns the objective and writes its gradient. Non-finite
/// values are treated as infeasible. The returned value is never below
/// `f(x0)`.
pub fn maximize_bfgs<F>(f: F, x0: &[f64], opts: OptimOptions) -> OptimResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    maximize_bfgs_from(f, x0, None, opts)
}

/// [`maximize_bfgs`] with an initial inverse Hessian of −f. With `h0` the
/// first trial step is the full quasi-Newton step.
pub fn maximize_bfgs_from<F>(mut f: F, x0: &[f64], h0: Option<DMatrix<f64>>, opts: OptimOptions) -> OptimResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let d = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; d];
    let mut fx = f(&x, &mut g);
    if d == 0 || !fx.is_finite() {
        return OptimResult {
            x,
            value: fx,
            iterations: 0,
            converged: d == 0,
        };
    }
    // inverse Hessian approximation of −f
    let scaled = h0.as_ref().is_some_and(|h| h.nrows() == d && h.ncols() == d);
    let reset = if scaled { h0.unwrap() } else { DMatrix::<f64>::identity(d, d) };
    let mut h = reset.clone();
    let mut first = !scaled;
    let mut xn = vec![0.0; d];
    let mut gn = vec![0.0; d];
    for iter in 0..opts.max_iter {
        if inf_norm(&g) <= opts.grad_tol * (1.0 + fx.abs()).min(1e3) {
            return OptimResult {
                x,
                value: fx,
                iterations: iter,
                converged: true,
            };
        }
        let gv = DVector::from_column_slice(&g);
        // ascent direction p = H g
        let mut p: Vec<f64> = (&h * &gv).iter().copied().collect();
        let mut slope: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(slope > 0.0) {
            h = reset.clone();
            p = (&h * &gv).iter().copied().collect();
            if !(p.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() > 0.0) {
                h = DMatrix::identity(d, d);
                p = g.clone();
            }
            slope = p.iter().zip(&g).map(|(a, b)| a * b).sum();
        }
        let mut step = if first { (1.0 / inf_norm(&g)).min(1.0) } else { 1.0 };
        first = false;
        let mut accepted = false;
        let mut fnew = fx;
        for _ in 0..60 {
            for k in 0..d {
                xn[k] = x[k] + step * p[k];
            }
            fnew = f(&xn, &mut gn);
            if fnew.is_finite() && fnew >= fx + 1e-4 * step * slope {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            let converged = inf_norm(&g) <= 1e-6 * (1.0 + fx.abs());
            return OptimResult {
                x,
                value: fx,
                iterations: iter,
                converged,
            };
        }
        // BFGS update on φ = −f: s = Δx, y = −Δg
        let s = DVector::from_iterator(d, xn.iter().zip(&x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(d, gn.iter().zip(&g).map(|(a, b)| b - a));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let small_change = (fnew - fx).abs() <= 1e-15 * fx.abs().max(1.0);
        x.copy_from_slice(&xn);
        g.copy_from_slice(&gn);
        fx = fnew;
        if small_change && inf_norm(&g) <= 1e-5 * (1.0 + fx.abs()) {
            return OptimResult {
                x,
                value: fx,
                iterations: iter + 1,
                converged: true,
            };
        }
    }
    let converged = inf_norm(&g) <= opts.grad_tol * (1.0 + fx.abs()).min(1e3);
    OptimResult {
        x,
        value: fx,
        iterations: opts.max_iter,
        converged,
    }
}

/// Maximizes a twice-differentiable function subject to `x ≥ lower`
/// with a projected Newton method (Bertsekas' two-metric projection).
///
/// `f(x)` returns `(value, gradient, Hessian)`; the Hessian is row-major.
/// Falls back to projected gradient steps when the free block of the
/// Hessian is not negative definite. Variables sitting on their bound end
/// there exactly.
pub fn maximize_projected_newton<F>(mut f: F, x0: &[f64], lower: &[f64], opts: OptimOptions) -> OptimResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>, Vec<f64>),
{
    let d = x0.len();
    let project = |x: &mut [f64]| {
        for (v, &lb) in x.iter_mut().zip(lower) {
            if *v < lb {
                *v = lb;
            }
        }
    };
    let mut x = x0.to_vec();
    project(&mut x);
    let (mut fx, mut g, mut hess) = f(&x);
    if !fx.is_finite() {
        return OptimResult {
            x,
            value: fx,
            iterations: 0,
            converged: false,
        };
    }
    let eps_bound = 1e-12;
    for iter in 0..opts.max_iter {
        // projected gradient norm
        let pg = (0..d)
            .map(|k| if x[k] <= lower[k] + eps_bound && g[k] < 0.0 { 0.0 } else { g[k].abs() })
            .fold(0.0, f64::max);
        if pg <= opts.grad_tol * (1.0 + fx.abs()).min(1e3) {
            return OptimResult {
                x,
                value: fx,
                iterations: iter,
                converged: true,
            };
        }
        let active: Vec<bool> = (0..d)
            .map(|k| x[k] <= lower[k] + 1e-10 * (1.0 + lower[k].abs()) && g[k] < 0.0)
            .collect();
        let free: Vec<usize> = (0..d).filter(|&k| !active[k]).collect();
        let mut dir = vec![0.0; d];
        let mut newton = false;
        if !free.is_empty() {
            let nf = free.len();
            let neg_h = DMatrix::from_fn(nf, nf, |a, b| -hess[free[a] * d + free[b]]);
            if let Some(chol) = neg_h.cholesky() {
                let rhs = DVector::from_iterator(nf, free.iter().map(|&k| g[k]));
                let sol = chol.solve(&rhs);
                for (a, &k) in free.iter().enumerate() {
                    dir[k] = sol[a];
                }
                newton = true;
            }
        }
        if !newton {
            // diagonal scaling where possible, plain gradient otherwise
            for &k in &free {
                let hk = -hess[k * d + k];
                dir[k] = if hk > 1e-12 { g[k] / hk } else { g[k] };
            }
        }
        let mut step = 1.0;
        let mut accepted = false;
        let mut xn = x.clone();
        let mut res = (fx, g.clone(), hess.clone());
        for _ in 0..60 {
            for k in 0..d {
                xn[k] = x[k] + step * dir[k];
            }
            project(&mut xn);
            let gain: f64 = (0..d).map(|k| g[k] * (xn[k] - x[k])).sum();
            let cand = f(&xn);
            if cand.0.is_finite() && cand.0 >= fx + 1e-4 * gain && cand.0 >= fx {
                res = cand;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return OptimResult {
                x,
                value: fx,
                iterations: iter,
                converged: pg <= 1e-5 * (1.0 + fx.abs()),
            };
        }
        let change = (res.0 - fx).abs();
        x = xn;
        fx = res.0;
        g = res.1;
        hess = res.2;
        if change <= 1e-15 * fx.abs().max(1.0) && newton {
            return OptimResult {
                x,
                value: fx,
                iterations: iter + 1,
                converged: true,
            };
        }
    }
    OptimResult {
        x,
        value: fx,
        iterations: opts.max_iter,
        converged: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bfgs_finds_maximum_of_rosenbrock() {
        let f = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -(-2.0 * (1.0 - a) - 400.0 * a * (b - a * a));
            g[1] = -(200.0 * (b - a * a));
            -((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2))
        };
        let r = maximize_bfgs(f, &[-1.2, 1.0], OptimOptions { max_iter: 500, grad_tol: 1e-10 });
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn projected_newton_lands_on_bound() {
        // max −(x−1)² − (y+2)² subject to y ≥ 0: solution (1, 0)
        let f = |x: &[f64]| {
            let v = -(x[0] - 1.0).powi(2) - (x[1] + 2.0).powi(2);
            (v, vec![-2.0 * (x[0] - 1.0), -2.0 * (x[1] + 2.0)], vec![-2.0, 0.0, 0.0, -2.0])
        };
        let r = maximize_projected_newton(f, &[5.0, 3.0], &[f64::NEG_INFINITY, 0.0], OptimOptions::default());
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-12);
        assert_eq!(r.x[1], 0.0);
    }

    #[test]
    fn projected_newton_handles_coupled_hessian() {
        // max −½ xᵀAx + bᵀx, A = [[2,1],[1,2]], b = (1, 1), unconstrained optimum (1/3, 1/3)
        let f = |x: &[f64]| {
            let v = -(x[0] * x[0] + x[0] * x[1] + x[1] * x[1]) + x[0] + x[1];
            (
                v,
                vec![-(2.0 * x[0] + x[1]) + 1.0, -(x[0] + 2.0 * x[1]) + 1.0],
                vec![-2.0, -1.0, -1.0, -2.0],
            )
        };
        let r = maximize_projected_newton(f, &[0.0, 0.0], &[-10.0, -10.0], OptimOptions::default());
        assert!((r.x[0] - 1.0 / 3.0).abs() < 1e-12 && (r.x[1] - 1.0 / 3.0).abs() < 1e-12);
    }
}
