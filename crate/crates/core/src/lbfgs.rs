//! Limited-memory BFGS with backtracking Armijo line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LineSearch {
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Step shrink factor per backtrack.
    pub shrink: f64,
    pub max_backtracks: usize,
}

impl Default for LineSearch {
    fn default() -> Self {
        Self {
            armijo: 1e-4,
            shrink: 0.5,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub max_iterations: usize,
    pub memory: usize,
    /// Stop once `‖g‖∞ · gradient_scale ≤ gradient_tolerance`.
    pub gradient_tolerance: f64,
    pub gradient_scale: f64,
    /// Largest coordinate move of the first (unscaled) step.
    pub initial_step: f64,
    pub line_search: LineSearch,
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    /// Scaled infinity norm of the final gradient.
    pub grad_norm: f64,
    pub iterations: usize,
    pub reached_tolerance: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Hager–Zhang approximate Wolfe test. Once value differences sink into
/// rounding noise, Armijo cannot certify progress but the directional
/// derivative still can.
fn approx_wolfe(fx: f64, fnew: f64, slope0: f64, slope: f64, delta: f64) -> bool {
    let noise = 64.0 * f64::EPSILON * fx.abs().max(f64::MIN_POSITIVE);
    fnew <= fx + noise && slope <= (2.0 * delta - 1.0) * slope0 && slope >= 0.9 * slope0
}

/// Minimizes `f` from `x0`. `f` writes the gradient into its second argument
/// and returns the value.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, opts: &LbfgsOptions) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g)?;
    if !fx.is_finite() {
        return Err(Error::DivergentLineSearch);
    }
    let scaled = |g: &[f64]| inf_norm(g) * opts.gradient_scale;
    if n == 0 {
        return Ok(LbfgsOutcome {
            x,
            value: fx,
            grad_norm: 0.0,
            iterations: 0,
            reached_tolerance: true,
        });
    }

    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut xn = vec![0.0; n];
    let mut gn = vec![0.0; n];
    let mut dir = vec![0.0; n];
    let mut alpha_buf = vec![0.0; opts.memory.max(1)];
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        if scaled(&g) <= opts.gradient_tolerance {
            break;
        }
        iterations += 1;

        // two-loop recursion
        dir.copy_from_slice(&g);
        for (i, (s, y, rho)) in history.iter().enumerate().rev() {
            let a = rho * dot(s, &dir);
            alpha_buf[i] = a;
            for (d, yi) in dir.iter_mut().zip(y) {
                *d -= a * yi;
            }
        }
        let gamma = match history.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => opts.initial_step / inf_norm(&g).max(1e-300),
        };
        dir.iter_mut().for_each(|d| *d *= gamma);
        for (i, (s, y, rho)) in history.iter().enumerate() {
            let b = rho * dot(y, &dir);
            for (d, si) in dir.iter_mut().zip(s) {
                *d += (alpha_buf[i] - b) * si;
            }
        }
        dir.iter_mut().for_each(|d| *d = -*d);

        let mut slope = dot(&g, &dir);
        if slope >= 0.0 || !slope.is_finite() {
            // not a descent direction: restart with steepest descent
            history.clear();
            let scale = opts.initial_step / inf_norm(&g).max(1e-300);
            for (d, gi) in dir.iter_mut().zip(&g) {
                *d = -gi * scale;
            }
            slope = dot(&g, &dir);
        }

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..opts.line_search.max_backtracks {
            for i in 0..n {
                xn[i] = x[i] + step * dir[i];
            }
            match f(&xn, &mut gn) {
                Ok(fnew) if fnew.is_finite() && (fnew <= fx + opts.line_search.armijo * step * slope || approx_wolfe(fx, fnew, slope, dot(&gn, &dir), opts.line_search.armijo)) => {
                    accepted = true;
                    let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
                    let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
                    let sy = dot(&s, &y);
                    if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
                        if history.len() == opts.memory {
                            history.pop_front();
                        }
                        history.push_back((s, y, 1.0 / sy));
                    }
                    std::mem::swap(&mut x, &mut xn);
                    std::mem::swap(&mut g, &mut gn);
                    fx = fnew;
                    break;
                }
                Ok(_) | Err(Error::NonFiniteEnergy { .. }) | Err(Error::NonFiniteGradient) => {
                    step *= opts.line_search.shrink;
                }
                Err(e) => return Err(e),
            }
        }
        if !accepted {
            if history.is_empty() {
                // steepest descent made no progress: numerically stationary
                break;
            }
            history.clear();
        }
    }

    let grad_norm = scaled(&g);
    Ok(LbfgsOutcome {
        x,
        value: fx,
        grad_norm,
        iterations,
        reached_tolerance: grad_norm <= opts.gradient_tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> LbfgsOptions {
        LbfgsOptions {
            max_iterations: 500,
            memory: 8,
            gradient_tolerance: 1e-10,
            gradient_scale: 1.0,
            initial_step: 0.1,
            line_search: LineSearch::default(),
        }
    }

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            Ok((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2))
        };
        let out = minimize(f, vec![-1.2, 1.0], &opts()).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6);
        assert!(out.reached_tolerance);
    }

    #[test]
    fn quadratic_exact() {
        let f = |x: &[f64], g: &mut [f64]| {
            let mut v = 0.0;
            for (i, xi) in x.iter().enumerate() {
                let c = (i + 1) as f64;
                g[i] = 2.0 * c * (xi - 1.0);
                v += c * (xi - 1.0).powi(2);
            }
            Ok(v)
        };
        let out = minimize(f, vec![0.0; 20], &opts()).unwrap();
        assert!(out.value < 1e-18);
    }

    #[test]
    fn empty_problem() {
        let out = minimize(|_: &[f64], _: &mut [f64]| Ok(3.0), vec![], &opts()).unwrap();
        assert_eq!(out.value, 3.0);
        assert!(out.reached_tolerance);
    }

    #[test]
    fn non_finite_start_is_divergent() {
        let r = minimize(|_: &[f64], _: &mut [f64]| Ok(f64::NAN), vec![1.0], &opts());
        assert!(matches!(r, Err(Error::DivergentLineSearch)));
    }
}
