//! Limited-memory BFGS with Armijo backtracking.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbfgsParams {
    pub memory: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Stop when an accepted step lowers the objective by less than this
    /// fraction of its magnitude.
    pub relative_tolerance: f64,
    /// Length of the very first step along the normalized gradient.
    pub initial_step: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsParams {
    fn default() -> Self {
        LbfgsParams {
            memory: 8,
            max_iterations: 500,
            gradient_tolerance: 1e-6,
            relative_tolerance: 1e-10,
            initial_step: 0.1,
            armijo: 1e-4,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    RelativeTolerance,
    MaxIterations,
    /// No descent step could be found even from steepest descent.
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub reason: StopReason,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Two-loop recursion: approximate inverse Hessian times `g`.
fn direction(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        for v in q.iter_mut() {
            *v *= gamma;
        }
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

/// Minimizes `f`, which returns the value and gradient at a point.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, params: &LbfgsParams) -> Minimum
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut evaluations = 1;
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut reason = StopReason::MaxIterations;
    while iterations < params.max_iterations {
        let gn = norm(&g);
        if gn < params.gradient_tolerance || x.is_empty() {
            reason = StopReason::GradientTolerance;
            break;
        }
        let mut accepted = None;
        // quasi-Newton direction first, steepest descent as the fallback
        for attempt in 0..2 {
            let mut d = if attempt == 0 && !pairs.is_empty() {
                direction(&g, &pairs)
            } else {
                g.iter().map(|v| -v * params.initial_step / gn).collect()
            };
            let mut slope = dot(&g, &d);
            if !(slope < 0.0) {
                d = g.iter().map(|v| -v * params.initial_step / gn).collect();
                slope = dot(&g, &d);
            }
            let mut step = 1.0;
            for _ in 0..params.max_backtracks {
                let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
                let (ft, gt) = f(&trial);
                evaluations += 1;
                if ft.is_finite() && ft <= fx + params.armijo * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
                step *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
            pairs.clear();
        }
        let Some((xn, fn_, gn_)) = accepted else {
            log::warn!("line search failed after {iterations} iterations; keeping best iterate");
            reason = StopReason::LineSearchFailed;
            break;
        };
        iterations += 1;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn_.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if pairs.len() == params.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        let decrease = fx - fn_;
        x = xn;
        fx = fn_;
        g = gn_;
        if decrease <= params.relative_tolerance * fx.abs().max(1e-300) {
            reason = StopReason::RelativeTolerance;
            break;
        }
    }
    Minimum {
        gradient_norm: norm(&g),
        x,
        value: fx,
        iterations,
        evaluations,
        reason,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_converges() {
        let m = minimize(
            |x| {
                let f = (x[0] - 3.0).powi(2) + 10.0 * (x[1] + 1.0).powi(2);
                (f, vec![2.0 * (x[0] - 3.0), 20.0 * (x[1] + 1.0)])
            },
            vec![0.0, 0.0],
            &LbfgsParams::default(),
        );
        assert!((m.x[0] - 3.0).abs() < 1e-6 && (m.x[1] + 1.0).abs() < 1e-6, "{m:?}");
    }

    #[test]
    fn rosenbrock_converges() {
        let m = minimize(
            |x| {
                let (a, b) = (x[0], x[1]);
                let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
                (f, g)
            },
            vec![-1.2, 1.0],
            &LbfgsParams {
                relative_tolerance: 0.0,
                ..LbfgsParams::default()
            },
        );
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5, "{m:?}");
    }

    #[test]
    fn never_increases_the_objective() {
        // a nonsmooth objective where line searches eventually fail
        let m = minimize(
            |x| (x[0].abs() + 0.5 * x[1].abs(), vec![x[0].signum(), 0.5 * x[1].signum()]),
            vec![1.3, -0.7],
            &LbfgsParams::default(),
        );
        assert!(m.value <= 1.3 + 0.35);
    }
}
