//! Box-constrained minimization of a smooth objective by projected gradient descent.
//!
//! Steps use the Barzilai-Borwein length as a first trial and are backtracked along the
//! projection arc until the Armijo condition holds. Close to a minimizer, where value
//! differences drown in rounding error, the approximate Armijo condition of Hager and Zhang
//! (the same test written with directional derivatives) is accepted instead, as long as the
//! value does not grow by more than [`ROUNDOFF`] relative.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubproblemOptions {
    pub max_iterations: usize,
    /// Stop when `|x - P(x - g)|_inf` falls below this value.
    pub tolerance: f64,
}

impl Default for SubproblemOptions {
    fn default() -> Self {
        Self { max_iterations: 500, tolerance: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubproblemOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub projected_gradient_norm: f64,
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
/// Relative value increase tolerated by the approximate Armijo test.
pub const ROUNDOFF: f64 = 1e-12;

fn project(x: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    x.iter().zip(lower).zip(upper).map(|((v, lo), hi)| v.clamp(*lo, *hi)).collect()
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((xi, gi), (lo, hi))| (xi - (xi - gi).clamp(*lo, *hi)).abs())
        .fold(0.0, f64::max)
}

/// Minimizes `objective` over `lower <= x <= upper` starting from `x0` (projected first).
pub fn projected_gradient_descent<F>(
    objective: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    options: &SubproblemOptions,
) -> SubproblemOutcome
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = project(x0, lower, upper);
    let (mut f, mut g) = objective(&x);
    let mut pg_norm = projected_gradient_norm(&x, &g, lower, upper);
    let g_inf = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let span = lower.iter().zip(upper).map(|(a, b)| b - a).fold(0.0f64, f64::max);
    // first trial moves the largest coordinate by a tenth of the box
    let mut step = if g_inf > 0.0 && span.is_finite() && span > 0.0 { 0.1 * span / g_inf } else { 1.0 };

    let mut iterations = 0;
    while iterations < options.max_iterations && pg_norm > options.tolerance {
        iterations += 1;
        let mut alpha = step;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - alpha * gi).collect();
            let trial = project(&trial, lower, upper);
            let decrease: f64 = g.iter().zip(trial.iter().zip(&x)).map(|(gi, (t, xi))| gi * (t - xi)).sum();
            let (ft, gt) = objective(&trial);
            let slope: f64 = gt.iter().zip(trial.iter().zip(&x)).map(|(gi, (t, xi))| gi * (t - xi)).sum();
            let armijo = ft <= f + ARMIJO * decrease;
            let approximate = ft <= f + ROUNDOFF * f.abs() && slope <= (2.0 * ARMIJO - 1.0) * decrease;
            if ft.is_finite() && (armijo || approximate) {
                accepted = Some((trial, ft, gt));
                break;
            }
            alpha *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            break;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|a| a * a).sum();
        step = if sy > 0.0 { ss / sy } else { 2.0 * alpha };

        let stalled = s.iter().all(|v| *v == 0.0);
        x = x_new;
        f = f_new;
        g = g_new;
        pg_norm = projected_gradient_norm(&x, &g, lower, upper);
        if stalled {
            break;
        }
    }
    SubproblemOutcome { x, value: f, iterations, projected_gradient_norm: pg_norm }
}
