//! Fitting the metamodel correction parameters to the simulation history.
//!
//! For each objective term separately, the parameters `theta = [scale, intercept, coef_z...]`
//! minimize
//!
//! ```text
//! sum_j w_j (scale * f_analytical(d_j) + intercept + coef . d_j - f_simulated(d_j))^2
//!     + mu * ((scale - 1)^2 + intercept^2 + |coef|^2)
//! ```
//!
//! with distance-decay weights `w_j = 1 / (1 + |d_j - d_current| / rho)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::analytical::CorrectionParams;

/// One simulated evaluation of a candidate demand vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub d: Vec<f64>,
    /// Simulated travel-time term.
    pub sim_f1: f64,
    /// Simulated count-ratio variance term.
    pub sim_f2: f64,
    /// Analytical travel-time term at `d`.
    pub analytical_f1: f64,
    /// Analytical count-ratio variance at `d`.
    pub analytical_f2: f64,
    pub iteration: usize,
    pub seed: u64,
}

/// Weight of a history point at Euclidean distance `distance` from the current iterate.
pub fn decay_weight(distance: f64, decay_length: f64) -> f64 {
    1.0 / (1.0 + distance / decay_length)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Weighted ridge regression shrunk toward `prior`.
///
/// Solves `(X^T W X + mu I) theta = X^T W y + mu prior`. With `mu = 0` and a singular system the
/// minimum-distance-to-prior least-squares solution is returned.
fn ridge_toward_prior(
    rows: &[Vec<f64>],
    targets: &[f64],
    weights: &[f64],
    prior: &DVector<f64>,
    mu: f64,
) -> DVector<f64> {
    let p = prior.len();
    let mut normal = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for ((x, &y), &w) in rows.iter().zip(targets).zip(weights) {
        // residual of the prior, so the solve is for the deviation from it
        let r = y - x.iter().zip(prior.iter()).map(|(a, b)| a * b).sum::<f64>();
        for a in 0..p {
            rhs[a] += w * x[a] * r;
            for b in 0..p {
                normal[(a, b)] += w * x[a] * x[b];
            }
        }
    }
    for a in 0..p {
        normal[(a, a)] += mu;
    }
    let delta = match normal.clone().cholesky() {
        Some(chol) if mu > 0.0 => chol.solve(&rhs),
        _ => normal
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .expect("SVD was computed with both factors"),
    };
    prior + delta
}

/// Fits `beta` (travel-time term) and `alpha` (regularizer) on the evaluation history.
///
/// An empty history yields the prior: scale 1, all affine coefficients 0.
pub fn fit_correction_params(
    history: &[EvaluationRecord],
    d_current: &[f64],
    prior_strength: f64,
    decay_length: f64,
) -> CorrectionParams {
    let n = d_current.len();
    let identity = CorrectionParams::identity(n);
    if history.is_empty() {
        return identity;
    }
    let weights: Vec<f64> =
        history.iter().map(|r| decay_weight(distance(&r.d, d_current), decay_length)).collect();
    let features = |f: f64, d: &[f64]| {
        let mut row = Vec::with_capacity(n + 2);
        row.push(f);
        row.push(1.0);
        row.extend_from_slice(d);
        row
    };
    let rows_f1: Vec<Vec<f64>> = history.iter().map(|r| features(r.analytical_f1, &r.d)).collect();
    let rows_f2: Vec<Vec<f64>> = history.iter().map(|r| features(r.analytical_f2, &r.d)).collect();
    let y1: Vec<f64> = history.iter().map(|r| r.sim_f1).collect();
    let y2: Vec<f64> = history.iter().map(|r| r.sim_f2).collect();
    let prior = DVector::from_vec(identity.beta.clone());

    let beta = ridge_toward_prior(&rows_f1, &y1, &weights, &prior, prior_strength);
    let alpha = ridge_toward_prior(&rows_f2, &y2, &weights, &prior, prior_strength);
    CorrectionParams { beta: beta.iter().copied().collect(), alpha: alpha.iter().copied().collect() }
}
