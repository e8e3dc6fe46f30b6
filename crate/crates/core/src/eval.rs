//! Evaluation metrics: normalized RMSE of demand, path travel times and segment counts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measurement::Observations;
use crate::network::IndexedNetwork;
use crate::simulator::{estimate_expectations, Expectations, SimulationError, SimulatorConfig};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("vectors have different lengths ({0} vs {1})")]
    Length(usize, usize),
    #[error("cannot normalize an empty vector")]
    Empty,
    #[error("mean of the reference vector is {0}; it must be positive")]
    NonPositiveMean(f64),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
}

/// `sqrt(mean((estimate - truth)^2)) / mean(truth)`.
pub fn nrmse(estimate: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    if estimate.len() != truth.len() {
        return Err(EvalError::Length(estimate.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    if !(mean > 0.0) {
        return Err(EvalError::NonPositiveMean(mean));
    }
    let mse = estimate.iter().zip(truth).map(|(e, t)| (e - t).powi(2)).sum::<f64>() / n;
    Ok(mse.sqrt() / mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsTriple {
    /// Absent when no ground-truth demand is known.
    pub nrmse_demand: Option<f64>,
    pub nrmse_time: f64,
    pub nrmse_count: f64,
}

/// Metrics from already estimated expectations. Simulated counts are scaled by the nominal
/// penetration before they are compared with the sampled counts.
pub fn metrics_from_expectations(
    d: &[f64],
    gt_demand: Option<&[f64]>,
    expectations: &Expectations,
    net: &IndexedNetwork,
    obs: &Observations,
) -> Result<MetricsTriple, EvalError> {
    let times: Vec<f64> = net.measured_paths().iter().map(|&p| expectations.path_minutes[p]).collect();
    let counts: Vec<f64> =
        net.measured_segments().iter().map(|&i| obs.penetration * expectations.counts[i]).collect();
    Ok(MetricsTriple {
        nrmse_demand: gt_demand.map(|gt| nrmse(d, gt)).transpose()?,
        nrmse_time: nrmse(&times, &obs.path_minutes)?,
        nrmse_count: nrmse(&counts, &obs.segment_counts)?,
    })
}

/// Simulates `d` for `rollouts` rollouts and scores it against the observations.
pub fn evaluate_solution(
    d: &[f64],
    gt_demand: Option<&[f64]>,
    net: &IndexedNetwork,
    obs: &Observations,
    sim: &SimulatorConfig,
    rollouts: usize,
    seed: u64,
) -> Result<MetricsTriple, EvalError> {
    let e = estimate_expectations(net, d, sim, rollouts, seed)?;
    metrics_from_expectations(d, gt_demand, &e, net, obs)
}

/// Signed relative change from `reference` to `value`, in percent.
pub fn percent_change(reference: f64, value: f64) -> f64 {
    if reference == value {
        0.0
    } else {
        100.0 * (value - reference) / reference
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytical::AnalyticalParams;
    use crate::measurement::FieldMeasurements;
    use crate::simulator::{sample_measurements, simulate};
    use crate::synthetic::{generate_synthetic_network, NetworkSpec, Topology};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn nrmse_examples() {
        assert_eq!(nrmse(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(nrmse(&[12.0, 8.0], &[10.0, 10.0]).unwrap(), 0.2, epsilon = 1e-15);
        let truth = [1.0, 2.0, 6.0];
        // 2 * truth: RMSE = sqrt(mean(truth^2))
        let doubled: Vec<f64> = truth.iter().map(|t| 2.0 * t).collect();
        let expected = (41.0f64 / 3.0).sqrt() / 3.0;
        assert_abs_diff_eq!(nrmse(&doubled, &truth).unwrap(), expected, epsilon = 1e-14);
        assert!(expected > 1.0);
    }

    #[test]
    fn nrmse_errors() {
        assert_eq!(nrmse(&[1.0], &[1.0, 2.0]).unwrap_err(), EvalError::Length(1, 2));
        assert_eq!(nrmse(&[], &[]).unwrap_err(), EvalError::Empty);
        assert_eq!(nrmse(&[1.0, 1.0], &[1.0, -1.0]).unwrap_err(), EvalError::NonPositiveMean(0.0));
    }

    #[test]
    fn percent_change_signs() {
        assert_eq!(percent_change(0.4, 0.4), 0.0);
        assert_abs_diff_eq!(percent_change(0.5, 0.25), -50.0, epsilon = 1e-12);
        assert_abs_diff_eq!(percent_change(0.2, 0.3), 50.0, epsilon = 1e-12);
    }

    fn small_scenario() -> (IndexedNetwork, Vec<f64>, SimulatorConfig) {
        let net = generate_synthetic_network(&NetworkSpec {
            topology: Topology::Corridor { segments: 10 },
            ods: 4,
            seed: 2,
        })
        .unwrap()
        .index()
        .unwrap();
        (net, vec![300.0, 150.0, 420.0, 90.0], SimulatorConfig::noise_free(AnalyticalParams::default()))
    }

    fn full_measurements(net: &IndexedNetwork, d: &[f64], sim: &SimulatorConfig) -> Observations {
        let r = simulate(net, d, sim, 0, true).unwrap();
        let (m, _): (FieldMeasurements, _) = sample_measurements(net, &r, 1.0, 0).unwrap();
        m.align(net).unwrap()
    }

    #[test]
    fn truth_scores_zero_in_noise_free_mode() {
        let (net, gt, sim) = small_scenario();
        let obs = full_measurements(&net, &gt, &sim);
        let m = evaluate_solution(&gt, Some(&gt), &net, &obs, &sim, 5, 3).unwrap();
        assert_eq!(m.nrmse_demand, Some(0.0));
        assert!(m.nrmse_time <= 1e-9, "{m:?}");
        assert_eq!(m.nrmse_count, 0.0);
    }

    #[test]
    fn zero_estimate_demand_score() {
        let (net, gt, sim) = small_scenario();
        let obs = full_measurements(&net, &gt, &sim);
        let m = evaluate_solution(&[0.0; 4], Some(&gt), &net, &obs, &sim, 1, 0).unwrap();
        let mean = gt.iter().sum::<f64>() / 4.0;
        let rms = (gt.iter().map(|x| x * x).sum::<f64>() / 4.0).sqrt();
        assert_abs_diff_eq!(m.nrmse_demand.unwrap(), rms / mean, epsilon = 1e-14);
        let x = &obs.segment_counts;
        let n = x.len() as f64;
        let rms_x = (x.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        assert_abs_diff_eq!(m.nrmse_count, rms_x / (x.iter().sum::<f64>() / n), epsilon = 1e-14);
    }

    #[test]
    fn evaluation_is_deterministic_and_matches_expectations() {
        let (net, gt, _) = small_scenario();
        let sim = SimulatorConfig::default();
        let obs = full_measurements(&net, &gt, &sim);
        let d = [250.0, 200.0, 400.0, 100.0];
        let a = evaluate_solution(&d, Some(&gt), &net, &obs, &sim, 5, 9).unwrap();
        let b = evaluate_solution(&d, Some(&gt), &net, &obs, &sim, 5, 9).unwrap();
        assert_eq!(a, b);
        let e = estimate_expectations(&net, &d, &sim, 5, 9).unwrap();
        assert_eq!(a, metrics_from_expectations(&d, Some(&gt), &e, &net, &obs).unwrap());
        assert_eq!(evaluate_solution(&d, None, &net, &obs, &sim, 5, 9).unwrap().nrmse_demand, None);
    }

    proptest! {
        #[test]
        fn nrmse_scale_invariant_and_zero_on_diagonal(
            pairs in prop::collection::vec((0.0..100.0f64, 0.1..100.0f64), 1..10),
            c in 0.01..100.0f64,
        ) {
            let (e, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let a = nrmse(&e, &t).unwrap();
            let ec: Vec<f64> = e.iter().map(|x| c * x).collect();
            let tc: Vec<f64> = t.iter().map(|x| c * x).collect();
            let b = nrmse(&ec, &tc).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
            prop_assert_eq!(nrmse(&t, &t).unwrap(), 0.0);
        }
    }
}
