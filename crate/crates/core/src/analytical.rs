//! Physics-based metamodel.
//!
//! The chain evaluated here is
//!
//! ```text
//! d --A--> lambda --(kappa k_jam / n_i)--> density --FD--> velocity --sum l/v--> path time
//! ```
//!
//! followed by the two objective terms: mean squared travel-time error over the measured
//! paths, and the population variance of the count ratios `lambda_i / x_i` over the
//! measured segments. Every quantity has an exact gradient with respect to `d`.
//!
//! Units: km, km/h, minutes, vehicles per analysis interval.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measurement::Observations;
use crate::network::{AssignmentMatrix, IndexedNetwork, RoutedPath, Segment};

/// Fundamental-diagram and density parameters shared by every segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticalParams {
    /// Minimum velocity, km/h.
    pub v_min: f64,
    /// Jam density, veh/km/lane.
    pub k_jam: f64,
    /// Critical density, veh/km/lane.
    pub k_crit: f64,
    /// Scaling from interval demand to density.
    pub kappa: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl Default for AnalyticalParams {
    fn default() -> Self {
        Self { v_min: 10.0, k_jam: 160.0, k_crit: 40.0, kappa: 0.001, gamma1: 2.0, gamma2: 2.0 }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid analytical parameters: {0}")]
pub struct ParamsError(pub String);

impl AnalyticalParams {
    pub fn validate(&self) -> Result<(), ParamsError> {
        let finite = [self.v_min, self.k_jam, self.k_crit, self.kappa, self.gamma1, self.gamma2]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(ParamsError("all parameters must be finite".into()));
        }
        if self.v_min <= 0.0 {
            return Err(ParamsError(format!("v_min = {} must be positive", self.v_min)));
        }
        if !(0.0 < self.k_crit && self.k_crit < self.k_jam) {
            return Err(ParamsError(format!("need 0 < k_crit ({}) < k_jam ({})", self.k_crit, self.k_jam)));
        }
        if self.kappa <= 0.0 {
            return Err(ParamsError(format!("kappa = {} must be positive", self.kappa)));
        }
        if self.gamma1 <= 0.0 || self.gamma2 <= 0.0 {
            return Err(ParamsError("FD exponents must be positive".into()));
        }
        Ok(())
    }

    /// Density per unit of link demand on a segment with `lanes` lanes.
    pub fn density_coefficient(&self, lanes: u32) -> f64 {
        self.kappa * self.k_jam / f64::from(lanes)
    }
}

/// Nonnegative objective weights `w1` (travel time) and `w2` (count-ratio regularizer).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub w1: f64,
    pub w2: f64,
}

impl ObjectiveWeights {
    pub fn new(w1: f64, w2: f64) -> Result<Self, ParamsError> {
        if !(w1 >= 0.0 && w2 >= 0.0 && w1.is_finite() && w2.is_finite()) || w1 + w2 <= 0.0 {
            return Err(ParamsError(format!("weights ({w1}, {w2}) must be nonnegative with positive sum")));
        }
        Ok(Self { w1, w2 })
    }
}

/// `lambda = A d`.
pub fn link_demand(a: &AssignmentMatrix, d: &[f64]) -> Vec<f64> {
    a.apply(d)
}

/// `k_i = kappa * k_jam * lambda_i / n_i`.
pub fn density(lambda: f64, lanes: u32, params: &AnalyticalParams) -> f64 {
    params.density_coefficient(lanes) * lambda
}

/// Normalized congestion `(max(k, k_crit) - k_crit) / k_jam`, capped at 1.
///
/// Past `k_crit + k_jam` the closed form would turn back up for even `gamma2`; the cap keeps
/// the velocity at `v_min` there.
fn congestion_ratio(k: f64, params: &AnalyticalParams) -> f64 {
    ((k.max(params.k_crit) - params.k_crit) / params.k_jam).min(1.0)
}

/// Fundamental-diagram velocity in km/h for density `k` on a segment with speed limit `v_max`.
pub fn velocity(k: f64, v_max: f64, params: &AnalyticalParams) -> f64 {
    let r = congestion_ratio(k, params);
    let v = params.v_min + (v_max - params.v_min) * (1.0 - r.powf(params.gamma1)).powf(params.gamma2);
    v.clamp(params.v_min, v_max)
}

/// `dv/dk`. Zero on the free-flow branch (including exactly at `k_crit`) and past the jam cap.
pub fn velocity_derivative(k: f64, v_max: f64, params: &AnalyticalParams) -> f64 {
    if k <= params.k_crit {
        return 0.0;
    }
    let r = (k - params.k_crit) / params.k_jam;
    if r >= 1.0 {
        return 0.0;
    }
    let (g1, g2) = (params.gamma1, params.gamma2);
    let inner = 1.0 - r.powf(g1);
    -(v_max - params.v_min) * g2 * inner.powf(g2 - 1.0) * g1 * r.powf(g1 - 1.0) / params.k_jam
}

/// Travel time in minutes along `path` given per-segment velocities.
pub fn path_travel_time(path: &RoutedPath, segments: &[Segment], velocity: &[f64]) -> f64 {
    path.segments.iter().map(|&i| 60.0 * segments[i].length_km / velocity[i]).sum()
}

/// Per-segment and per-path quantities of the analytical model at a demand vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticalState {
    pub lambda: Vec<f64>,
    pub density: Vec<f64>,
    pub velocity: Vec<f64>,
    /// Analytical travel time in minutes for every path of the network.
    pub path_minutes: Vec<f64>,
}

impl AnalyticalState {
    pub fn evaluate(net: &IndexedNetwork, d: &[f64], params: &AnalyticalParams) -> Self {
        let lambda = link_demand(net.assignment(), d);
        let density: Vec<f64> =
            net.segments().iter().zip(&lambda).map(|(s, &l)| self::density(l, s.lanes, params)).collect();
        let velocity: Vec<f64> =
            net.segments().iter().zip(&density).map(|(s, &k)| self::velocity(k, s.speed_limit_kmh, params)).collect();
        let path_minutes =
            net.paths().iter().map(|p| path_travel_time(p, net.segments(), &velocity)).collect();
        Self { lambda, density, velocity, path_minutes }
    }
}

/// Mean squared deviation between `estimate` and `truth`.
pub fn mean_squared_error(estimate: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(estimate.len(), truth.len());
    assert!(!truth.is_empty(), "mean over an empty set");
    estimate.iter().zip(truth).map(|(e, t)| (t - e).powi(2)).sum::<f64>() / truth.len() as f64
}

/// Relative spread below which ratios count as equal; `c * x / x` is not always `c` in floating point.
pub const RATIO_EQUALITY_TOLERANCE: f64 = 1e-12;

/// Population variance of `values[i] / reference[i]`, exactly 0 when all ratios agree to
/// [`RATIO_EQUALITY_TOLERANCE`].
pub fn ratio_variance(values: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(values.len(), reference.len());
    assert!(!reference.is_empty(), "variance over an empty set");
    let n = reference.len() as f64;
    let ratios: Vec<f64> = values.iter().zip(reference).map(|(v, x)| v / x).collect();
    let mean = ratios.iter().sum::<f64>() / n;
    if ratios.iter().all(|r| (r - mean).abs() <= RATIO_EQUALITY_TOLERANCE * mean.abs()) {
        return 0.0;
    }
    ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n
}

fn measured<'a>(values: &'a [f64], indices: &'a [usize]) -> impl Iterator<Item = f64> + 'a {
    indices.iter().map(move |&i| values[i])
}

/// `f1`: mean squared travel-time error of the analytical model over the measured paths.
pub fn f1_analytical(d: &[f64], net: &IndexedNetwork, obs: &Observations, params: &AnalyticalParams) -> f64 {
    let state = AnalyticalState::evaluate(net, d, params);
    let y: Vec<f64> = measured(&state.path_minutes, net.measured_paths()).collect();
    mean_squared_error(&y, &obs.path_minutes)
}

/// `f2`: population variance of `lambda_i / x_i` over the measured segments.
pub fn f2_analytical(d: &[f64], net: &IndexedNetwork, obs: &Observations) -> f64 {
    let lambda = link_demand(net.assignment(), d);
    f2_from_lambda(&lambda, net, obs)
}

fn f2_from_lambda(lambda: &[f64], net: &IndexedNetwork, obs: &Observations) -> f64 {
    let l: Vec<f64> = measured(lambda, net.measured_segments()).collect();
    ratio_variance(&l, &obs.segment_counts)
}

/// The two objective terms, evaluated either analytically or from simulated expectations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub f1: f64,
    pub f2: f64,
}

impl ObjectiveTerms {
    pub fn total(&self, w: &ObjectiveWeights) -> f64 {
        w.w1 * self.f1 + w.w2 * self.f2
    }
}

/// Simulation-based objective terms from expected counts (all segments) and expected path
/// times (all paths).
pub fn simulated_objective(
    mean_counts: &[f64],
    mean_path_minutes: &[f64],
    net: &IndexedNetwork,
    obs: &Observations,
) -> ObjectiveTerms {
    let y: Vec<f64> = measured(mean_path_minutes, net.measured_paths()).collect();
    let x: Vec<f64> = measured(mean_counts, net.measured_segments()).collect();
    ObjectiveTerms { f1: mean_squared_error(&y, &obs.path_minutes), f2: ratio_variance(&x, &obs.segment_counts) }
}

/// Analytical terms together with their gradients over the OD vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticalTerms {
    pub terms: ObjectiveTerms,
    pub grad_f1: Vec<f64>,
    pub grad_f2: Vec<f64>,
}

/// Evaluates `f1`, `f2` and both gradients by the chain rule through
/// `lambda -> k -> v -> y`, and through the ratio variance.
pub fn analytical_terms(
    d: &[f64],
    net: &IndexedNetwork,
    obs: &Observations,
    params: &AnalyticalParams,
) -> AnalyticalTerms {
    let state = AnalyticalState::evaluate(net, d, params);
    let segments = net.segments();

    // d f1 / d lambda_i
    let np = net.measured_paths().len() as f64;
    let mut dlambda_f1 = vec![0.0; segments.len()];
    let mut f1 = 0.0;
    for (&p, &y_gt) in net.measured_paths().iter().zip(&obs.path_minutes) {
        let resid = state.path_minutes[p] - y_gt;
        f1 += resid * resid;
        let coef = 2.0 * resid / np;
        for &i in &net.paths()[p].segments {
            let s = &segments[i];
            let dv_dk = velocity_derivative(state.density[i], s.speed_limit_kmh, params);
            if dv_dk == 0.0 {
                continue;
            }
            let v = state.velocity[i];
            let dy_dv = -60.0 * s.length_km / (v * v);
            dlambda_f1[i] += coef * dy_dv * dv_dk * params.density_coefficient(s.lanes);
        }
    }
    f1 /= np;

    let ni = net.measured_segments().len() as f64;
    let ratios: Vec<f64> = net
        .measured_segments()
        .iter()
        .zip(&obs.segment_counts)
        .map(|(&i, x)| state.lambda[i] / x)
        .collect();
    let mean = ratios.iter().sum::<f64>() / ni;
    let f2 = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / ni;
    // The derivative of the mean cancels because the deviations sum to zero.
    let mut dlambda_f2 = vec![0.0; segments.len()];
    for ((&i, x), r) in net.measured_segments().iter().zip(&obs.segment_counts).zip(&ratios) {
        dlambda_f2[i] += 2.0 * (r - mean) / (ni * x);
    }

    let a = net.assignment();
    AnalyticalTerms {
        terms: ObjectiveTerms { f1, f2 },
        grad_f1: a.apply_transpose(&dlambda_f1),
        grad_f2: a.apply_transpose(&dlambda_f2),
    }
}

/// Metamodel parameters: `beta` corrects the travel-time term, `alpha` the regularizer.
///
/// Each vector is `[scale, intercept, coef_1, ..., coef_|Z|]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionParams {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl CorrectionParams {
    /// Scale 1 and zero affine part on both terms: the metamodel is the raw physical model.
    pub fn identity(num_ods: usize) -> Self {
        let mut v = vec![0.0; num_ods + 2];
        v[0] = 1.0;
        Self { beta: v.clone(), alpha: v }
    }

    pub fn num_ods(&self) -> usize {
        self.beta.len() - 2
    }

    pub fn is_finite(&self) -> bool {
        self.beta.iter().chain(&self.alpha).all(|x| x.is_finite())
    }
}

/// `scale * f + intercept + sum_z coef_z d_z`.
fn corrected(params: &[f64], f: f64, d: &[f64]) -> f64 {
    params[0] * f + params[1] + params[2..].iter().zip(d).map(|(c, x)| c * x).sum::<f64>()
}

/// Value and gradient of the metamodel
/// `w1 (beta_0 f1 + phi_1(d; beta)) + w2 (alpha_0 f2 + phi_2(d; alpha))`.
pub fn metamodel_value_and_gradient(
    d: &[f64],
    correction: &CorrectionParams,
    weights: &ObjectiveWeights,
    net: &IndexedNetwork,
    obs: &Observations,
    params: &AnalyticalParams,
) -> (f64, Vec<f64>) {
    assert_eq!(correction.num_ods(), d.len(), "correction dimension does not match demand");
    let t = analytical_terms(d, net, obs, params);
    let (b, a) = (&correction.beta, &correction.alpha);
    let value =
        weights.w1 * corrected(b, t.terms.f1, d) + weights.w2 * corrected(a, t.terms.f2, d);
    let grad = (0..d.len())
        .map(|z| {
            weights.w1 * (b[0] * t.grad_f1[z] + b[z + 2]) + weights.w2 * (a[0] * t.grad_f2[z] + a[z + 2])
        })
        .collect();
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::tests::{path, seg};
    use crate::network::Network;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn params_2_2() -> AnalyticalParams {
        AnalyticalParams { v_min: 10.0, k_jam: 160.0, k_crit: 40.0, kappa: 0.001, gamma1: 2.0, gamma2: 2.0 }
    }

    fn two_path_net() -> IndexedNetwork {
        Network {
            segments: vec![seg("a", 1.0, 2, 100.0), seg("b", 2.0, 1, 80.0), seg("c", 0.5, 3, 120.0)],
            od_pairs: vec!["z1".into(), "z2".into()],
            paths: vec![path("p1", "z1", &["a", "b"], 1.0), path("p2", "z2", &["b", "c"], 1.0)],
            measured_paths: vec!["p1".into(), "p2".into()],
            measured_segments: vec!["a".into(), "b".into(), "c".into()],
        }
        .index()
        .unwrap()
    }

    #[test]
    fn link_demand_examples() {
        let a = AssignmentMatrix::from_rows(vec![vec![1.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(link_demand(&a, &[10.0, 5.0]), vec![15.0, 10.0]);
        assert_eq!(link_demand(&a, &[0.0, 0.0]), vec![0.0, 0.0]);
        let eye = AssignmentMatrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(link_demand(&eye, &[3.5, 7.0]), vec![3.5, 7.0]);
    }

    #[test]
    fn density_examples() {
        let p = params_2_2();
        assert_eq!(density(0.0, 2, &p), 0.0);
        assert_abs_diff_eq!(density(500.0, 2, &p), 40.0, epsilon = 1e-12);
        assert_abs_diff_eq!(density(500.0, 4, &p), 20.0, epsilon = 1e-12);
    }

    #[test]
    fn velocity_examples() {
        let p = params_2_2();
        assert_eq!(velocity(0.0, 100.0, &p), 100.0);
        assert_eq!(velocity(p.k_crit, 100.0, &p), 100.0);
        assert_eq!(velocity(p.k_crit + p.k_jam, 100.0, &p), 10.0);
        assert_abs_diff_eq!(velocity(120.0, 100.0, &p), 60.625, epsilon = 1e-12);
        // beyond the jam cap the velocity stays at the floor
        assert_eq!(velocity(1e6, 100.0, &p), 10.0);
    }

    #[test]
    fn path_time_examples() {
        let segments = vec![seg("a", 1.0, 1, 30.0), seg("b", 2.0, 1, 60.0)];
        let p = RoutedPath { od: 0, segments: vec![0, 1], split: 1.0 };
        assert_abs_diff_eq!(path_travel_time(&p, &segments, &[30.0, 60.0]), 4.0, epsilon = 1e-12);
        let single = RoutedPath { od: 0, segments: vec![1], split: 1.0 };
        assert_abs_diff_eq!(path_travel_time(&single, &segments, &[30.0, 60.0]), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn free_flow_matches_network_helper() {
        let net = two_path_net();
        let s = AnalyticalState::evaluate(&net, &[0.0, 0.0], &params_2_2());
        for p in 0..net.num_paths() {
            assert_abs_diff_eq!(s.path_minutes[p], net.free_flow_minutes(p), epsilon = 1e-12);
        }
    }

    #[test]
    fn f1_examples() {
        let net = two_path_net();
        let p = params_2_2();
        let ff: Vec<f64> = (0..2).map(|i| net.free_flow_minutes(i)).collect();
        let exact = Observations { path_minutes: ff.clone(), segment_counts: vec![1.0; 3], penetration: 1.0 };
        assert_eq!(f1_analytical(&[0.0, 0.0], &net, &exact, &p), 0.0);
        let shifted = Observations { path_minutes: vec![ff[0] + 1.0, ff[1] - 1.0], ..exact };
        assert_abs_diff_eq!(f1_analytical(&[0.0, 0.0], &net, &shifted, &p), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn f2_examples() {
        assert_abs_diff_eq!(ratio_variance(&[1.0, 3.0], &[1.0, 1.0]), 1.0, epsilon = 1e-15);
        assert_eq!(ratio_variance(&[42.0], &[3.0]), 0.0);
        let x = [3.0, 11.0, 0.5];
        for c in [0.0, 1.0, 7.3] {
            let lambda: Vec<f64> = x.iter().map(|v| c * v).collect();
            assert_eq!(ratio_variance(&lambda, &x), 0.0);
        }
    }

    #[test]
    fn identity_correction_is_raw_model() {
        let net = two_path_net();
        let p = params_2_2();
        let obs = Observations { path_minutes: vec![3.0, 4.0], segment_counts: vec![50.0, 80.0, 30.0], penetration: 0.15 };
        let d = [20000.0, 35000.0];
        let w = ObjectiveWeights { w1: 0.7, w2: 2.5 };
        let (m, _) = metamodel_value_and_gradient(&d, &CorrectionParams::identity(2), &w, &net, &obs, &p);
        let expected = 0.7 * f1_analytical(&d, &net, &obs, &p) + 2.5 * f2_analytical(&d, &net, &obs);
        assert_eq!(m, expected);
    }

    #[test]
    fn affine_only_gradient() {
        let net = two_path_net();
        let obs = Observations { path_minutes: vec![3.0, 4.0], segment_counts: vec![50.0, 80.0, 30.0], penetration: 0.15 };
        let c = CorrectionParams { beta: vec![0.0, 1.0, -2.0, 3.0], alpha: vec![0.0, -1.0, 0.5, 0.25] };
        let w = ObjectiveWeights { w1: 2.0, w2: 4.0 };
        let (_, g) = metamodel_value_and_gradient(&[30000.0, 100.0], &c, &w, &net, &obs, &params_2_2());
        assert_eq!(g, vec![2.0 * -2.0 + 4.0 * 0.5, 2.0 * 3.0 + 4.0 * 0.25]);
    }

    #[test]
    fn gradient_matches_central_differences_in_congestion() {
        let net = two_path_net();
        let p = params_2_2();
        let obs = Observations { path_minutes: vec![3.0, 4.0], segment_counts: vec![50.0, 80.0, 30.0], penetration: 0.15 };
        let c = CorrectionParams { beta: vec![1.3, 0.2, 1e-5, -2e-5], alpha: vec![0.8, 0.0, 3e-6, 1e-6] };
        let w = ObjectiveWeights { w1: 1.0, w2: 0.5 };
        // segment b carries both ODs and is well past k_crit here
        let d = [45000.0, 30000.0];
        let (_, g) = metamodel_value_and_gradient(&d, &c, &w, &net, &obs, &p);
        for z in 0..2 {
            let h = 1e-4 * d[z];
            let mut up = d;
            up[z] += h;
            let mut dn = d;
            dn[z] -= h;
            let fd = (metamodel_value_and_gradient(&up, &c, &w, &net, &obs, &p).0
                - metamodel_value_and_gradient(&dn, &c, &w, &net, &obs, &p).0)
                / (2.0 * h);
            assert!((g[z] - fd).abs() <= 1e-5 * fd.abs().max(1e-8), "z={z}: {} vs {}", g[z], fd);
        }
    }

    #[test]
    fn params_validation() {
        assert!(params_2_2().validate().is_ok());
        let bad = AnalyticalParams { k_crit: 200.0, ..params_2_2() };
        assert!(bad.validate().is_err());
        assert!(ObjectiveWeights::new(0.0, 0.0).is_err());
        assert!(ObjectiveWeights::new(1.0, 0.0).is_ok());
    }

    fn arb_params() -> impl Strategy<Value = (AnalyticalParams, f64)> {
        (1.0..50.0f64, 20.0..300.0f64, 0.05..0.95f64, 0.2..5.0f64, 0.2..5.0f64, 1.05..4.0f64).prop_map(
            |(v_min, k_jam, crit_frac, g1, g2, vmax_mult)| {
                let p = AnalyticalParams {
                    v_min,
                    k_jam,
                    k_crit: crit_frac * k_jam,
                    kappa: 1e-3,
                    gamma1: g1,
                    gamma2: g2,
                };
                (p, v_min * vmax_mult)
            },
        )
    }

    proptest! {
        #[test]
        fn velocity_is_bounded_and_nonincreasing((p, v_max) in arb_params(), k1 in 0.0..1000.0f64, k2 in 0.0..1000.0f64) {
            let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
            let (v_lo, v_hi) = (velocity(lo, v_max, &p), velocity(hi, v_max, &p));
            prop_assert!(v_lo >= p.v_min && v_lo <= v_max);
            prop_assert!(v_hi <= v_lo);
        }

        #[test]
        fn f2_zero_iff_ratios_equal(x in prop::collection::vec(0.5..100.0f64, 2..8), c in 0.0..10.0f64, bump in 0.01..5.0f64, at in 0usize..8) {
            let lambda: Vec<f64> = x.iter().map(|v| c * v).collect();
            prop_assert_eq!(ratio_variance(&lambda, &x), 0.0);
            let mut perturbed = lambda.clone();
            let i = at % x.len();
            perturbed[i] += bump * x[i];
            prop_assert!(ratio_variance(&perturbed, &x) > 1e-12);
        }

        #[test]
        fn f2_invariant_under_joint_rescaling(pairs in prop::collection::vec((0.0..500.0f64, 0.5..100.0f64), 1..8), c in 0.1..20.0f64) {
            let (lambda, x): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let lc: Vec<f64> = lambda.iter().map(|v| c * v).collect();
            let xc: Vec<f64> = x.iter().map(|v| c * v).collect();
            let (a, b) = (ratio_variance(&lambda, &x), ratio_variance(&lc, &xc));
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }
    }
}
