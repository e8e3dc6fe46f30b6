//! Metamodel simulation-based optimization loop.
//!
//! Every iteration fits the correction parameters on all evaluations so far, minimizes the
//! corrected metamodel from the incumbent, simulates the candidate and keeps it if its
//! simulated objective beats the incumbent's. All evaluations of one run share the same
//! rollout seeds, so candidate and incumbent are compared under common random numbers.

mod correction;
mod subproblem;
mod trace;

pub use correction::{decay_weight, fit_correction_params, EvaluationRecord};
pub use subproblem::{projected_gradient_descent, SubproblemOptions, SubproblemOutcome};
pub use trace::{read_trace_csv, CalibrationTrace, TraceCsvRow, TraceError, TraceRow, TRACE_HEADER};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytical::{
    analytical_terms, metamodel_value_and_gradient, simulated_objective, AnalyticalParams, CorrectionParams,
    ObjectiveTerms, ObjectiveWeights,
};
use crate::eval::{metrics_from_expectations, EvalError, MetricsTriple};
use crate::measurement::Observations;
use crate::network::IndexedNetwork;
use crate::simulator::{estimate_expectations, Expectations, SimulationError, SimulatorConfig};

/// How the objective weights are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightSelection {
    /// `w1 = 1`, and `w2` such that both weighted terms are equal at the initial demand.
    Auto,
    Fixed(ObjectiveWeights),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// `false` runs the travel-time-only baseline (`w2 = 0`).
    pub regularized: bool,
    pub weights: WeightSelection,
    /// Upper bound on every OD demand.
    pub d_max: f64,
    /// Rollouts per candidate evaluation.
    pub rollouts: usize,
    /// Rollouts per metric evaluation.
    pub eval_rollouts: usize,
    pub iterations: usize,
    /// Distance scale of the history weights in the correction fit.
    pub decay_length: f64,
    /// Ridge strength pulling the correction toward the raw analytical model.
    pub prior_strength: f64,
    pub subproblem: SubproblemOptions,
    pub seed: u64,
}

impl SolverConfig {
    pub fn new(d_max: f64) -> Self {
        Self {
            regularized: true,
            weights: WeightSelection::Auto,
            d_max,
            rollouts: 5,
            eval_rollouts: 5,
            iterations: 30,
            decay_length: d_max,
            prior_strength: 1.0,
            subproblem: SubproblemOptions::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: String| Err(SolverError::Config(m));
        if !(self.d_max > 0.0 && self.d_max.is_finite()) {
            return bad(format!("d_max = {} must be positive", self.d_max));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.rollouts == 0 || self.eval_rollouts == 0 {
            return bad("rollout counts must be at least 1".into());
        }
        if !(self.decay_length > 0.0) {
            return bad(format!("decay_length = {} must be positive", self.decay_length));
        }
        if !(self.prior_strength >= 0.0) {
            return bad(format!("prior_strength = {} must be nonnegative", self.prior_strength));
        }
        if let WeightSelection::Fixed(w) = self.weights {
            ObjectiveWeights::new(w.w1, w.w2).map_err(|e| SolverError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("initial demand has {got} entries, network has {expected} OD pairs")]
    Dimension { expected: usize, got: usize },
    #[error("evaluating the initial demand failed: {0}")]
    Initial(#[from] SimulationError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// SplitMix64 mixing of a base seed with a stream id.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_ROLLOUTS: u64 = 2;
const STREAM_METRICS: u64 = 3;

/// Random initial demand, uniform in `[0, d_max / 2]` per OD.
pub fn random_initial_demand(num_ods: usize, d_max: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_INIT));
    (0..num_ods).map(|_| rng.random_range(0.0..=0.5 * d_max)).collect()
}

/// Everything a calibration run needs besides its configuration.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub net: &'a IndexedNetwork,
    pub obs: &'a Observations,
    /// Physics of the analytical metamodel.
    pub physics: &'a AnalyticalParams,
    pub sim: &'a SimulatorConfig,
    pub gt_demand: Option<&'a [f64]>,
}

impl Problem<'_> {
    fn record(&self, d: &[f64], e: &Expectations, iteration: usize, seed: u64) -> EvaluationRecord {
        let sim = simulated_objective(&e.counts, &e.path_minutes, self.net, self.obs);
        let ana = analytical_terms(d, self.net, self.obs, self.physics).terms;
        EvaluationRecord {
            d: d.to_vec(),
            sim_f1: sim.f1,
            sim_f2: sim.f2,
            analytical_f1: ana.f1,
            analytical_f2: ana.f2,
            iteration,
            seed,
        }
    }

    fn metrics(&self, d: &[f64], config: &SolverConfig) -> Result<MetricsTriple, SolverError> {
        let seed = derive_seed(config.seed, STREAM_METRICS);
        let e = estimate_expectations(self.net, d, self.sim, config.eval_rollouts, seed)?;
        Ok(metrics_from_expectations(d, self.gt_demand, &e, self.net, self.obs)?)
    }
}

/// Minimizes the corrected metamodel over `[0, d_max]` starting from `d_init`.
pub fn solve_subproblem(
    correction: &CorrectionParams,
    weights: &ObjectiveWeights,
    d_init: &[f64],
    config: &SolverConfig,
    net: &IndexedNetwork,
    obs: &Observations,
    physics: &AnalyticalParams,
) -> SubproblemOutcome {
    let n = d_init.len();
    projected_gradient_descent(
        |d: &[f64]| metamodel_value_and_gradient(d, correction, weights, net, obs, physics),
        d_init,
        &vec![0.0; n],
        &vec![config.d_max; n],
        &config.subproblem,
    )
}

fn choose_weights(config: &SolverConfig, initial: &ObjectiveTerms) -> ObjectiveWeights {
    let w = match config.weights {
        WeightSelection::Fixed(w) => w,
        WeightSelection::Auto if initial.f1 > 0.0 && initial.f2 > 0.0 => {
            ObjectiveWeights { w1: 1.0, w2: initial.f1 / initial.f2 }
        }
        WeightSelection::Auto => ObjectiveWeights { w1: 1.0, w2: 1.0 },
    };
    if config.regularized {
        w
    } else {
        ObjectiveWeights { w1: if w.w1 > 0.0 { w.w1 } else { 1.0 }, w2: 0.0 }
    }
}

/// Runs the calibration loop from the random initial demand of `config.seed`.
pub fn run_calibration(problem: &Problem<'_>, config: &SolverConfig) -> Result<CalibrationTrace, SolverError> {
    let d0 = random_initial_demand(problem.net.num_ods(), config.d_max, config.seed);
    run_calibration_from(problem, config, d0)
}

/// Runs the calibration loop from a given initial demand (clipped to the box).
pub fn run_calibration_from(
    problem: &Problem<'_>,
    config: &SolverConfig,
    initial_demand: Vec<f64>,
) -> Result<CalibrationTrace, SolverError> {
    config.validate()?;
    if initial_demand.len() != problem.net.num_ods() {
        return Err(SolverError::Dimension { expected: problem.net.num_ods(), got: initial_demand.len() });
    }
    let d0: Vec<f64> = initial_demand.iter().map(|v| v.clamp(0.0, config.d_max)).collect();
    let rollout_seed = derive_seed(config.seed, STREAM_ROLLOUTS);

    let e0 = estimate_expectations(problem.net, &d0, problem.sim, config.rollouts, rollout_seed)?;
    let first = problem.record(&d0, &e0, 0, rollout_seed);
    let initial_terms = ObjectiveTerms { f1: first.sim_f1, f2: first.sim_f2 };
    let weights = choose_weights(config, &initial_terms);

    let mut incumbent = d0.clone();
    let mut incumbent_terms = initial_terms;
    let mut incumbent_objective = initial_terms.total(&weights);
    let mut incumbent_metrics = problem.metrics(&incumbent, config)?;
    let initial_metrics = incumbent_metrics;
    let mut history = vec![first];
    let mut rows = Vec::with_capacity(config.iterations);

    for k in 1..=config.iterations {
        let correction =
            fit_correction_params(&history, &incumbent, config.prior_strength, config.decay_length);
        let candidate = solve_subproblem(
            &correction,
            &weights,
            &incumbent,
            config,
            problem.net,
            problem.obs,
            problem.physics,
        )
        .x;

        let evaluated = estimate_expectations(problem.net, &candidate, problem.sim, config.rollouts, rollout_seed);
        let (candidate_terms, accepted) = match evaluated {
            Ok(e) => {
                let rec = problem.record(&candidate, &e, k, rollout_seed);
                let terms = ObjectiveTerms { f1: rec.sim_f1, f2: rec.sim_f2 };
                history.push(rec);
                (Some(terms), terms.total(&weights) < incumbent_objective)
            }
            Err(err) => {
                log::warn!("iteration {k}: candidate evaluation failed: {err}");
                (None, false)
            }
        };
        if accepted {
            incumbent.clone_from(&candidate);
            incumbent_terms = candidate_terms.expect("accepted candidates were evaluated");
            incumbent_objective = incumbent_terms.total(&weights);
            incumbent_metrics = problem.metrics(&incumbent, config)?;
        }
        log::debug!("iteration {k}: objective {incumbent_objective:.6} accepted={accepted}");
        rows.push(TraceRow {
            iteration: k,
            candidate,
            candidate_objective: candidate_terms.map(|t| t.total(&weights)),
            objective: incumbent_objective,
            f1_sim: incumbent_terms.f1,
            f2_sim: incumbent_terms.f2,
            metrics: incumbent_metrics,
            incumbent: accepted,
        });
    }

    Ok(CalibrationTrace {
        weights,
        initial_demand: d0,
        initial_objective: initial_terms.total(&weights),
        initial_metrics,
        rows,
        final_demand: incumbent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytical::AnalyticalParams;
    use crate::simulator::{sample_measurements, simulate};
    use crate::synthetic::{generate_synthetic_network, NetworkSpec, Topology};

    fn setup(noise_free: bool) -> (IndexedNetwork, Vec<f64>, SimulatorConfig, Observations) {
        let net = generate_synthetic_network(&NetworkSpec { topology: Topology::Corridor { segments: 12 }, ods: 5, seed: 4 })
            .unwrap()
            .index()
            .unwrap();
        let gt = vec![400.0, 250.0, 600.0, 150.0, 300.0];
        let sim = if noise_free {
            SimulatorConfig::noise_free(AnalyticalParams::default())
        } else {
            SimulatorConfig::default()
        };
        let r = simulate(&net, &gt, &sim, 1, true).unwrap();
        let p = if noise_free { 1.0 } else { 0.3 };
        let obs = sample_measurements(&net, &r, p, 2).unwrap().0.align(&net).unwrap();
        (net, gt, sim, obs)
    }

    fn config(iterations: usize) -> SolverConfig {
        SolverConfig { iterations, ..SolverConfig::new(1500.0) }
    }

    #[test]
    fn single_iteration_trace() {
        let (net, gt, sim, obs) = setup(false);
        let physics = sim.physics;
        let problem = Problem { net: &net, obs: &obs, physics: &physics, sim: &sim, gt_demand: Some(&gt) };
        let t = run_calibration(&problem, &config(1)).unwrap();
        assert_eq!(t.rows.len(), 1);
        let row = &t.rows[0];
        let cand = row.candidate_objective.unwrap();
        assert_eq!(row.objective, cand.min(t.initial_objective));
        assert_eq!(row.incumbent, cand < t.initial_objective);
    }

    #[test]
    fn truth_is_a_fixed_point() {
        let (net, gt, sim, obs) = setup(true);
        let physics = sim.physics;
        let problem = Problem { net: &net, obs: &obs, physics: &physics, sim: &sim, gt_demand: Some(&gt) };
        let t = run_calibration_from(&problem, &config(5), gt.clone()).unwrap();
        assert!(t.initial_objective < 1e-12, "{}", t.initial_objective);
        assert!(t.rows.iter().all(|r| r.objective <= t.initial_objective));
        for (a, b) in t.final_demand.iter().zip(&gt) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn incumbent_monotone_feasible_and_reproducible() {
        let (net, gt, sim, obs) = setup(false);
        let physics = sim.physics;
        let problem = Problem { net: &net, obs: &obs, physics: &physics, sim: &sim, gt_demand: Some(&gt) };
        let cfg = SolverConfig { seed: 17, ..config(8) };
        let a = run_calibration(&problem, &cfg).unwrap();
        let b = run_calibration(&problem, &cfg).unwrap();
        assert_eq!(a, b);
        let mut last = a.initial_objective;
        for r in &a.rows {
            assert!(r.objective <= last);
            last = r.objective;
            assert!(r.candidate.iter().all(|v| (0.0..=cfg.d_max).contains(v)));
        }
    }

    #[test]
    fn baseline_forces_zero_regularizer_weight() {
        let (net, gt, sim, obs) = setup(false);
        let physics = sim.physics;
        let problem = Problem { net: &net, obs: &obs, physics: &physics, sim: &sim, gt_demand: Some(&gt) };
        let cfg = SolverConfig {
            regularized: false,
            weights: WeightSelection::Fixed(ObjectiveWeights { w1: 2.0, w2: 3.0 }),
            ..config(2)
        };
        let t = run_calibration(&problem, &cfg).unwrap();
        assert_eq!(t.weights, ObjectiveWeights { w1: 2.0, w2: 0.0 });
        let auto = run_calibration(&problem, &SolverConfig { regularized: true, ..config(1) }).unwrap();
        // auto balancing equalizes the weighted terms at the initial demand
        let first = problem.record(&auto.initial_demand, &estimate_expectations(&net, &auto.initial_demand, &sim, 5, derive_seed(0, STREAM_ROLLOUTS)).unwrap(), 0, 0);
        assert!((auto.weights.w2 * first.sim_f2 - first.sim_f1).abs() <= 1e-9 * first.sim_f1);
    }

    #[test]
    fn affine_metamodel_subproblem_hits_box_vertex() {
        let (net, _, sim, obs) = setup(false);
        let c = CorrectionParams {
            beta: vec![0.0, 0.0, -1.0, 2.0, -0.5, 0.0, 1.0],
            alpha: vec![0.0, 0.0, 0.0, 0.0, -1.0, 3.0, 0.5],
        };
        let cfg = config(1);
        let out = solve_subproblem(&c, &ObjectiveWeights { w1: 1.0, w2: 1.0 }, &[100.0; 5], &cfg, &net, &obs, &sim.physics);
        assert_eq!(out.x, vec![cfg.d_max, 0.0, cfg.d_max, 0.0, 0.0]);
    }

    #[test]
    fn derive_seed_separates_streams() {
        assert_ne!(derive_seed(0, 1), derive_seed(0, 2));
        assert_ne!(derive_seed(1, 1), derive_seed(0, 1));
        assert_eq!(derive_seed(5, 3), derive_seed(5, 3));
    }

    #[test]
    fn invalid_configs() {
        assert!(SolverConfig { iterations: 0, ..config(1) }.validate().is_err());
        assert!(SolverConfig { d_max: -1.0, ..config(1) }.validate().is_err());
        assert!(SolverConfig { rollouts: 0, ..config(1) }.validate().is_err());
        assert!(SolverConfig::new(10.0).validate().is_ok());
    }
}
