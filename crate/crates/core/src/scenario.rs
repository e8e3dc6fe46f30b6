//! Scenario specifications and ground-truth synthesis.
//!
//! A scenario fixes a synthetic network, a congestion level (total demand), the measurement
//! penetration, the simulator and solver settings, and the seeds of every random step.
//! [`generate_scenario`] draws the ground-truth demand, simulates it once and samples the
//! field measurements from the simulated trips.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measurement::{FieldMeasurements, MeasurementError, Observations};
use crate::network::{IndexedNetwork, Network, NetworkError};
use crate::simulator::{sample_measurements, simulate, SamplingWarning, SimulationError, SimulatorConfig};
use crate::solver::{Problem, SolverConfig, SolverError};
use crate::synthetic::{generate_synthetic_network, NetworkSpec, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Congestion {
    Low,
    Medium,
    High,
}

impl Congestion {
    /// Total demand of the desk-scale presets (vehicles per interval).
    pub fn desk_total_demand(self) -> f64 {
        match self {
            Congestion::Low => 2_000.0,
            Congestion::Medium => 3_500.0,
            Congestion::High => 5_000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSeeds {
    pub demand: u64,
    pub simulation: u64,
    pub sampling: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub network: NetworkSpec,
    pub congestion: Congestion,
    /// Overrides the congestion level's total demand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_demand: Option<f64>,
    pub penetration: f64,
    pub seeds: ScenarioSeeds,
    pub simulator: SimulatorConfig,
    pub solver: SolverConfig,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario field `{field}`: {message}")]
    Field { field: &'static str, message: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("demand file lacks OD `{0}`")]
    MissingDemand(String),
}

fn field(field: &'static str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Field { field, message: message.into() }
}

impl ScenarioSpec {
    /// Desk-scale corridor preset: 30 segments, 12 OD pairs, 15% penetration, K = 30, R = 5.
    pub fn desk_corridor(congestion: Congestion) -> Self {
        let ods = 12;
        let total = congestion.desk_total_demand();
        Self {
            name: format!("corridor-{}", format!("{congestion:?}").to_lowercase()),
            network: NetworkSpec { topology: Topology::Corridor { segments: 30 }, ods, seed: 7 },
            congestion,
            total_demand: None,
            penetration: 0.15,
            seeds: ScenarioSeeds { demand: 11, simulation: 13, sampling: 17 },
            simulator: SimulatorConfig::default(),
            solver: SolverConfig::new(desk_d_max(total, ods)),
        }
    }

    pub fn total_demand(&self) -> f64 {
        self.total_demand.unwrap_or_else(|| self.congestion.desk_total_demand())
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let total = self.total_demand();
        if !(total > 0.0 && total.is_finite()) {
            return Err(field("total_demand", format!("{total} must be positive")));
        }
        if !(self.penetration > 0.0 && self.penetration <= 1.0) {
            return Err(field("penetration", format!("{} outside (0, 1]", self.penetration)));
        }
        if self.network.ods == 0 {
            return Err(field("network.ods", "at least one OD pair is required"));
        }
        self.simulator.validate().map_err(|e| field("simulator", e.to_string()))?;
        self.solver.validate().map_err(|e| field("solver", e.to_string()))?;
        Ok(())
    }
}

/// Per-OD demand bound of the presets: three times the mean OD demand.
pub fn desk_d_max(total_demand: f64, ods: usize) -> f64 {
    3.0 * total_demand / ods as f64
}

/// Ground-truth demand: OD shares drawn uniformly in `[0.25, 1.75]`, scaled to `total`.
pub fn ground_truth_demand(num_ods: usize, total: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shares: Vec<f64> = (0..num_ods).map(|_| rng.random_range(0.25..1.75)).collect();
    let sum: f64 = shares.iter().sum();
    shares.iter().map(|s| total * s / sum).collect()
}

/// Demand vector keyed by OD id, as stored on disk.
pub type DemandFile = BTreeMap<String, f64>;

pub fn demand_to_file(net: &Network, d: &[f64]) -> DemandFile {
    net.od_pairs.iter().cloned().zip(d.iter().copied()).collect()
}

pub fn demand_from_file(net: &Network, file: &DemandFile) -> Result<Vec<f64>, ScenarioError> {
    net.od_pairs
        .iter()
        .map(|od| file.get(od).copied().ok_or_else(|| ScenarioError::MissingDemand(od.clone())))
        .collect()
}

/// A generated scenario: everything a calibration run consumes.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub network: IndexedNetwork,
    pub gt_demand: Vec<f64>,
    pub measurements: FieldMeasurements,
    pub observations: Observations,
    pub warnings: Vec<SamplingWarning>,
}

impl Scenario {
    pub fn problem(&self) -> Problem<'_> {
        Problem {
            net: &self.network,
            obs: &self.observations,
            physics: &self.spec.simulator.physics,
            sim: &self.spec.simulator,
            gt_demand: Some(&self.gt_demand),
        }
    }

    /// Reassembles a scenario from its stored parts.
    pub fn from_parts(
        spec: ScenarioSpec,
        network: &Network,
        gt_demand: &DemandFile,
        measurements: FieldMeasurements,
    ) -> Result<Self, ScenarioError> {
        let violations = network.validate_with_min_speed(spec.simulator.physics.v_min);
        if !violations.is_empty() {
            return Err(NetworkError::Invalid(violations).into());
        }
        let indexed = network.index()?;
        let gt = demand_from_file(network, gt_demand)?;
        let observations = measurements.align(&indexed)?;
        Ok(Self { spec, network: indexed, gt_demand: gt, measurements, observations, warnings: Vec::new() })
    }
}

/// Builds the network, draws and simulates the ground truth, and samples measurements.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Scenario, ScenarioError> {
    spec.validate()?;
    let network = generate_synthetic_network(&spec.network)?;
    let violations = network.validate_with_min_speed(spec.simulator.physics.v_min);
    if !violations.is_empty() {
        return Err(NetworkError::Invalid(violations).into());
    }
    let indexed = network.index()?;
    let gt_demand = ground_truth_demand(indexed.num_ods(), spec.total_demand(), spec.seeds.demand);
    let rollout = simulate(&indexed, &gt_demand, &spec.simulator, spec.seeds.simulation, true)?;
    let (measurements, warnings) = sample_measurements(&indexed, &rollout, spec.penetration, spec.seeds.sampling)?;
    let observations = measurements.align(&indexed)?;
    Ok(Scenario { spec: spec.clone(), network: indexed, gt_demand, measurements, observations, warnings })
}
