//! Stochastic quasi-static traffic simulator used as the calibration black box.
//!
//! One rollout:
//! 1. draws the number of trips of every OD pair (Poisson around the demand, or the rounded
//!    demand in deterministic mode) and distributes them over the OD's paths by split;
//! 2. counts vehicles per segment;
//! 3. resolves per-segment velocities with a damped fixed point: velocity follows the fundamental
//!    diagram of the analytical model scaled by a lognormal factor drawn once per segment, and
//!    with `occupancy_feedback = theta > 0` occupancy grows as vehicles slow down
//!    (`k = k_free * (v_max / v)^theta`);
//! 4. sums `l / v` along every path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytical::{self, AnalyticalParams};
use crate::measurement::FieldMeasurements;
use crate::network::IndexedNetwork;

/// How trip counts are generated from demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemandNoise {
    Poisson,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatorConfig {
    pub physics: AnalyticalParams,
    /// Standard deviation of the log velocity noise.
    pub velocity_noise: f64,
    pub demand_noise: DemandNoise,
    /// Relative fixed-point residual below which the velocities are considered converged.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Initial relaxation factor of the velocity update.
    pub damping: f64,
    /// Exponent of the occupancy feedback `k = k_free * (v_max / v)^theta`; 0 disables it.
    #[serde(default)]
    pub occupancy_feedback: f64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            physics: AnalyticalParams::default(),
            velocity_noise: 0.05,
            demand_noise: DemandNoise::Poisson,
            tolerance: 1e-9,
            max_iterations: 500,
            damping: 0.5,
            occupancy_feedback: 0.0,
        }
    }
}

impl SimulatorConfig {
    /// Noise-free, deterministic-demand configuration.
    pub fn noise_free(physics: AnalyticalParams) -> Self {
        Self { physics, velocity_noise: 0.0, demand_noise: DemandNoise::Deterministic, ..Self::default() }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SimulationError {
    #[error("demand of OD {od} is {value}; demand must be finite and nonnegative")]
    InvalidDemand { od: usize, value: f64 },
    #[error("demand has {got} entries, network has {expected} OD pairs")]
    DemandDimension { expected: usize, got: usize },
    #[error("invalid simulator configuration: {0}")]
    Config(String),
    #[error("simulation result carries no trip records")]
    NoTrips,
    #[error("penetration {0} outside (0, 1]")]
    Penetration(f64),
    #[error("rollout count must be at least 1")]
    NoRollouts,
}

/// One simulated trip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripRecord {
    pub od: usize,
    pub path: usize,
    pub minutes: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    /// Vehicles per segment over the interval.
    pub counts: Vec<f64>,
    /// Travel time per path in minutes.
    pub path_minutes: Vec<f64>,
    /// Trips per path.
    pub path_trips: Vec<u64>,
    /// Per-trip records, present when requested.
    pub trips: Option<Vec<TripRecord>>,
    /// False when the velocity fixed point hit the iteration cap; the values are the last iterate.
    pub converged: bool,
    pub fixed_point_iterations: usize,
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<(), SimulationError> {
        self.physics.validate().map_err(|e| SimulationError::Config(e.to_string()))?;
        if !(self.velocity_noise >= 0.0 && self.velocity_noise.is_finite()) {
            return Err(SimulationError::Config(format!("velocity noise {} must be >= 0", self.velocity_noise)));
        }
        if !(self.tolerance > 0.0) {
            return Err(SimulationError::Config(format!("tolerance {} must be > 0", self.tolerance)));
        }
        if self.max_iterations == 0 {
            return Err(SimulationError::Config("max_iterations must be positive".into()));
        }
        if !(self.occupancy_feedback >= 0.0 && self.occupancy_feedback.is_finite()) {
            return Err(SimulationError::Config(format!(
                "occupancy feedback {} must be >= 0",
                self.occupancy_feedback
            )));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(SimulationError::Config(format!("damping {} outside (0, 1]", self.damping)));
        }
        Ok(())
    }
}

fn check_demand(net: &IndexedNetwork, d: &[f64]) -> Result<(), SimulationError> {
    if d.len() != net.num_ods() {
        return Err(SimulationError::DemandDimension { expected: net.num_ods(), got: d.len() });
    }
    match d.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
        Some(od) => Err(SimulationError::InvalidDemand { od, value: d[od] }),
        None => Ok(()),
    }
}

fn draw_trips<R: Rng>(mean: f64, mode: DemandNoise, rng: &mut R) -> u64 {
    match mode {
        DemandNoise::Deterministic => mean.round() as u64,
        DemandNoise::Poisson if mean <= 0.0 => 0,
        DemandNoise::Poisson => Poisson::new(mean).expect("positive finite mean").sample(rng) as u64,
    }
}

/// Splits `n` trips over paths in proportion to the fractions, by largest remainder.
fn apportion_trips(n: u64, splits: &[f64]) -> Vec<u64> {
    let exact: Vec<f64> = splits.iter().map(|s| s * n as f64).collect();
    let mut out: Vec<u64> = exact.iter().map(|x| x.floor() as u64).collect();
    let mut order: Vec<usize> = (0..splits.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let assigned: u64 = out.iter().sum();
    for &k in order.iter().cycle().take(n.saturating_sub(assigned) as usize) {
        out[k] += 1;
    }
    out
}

/// Splits `n` trips over paths with the given fractions (sequential binomial draws).
fn split_trips<R: Rng>(n: u64, splits: &[f64], rng: &mut R) -> Vec<u64> {
    let mut out = vec![0; splits.len()];
    let mut remaining = n;
    let mut mass = 1.0;
    for (k, &s) in splits.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if k + 1 == splits.len() || mass <= s {
            out[k] = remaining;
            break;
        }
        let p = (s / mass).clamp(0.0, 1.0);
        let take = Binomial::new(remaining, p).expect("valid binomial").sample(rng);
        out[k] = take;
        remaining -= take;
        mass -= s;
    }
    out
}

/// Runs one rollout. Pure in `(net, d, config, seed)`.
pub fn simulate(
    net: &IndexedNetwork,
    d: &[f64],
    config: &SimulatorConfig,
    seed: u64,
    record_trips: bool,
) -> Result<SimulationResult, SimulationError> {
    config.validate()?;
    check_demand(net, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // paths grouped by OD, in path order
    let mut paths_of_od: Vec<Vec<usize>> = vec![Vec::new(); net.num_ods()];
    for (p, path) in net.paths().iter().enumerate() {
        paths_of_od[path.od].push(p);
    }
    let mut path_trips = vec![0u64; net.num_paths()];
    for (z, paths) in paths_of_od.iter().enumerate() {
        let n = draw_trips(d[z], config.demand_noise, &mut rng);
        let splits: Vec<f64> = paths.iter().map(|&p| net.paths()[p].split).collect();
        let parts = match config.demand_noise {
            DemandNoise::Poisson => split_trips(n, &splits, &mut rng),
            DemandNoise::Deterministic => apportion_trips(n, &splits),
        };
        for (&p, k) in paths.iter().zip(parts) {
            path_trips[p] = k;
        }
    }

    let mut counts = vec![0.0; net.num_segments()];
    for (path, &n) in net.paths().iter().zip(&path_trips) {
        for &i in &path.segments {
            counts[i] += n as f64;
        }
    }

    let noise: Vec<f64> = (0..net.num_segments())
        .map(|_| {
            let eps: f64 = rng.sample(StandardNormal);
            (config.velocity_noise * eps).exp()
        })
        .collect();

    let (velocity, converged, iterations) = resolve_velocities(net, &counts, &noise, config);

    let path_minutes: Vec<f64> =
        net.paths().iter().map(|p| analytical::path_travel_time(p, net.segments(), &velocity)).collect();

    let trips = record_trips.then(|| {
        net.paths()
            .iter()
            .enumerate()
            .flat_map(|(p, path)| {
                let minutes = path_minutes[p];
                (0..path_trips[p]).map(move |_| TripRecord { od: path.od, path: p, minutes })
            })
            .collect()
    });

    Ok(SimulationResult { counts, path_minutes, path_trips, trips, converged, fixed_point_iterations: iterations })
}

/// Damped fixed point `v = clamp(noise * FD(k_free * (v_max / v)^theta))`, segment by segment.
///
/// The relaxation factor starts at `config.damping` and is halved for a segment whenever its
/// update overshoots (the step changes sign).
fn resolve_velocities(
    net: &IndexedNetwork,
    counts: &[f64],
    noise: &[f64],
    config: &SimulatorConfig,
) -> (Vec<f64>, bool, usize) {
    let p = &config.physics;
    let mut velocity = Vec::with_capacity(counts.len());
    let mut all_converged = true;
    let mut max_iters = 0;
    for ((seg, &count), &xi) in net.segments().iter().zip(counts).zip(noise) {
        let v_max = seg.speed_limit_kmh;
        let k_free = analytical::density(count, seg.lanes, p);
        let theta = config.occupancy_feedback;
        let target =
            |v: f64| (xi * analytical::velocity(k_free * (v_max / v).powf(theta), v_max, p)).clamp(p.v_min, v_max);

        let mut v = target(v_max);
        let mut omega = config.damping;
        let mut last_residual = 0.0;
        let mut converged = false;
        let mut it = 0;
        while it < config.max_iterations {
            it += 1;
            let residual = target(v) - v;
            if residual.abs() <= config.tolerance * v {
                converged = true;
                break;
            }
            if residual * last_residual < 0.0 {
                omega *= 0.5;
            }
            last_residual = residual;
            v += omega * residual;
        }
        all_converged &= converged;
        max_iters = max_iters.max(it);
        velocity.push(v);
    }
    (velocity, all_converged, max_iters)
}

/// Mean segment counts and path times over `rollouts` rollouts with seeds `seed + 1 ..= seed + rollouts`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expectations {
    pub counts: Vec<f64>,
    pub path_minutes: Vec<f64>,
    pub converged: bool,
}

pub fn estimate_expectations(
    net: &IndexedNetwork,
    d: &[f64],
    config: &SimulatorConfig,
    rollouts: usize,
    seed: u64,
) -> Result<Expectations, SimulationError> {
    if rollouts == 0 {
        return Err(SimulationError::NoRollouts);
    }
    let results = (1..=rollouts as u64)
        .into_par_iter()
        .map(|r| simulate(net, d, config, seed.wrapping_add(r), false))
        .collect::<Result<Vec<_>, _>>()?;
    // reduction in seed order keeps the sums independent of scheduling
    let n = rollouts as f64;
    let mut counts = vec![0.0; net.num_segments()];
    let mut path_minutes = vec![0.0; net.num_paths()];
    for r in &results {
        counts.iter_mut().zip(&r.counts).for_each(|(a, b)| *a += b);
        path_minutes.iter_mut().zip(&r.path_minutes).for_each(|(a, b)| *a += b);
    }
    counts.iter_mut().for_each(|x| *x /= n);
    path_minutes.iter_mut().for_each(|x| *x /= n);
    Ok(Expectations { counts, path_minutes, converged: results.iter().all(|r| r.converged) })
}

/// Issues raised while sampling measurements.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplingWarning {
    /// No retained trip crossed the segment; its count was floored at 1.
    EmptySegment(String),
    /// No retained trip used the path; the all-trip mean was used.
    EmptyPath(String),
}

/// Retains each trip independently with probability `penetration` and aggregates the sample
/// into segment counts and path travel times over the network's measured sets.
pub fn sample_measurements(
    net: &IndexedNetwork,
    result: &SimulationResult,
    penetration: f64,
    seed: u64,
) -> Result<(FieldMeasurements, Vec<SamplingWarning>), SimulationError> {
    if !(penetration > 0.0 && penetration <= 1.0) {
        return Err(SimulationError::Penetration(penetration));
    }
    let trips = result.trips.as_ref().ok_or(SimulationError::NoTrips)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut counts = vec![0.0; net.num_segments()];
    let mut kept = vec![0u64; net.num_paths()];
    let mut kept_minutes = vec![0.0; net.num_paths()];
    let mut all = vec![0u64; net.num_paths()];
    let mut all_minutes = vec![0.0; net.num_paths()];
    for t in trips {
        all[t.path] += 1;
        all_minutes[t.path] += t.minutes;
        if penetration >= 1.0 || rng.random::<f64>() < penetration {
            kept[t.path] += 1;
            kept_minutes[t.path] += t.minutes;
            for &i in &net.paths()[t.path].segments {
                counts[i] += 1.0;
            }
        }
    }

    let mut warnings = Vec::new();
    let mut paths = std::collections::BTreeMap::new();
    for &p in net.measured_paths() {
        let id = net.path_id(p).to_string();
        let minutes = if kept[p] > 0 {
            kept_minutes[p] / kept[p] as f64
        } else {
            warnings.push(SamplingWarning::EmptyPath(id.clone()));
            if all[p] > 0 {
                all_minutes[p] / all[p] as f64
            } else {
                result.path_minutes[p]
            }
        };
        paths.insert(id, minutes);
    }
    let mut segments = std::collections::BTreeMap::new();
    for &i in net.measured_segments() {
        let id = net.segment_id(i).to_string();
        let count = if counts[i] > 0.0 {
            counts[i]
        } else {
            warnings.push(SamplingWarning::EmptySegment(id.clone()));
            1.0
        };
        segments.insert(id, count);
    }
    for w in &warnings {
        log::warn!("measurement sampling: {w:?}");
    }
    Ok((FieldMeasurements { paths, segments, penetration }, warnings))
}
