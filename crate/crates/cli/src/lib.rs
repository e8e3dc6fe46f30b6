//! Experiment commands behind the `odcal` binary.
//!
//! A scenario directory holds `scenario.json` (the spec), `network.json`, `demand.json` (the
//! ground-truth demand) and `measurements.json`. A run directory holds `trace.csv`,
//! `summary.json` and, with plotting enabled, `convergence.svg`.

pub mod svg;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use odcal_core::analytical::ObjectiveWeights;
use odcal_core::eval::{percent_change, MetricsTriple};
use odcal_core::measurement::FieldMeasurements;
use odcal_core::network::Network;
use odcal_core::scenario::{demand_to_file, generate_scenario, DemandFile, Scenario, ScenarioSpec};
use odcal_core::solver::{read_trace_csv, run_calibration, TraceCsvRow};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::svg::Series;

pub const SCENARIO_FILE: &str = "scenario.json";
pub const NETWORK_FILE: &str = "network.json";
pub const DEMAND_FILE: &str = "demand.json";
pub const MEASUREMENTS_FILE: &str = "measurements.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONVERGENCE_SVG: &str = "convergence.svg";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const SCATTER_FILE: &str = "scatter.csv";
pub const SCATTER_SVG: &str = "scatter.svg";

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn load_spec(path: &Path) -> Result<ScenarioSpec> {
    let spec: ScenarioSpec = read_json(path)?;
    spec.validate().with_context(|| format!("validating {}", path.display()))?;
    Ok(spec)
}

/// Writes the four scenario files into `out` and returns the generated scenario.
pub fn generate(spec: &ScenarioSpec, out: &Path) -> Result<Scenario> {
    let scenario = generate_scenario(spec)?;
    for w in &scenario.warnings {
        log::warn!("{w:?}");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let network = scenario.network.network();
    write_file(&out.join(SCENARIO_FILE), to_json(spec)?)?;
    write_file(&out.join(NETWORK_FILE), to_json(network)?)?;
    write_file(&out.join(DEMAND_FILE), to_json(&demand_to_file(network, &scenario.gt_demand))?)?;
    write_file(&out.join(MEASUREMENTS_FILE), to_json(&scenario.measurements)?)?;
    Ok(scenario)
}

/// Loads a scenario directory written by [`generate`].
pub fn load_scenario(dir: &Path) -> Result<Scenario> {
    let spec = load_spec(&dir.join(SCENARIO_FILE))?;
    let network: Network = read_json(&dir.join(NETWORK_FILE))?;
    let demand: DemandFile = read_json(&dir.join(DEMAND_FILE))?;
    let measurements: FieldMeasurements = read_json(&dir.join(MEASUREMENTS_FILE))?;
    Scenario::from_parts(spec, &network, &demand, measurements)
        .with_context(|| format!("loading scenario {}", dir.display()))
}

/// Hash of the network, ground truth and measurements of a scenario directory.
pub fn scenario_fingerprint(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in [NETWORK_FILE, DEMAND_FILE, MEASUREMENTS_FILE] {
        let path = dir.join(name);
        h.update(fs::read(&path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(hex::encode(&h.finalize()[..16]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Regularized,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Regularized => "regularized",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrateOptions {
    pub mode: Mode,
    pub iterations: Option<usize>,
    pub rollouts: Option<usize>,
    pub seed: Option<u64>,
    pub plot: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub fingerprint: String,
    pub mode: Mode,
    pub seed: u64,
    pub iterations: usize,
    pub rollouts: usize,
    pub weights: ObjectiveWeights,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub initial_metrics: MetricsTriple,
    pub final_metrics: MetricsTriple,
    pub ground_truth_demand: DemandFile,
    pub initial_demand: DemandFile,
    pub final_demand: DemandFile,
}

pub fn default_run_dir(scenario_dir: &Path, mode: Mode, seed: u64) -> PathBuf {
    scenario_dir.join("runs").join(format!("{}-seed{seed}", mode.as_str()))
}

/// Runs one calibration on a scenario directory and writes the run files into `out`.
pub fn calibrate(scenario_dir: &Path, out: &Path, opts: &CalibrateOptions) -> Result<RunSummary> {
    let scenario = load_scenario(scenario_dir)?;
    let fingerprint = scenario_fingerprint(scenario_dir)?;
    let mut config = scenario.spec.solver.clone();
    config.regularized = opts.mode == Mode::Regularized;
    if let Some(k) = opts.iterations {
        config.iterations = k;
    }
    if let Some(r) = opts.rollouts {
        config.rollouts = r;
        config.eval_rollouts = r;
    }
    if let Some(s) = opts.seed {
        config.seed = s;
    }
    let trace = run_calibration(&scenario.problem(), &config)?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let csv = trace.to_csv_string();
    write_file(&out.join(TRACE_FILE), &csv)?;
    let net = scenario.network.network();
    let summary = RunSummary {
        scenario: scenario.spec.name.clone(),
        fingerprint,
        mode: opts.mode,
        seed: config.seed,
        iterations: config.iterations,
        rollouts: config.rollouts,
        weights: trace.weights,
        initial_objective: trace.initial_objective,
        final_objective: trace.rows.last().map_or(trace.initial_objective, |r| r.objective),
        initial_metrics: trace.initial_metrics,
        final_metrics: trace.final_metrics(),
        ground_truth_demand: demand_to_file(net, &scenario.gt_demand),
        initial_demand: demand_to_file(net, &trace.initial_demand),
        final_demand: demand_to_file(net, &trace.final_demand),
    };
    write_file(&out.join(SUMMARY_FILE), to_json(&summary)?)?;
    if opts.plot {
        let rows = read_trace_csv(csv.as_bytes())?;
        let title = format!("{} ({}, seed {})", summary.scenario, opts.mode.as_str(), config.seed);
        write_file(&out.join(CONVERGENCE_SVG), convergence_svg(&title, &[(opts.mode.as_str(), &rows)]))?;
    }
    Ok(summary)
}

fn metric_series(label: &str, rows: &[TraceCsvRow], f: impl Fn(&MetricsTriple) -> Option<f64>) -> Series {
    Series::new(label, rows.iter().filter_map(|r| f(&r.metrics).map(|v| (r.iteration as f64, v))).collect())
}

/// nRMSE curves of one or more traces against the iteration number.
pub fn convergence_svg(title: &str, traces: &[(&str, &[TraceCsvRow])]) -> String {
    let mut series = Vec::new();
    for (name, rows) in traces {
        let prefix = if traces.len() > 1 { format!("{name} ") } else { String::new() };
        series.push(metric_series(&format!("{prefix}demand"), rows, |m| m.nrmse_demand));
        series.push(metric_series(&format!("{prefix}time"), rows, |m| Some(m.nrmse_time)));
        series.push(metric_series(&format!("{prefix}count"), rows, |m| Some(m.nrmse_count)));
    }
    series.retain(|s| !s.points.is_empty());
    svg::line_chart(title, "iteration", "nRMSE", &series)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub scenario: String,
    pub metric: &'static str,
    pub baseline: Option<f64>,
    pub regularized: Option<f64>,
    pub change_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterRow {
    pub od: String,
    pub ground_truth: f64,
    pub baseline: f64,
    pub regularized: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub scatter: Vec<ScatterRow>,
}

struct Run {
    summary: RunSummary,
    rows: Vec<TraceCsvRow>,
}

fn load_run(trace: &Path) -> Result<Run> {
    let file = fs::File::open(trace).with_context(|| format!("reading {}", trace.display()))?;
    let rows = read_trace_csv(file).with_context(|| format!("parsing {}", trace.display()))?;
    let dir = trace.parent().unwrap_or(Path::new("."));
    let summary: RunSummary = read_json(&dir.join(SUMMARY_FILE))?;
    Ok(Run { summary, rows })
}

fn final_metrics(run: &Run) -> MetricsTriple {
    run.rows.last().map_or(run.summary.initial_metrics, |r| r.metrics)
}

/// Compares the final metrics of two runs on the same scenario; the first is the reference.
pub fn compare(baseline_trace: &Path, regularized_trace: &Path, out: &Path, plot: bool) -> Result<Comparison> {
    let a = load_run(baseline_trace)?;
    let b = load_run(regularized_trace)?;
    if a.summary.fingerprint != b.summary.fingerprint || a.summary.scenario != b.summary.scenario {
        bail!(
            "traces come from different scenarios: {} ({}) vs {} ({})",
            a.summary.scenario,
            a.summary.fingerprint,
            b.summary.scenario,
            b.summary.fingerprint
        );
    }
    ensure!(
        a.summary.ground_truth_demand.keys().eq(b.summary.final_demand.keys()),
        "demand vectors of the two runs have different OD pairs"
    );

    let (ma, mb) = (final_metrics(&a), final_metrics(&b));
    let metric_rows: [(&'static str, Option<f64>, Option<f64>); 3] = [
        ("nrmse_demand", ma.nrmse_demand, mb.nrmse_demand),
        ("nrmse_time", Some(ma.nrmse_time), Some(mb.nrmse_time)),
        ("nrmse_count", Some(ma.nrmse_count), Some(mb.nrmse_count)),
    ];
    let rows: Vec<ComparisonRow> = metric_rows
        .into_iter()
        .map(|(metric, x, y)| ComparisonRow {
            scenario: a.summary.scenario.clone(),
            metric,
            baseline: x,
            regularized: y,
            change_pct: x.zip(y).map(|(x, y)| percent_change(x, y)),
        })
        .collect();
    let scatter: Vec<ScatterRow> = a
        .summary
        .ground_truth_demand
        .iter()
        .map(|(od, &gt)| ScatterRow {
            od: od.clone(),
            ground_truth: gt,
            baseline: a.summary.final_demand[od],
            regularized: b.summary.final_demand[od],
        })
        .collect();

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_csv(&out.join(COMPARISON_FILE), &rows)?;
    write_csv(&out.join(SCATTER_FILE), &scatter)?;
    if plot {
        let series = [
            Series::new("baseline", scatter.iter().map(|r| (r.ground_truth, r.baseline)).collect()),
            Series::new("regularized", scatter.iter().map(|r| (r.ground_truth, r.regularized)).collect()),
        ];
        let title = format!("{}: ground truth vs calibrated demand", a.summary.scenario);
        write_file(&out.join(SCATTER_SVG), svg::scatter_chart(&title, "ground truth", "calibrated", &series))?;
        let title = format!("{}: convergence", a.summary.scenario);
        let svg = convergence_svg(&title, &[("baseline", &a.rows), ("regularized", &b.rows)]);
        write_file(&out.join(CONVERGENCE_SVG), svg)?;
    }
    Ok(Comparison { rows, scatter })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
