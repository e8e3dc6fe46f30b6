use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use odcal_cli::{load_scenario, RunSummary, SUMMARY_FILE, TRACE_FILE};
use odcal_core::scenario::{Congestion, ScenarioSpec};
use odcal_core::simulator::simulate;
use odcal_core::solver::read_trace_csv;
use tempfile::TempDir;

fn odcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odcal")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = odcal(args);
    assert!(out.status.success(), "odcal {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_spec(dir: &Path, name: &str, spec: &ScenarioSpec) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(spec).unwrap()).unwrap();
    path
}

fn generated(tmp: &TempDir, spec: &ScenarioSpec, name: &str) -> PathBuf {
    let spec_path = write_spec(tmp.path(), &format!("{name}.json"), spec);
    let out = tmp.path().join(name);
    ok(&["generate", "--spec", spec_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let spec = ScenarioSpec::desk_corridor(Congestion::Low);
    let a = generated(&tmp, &spec, "a");
    let b = generated(&tmp, &spec, "b");
    for f in ["scenario.json", "network.json", "demand.json", "measurements.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn generated_files_round_trip() {
    let tmp = TempDir::new().unwrap();
    let spec = ScenarioSpec::desk_corridor(Congestion::Low);
    let dir = generated(&tmp, &spec, "low");
    let loaded = load_scenario(&dir).unwrap();
    let fresh = odcal_core::scenario::generate_scenario(&spec).unwrap();
    assert_eq!(loaded.spec, fresh.spec);
    assert_eq!(loaded.network.network(), fresh.network.network());
    assert_eq!(loaded.gt_demand, fresh.gt_demand);
    assert_eq!(loaded.measurements, fresh.measurements);
    assert_eq!(loaded.observations, fresh.observations);
    assert!((loaded.gt_demand.iter().sum::<f64>() - 2000.0).abs() < 1e-9);
}

#[test]
fn full_penetration_counts_match_simulation() {
    let tmp = TempDir::new().unwrap();
    let spec = ScenarioSpec { penetration: 1.0, ..ScenarioSpec::desk_corridor(Congestion::Medium) };
    let sc = load_scenario(&generated(&tmp, &spec, "full")).unwrap();
    let r = simulate(&sc.network, &sc.gt_demand, &spec.simulator, spec.seeds.simulation, false).unwrap();
    for (k, &i) in sc.network.measured_segments().iter().enumerate() {
        assert_eq!(sc.observations.segment_counts[k], r.counts[i]);
    }
}

#[test]
fn invalid_spec_names_the_field() {
    let tmp = TempDir::new().unwrap();
    let spec = ScenarioSpec { penetration: 1.5, ..ScenarioSpec::desk_corridor(Congestion::Low) };
    let path = write_spec(tmp.path(), "bad.json", &spec);
    let out = odcal(&["generate", "--spec", s(&path), "--out", s(&tmp.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("penetration"));
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn missing_inputs_fail() {
    let tmp = TempDir::new().unwrap();
    let out = odcal(&["calibrate", s(&tmp.path().join("nowhere")), "--baseline"]);
    assert!(!out.status.success());
    let out = odcal(&["generate", "--spec", s(&tmp.path().join("nope.json")), "--out", s(tmp.path())]);
    assert!(!out.status.success());
    // exactly one mode flag is required
    let dir = generated(&tmp, &ScenarioSpec::desk_corridor(Congestion::Low), "low");
    assert!(!odcal(&["calibrate", s(&dir)]).status.success());
    assert!(!odcal(&["calibrate", s(&dir), "--baseline", "--regularized"]).status.success());
}

fn summary(run: &Path) -> RunSummary {
    serde_json::from_str(&fs::read_to_string(run.join(SUMMARY_FILE)).unwrap()).unwrap()
}

#[test]
fn baseline_records_zero_regularizer_weight() {
    let tmp = TempDir::new().unwrap();
    let dir = generated(&tmp, &ScenarioSpec::desk_corridor(Congestion::Low), "low");
    let run = tmp.path().join("run");
    ok(&["calibrate", s(&dir), "--baseline", "--iterations", "3", "--seed", "4", "--out", s(&run)]);
    let sm = summary(&run);
    assert_eq!(sm.weights.w2, 0.0);
    assert_eq!(sm.weights.w1, 1.0);
    let rows = read_trace_csv(fs::File::open(run.join(TRACE_FILE)).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.f2_sim.is_finite() && r.f2_sim >= 0.0));
    assert!(rows.iter().all(|r| r.objective == r.f1_sim));

    let reg = tmp.path().join("reg");
    ok(&["calibrate", s(&dir), "--regularized", "--iterations", "3", "--seed", "4", "--out", s(&reg)]);
    let w = summary(&reg).weights;
    assert!(w.w2 > 0.0);
}

#[test]
fn single_iteration_and_default_run_dir() {
    let tmp = TempDir::new().unwrap();
    let dir = generated(&tmp, &ScenarioSpec::desk_corridor(Congestion::Low), "low");
    ok(&["calibrate", s(&dir), "--regularized", "--iterations", "1", "--rollouts", "2", "--seed", "9", "--plot"]);
    let run = dir.join("runs").join("regularized-seed9");
    let csv = fs::read_to_string(run.join(TRACE_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(summary(&run).rollouts, 2);
    let svg = fs::read_to_string(run.join("convergence.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<polyline"));
}

#[test]
fn calibrate_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let dir = generated(&tmp, &ScenarioSpec::desk_corridor(Congestion::Low), "low");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&["calibrate", s(&dir), "--regularized", "--iterations", "5", "--seed", "2", "--out", s(out)]);
    }
    assert_eq!(fs::read(a.join(TRACE_FILE)).unwrap(), fs::read(b.join(TRACE_FILE)).unwrap());
    assert_eq!(fs::read(a.join(SUMMARY_FILE)).unwrap(), fs::read(b.join(SUMMARY_FILE)).unwrap());
}

fn comparison_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    assert_eq!(r.headers().unwrap().iter().collect::<Vec<_>>(), ["scenario", "metric", "baseline", "regularized", "change_pct"]);
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn compare_outputs() {
    let tmp = TempDir::new().unwrap();
    let dir = generated(&tmp, &ScenarioSpec::desk_corridor(Congestion::Medium), "medium");
    let (base, reg) = (tmp.path().join("base"), tmp.path().join("reg"));
    ok(&["calibrate", s(&dir), "--baseline", "--iterations", "8", "--seed", "1", "--out", s(&base)]);
    ok(&["calibrate", s(&dir), "--regularized", "--iterations", "8", "--seed", "1", "--out", s(&reg)]);

    let same = tmp.path().join("same");
    ok(&["compare", s(&base.join(TRACE_FILE)), s(&base.join(TRACE_FILE)), "--out", s(&same)]);
    let rows = comparison_rows(&same.join("comparison.csv"));
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r[4] == "0.0"), "{rows:?}");

    let cmp = tmp.path().join("cmp");
    ok(&["compare", s(&base.join(TRACE_FILE)), s(&reg.join(TRACE_FILE)), "--out", s(&cmp), "--plot"]);
    let rows = comparison_rows(&cmp.join("comparison.csv"));
    let (b, r) = (summary(&base).final_metrics, summary(&reg).final_metrics);
    let expected = [
        (b.nrmse_demand.unwrap(), r.nrmse_demand.unwrap()),
        (b.nrmse_time, r.nrmse_time),
        (b.nrmse_count, r.nrmse_count),
    ];
    for (row, (x, y)) in rows.iter().zip(expected) {
        assert_eq!(row[0], "corridor-medium");
        assert_eq!(row[2].parse::<f64>().unwrap(), x);
        assert_eq!(row[3].parse::<f64>().unwrap(), y);
        let pct: f64 = row[4].parse().unwrap();
        assert!((pct - 100.0 * (y - x) / x).abs() < 1e-9);
        assert_eq!(pct < 0.0, y < x);
    }

    let mut scatter = csv::Reader::from_path(cmp.join("scatter.csv")).unwrap();
    assert_eq!(scatter.headers().unwrap().iter().collect::<Vec<_>>(), ["od", "ground_truth", "baseline", "regularized"]);
    assert_eq!(scatter.records().count(), 12);
    for f in ["scatter.svg", "convergence.svg"] {
        assert!(fs::read_to_string(cmp.join(f)).unwrap().contains("</svg>"));
    }
}

#[test]
fn compare_rejects_mismatched_scenarios() {
    let tmp = TempDir::new().unwrap();
    let low = generated(&tmp, &ScenarioSpec::desk_corridor(Congestion::Low), "low");
    let high = generated(&tmp, &ScenarioSpec::desk_corridor(Congestion::High), "high");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["calibrate", s(&low), "--baseline", "--iterations", "1", "--out", s(&a)]);
    ok(&["calibrate", s(&high), "--regularized", "--iterations", "1", "--out", s(&b)]);
    let out = odcal(&["compare", s(&a.join(TRACE_FILE)), s(&b.join(TRACE_FILE)), "--out", s(&tmp.path().join("c"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("different scenarios"));
}

#[test]
fn shipped_presets_match_builtin_specs() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    for (name, level) in [("low", Congestion::Low), ("medium", Congestion::Medium), ("high", Congestion::High)] {
        let spec = odcal_cli::load_spec(&root.join(format!("{name}.json"))).unwrap();
        assert_eq!(spec, ScenarioSpec::desk_corridor(level));
    }
}
