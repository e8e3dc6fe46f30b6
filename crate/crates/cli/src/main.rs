use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use odcal_cli::{calibrate, compare, default_run_dir, generate, load_spec, CalibrateOptions, Mode};

/// OD demand calibration experiments on synthetic networks.
#[derive(Parser)]
#[command(name = "odcal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the network, ground-truth demand and field measurements of a scenario spec.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        /// Scenario directory to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate the demand of a generated scenario.
    Calibrate {
        scenario: PathBuf,
        /// Run directory [default: <scenario>/runs/<mode>-seed<seed>]
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        mode: ModeArgs,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        rollouts: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write an SVG convergence plot
        #[arg(long)]
        plot: bool,
    },
    /// Compare a baseline trace against a regularized trace of the same scenario.
    Compare {
        baseline: PathBuf,
        regularized: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write SVG scatter and convergence plots
        #[arg(long)]
        plot: bool,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ModeArgs {
    #[arg(long)]
    regularized: bool,
    #[arg(long)]
    baseline: bool,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Generate { spec, out } => {
            let parsed = load_spec(&spec)?;
            let s = generate(&parsed, &out)?;
            println!(
                "{}: {} segments, {} OD pairs, {} sampling warnings -> {}",
                parsed.name,
                s.network.num_segments(),
                s.network.num_ods(),
                s.warnings.len(),
                out.display()
            );
        }
        Command::Calibrate { scenario, out, mode, iterations, rollouts, seed, plot } => {
            let mode = if mode.baseline { Mode::Baseline } else { Mode::Regularized };
            let out = match out {
                Some(o) => o,
                None => {
                    let seed = seed.unwrap_or(odcal_cli::load_scenario(&scenario)?.spec.solver.seed);
                    default_run_dir(&scenario, mode, seed)
                }
            };
            let s = calibrate(&scenario, &out, &CalibrateOptions { mode, iterations, rollouts, seed, plot })?;
            let m = s.final_metrics;
            println!(
                "{} {} seed {}: objective {:.6} -> {:.6}, nrmse demand {} time {:.4} count {:.4} -> {}",
                s.scenario,
                s.mode.as_str(),
                s.seed,
                s.initial_objective,
                s.final_objective,
                m.nrmse_demand.map_or("n/a".to_string(), |v| format!("{v:.4}")),
                m.nrmse_time,
                m.nrmse_count,
                out.display()
            );
        }
        Command::Compare { baseline, regularized, out, plot } => {
            let c = compare(&baseline, &regularized, &out, plot)?;
            for r in &c.rows {
                let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
                let pct = r.change_pct.map_or("n/a".to_string(), |v| format!("{v:+.1}%"));
                println!("{} {}: {} -> {} ({pct})", r.scenario, r.metric, fmt(r.baseline), fmt(r.regularized));
            }
        }
    }
    Ok(())
}
