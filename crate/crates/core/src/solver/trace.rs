//! Per-iteration record of a calibration run and its CSV form.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytical::ObjectiveWeights;
use crate::eval::MetricsTriple;

pub const TRACE_HEADER: [&str; 8] =
    ["iteration", "objective", "f1_sim", "f2_sim", "nrmse_demand", "nrmse_time", "nrmse_count", "incumbent"];

/// State after one iteration. `objective`, `f1_sim`, `f2_sim` and `metrics` describe the
/// incumbent; `incumbent` tells whether this iteration's candidate became it.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub candidate: Vec<f64>,
    /// `None` when the candidate could not be simulated.
    pub candidate_objective: Option<f64>,
    pub objective: f64,
    pub f1_sim: f64,
    pub f2_sim: f64,
    pub metrics: MetricsTriple,
    pub incumbent: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTrace {
    pub weights: ObjectiveWeights,
    pub initial_demand: Vec<f64>,
    pub initial_objective: f64,
    pub initial_metrics: MetricsTriple,
    pub rows: Vec<TraceRow>,
    pub final_demand: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("trace header {0:?} does not match the expected columns")]
    Header(Vec<String>),
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct CsvRow {
    iteration: usize,
    objective: f64,
    f1_sim: f64,
    f2_sim: f64,
    nrmse_demand: Option<f64>,
    nrmse_time: f64,
    nrmse_count: f64,
    incumbent: u8,
}

/// A trace row as read back from CSV (the candidate vectors are not part of the file).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceCsvRow {
    pub iteration: usize,
    pub objective: f64,
    pub f1_sim: f64,
    pub f2_sim: f64,
    pub metrics: MetricsTriple,
    pub incumbent: bool,
}

impl CalibrationTrace {
    pub fn final_metrics(&self) -> MetricsTriple {
        self.rows.last().map_or(self.initial_metrics, |r| r.metrics)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TraceError> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(CsvRow {
                iteration: r.iteration,
                objective: r.objective,
                f1_sim: r.f1_sim,
                f2_sim: r.f2_sim,
                nrmse_demand: r.metrics.nrmse_demand,
                nrmse_time: r.metrics.nrmse_time,
                nrmse_count: r.metrics.nrmse_count,
                incumbent: u8::from(r.incumbent),
            })?;
        }
        if self.rows.is_empty() {
            w.write_record(TRACE_HEADER)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("CSV output is UTF-8")
    }
}

/// Reads the rows of a trace CSV written by [`CalibrationTrace::write_csv`].
pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<TraceCsvRow>, TraceError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != TRACE_HEADER {
        return Err(TraceError::Header(header));
    }
    r.deserialize::<CsvRow>()
        .map(|row| {
            let row = row?;
            Ok(TraceCsvRow {
                iteration: row.iteration,
                objective: row.objective,
                f1_sim: row.f1_sim,
                f2_sim: row.f2_sim,
                metrics: MetricsTriple {
                    nrmse_demand: row.nrmse_demand,
                    nrmse_time: row.nrmse_time,
                    nrmse_count: row.nrmse_count,
                },
                incumbent: row.incumbent != 0,
            })
        })
        .collect()
}
