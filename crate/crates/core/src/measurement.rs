//! Field measurements: path travel times and sampled segment counts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::IndexedNetwork;

/// Ground-truth observations as stored on disk, keyed by path/segment id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldMeasurements {
    /// Path id to travel time in minutes.
    pub paths: BTreeMap<String, f64>,
    /// Segment id to sampled vehicle count.
    pub segments: BTreeMap<String, f64>,
    /// Nominal fraction of trips in the sample.
    pub penetration: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum MeasurementError {
    #[error("no travel time for measured path `{0}`")]
    MissingPath(String),
    #[error("no count for measured segment `{0}`")]
    MissingSegment(String),
    #[error("travel time of path `{0}` must be positive, got {1}")]
    NonPositiveTime(String, f64),
    #[error("count of segment `{0}` must be positive, got {1}")]
    NonPositiveCount(String, f64),
    #[error("penetration {0} outside (0, 1]")]
    Penetration(f64),
    #[error("the network measures no {0}")]
    Empty(&'static str),
}

/// Measurements aligned with a network's measured path and segment order.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    /// `y_GT`, one entry per measured path.
    pub path_minutes: Vec<f64>,
    /// `x_GT`, one entry per measured segment.
    pub segment_counts: Vec<f64>,
    pub penetration: f64,
}

impl FieldMeasurements {
    /// Resolves the measurement maps against the network's measured sets, checking positivity.
    pub fn align(&self, net: &IndexedNetwork) -> Result<Observations, MeasurementError> {
        if !(self.penetration > 0.0 && self.penetration <= 1.0) {
            return Err(MeasurementError::Penetration(self.penetration));
        }
        if net.measured_paths().is_empty() {
            return Err(MeasurementError::Empty("paths"));
        }
        if net.measured_segments().is_empty() {
            return Err(MeasurementError::Empty("segments"));
        }
        let path_minutes = net
            .measured_paths()
            .iter()
            .map(|&p| {
                let id = net.path_id(p);
                let y = *self.paths.get(id).ok_or_else(|| MeasurementError::MissingPath(id.into()))?;
                if !(y > 0.0 && y.is_finite()) {
                    return Err(MeasurementError::NonPositiveTime(id.into(), y));
                }
                Ok(y)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let segment_counts = net
            .measured_segments()
            .iter()
            .map(|&s| {
                let id = net.segment_id(s);
                let x = *self.segments.get(id).ok_or_else(|| MeasurementError::MissingSegment(id.into()))?;
                if !(x > 0.0 && x.is_finite()) {
                    return Err(MeasurementError::NonPositiveCount(id.into(), x));
                }
                Ok(x)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Observations { path_minutes, segment_counts, penetration: self.penetration })
    }
}
