//! Road network description, fixed route choice and the OD-to-segment assignment matrix.
//!
//! [`Network`] is the serialized form (all references are string ids). It is resolved
//! into an [`IndexedNetwork`] once, after validation, and every numerical routine works
//! on indices from then on.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the sum of path splits of a single OD pair.
pub const SPLIT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub length_km: f64,
    pub lanes: u32,
    pub speed_limit_kmh: f64,
    /// Upstream node, when known; used to check that paths are connected chains.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub id: String,
    pub od: String,
    /// Ordered segment ids from origin to destination.
    pub segments: Vec<String>,
    /// Fraction of the OD demand routed on this path.
    pub split: f64,
}

/// A static network: segments, OD pairs, their fixed paths and the measured subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub segments: Vec<Segment>,
    pub od_pairs: Vec<String>,
    pub paths: Vec<Path>,
    pub measured_paths: Vec<String>,
    pub measured_segments: Vec<String>,
}

/// Entity a [`Violation`] refers to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Entity {
    Network,
    Segment(String),
    OdPair(String),
    Path(String),
}

impl fmt::Display for Entity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Entity::Network => write!(f, "network"),
            Entity::Segment(id) => write!(f, "segment `{id}`"),
            Entity::OdPair(id) => write!(f, "OD pair `{id}`"),
            Entity::Path(id) => write!(f, "path `{id}`"),
        }
    }
}

/// A broken network invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub entity: Entity,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.entity, self.rule)
    }
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("path `{path}` references unknown segment `{segment}`")]
    UnknownSegment { path: String, segment: String },
    #[error("invalid network ({} violation(s)): {}", .0.len(), join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("infeasible scenario: {0}")]
    Infeasible(String),
}

fn join_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Network {
    /// Checks every structural invariant and reports each breach; empty iff the network is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |entity: Entity, rule: String| out.push(Violation { entity, rule });

        if self.od_pairs.is_empty() {
            push(Entity::Network, "network has no OD pairs".into());
        }

        let mut segment_ids = HashSet::new();
        for s in &self.segments {
            if !segment_ids.insert(s.id.as_str()) {
                push(Entity::Segment(s.id.clone()), "duplicate segment id".into());
            }
            if !(s.length_km > 0.0 && s.length_km.is_finite()) {
                push(Entity::Segment(s.id.clone()), format!("length {} km is not positive", s.length_km));
            }
            if s.lanes == 0 {
                push(Entity::Segment(s.id.clone()), "lane count must be at least 1".into());
            }
            if !(s.speed_limit_kmh > 0.0 && s.speed_limit_kmh.is_finite()) {
                push(
                    Entity::Segment(s.id.clone()),
                    format!("speed limit {} km/h is not positive", s.speed_limit_kmh),
                );
            }
        }

        let mut od_ids = HashSet::new();
        for od in &self.od_pairs {
            if !od_ids.insert(od.as_str()) {
                push(Entity::OdPair(od.clone()), "duplicate OD id".into());
            }
        }

        let by_id: HashMap<&str, &Segment> = self.segments.iter().map(|s| (s.id.as_str(), s)).collect();
        let mut path_ids = HashSet::new();
        let mut split_sums: HashMap<&str, f64> = HashMap::new();
        for p in &self.paths {
            if !path_ids.insert(p.id.as_str()) {
                push(Entity::Path(p.id.clone()), "duplicate path id".into());
            }
            if !od_ids.contains(p.od.as_str()) {
                push(Entity::Path(p.id.clone()), format!("unknown OD pair `{}`", p.od));
            }
            if p.segments.is_empty() {
                push(Entity::Path(p.id.clone()), "path has no segments".into());
            }
            for s in &p.segments {
                if !by_id.contains_key(s.as_str()) {
                    push(Entity::Path(p.id.clone()), format!("unknown segment `{s}`"));
                }
            }
            for pair in p.segments.windows(2) {
                let (Some(a), Some(b)) = (by_id.get(pair[0].as_str()), by_id.get(pair[1].as_str())) else {
                    continue;
                };
                if let (Some(end), Some(start)) = (&a.to, &b.from) {
                    if end != start {
                        push(
                            Entity::Path(p.id.clone()),
                            format!("segments `{}` and `{}` are not connected", a.id, b.id),
                        );
                    }
                }
            }
            let mut seen = HashSet::new();
            if p.segments.iter().any(|s| !seen.insert(s.as_str())) {
                push(Entity::Path(p.id.clone()), "path visits a segment more than once".into());
            }
            if !(0.0..=1.0).contains(&p.split) {
                push(Entity::Path(p.id.clone()), format!("split {} outside [0, 1]", p.split));
            }
            *split_sums.entry(p.od.as_str()).or_default() += p.split;
        }
        for od in &self.od_pairs {
            match split_sums.get(od.as_str()) {
                None => push(Entity::OdPair(od.clone()), "OD pair has no path".into()),
                Some(sum) if (sum - 1.0).abs() > SPLIT_SUM_TOLERANCE => {
                    push(Entity::OdPair(od.clone()), format!("path splits sum to {sum}, expected 1"))
                }
                Some(_) => {}
            }
        }

        for p in &self.measured_paths {
            if !path_ids.contains(p.as_str()) {
                push(Entity::Path(p.clone()), "measured path does not exist".into());
            }
        }
        for s in &self.measured_segments {
            if !segment_ids.contains(s.as_str()) {
                push(Entity::Segment(s.clone()), "measured segment does not exist".into());
            }
        }
        out
    }

    /// Like [`Network::validate`], additionally requiring every speed limit to exceed `v_min`.
    pub fn validate_with_min_speed(&self, v_min: f64) -> Vec<Violation> {
        let mut out = self.validate();
        for s in &self.segments {
            if s.speed_limit_kmh <= v_min {
                out.push(Violation {
                    entity: Entity::Segment(s.id.clone()),
                    rule: format!(
                        "speed limit {} km/h does not exceed the minimum velocity {v_min} km/h",
                        s.speed_limit_kmh
                    ),
                });
            }
        }
        out
    }

    /// Validates and resolves all id references into indices.
    pub fn index(&self) -> Result<IndexedNetwork, NetworkError> {
        let violations = self.validate();
        if !violations.is_empty() {
            return Err(NetworkError::Invalid(violations));
        }
        let seg_idx: HashMap<&str, usize> =
            self.segments.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
        let od_idx: HashMap<&str, usize> =
            self.od_pairs.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let path_idx: HashMap<&str, usize> =
            self.paths.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();

        let paths = self
            .paths
            .iter()
            .map(|p| {
                let segments = p
                    .segments
                    .iter()
                    .map(|s| {
                        seg_idx.get(s.as_str()).copied().ok_or_else(|| NetworkError::UnknownSegment {
                            path: p.id.clone(),
                            segment: s.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(RoutedPath { od: od_idx[p.od.as_str()], segments, split: p.split })
            })
            .collect::<Result<Vec<_>, NetworkError>>()?;

        let measured_paths = self.measured_paths.iter().map(|p| path_idx[p.as_str()]).collect();
        let measured_segments = self.measured_segments.iter().map(|s| seg_idx[s.as_str()]).collect();
        let assignment = AssignmentMatrix::from_paths(self.segments.len(), self.od_pairs.len(), &paths);

        Ok(IndexedNetwork { network: self.clone(), paths, measured_paths, measured_segments, assignment })
    }
}

/// A path with resolved indices.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutedPath {
    pub od: usize,
    pub segments: Vec<usize>,
    pub split: f64,
}

/// Validated network with index-resolved paths and its assignment matrix.
#[derive(Debug, Clone)]
pub struct IndexedNetwork {
    network: Network,
    paths: Vec<RoutedPath>,
    measured_paths: Vec<usize>,
    measured_segments: Vec<usize>,
    assignment: AssignmentMatrix,
}

impl IndexedNetwork {
    pub fn network(&self) -> &Network {
        &self.network
    }
    pub fn segments(&self) -> &[Segment] {
        &self.network.segments
    }
    pub fn paths(&self) -> &[RoutedPath] {
        &self.paths
    }
    pub fn num_segments(&self) -> usize {
        self.network.segments.len()
    }
    pub fn num_ods(&self) -> usize {
        self.network.od_pairs.len()
    }
    pub fn num_paths(&self) -> usize {
        self.paths.len()
    }
    /// Indices of the measured paths, in file order.
    pub fn measured_paths(&self) -> &[usize] {
        &self.measured_paths
    }
    /// Indices of the measured segments, in file order.
    pub fn measured_segments(&self) -> &[usize] {
        &self.measured_segments
    }
    pub fn assignment(&self) -> &AssignmentMatrix {
        &self.assignment
    }
    pub fn path_id(&self, path: usize) -> &str {
        &self.network.paths[path].id
    }
    pub fn segment_id(&self, segment: usize) -> &str {
        &self.network.segments[segment].id
    }
    pub fn od_id(&self, od: usize) -> &str {
        &self.network.od_pairs[od]
    }

    /// Free-flow travel time of a path in minutes.
    pub fn free_flow_minutes(&self, path: usize) -> f64 {
        self.paths[path]
            .segments
            .iter()
            .map(|&i| {
                let s = &self.network.segments[i];
                60.0 * s.length_km / s.speed_limit_kmh
            })
            .sum()
    }
}

/// Dense `|segments| x |ODs|` matrix mapping OD demand onto segment demand, `lambda = A d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl AssignmentMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged assignment matrix");
        Self { rows: rows.len(), cols, data: rows.into_iter().flatten().collect() }
    }

    fn from_paths(num_segments: usize, num_ods: usize, paths: &[RoutedPath]) -> Self {
        let mut a = Self::zeros(num_segments, num_ods);
        for p in paths {
            for &s in &p.segments {
                a.data[s * num_ods + p.od] += p.split;
            }
        }
        a
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// `A x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "dimension mismatch in A x");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `A^T y`.
    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows, "dimension mismatch in A^T y");
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * yi;
            }
        }
        out
    }
}

/// Builds `A` with `A[i][z]` equal to the summed splits of OD-`z` paths that traverse segment `i`.
pub fn build_assignment_matrix(network: &Network) -> Result<AssignmentMatrix, NetworkError> {
    Ok(network.index()?.assignment)
}
