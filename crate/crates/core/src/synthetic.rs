//! Deterministic synthetic networks: highway corridors and bidirectional grids.

use nalgebra::DMatrix;
use petgraph::algo::astar;
use petgraph::graph::{DiGraph, NodeIndex};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::network::{Network, NetworkError, Path, Segment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Topology {
    /// A single directed chain of segments; every OD is an on-ramp/off-ramp pair.
    Corridor { segments: usize },
    /// A `rows x cols` lattice of nodes with a segment in each direction between neighbours.
    Grid { rows: usize, cols: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub topology: Topology,
    pub ods: usize,
    pub seed: u64,
}

const LANE_CHOICES: [u32; 3] = [2, 3, 4];
const SPEED_CHOICES: [f64; 4] = [80.0, 90.0, 100.0, 110.0];
const CORRIDOR_ATTEMPTS: usize = 1000;

fn random_segment<R: Rng>(rng: &mut R, id: String, from: String, to: String) -> Segment {
    let length_km = (rng.random_range(0.5..2.0f64) * 100.0).round() / 100.0;
    Segment {
        id,
        length_km,
        lanes: LANE_CHOICES[rng.random_range(0..LANE_CHOICES.len())],
        speed_limit_kmh: SPEED_CHOICES[rng.random_range(0..SPEED_CHOICES.len())],
        from: Some(from),
        to: Some(to),
    }
}

fn od_id(z: usize) -> String {
    format!("od{z:03}")
}

fn single_path_network(segments: Vec<Segment>, routes: Vec<Vec<String>>) -> Network {
    let od_pairs: Vec<String> = (0..routes.len()).map(od_id).collect();
    let paths: Vec<Path> = routes
        .into_iter()
        .enumerate()
        .map(|(z, segs)| Path { id: format!("p{z:03}"), od: od_id(z), segments: segs, split: 1.0 })
        .collect();
    Network {
        measured_paths: paths.iter().map(|p| p.id.clone()).collect(),
        measured_segments: segments.iter().map(|s| s.id.clone()).collect(),
        segments,
        od_pairs,
        paths,
    }
}

/// Builds the network described by `spec`; a pure function of the spec (including its seed).
pub fn generate_synthetic_network(spec: &NetworkSpec) -> Result<Network, NetworkError> {
    if spec.ods == 0 {
        return Err(NetworkError::Infeasible("at least one OD pair is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.topology {
        Topology::Corridor { segments } => corridor(segments, spec.ods, &mut rng),
        Topology::Grid { rows, cols } => grid(rows, cols, spec.ods, &mut rng),
    }
}

/// OD spans on a corridor are contiguous subchains `[start, end]` of at least two segments and
/// at most two thirds of the corridor. A draw is kept only if the spans cover every segment and
/// the incidence matrix has full column rank, so counts identify the demand.
fn corridor<R: Rng>(n: usize, ods: usize, rng: &mut R) -> Result<Network, NetworkError> {
    if n < 2 {
        return Err(NetworkError::Infeasible(format!("a corridor needs at least 2 segments, got {n}")));
    }
    let max_span = (2 * n / 3).max(2);
    let candidates: Vec<(usize, usize)> = (0..n)
        .flat_map(|s| (s + 1..n).map(move |e| (s, e)))
        .filter(|(s, e)| e - s < max_span)
        .collect();
    if ods > candidates.len() {
        return Err(NetworkError::Infeasible(format!(
            "a {n}-segment corridor supports at most {} OD pairs, {ods} requested",
            candidates.len()
        )));
    }
    if ods > n {
        return Err(NetworkError::Infeasible(format!(
            "{ods} OD pairs cannot be identified from {n} segment counts"
        )));
    }

    let segments: Vec<Segment> =
        (0..n).map(|i| random_segment(rng, format!("s{i:03}"), format!("n{i}"), format!("n{}", i + 1))).collect();

    for _ in 0..CORRIDOR_ATTEMPTS {
        let mut picks: Vec<(usize, usize)> =
            index::sample(rng, candidates.len(), ods).into_iter().map(|k| candidates[k]).collect();
        picks.sort_unstable();
        let covered = (0..n).all(|i| picks.iter().any(|&(s, e)| s <= i && i <= e));
        if !covered || !full_column_rank(n, &picks) {
            continue;
        }
        let routes = picks.iter().map(|&(s, e)| (s..=e).map(|i| segments[i].id.clone()).collect()).collect();
        return Ok(single_path_network(segments, routes));
    }
    Err(NetworkError::Infeasible(format!(
        "no covering, identifiable set of {ods} OD spans found on a {n}-segment corridor"
    )))
}

fn full_column_rank(n: usize, spans: &[(usize, usize)]) -> bool {
    let a = DMatrix::from_fn(n, spans.len(), |i, z| {
        let (s, e) = spans[z];
        if s <= i && i <= e {
            1.0
        } else {
            0.0
        }
    });
    a.rank(1e-9) == spans.len()
}

/// Grid ODs are distinct ordered node pairs routed on their shortest free-flow-time path.
fn grid<R: Rng>(rows: usize, cols: usize, ods: usize, rng: &mut R) -> Result<Network, NetworkError> {
    let nodes = rows * cols;
    if rows == 0 || cols == 0 || nodes < 2 {
        return Err(NetworkError::Infeasible(format!("a {rows}x{cols} grid has no OD pairs")));
    }
    if ods > nodes * (nodes - 1) {
        return Err(NetworkError::Infeasible(format!(
            "a {rows}x{cols} grid supports at most {} OD pairs, {ods} requested",
            nodes * (nodes - 1)
        )));
    }
    let name = |r: usize, c: usize| format!("n{r}_{c}");
    let mut graph: DiGraph<(), usize> = DiGraph::new();
    let ix: Vec<NodeIndex> = (0..nodes).map(|_| graph.add_node(())).collect();
    let mut segments = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let mut neighbours = Vec::new();
            if c + 1 < cols {
                neighbours.push((r, c + 1));
            }
            if r + 1 < rows {
                neighbours.push((r + 1, c));
            }
            for (r2, c2) in neighbours {
                for (a, b) in [((r, c), (r2, c2)), ((r2, c2), (r, c))] {
                    let id = format!("s{:03}", segments.len());
                    segments.push(random_segment(rng, id, name(a.0, a.1), name(b.0, b.1)));
                    graph.add_edge(ix[a.0 * cols + a.1], ix[b.0 * cols + b.1], segments.len() - 1);
                }
            }
        }
    }

    let minutes: Vec<f64> = segments.iter().map(|s| 60.0 * s.length_km / s.speed_limit_kmh).collect();
    let pairs = index::sample(rng, nodes * (nodes - 1), ods);
    let mut routes = Vec::with_capacity(ods);
    for k in pairs {
        let origin = k / (nodes - 1);
        let mut dest = k % (nodes - 1);
        if dest >= origin {
            dest += 1;
        }
        let (_, node_path) = astar(&graph, ix[origin], |n| n == ix[dest], |e| minutes[*e.weight()], |_| 0.0)
            .expect("grid is strongly connected");
        let route = node_path
            .windows(2)
            .map(|w| {
                let e = graph.find_edge(w[0], w[1]).expect("consecutive path nodes are adjacent");
                segments[graph[e]].id.clone()
            })
            .collect();
        routes.push(route);
    }
    Ok(single_path_network(segments, routes))
}
