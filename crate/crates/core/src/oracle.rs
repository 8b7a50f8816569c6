//! Exact minimum action distances on enumerable state-transition graphs.
//!
//! [`floyd_warshall`] is the reference all-pairs solver; [`bfs_distances`]
//! is an independent single-source solver used to cross-check it and to
//! answer large point-mass lattices row by row.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::envs::{Env, State};
use crate::error::{Error, Result};

/// Sentinel for "unreachable". Never used in arithmetic.
pub const UNREACHABLE: u32 = u32::MAX;

/// One-step reachability between enumerated states.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    n: usize,
    bits: Vec<bool>,
}

impl AdjacencyMatrix {
    pub fn empty(n: usize) -> Self {
        AdjacencyMatrix { n, bits: vec![false; n * n] }
    }

    /// Builds from directed edges; self-loops are dropped.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut adj = Self::empty(n);
        for (i, j) in edges {
            adj.set(i, j);
        }
        adj
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    fn set(&mut self, i: usize, j: usize) {
        assert!(i < self.n && j < self.n, "edge ({i}, {j}) out of range for n = {}", self.n);
        if i != j {
            self.bits[i * self.n + j] = true;
        }
    }

    pub fn successors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let row = &self.bits[i * self.n..(i + 1) * self.n];
        row.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j)
    }

    pub fn num_edges(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Adjacency over `env.enumerate_states(resolution)`. Point-mass successors
/// snap to the enclosing cell, which makes the graph an approximation for
/// continuous dynamics; [`ground_truth`] uses an exact lattice instead.
pub fn build_adjacency(env: &Env, resolution: Option<usize>) -> Result<AdjacencyMatrix> {
    let states = env.enumerate_states(resolution)?;
    let mut adj = AdjacencyMatrix::empty(states.len());
    for (i, s) in states.iter().enumerate() {
        for a in 0..env.num_actions() {
            let next = env.step(s, a)?;
            adj.set(i, env.state_index(&next, resolution)?);
        }
    }
    Ok(adj)
}

/// Shortest directed path lengths, [`UNREACHABLE`] where no path exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MadTable {
    n: usize,
    dist: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuasimetricViolation {
    NonZeroDiagonal { i: usize },
    Indiscernible { i: usize, j: usize },
    Triangle { i: usize, j: usize, k: usize },
}

impl fmt::Display for QuasimetricViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NonZeroDiagonal { i } => write!(f, "d({i},{i}) != 0"),
            Self::Indiscernible { i, j } => write!(f, "d({i},{j}) = d({j},{i}) = 0 for distinct states"),
            Self::Triangle { i, j, k } => write!(f, "d({i},{j}) > d({i},{k}) + d({k},{j})"),
        }
    }
}

impl MadTable {
    pub fn from_rows(rows: Vec<Vec<u32>>) -> Self {
        let n = rows.len();
        assert!(rows.iter().all(|r| r.len() == n), "MAD table must be square");
        MadTable { n, dist: rows.into_iter().flatten().collect() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn raw(&self, i: usize, j: usize) -> u32 {
        self.dist[i * self.n + j]
    }

    pub fn get(&self, i: usize, j: usize) -> Option<u32> {
        Some(self.raw(i, j)).filter(|&d| d != UNREACHABLE)
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.dist[i * self.n..(i + 1) * self.n]
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.raw(i, j) == self.raw(j, i)))
    }

    /// Largest finite entry.
    pub fn diameter(&self) -> u32 {
        self.dist.iter().copied().filter(|&d| d != UNREACHABLE).max().unwrap_or(0)
    }

    /// Non-negativity holds by type; checks zero diagonal, directed identity
    /// of indiscernibles and the triangle inequality over all finite triples.
    pub fn check_quasimetric(&self) -> Result<(), QuasimetricViolation> {
        let n = self.n;
        for i in 0..n {
            if self.raw(i, i) != 0 {
                return Err(QuasimetricViolation::NonZeroDiagonal { i });
            }
            for j in 0..n {
                if i != j && self.raw(i, j) == 0 && self.raw(j, i) == 0 {
                    return Err(QuasimetricViolation::Indiscernible { i, j });
                }
            }
        }
        for k in 0..n {
            for i in 0..n {
                let Some(ik) = self.get(i, k) else { continue };
                for j in 0..n {
                    let Some(kj) = self.get(k, j) else { continue };
                    let bound = u64::from(ik) + u64::from(kj);
                    if u64::from(self.raw(i, j)) > bound {
                        return Err(QuasimetricViolation::Triangle { i, j, k });
                    }
                }
            }
        }
        Ok(())
    }

    /// CSV with one row per source state; unreachable entries are `-1`.
    pub fn to_csv(&self, comment: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(c) = comment {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        for i in 0..self.n {
            let row: Vec<String> = self
                .row(i)
                .iter()
                .map(|&d| if d == UNREACHABLE { "-1".to_owned() } else { d.to_string() })
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let malformed = |reason: String| Error::Malformed { what: "MAD table CSV", reason };
        let mut rows = Vec::new();
        for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
            let row = line
                .split(',')
                .map(|cell| match cell.trim() {
                    "-1" => Ok(UNREACHABLE),
                    v => v.parse::<u32>().map_err(|e| malformed(format!("{v:?}: {e}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        if rows.iter().any(|r| r.len() != rows.len()) {
            return Err(malformed("table is not square".into()));
        }
        Ok(Self::from_rows(rows))
    }

    pub fn write_csv(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_csv(comment).as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// All-pairs shortest paths with unit edge weights.
pub fn floyd_warshall(adj: &AdjacencyMatrix) -> MadTable {
    let n = adj.n();
    let mut dist = vec![UNREACHABLE; n * n];
    for i in 0..n {
        for j in 0..n {
            dist[i * n + j] = if i == j {
                0
            } else if adj.get(i, j) {
                1
            } else {
                UNREACHABLE
            };
        }
    }
    for k in 0..n {
        for i in 0..n {
            let ik = dist[i * n + k];
            if ik == UNREACHABLE {
                continue;
            }
            for j in 0..n {
                let kj = dist[k * n + j];
                if kj == UNREACHABLE {
                    continue;
                }
                let via = ik + kj;
                if via < dist[i * n + j] {
                    dist[i * n + j] = via;
                }
            }
        }
    }
    MadTable { n, dist }
}

/// Breadth-first single-source distances.
pub fn bfs_distances(adj: &AdjacencyMatrix, source: usize) -> Vec<u32> {
    assert!(source < adj.n(), "source {source} out of range");
    let mut dist = vec![UNREACHABLE; adj.n()];
    dist[source] = 0;
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        for v in adj.successors(u) {
            if dist[v] == UNREACHABLE {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

pub fn all_pairs_bfs(adj: &AdjacencyMatrix) -> MadTable {
    let rows = (0..adj.n()).map(|s| bfs_distances(adj, s)).collect();
    MadTable::from_rows(rows)
}

/// Evaluation states together with their exact distance table.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub states: Vec<State>,
    pub table: MadTable,
    /// Resolution used to enumerate point-mass evaluation states.
    pub resolution: Option<usize>,
}

impl GroundTruth {
    pub fn index_of(&self, env: &Env, state: &State) -> Result<usize> {
        env.state_index(state, self.resolution)
    }
}

/// Ground truth for evaluation.
///
/// Grids: every cell, Floyd-Warshall over the transition graph.
///
/// Point masses: the `resolution x resolution` cell centres. Distances come
/// from a vertex lattice `{0, 1/F, ..., 1}^2` where `F` is a multiple of the
/// dynamics lattice (so every action, including border clipping, maps
/// lattice points onto lattice points) and of `2 * resolution` (so every
/// centre is a lattice point). Rows are computed by BFS from each centre.
pub fn ground_truth(env: &Env, resolution: Option<usize>) -> Result<GroundTruth> {
    if env.is_discrete() {
        let states = env.enumerate_states(None)?;
        let table = floyd_warshall(&build_adjacency(env, None)?);
        return Ok(GroundTruth { states, table, resolution: None });
    }
    let k = resolution.filter(|&k| k >= 1).ok_or(Error::ResolutionRequired)?;
    let dynamics = env
        .lattice_resolution()
        .ok_or_else(|| Error::InvalidSpec("step size and drift share no lattice up to 1/1000".into()))?;
    let f = lcm(dynamics, 2 * k);
    let side = f + 1;
    let node = |x: f64, y: f64| {
        let q = |v: f64| ((v * f as f64).round().max(0.0) as usize).min(f);
        q(y) * side + q(x)
    };
    let mut adj = AdjacencyMatrix::empty(side * side);
    for gy in 0..side {
        for gx in 0..side {
            let s = State(vec![gx as f64 / f as f64, gy as f64 / f as f64]);
            for a in 0..env.num_actions() {
                let next = env.step(&s, a)?;
                adj.set(gy * side + gx, node(next.0[0], next.0[1]));
            }
        }
    }
    let states = env.enumerate_states(Some(k))?;
    let nodes: Vec<usize> = states.iter().map(|s| node(s.0[0], s.0[1])).collect();
    let rows = nodes
        .iter()
        .map(|&src| {
            let full = bfs_distances(&adj, src);
            nodes.iter().map(|&dst| full[dst]).collect()
        })
        .collect();
    Ok(GroundTruth { states, table: MadTable::from_rows(rows), resolution: Some(k) })
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}
