//! Deterministic reward-free environments and trajectory collection.
//!
//! Two families are provided. Grids are discrete 4-connected worlds whose
//! moves can be blocked by walls (both directions) or by one-way doors (one
//! direction). Point-mass worlds move a point around the unit square with
//! fixed-size impulses; the asymmetric variant adds a constant drift after
//! every action so that travelling against the current costs more steps.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Rng};

/// Grid cell as `[x, y]`.
pub type Cell = [usize; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    GridSymmetric,
    GridOneway,
    PointmassSymmetric,
    PointmassAsymmetric,
}

impl EnvKind {
    pub fn is_grid(self) -> bool {
        matches!(self, EnvKind::GridSymmetric | EnvKind::GridOneway)
    }

    pub fn is_asymmetric(self) -> bool {
        matches!(self, EnvKind::GridOneway | EnvKind::PointmassAsymmetric)
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::GridSymmetric => "grid_symmetric",
            EnvKind::GridOneway => "grid_oneway",
            EnvKind::PointmassSymmetric => "pointmass_symmetric",
            EnvKind::PointmassAsymmetric => "pointmass_asymmetric",
        }
    }
}

fn default_step_size() -> f64 {
    0.05
}

fn default_goal_tolerance() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    #[serde(default)]
    pub width: usize,
    #[serde(default)]
    pub height: usize,
    /// Undirected blocked moves between 4-neighbour cells.
    #[serde(default)]
    pub walls: Vec<[Cell; 2]>,
    /// Directed doors `[from, to]`: the move `to -> from` is blocked.
    #[serde(default)]
    pub oneway_edges: Vec<[Cell; 2]>,
    #[serde(default)]
    pub drift: [f64; 2],
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    pub horizon: usize,
    #[serde(default = "default_goal_tolerance")]
    pub goal_tolerance: f64,
}

impl EnvSpec {
    fn base(kind: EnvKind, horizon: usize) -> Self {
        EnvSpec {
            kind,
            width: 0,
            height: 0,
            walls: Vec::new(),
            oneway_edges: Vec::new(),
            drift: [0.0, 0.0],
            step_size: default_step_size(),
            horizon,
            goal_tolerance: default_goal_tolerance(),
        }
    }

    /// Open symmetric grid.
    pub fn grid(width: usize, height: usize, horizon: usize) -> Self {
        EnvSpec {
            width,
            height,
            ..Self::base(EnvKind::GridSymmetric, horizon)
        }
    }

    /// Grid cut by a horizontal wall between rows `height/2 - 1` and
    /// `height/2`. The outer columns stay open both ways; every inner column
    /// has a one-way door pointing up. Going down therefore means a detour
    /// round one end of the wall.
    pub fn oneway_barrier(width: usize, height: usize, horizon: usize) -> Self {
        let (below, above) = (height / 2 - 1, height / 2);
        let oneway_edges = (1..width.saturating_sub(1)).map(|x| [[x, below], [x, above]]).collect();
        EnvSpec {
            width,
            height,
            oneway_edges,
            ..Self::base(EnvKind::GridOneway, horizon)
        }
    }

    pub fn pointmass(horizon: usize) -> Self {
        Self::base(EnvKind::PointmassSymmetric, horizon)
    }

    pub fn pointmass_drift(drift: [f64; 2], horizon: usize) -> Self {
        EnvSpec {
            drift,
            ..Self::base(EnvKind::PointmassAsymmetric, horizon)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidSpec(msg));
        if self.horizon < 1 {
            return fail("horizon must be at least 1".into());
        }
        if self.kind.is_grid() {
            if self.width < 2 && self.height < 2 {
                return fail(format!("grid {}x{} is too small", self.width, self.height));
            }
            if self.width < 1 || self.height < 1 {
                return fail("grid dimensions must be positive".into());
            }
            let in_bounds = |c: &Cell| c[0] < self.width && c[1] < self.height;
            for (label, edges) in [("wall", &self.walls), ("one-way edge", &self.oneway_edges)] {
                for [a, b] in edges.iter() {
                    if !in_bounds(a) || !in_bounds(b) {
                        return fail(format!("{label} {a:?}->{b:?} leaves the grid"));
                    }
                    if a[0].abs_diff(b[0]) + a[1].abs_diff(b[1]) != 1 {
                        return fail(format!("{label} {a:?}->{b:?} does not join 4-neighbours"));
                    }
                }
            }
            if self.kind == EnvKind::GridSymmetric && !self.oneway_edges.is_empty() {
                return fail("symmetric grid cannot have one-way edges".into());
            }
        } else {
            if !(self.step_size > 0.0 && self.step_size.is_finite()) {
                return fail("step_size must be positive".into());
            }
            if !(self.goal_tolerance > 0.0) {
                return fail("goal_tolerance must be positive".into());
            }
            if self.drift.iter().any(|d| !d.is_finite()) {
                return fail("drift must be finite".into());
            }
            if self.kind == EnvKind::PointmassSymmetric && self.drift != [0.0, 0.0] {
                return fail("symmetric point mass cannot drift".into());
            }
        }
        Ok(())
    }
}

/// Observation of an environment state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct State(pub Vec<f64>);

impl State {
    pub fn features(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub actions: Vec<usize>,
}

impl Trajectory {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn transitions(&self) -> impl Iterator<Item = (&State, usize, &State)> {
        self.actions
            .iter()
            .enumerate()
            .map(|(t, &a)| (&self.states[t], a, &self.states[t + 1]))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BehaviorPolicy {
    #[default]
    UniformRandom,
    /// Repeats the previous action with probability `repeat`, otherwise
    /// samples uniformly.
    Sticky { repeat: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env_spec: EnvSpec,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    env_spec: EnvSpec,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

impl Dataset {
    pub fn num_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// JSON-lines encoding: a header line with the environment and seed,
    /// then one trajectory per line.
    pub fn to_jsonl(&self, config_hash: Option<&str>) -> Result<String> {
        let header = DatasetHeader {
            env_spec: self.env_spec.clone(),
            seed: self.seed,
            config_hash: config_hash.map(str::to_owned),
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for traj in &self.trajectories {
            out.push_str(&serde_json::to_string(traj)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses [`Dataset::to_jsonl`] output; also returns the embedded config hash.
    pub fn from_jsonl(text: &str) -> Result<(Self, Option<String>)> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: DatasetHeader = match lines.next() {
            Some(line) => serde_json::from_str(line)?,
            None => {
                return Err(Error::Malformed {
                    what: "dataset",
                    reason: "missing header line".into(),
                })
            }
        };
        let trajectories = lines
            .map(serde_json::from_str)
            .collect::<Result<Vec<Trajectory>, _>>()?;
        for (i, t) in trajectories.iter().enumerate() {
            if t.states.len() != t.actions.len() + 1 {
                return Err(Error::Malformed {
                    what: "dataset",
                    reason: format!("trajectory {i} has {} states for {} actions", t.states.len(), t.actions.len()),
                });
            }
        }
        let ds = Dataset { env_spec: header.env_spec, seed: header.seed, trajectories };
        Ok((ds, header.config_hash))
    }

    pub fn write_jsonl(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        let text = self.to_jsonl(config_hash)?;
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<(Self, Option<String>)> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        for line in BufReader::new(file).lines() {
            text.push_str(&line.map_err(|e| Error::io(path, e))?);
            text.push('\n');
        }
        Self::from_jsonl(&text)
    }
}

const GRID_MOVES: [(isize, isize); 4] = [(0, 1), (0, -1), (-1, 0), (1, 0)];
const POINT_MOVES: [(f64, f64); 5] = [(0.0, 1.0), (0.0, -1.0), (-1.0, 0.0), (1.0, 0.0), (0.0, 0.0)];

/// Action names in id order.
pub fn action_names(kind: EnvKind) -> &'static [&'static str] {
    if kind.is_grid() {
        &["up", "down", "left", "right"]
    } else {
        &["up", "down", "left", "right", "noop"]
    }
}

#[derive(Debug, Clone)]
pub struct Env {
    spec: EnvSpec,
    blocked: HashSet<(Cell, Cell)>,
}

impl Env {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        spec.validate()?;
        let mut blocked = HashSet::new();
        for &[a, b] in &spec.walls {
            blocked.insert((a, b));
            blocked.insert((b, a));
        }
        for &[from, to] in &spec.oneway_edges {
            blocked.insert((to, from));
        }
        Ok(Env { spec, blocked })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn kind(&self) -> EnvKind {
        self.spec.kind
    }

    pub fn num_actions(&self) -> usize {
        if self.spec.kind.is_grid() {
            GRID_MOVES.len()
        } else {
            POINT_MOVES.len()
        }
    }

    pub fn state_dim(&self) -> usize {
        2
    }

    pub fn is_discrete(&self) -> bool {
        self.spec.kind.is_grid()
    }

    fn cell_state(&self, cell: Cell) -> State {
        let norm = |v: usize, n: usize| if n > 1 { v as f64 / (n - 1) as f64 } else { 0.0 };
        State(vec![norm(cell[0], self.spec.width), norm(cell[1], self.spec.height)])
    }

    /// Grid cell of a grid state.
    pub fn cell_of(&self, state: &State) -> Cell {
        let f = state.features();
        let idx = |v: f64, n: usize| {
            let scaled = (v * (n.max(2) - 1) as f64).round();
            (scaled.max(0.0) as usize).min(n - 1)
        };
        [idx(f[0], self.spec.width), idx(f[1], self.spec.height)]
    }

    pub fn state_of_cell(&self, cell: Cell) -> State {
        self.cell_state(cell)
    }

    pub fn reset(&self, rng: &mut Rng) -> State {
        if self.spec.kind.is_grid() {
            let x = rng.gen_range(0..self.spec.width);
            let y = rng.gen_range(0..self.spec.height);
            self.cell_state([x, y])
        } else {
            State(vec![rng.gen::<f64>(), rng.gen::<f64>()])
        }
    }

    pub fn step(&self, state: &State, action: usize) -> Result<State> {
        let num_actions = self.num_actions();
        if action >= num_actions {
            return Err(Error::UnknownAction { action, num_actions });
        }
        check_state_dim(state)?;
        if self.spec.kind.is_grid() {
            let from = self.cell_of(state);
            let to = self.grid_target(from, action);
            Ok(self.cell_state(to))
        } else {
            let (dx, dy) = POINT_MOVES[action];
            let f = state.features();
            let s = self.spec.step_size;
            let x = (f[0] + dx * s + self.spec.drift[0]).clamp(0.0, 1.0);
            let y = (f[1] + dy * s + self.spec.drift[1]).clamp(0.0, 1.0);
            Ok(State(vec![x, y]))
        }
    }

    fn grid_target(&self, from: Cell, action: usize) -> Cell {
        let (dx, dy) = GRID_MOVES[action];
        let x = from[0] as isize + dx;
        let y = from[1] as isize + dy;
        if x < 0 || y < 0 || x >= self.spec.width as isize || y >= self.spec.height as isize {
            return from;
        }
        let to = [x as usize, y as usize];
        if self.blocked.contains(&(from, to)) {
            from
        } else {
            to
        }
    }

    /// Whether `step(from, action) == to` exactly.
    pub fn is_valid_transition(&self, from: &State, action: usize, to: &State) -> bool {
        matches!(self.step(from, action), Ok(next) if &next == to)
    }

    /// Goal test used by planning: exact cell match on grids, Euclidean
    /// tolerance on point masses.
    pub fn reached(&self, state: &State, goal: &State) -> bool {
        if self.spec.kind.is_grid() {
            self.cell_of(state) == self.cell_of(goal)
        } else {
            let (a, b) = (state.features(), goal.features());
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            d2.sqrt() <= self.spec.goal_tolerance
        }
    }

    /// All states in row-major order (`y` outer, `x` inner). Point masses are
    /// discretized to the centres of a `resolution x resolution` grid.
    pub fn enumerate_states(&self, resolution: Option<usize>) -> Result<Vec<State>> {
        if self.spec.kind.is_grid() {
            let (w, h) = (self.spec.width, self.spec.height);
            return Ok((0..h).flat_map(|y| (0..w).map(move |x| [x, y])).map(|c| self.cell_state(c)).collect());
        }
        let k = match resolution {
            Some(k) if k >= 1 => k,
            _ => return Err(Error::ResolutionRequired),
        };
        let centre = |i: usize| (i as f64 + 0.5) / k as f64;
        Ok((0..k).flat_map(|y| (0..k).map(move |x| State(vec![centre(x), centre(y)]))).collect())
    }

    /// Index of `state` within `enumerate_states(resolution)`; continuous
    /// states snap to the enclosing cell.
    pub fn state_index(&self, state: &State, resolution: Option<usize>) -> Result<usize> {
        check_state_dim(state)?;
        if self.spec.kind.is_grid() {
            let [x, y] = self.cell_of(state);
            return Ok(y * self.spec.width + x);
        }
        let k = resolution.filter(|&k| k >= 1).ok_or(Error::ResolutionRequired)?;
        let f = state.features();
        let bin = |v: f64| ((v * k as f64).floor().max(0.0) as usize).min(k - 1);
        Ok(bin(f[1]) * k + bin(f[0]))
    }

    /// Smallest cell-centre resolution on which the point-mass dynamics move
    /// centres onto centres (away from the arena border). Grids return `None`.
    pub fn lattice_resolution(&self) -> Option<usize> {
        if self.spec.kind.is_grid() {
            return None;
        }
        let units = [self.spec.step_size, self.spec.drift[0], self.spec.drift[1]];
        (1..=1000).find(|&k| {
            units.iter().all(|u| {
                let scaled = u * k as f64;
                (scaled - scaled.round()).abs() < 1e-9
            })
        })
    }

    /// Rolls out `n_episodes` episodes of exactly `horizon` steps. Episode
    /// `i` draws from its own generator derived from `seed`, so the result
    /// does not depend on collection order.
    pub fn collect(&self, policy: BehaviorPolicy, n_episodes: usize, horizon: usize, seed: u64) -> Dataset {
        let trajectories = (0..n_episodes)
            .map(|i| {
                let mut rng = seed::rng_for(seed, &format!("episode/{i}"));
                self.rollout_policy(policy, horizon, &mut rng)
            })
            .collect();
        Dataset { env_spec: self.spec.clone(), seed, trajectories }
    }

    fn rollout_policy(&self, policy: BehaviorPolicy, horizon: usize, rng: &mut Rng) -> Trajectory {
        let mut state = self.reset(rng);
        let mut states = Vec::with_capacity(horizon + 1);
        let mut actions = Vec::with_capacity(horizon);
        let n = self.num_actions();
        let mut prev: Option<usize> = None;
        for _ in 0..horizon {
            let action = match (policy, prev) {
                (BehaviorPolicy::Sticky { repeat }, Some(p)) if rng.gen::<f64>() < repeat => p,
                _ => rng.gen_range(0..n),
            };
            let next = self.step(&state, action).expect("policy samples valid actions");
            states.push(std::mem::replace(&mut state, next));
            actions.push(action);
            prev = Some(action);
        }
        states.push(state);
        Trajectory { states, actions }
    }

    /// Replays every stored transition through [`Env::step`].
    pub fn validate_dataset(&self, dataset: &Dataset) -> bool {
        dataset
            .trajectories
            .iter()
            .all(|t| t.states.len() == t.actions.len() + 1 && t.transitions().all(|(s, a, n)| self.is_valid_transition(s, a, n)))
    }
}

fn check_state_dim(state: &State) -> Result<()> {
    crate::error::check_dim(2, state.dim())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(w: usize, h: usize) -> Env {
        Env::new(EnvSpec::grid(w, h, 10)).unwrap()
    }

    #[test]
    fn reset_on_tiny_grid_hits_a_cell() {
        let env = grid(2, 2);
        let all = env.enumerate_states(None).unwrap();
        let mut rng = seed::rng(3);
        for _ in 0..20 {
            assert!(all.contains(&env.reset(&mut rng)));
        }
        assert_eq!(env.reset(&mut seed::rng(9)), env.reset(&mut seed::rng(9)));
    }

    #[test]
    fn reset_pointmass_in_arena() {
        let env = Env::new(EnvSpec::pointmass(10)).unwrap();
        let mut rng = seed::rng(1);
        for _ in 0..100 {
            let s = env.reset(&mut rng);
            assert!(s.features().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn free_move_right() {
        let env = grid(3, 3);
        let next = env.step(&env.state_of_cell([0, 0]), 3).unwrap();
        assert_eq!(env.cell_of(&next), [1, 0]);
    }

    #[test]
    fn boundary_blocks() {
        let env = grid(3, 3);
        let s = env.state_of_cell([0, 0]);
        assert_eq!(env.step(&s, 2).unwrap(), s);
        assert_eq!(env.step(&s, 1).unwrap(), s);
    }

    #[test]
    fn oneway_door_blocks_reverse() {
        let mut spec = EnvSpec::grid(3, 3, 10);
        spec.kind = EnvKind::GridOneway;
        spec.oneway_edges = vec![[[0, 0], [1, 0]]];
        let env = Env::new(spec).unwrap();
        let a = env.state_of_cell([0, 0]);
        let b = env.state_of_cell([1, 0]);
        assert_eq!(env.step(&a, 3).unwrap(), b);
        assert_eq!(env.step(&b, 2).unwrap(), b);
    }

    #[test]
    fn unknown_action() {
        let env = grid(3, 3);
        let err = env.step(&env.state_of_cell([0, 0]), 4).unwrap_err();
        assert!(matches!(err, Error::UnknownAction { action: 4, num_actions: 4 }));
    }

    #[test]
    fn drift_applies_after_action() {
        let env = Env::new(EnvSpec::pointmass_drift([0.05, 0.0], 10)).unwrap();
        let next = env.step(&State(vec![0.5, 0.5]), 4).unwrap();
        assert!((next.0[0] - 0.55).abs() < 1e-12);
        assert_eq!(next.0[1], 0.5);
        let clipped = env.step(&State(vec![0.99, 0.5]), 3).unwrap();
        assert_eq!(clipped.0[0], 1.0);
    }

    #[test]
    fn enumerate_counts_and_order() {
        assert_eq!(grid(3, 3).enumerate_states(None).unwrap().len(), 9);
        let env = grid(2, 2);
        let first = env.enumerate_states(None).unwrap();
        assert_eq!(first, env.enumerate_states(None).unwrap());
        let cells: Vec<Cell> = first.iter().map(|s| env.cell_of(s)).collect();
        assert_eq!(cells, vec![[0, 0], [1, 0], [0, 1], [1, 1]]);
        let pm = Env::new(EnvSpec::pointmass(10)).unwrap();
        assert_eq!(pm.enumerate_states(Some(5)).unwrap().len(), 25);
        assert!(matches!(pm.enumerate_states(None), Err(Error::ResolutionRequired)));
    }

    #[test]
    fn state_index_matches_enumeration() {
        let pm = Env::new(EnvSpec::pointmass(10)).unwrap();
        for (i, s) in pm.enumerate_states(Some(7)).unwrap().iter().enumerate() {
            assert_eq!(pm.state_index(s, Some(7)).unwrap(), i);
        }
        let g = Env::new(EnvSpec::oneway_barrier(8, 8, 10)).unwrap();
        for (i, s) in g.enumerate_states(None).unwrap().iter().enumerate() {
            assert_eq!(g.state_index(s, None).unwrap(), i);
        }
    }

    #[test]
    fn lattice_resolution_matches_step_units() {
        assert_eq!(Env::new(EnvSpec::pointmass(10)).unwrap().lattice_resolution(), Some(20));
        let drift = Env::new(EnvSpec::pointmass_drift([0.025, 0.0], 10)).unwrap();
        assert_eq!(drift.lattice_resolution(), Some(40));
        assert_eq!(grid(3, 3).lattice_resolution(), None);
    }

    #[test]
    fn invalid_specs() {
        assert!(Env::new(EnvSpec::grid(1, 1, 5)).is_err());
        assert!(Env::new(EnvSpec::grid(3, 3, 0)).is_err());
        let mut spec = EnvSpec::oneway_barrier(4, 4, 5);
        spec.oneway_edges.push([[0, 0], [2, 0]]);
        assert!(Env::new(spec).is_err());
    }

    #[test]
    fn barrier_layout() {
        let spec = EnvSpec::oneway_barrier(8, 8, 10);
        assert_eq!(spec.oneway_edges.len(), 6);
        assert_eq!(spec.oneway_edges[0], [[1, 3], [1, 4]]);
        let env = Env::new(spec).unwrap();
        let go = |cell, a| env.cell_of(&env.step(&env.state_of_cell(cell), a).unwrap());
        assert_eq!(go([3, 3], 0), [3, 4]);
        assert_eq!(go([3, 4], 1), [3, 4]);
        assert_eq!(go([0, 4], 1), [0, 3]);
    }

    #[test]
    fn collect_contract() {
        let env = grid(4, 4);
        let ds = env.collect(BehaviorPolicy::UniformRandom, 10, 50, 42);
        assert_eq!(ds.trajectories.len(), 10);
        assert!(ds.trajectories.iter().all(|t| t.states.len() <= 51));
        assert_eq!(ds, env.collect(BehaviorPolicy::UniformRandom, 10, 50, 42));
        assert!(env.validate_dataset(&ds));
    }

    #[test]
    fn jsonl_round_trip() {
        let env = Env::new(EnvSpec::pointmass_drift([0.025, 0.0], 20)).unwrap();
        let ds = env.collect(BehaviorPolicy::Sticky { repeat: 0.5 }, 3, 20, 5);
        let text = ds.to_jsonl(Some("abc")).unwrap();
        let (back, hash) = Dataset::from_jsonl(&text).unwrap();
        assert_eq!(back, ds);
        assert_eq!(hash.as_deref(), Some("abc"));
        assert!(env.validate_dataset(&back));
    }
}
