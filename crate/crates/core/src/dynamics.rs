//! Latent forward model and greedy goal-reaching.
//!
//! The transition model predicts the next embedding from the current
//! embedding and a one-hot action. Planning is one-step greedy: take the
//! action whose predicted successor is closest to the goal embedding under
//! the learned head.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, GradBuffer, MlpParams, Parameters, Sgd};
use crate::envs::{Dataset, Env, State, Trajectory};
use crate::error::{check_dim, Error, Result};
use crate::madlearn::EmbeddingModel;
use crate::oracle::GroundTruth;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel {
    pub net: MlpParams,
    pub num_actions: usize,
    /// Predict `z + net(z, a)` instead of `net(z, a)`.
    pub residual: bool,
}

impl TransitionModel {
    pub fn embedding_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn input(&self, z: &[f64], action: usize) -> Result<Vec<f64>> {
        check_dim(self.embedding_dim(), z.len())?;
        if action >= self.num_actions {
            return Err(Error::UnknownAction { action, num_actions: self.num_actions });
        }
        let mut x = Vec::with_capacity(z.len() + self.num_actions);
        x.extend_from_slice(z);
        x.extend((0..self.num_actions).map(|a| f64::from(u8::from(a == action))));
        Ok(x)
    }

    pub fn predict(&self, z: &[f64], action: usize) -> Result<Vec<f64>> {
        let mut y = self.net.forward(&self.input(z, action)?)?;
        if self.residual {
            y.iter_mut().zip(z).for_each(|(a, b)| *a += b);
        }
        Ok(y)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        check_dim(self.embedding_dim() + self.num_actions, self.net.input_dim())
    }
}

impl Parameters for TransitionModel {
    fn values(&self) -> &[f64] {
        self.net.values()
    }

    fn values_mut(&mut self) -> &mut [f64] {
        self.net.values_mut()
    }
}

/// `(phi(s), a, phi(s'))` with the encoder frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTriple {
    pub z: Vec<f64>,
    pub action: usize,
    pub z_next: Vec<f64>,
}

/// Embeds every transition of `dataset`.
pub fn latent_triples(dataset: &Dataset, embedding: &EmbeddingModel) -> Result<Vec<LatentTriple>> {
    let mut out = Vec::with_capacity(dataset.num_transitions());
    for traj in &dataset.trajectories {
        let zs = traj.states.iter().map(|s| embedding.embed(s)).collect::<Result<Vec<_>>>()?;
        for (t, &action) in traj.actions.iter().enumerate() {
            out.push(LatentTriple { z: zs[t].clone(), action, z_next: zs[t + 1].clone() });
        }
    }
    Ok(out)
}

/// Mean squared prediction error `mean ||rho(z, a) - z'||^2` and its gradient.
pub fn transition_loss(model: &TransitionModel, batch: &[LatentTriple]) -> Result<(f64, GradBuffer)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let inv = 1.0 / batch.len() as f64;
    let mut grads = GradBuffer::zeros_like(model);
    let mut loss = 0.0;
    for triple in batch {
        check_dim(model.embedding_dim(), triple.z_next.len())?;
        let trace = model.net.forward_trace(&model.input(&triple.z, triple.action)?)?;
        let residual: Vec<f64> = trace
            .output()
            .iter()
            .enumerate()
            .map(|(k, &y)| y + if model.residual { triple.z[k] } else { 0.0 } - triple.z_next[k])
            .collect();
        loss += residual.iter().map(|r| r * r).sum::<f64>() * inv;
        let upstream: Vec<f64> = residual.iter().map(|r| 2.0 * r * inv).collect();
        model.net.backward_into(&trace, &upstream, &mut grads)?;
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransitionConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub residual: bool,
    pub lr: f64,
    pub momentum: f64,
    pub grad_clip: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TransitionConfig {
    fn default() -> Self {
        TransitionConfig {
            hidden: vec![64, 64],
            activation: Activation::Relu,
            residual: true,
            lr: 0.01,
            momentum: 0.9,
            grad_clip: Some(10.0),
            batch_size: 64,
            epochs: 30,
            seed: 0,
        }
    }
}

impl TransitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("transition batch_size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("transition lr must be positive and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedTransition {
    pub model: TransitionModel,
    /// Mean training loss per epoch.
    pub log: Vec<f64>,
}

/// Fits the transition model on every `(s, a, s')` of `dataset` with the
/// encoder frozen; minibatches are reshuffled each epoch.
pub fn train_transition(
    dataset: &Dataset,
    embedding: &EmbeddingModel,
    num_actions: usize,
    config: &TransitionConfig,
) -> Result<TrainedTransition> {
    config.validate()?;
    let mut triples = latent_triples(dataset, embedding)?;
    if triples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = embedding.embedding_dim();
    let mut sizes = vec![dim + num_actions];
    sizes.extend(&config.hidden);
    sizes.push(dim);
    let mut init_rng = seed::rng_for(config.seed, "transition/init");
    let mut net = MlpParams::init(&sizes, config.activation, &mut init_rng);
    if config.residual {
        // start close to the identity map
        let last = *net.shapes().last().expect("at least one layer");
        let offset = net.num_params() - (last.inputs * last.outputs + last.outputs);
        net.values_mut()[offset..].iter_mut().for_each(|v| *v *= 0.1);
    }
    let mut model = TransitionModel { net, num_actions, residual: config.residual };
    let mut rng = seed::rng_for(config.seed, "transition/shuffle");
    let mut opt = Sgd::new(config.lr, config.momentum);
    let mut log = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        triples.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for batch in triples.chunks(config.batch_size) {
            let (loss, mut grads) = transition_loss(&model, batch)?;
            if let Some(limit) = config.grad_clip {
                let norm = grads.norm();
                if norm > limit {
                    grads.scale(limit / norm);
                }
            }
            opt.step(&mut model, &grads)?;
            total += loss;
            count += 1;
        }
        log.push(total / count as f64);
    }
    if !model.values().iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidConfig("transition training diverged; lower the learning rate".into()));
    }
    Ok(TrainedTransition { model, log })
}

/// Everything greedy planning needs: an embedding, a latent forward model
/// and a latent distance.
pub trait LatentPlanner {
    fn num_actions(&self) -> usize;
    fn embed(&self, state: &State) -> Result<Vec<f64>>;
    fn predict(&self, z: &[f64], action: usize) -> Result<Vec<f64>>;
    fn latent_distance(&self, z1: &[f64], z2: &[f64]) -> Result<f64>;
}

/// Trained encoder, head and transition model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedModels {
    pub embedding: EmbeddingModel,
    pub transition: TransitionModel,
}

impl LatentPlanner for LearnedModels {
    fn num_actions(&self) -> usize {
        self.transition.num_actions
    }

    fn embed(&self, state: &State) -> Result<Vec<f64>> {
        self.embedding.embed(state)
    }

    fn predict(&self, z: &[f64], action: usize) -> Result<Vec<f64>> {
        self.transition.predict(z, action)
    }

    fn latent_distance(&self, z1: &[f64], z2: &[f64]) -> Result<f64> {
        self.embedding.head.distance(z1, z2)
    }
}

/// Exact planner backed by the ground-truth table: the "embedding" is the
/// state index, the forward model is the simulator and the distance is the
/// true minimum action distance.
#[derive(Debug, Clone)]
pub struct OraclePlanner<'a> {
    pub env: &'a Env,
    pub truth: &'a GroundTruth,
}

impl LatentPlanner for OraclePlanner<'_> {
    fn num_actions(&self) -> usize {
        self.env.num_actions()
    }

    fn embed(&self, state: &State) -> Result<Vec<f64>> {
        Ok(vec![self.truth.index_of(self.env, state)? as f64])
    }

    fn predict(&self, z: &[f64], action: usize) -> Result<Vec<f64>> {
        let state = &self.truth.states[z[0] as usize];
        self.embed(&self.env.step(state, action)?)
    }

    fn latent_distance(&self, z1: &[f64], z2: &[f64]) -> Result<f64> {
        let d = self.truth.table.get(z1[0] as usize, z2[0] as usize);
        Ok(d.map_or(f64::INFINITY, f64::from))
    }
}

/// Action whose predicted successor is nearest the goal; ties go to the
/// lowest action id.
pub fn greedy_action(planner: &impl LatentPlanner, state: &State, goal: &State) -> Result<usize> {
    let goal_z = planner.embed(goal)?;
    greedy_from_embeddings(planner, &planner.embed(state)?, &goal_z)
}

fn greedy_from_embeddings(planner: &impl LatentPlanner, z: &[f64], goal_z: &[f64]) -> Result<usize> {
    let mut best = (0, f64::INFINITY);
    for a in 0..planner.num_actions() {
        let d = planner.latent_distance(&planner.predict(z, a)?, goal_z)?;
        if d < best.1 {
            best = (a, d);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub reached: bool,
    pub steps: usize,
    pub trajectory: Trajectory,
}

/// Compact record for JSON-lines export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub start: State,
    pub goal: State,
    pub reached: bool,
    pub steps: usize,
}

impl PlanResult {
    pub fn record(&self, goal: &State) -> PlanRecord {
        PlanRecord {
            start: self.trajectory.states[0].clone(),
            goal: goal.clone(),
            reached: self.reached,
            steps: self.steps,
        }
    }
}

/// Acts greedily in the real environment until the goal test passes or
/// `budget` steps are spent.
pub fn rollout(env: &Env, planner: &impl LatentPlanner, start: &State, goal: &State, budget: usize) -> Result<PlanResult> {
    let goal_z = planner.embed(goal)?;
    let mut state = start.clone();
    let mut trajectory = Trajectory { states: vec![state.clone()], actions: Vec::new() };
    if env.reached(&state, goal) {
        return Ok(PlanResult { reached: true, steps: 0, trajectory });
    }
    for step in 1..=budget {
        let action = greedy_from_embeddings(planner, &planner.embed(&state)?, &goal_z)?;
        state = env.step(&state, action)?;
        trajectory.actions.push(action);
        trajectory.states.push(state.clone());
        if env.reached(&state, goal) {
            return Ok(PlanResult { reached: true, steps: step, trajectory });
        }
    }
    Ok(PlanResult { reached: false, steps: budget, trajectory })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvSpec;
    use crate::norms::DistanceHead;
    use crate::oracle::ground_truth;

    /// Grid encoder that returns cell coordinates, with an exact transition model.
    struct CellPlanner<'a> {
        env: &'a Env,
    }

    impl LatentPlanner for CellPlanner<'_> {
        fn num_actions(&self) -> usize {
            self.env.num_actions()
        }
        fn embed(&self, state: &State) -> Result<Vec<f64>> {
            let [x, y] = self.env.cell_of(state);
            Ok(vec![x as f64, y as f64])
        }
        fn predict(&self, z: &[f64], action: usize) -> Result<Vec<f64>> {
            let s = self.env.state_of_cell([z[0] as usize, z[1] as usize]);
            self.embed(&self.env.step(&s, action)?)
        }
        fn latent_distance(&self, z1: &[f64], z2: &[f64]) -> Result<f64> {
            DistanceHead::l1().distance(z1, z2)
        }
    }

    #[test]
    fn greedy_moves_right_on_path() {
        let env = Env::new(EnvSpec::grid(3, 1, 5)).unwrap();
        let planner = CellPlanner { env: &env };
        let a = greedy_action(&planner, &env.state_of_cell([0, 0]), &env.state_of_cell([2, 0])).unwrap();
        assert_eq!(a, 3);
    }

    #[test]
    fn ties_pick_lowest_action() {
        let env = Env::new(EnvSpec::grid(3, 3, 5)).unwrap();
        let planner = CellPlanner { env: &env };
        // from the centre towards the opposite corner, up and right tie
        let a = greedy_action(&planner, &env.state_of_cell([1, 1]), &env.state_of_cell([2, 2])).unwrap();
        assert_eq!(a, 0);
        // at the goal every move is worse except blocked ones; none blocked in the centre
        let s = env.state_of_cell([1, 1]);
        let a = greedy_action(&planner, &s, &s).unwrap();
        let z = planner.embed(&s).unwrap();
        let chosen = planner.latent_distance(&planner.predict(&z, a).unwrap(), &z).unwrap();
        for b in 0..4 {
            assert!(chosen <= planner.latent_distance(&planner.predict(&z, b).unwrap(), &z).unwrap());
        }
    }

    #[test]
    fn rollout_edge_cases() {
        let env = Env::new(EnvSpec::grid(3, 3, 5)).unwrap();
        let planner = CellPlanner { env: &env };
        let s = env.state_of_cell([0, 0]);
        let r = rollout(&env, &planner, &s, &s, 5).unwrap();
        assert!(r.reached && r.steps == 0);
        let r = rollout(&env, &planner, &s, &env.state_of_cell([1, 0]), 5).unwrap();
        assert!(r.reached && r.steps == 1);
        let r = rollout(&env, &planner, &s, &env.state_of_cell([2, 2]), 1).unwrap();
        assert!(!r.reached && r.steps == 1);
    }

    #[test]
    fn unreachable_goal_exhausts_budget() {
        let mut spec = EnvSpec::grid(3, 1, 5);
        spec.kind = crate::envs::EnvKind::GridOneway;
        spec.oneway_edges = vec![[[0, 0], [1, 0]]];
        let env = Env::new(spec).unwrap();
        let gt = ground_truth(&env, None).unwrap();
        let planner = OraclePlanner { env: &env, truth: &gt };
        let r = rollout(&env, &planner, &env.state_of_cell([2, 0]), &env.state_of_cell([0, 0]), 7).unwrap();
        assert!(!r.reached);
        assert_eq!(r.steps, 7);
        assert!(env.validate_dataset(&Dataset { env_spec: env.spec().clone(), seed: 0, trajectories: vec![r.trajectory] }));
    }

    #[test]
    fn transition_rejects_bad_input() {
        let model = TransitionModel { net: MlpParams::zeros(&[3, 2], Activation::Relu), num_actions: 1, residual: false };
        assert!(model.predict(&[0.0], 0).is_err());
        assert!(model.predict(&[0.0, 0.0], 1).is_err());
        assert!(transition_loss(&model, &[]).is_err());
    }
}
