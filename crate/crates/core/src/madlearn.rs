//! Learning minimum-action-distance embeddings from trajectories.
//!
//! Pairs `(s_i, s_j)` drawn from one trajectory carry the trajectory distance
//! `j - i`, an upper bound on the true distance. The objective regresses the
//! head distance onto these targets and adds a squared hinge penalty whenever
//! a one-step pair is embedded further apart than one step:
//!
//! ```text
//! L = mean_general (d - d_td)^2 + w * mean_onestep max(0, d - d_td)^2
//! ```
//!
//! Because the heads satisfy the triangle inequality, bounding one-step
//! distances bounds every distance by the length of the shortest path.

use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, GradBuffer, MlpParams, Parameters, Sgd};
use crate::envs::{Dataset, Env, State};
use crate::error::{Error, Result};
use crate::evalharness::{self, DistanceEstimator};
use crate::norms::{DistanceHead, PNormHead, WideNormParams};
use crate::oracle::GroundTruth;
use crate::seed::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub s_i: State,
    pub s_j: State,
    pub d_td: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Any `i <= j` on one trajectory.
    General,
    /// Consecutive states only.
    Onestep,
}

/// Draws `n` pairs. General mode picks a trajectory uniformly, then `i`
/// uniformly and `j` uniformly in `[i, min(len, i + max_offset)]`.
pub fn sample_pairs(
    dataset: &Dataset,
    n: usize,
    rng: &mut Rng,
    mode: SampleMode,
    max_offset: Option<usize>,
) -> Result<Vec<PairSample>> {
    let usable: Vec<_> = dataset
        .trajectories
        .iter()
        .filter(|t| mode == SampleMode::General || !t.is_empty())
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let traj = usable[rng.gen_range(0..usable.len())];
        let len = traj.len();
        let (i, j) = match mode {
            SampleMode::Onestep => {
                let i = rng.gen_range(0..len);
                (i, i + 1)
            }
            SampleMode::General => {
                let i = rng.gen_range(0..=len);
                let hi = max_offset.map_or(len, |m| len.min(i + m));
                (i, rng.gen_range(i..=hi.max(i)))
            }
        };
        out.push(PairSample {
            s_i: traj.states[i].clone(),
            s_j: traj.states[j].clone(),
            d_td: (j - i) as u32,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Pnorm,
    Widenorm,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Pnorm => "pnorm",
            HeadKind::Widenorm => "widenorm",
        }
    }
}

/// Missing fields in serialized configs take the values of
/// `TrainConfig::new(HeadKind::Pnorm, 16)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub head: HeadKind,
    pub p: f64,
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Row counts of the wide-norm components; defaults to one component
    /// with `2 * embedding_dim` rows.
    pub widenorm_rows: Option<Vec<usize>>,
    pub penalty_weight: f64,
    pub batch_size: usize,
    pub pairs_per_trajectory: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Rescales the joint gradient to at most this norm.
    pub grad_clip: Option<f64>,
    pub epochs: usize,
    pub seed: u64,
    /// Cap on `j - i` for general pairs; `None` caps at the horizon.
    pub max_pair_offset: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::new(HeadKind::Pnorm, 16)
    }
}

impl TrainConfig {
    pub fn new(head: HeadKind, embedding_dim: usize) -> Self {
        TrainConfig {
            head,
            p: 1.0,
            embedding_dim,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            widenorm_rows: None,
            penalty_weight: 300.0,
            batch_size: 64,
            pairs_per_trajectory: 8,
            lr: 0.003,
            momentum: 0.9,
            grad_clip: Some(10.0),
            epochs: 150,
            seed: 0,
            max_pair_offset: Some(10),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        if self.batch_size == 0 || self.epochs == 0 || self.pairs_per_trajectory == 0 {
            return fail("batch_size, epochs and pairs_per_trajectory must be positive");
        }
        if self.embedding_dim == 0 {
            return fail("embedding_dim must be positive");
        }
        if !(self.penalty_weight >= 0.0) {
            return fail("penalty_weight must be non-negative");
        }
        if !(self.lr > 0.0) {
            return fail("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must be in [0, 1)");
        }
        if self.head == HeadKind::Pnorm && !(self.p >= 1.0) {
            return fail("p must be at least 1");
        }
        Ok(())
    }

    fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.hidden);
        sizes.push(self.embedding_dim);
        sizes
    }
}

/// State encoder plus distance head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    pub encoder: MlpParams,
    pub head: DistanceHead,
}

impl EmbeddingModel {
    pub fn init(config: &TrainConfig, input_dim: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let encoder = MlpParams::init(&config.layer_sizes(input_dim), config.activation, rng);
        let head = match config.head {
            HeadKind::Pnorm => DistanceHead::Pnorm(PNormHead { p: config.p }),
            HeadKind::Widenorm => {
                let rows = config.widenorm_rows.clone().unwrap_or_else(|| vec![2 * config.embedding_dim]);
                DistanceHead::Widenorm(WideNormParams::init(config.embedding_dim, &rows, rng)?)
            }
        };
        Ok(EmbeddingModel { encoder, head })
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate(self.encoder.output_dim())
    }

    pub fn embed(&self, state: &State) -> Result<Vec<f64>> {
        self.encoder.forward(state.features())
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.output_dim()
    }
}

impl DistanceEstimator for EmbeddingModel {
    fn estimate(&self, from: &State, to: &State) -> Result<f64> {
        self.head.distance(&self.embed(from)?, &self.embed(to)?)
    }

    fn pairwise(&self, states: &[State]) -> Result<Vec<Vec<f64>>> {
        evalharness::embedding_pairwise(self, states)
    }
}

/// Loss value split into its two terms, with gradients for both parameter groups.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub regression: f64,
    pub penalty: f64,
    pub encoder_grads: GradBuffer,
    pub head_grads: GradBuffer,
}

/// Regression plus weighted squared-hinge penalty. An empty batch contributes
/// zero to its term; both empty is an error.
pub fn mad_loss(
    model: &EmbeddingModel,
    general: &[PairSample],
    onestep: &[PairSample],
    penalty_weight: f64,
) -> Result<LossEval> {
    if general.is_empty() && onestep.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut encoder_grads = GradBuffer::zeros_like(&model.encoder);
    let mut head_grads = GradBuffer::zeros_like(&model.head);
    let mut regression = 0.0;
    let mut penalty = 0.0;
    for (batch, is_penalty) in [(general, false), (onestep, true)] {
        if batch.is_empty() {
            continue;
        }
        let inv = 1.0 / batch.len() as f64;
        for pair in batch {
            let ti = model.encoder.forward_trace(pair.s_i.features())?;
            let tj = model.encoder.forward_trace(pair.s_j.features())?;
            let head_trace = model.head.forward(ti.output(), tj.output())?;
            let residual = head_trace.value() - f64::from(pair.d_td);
            let upstream = if is_penalty {
                let excess = residual.max(0.0);
                penalty += excess * excess * inv;
                2.0 * penalty_weight * excess * inv
            } else {
                regression += residual * residual * inv;
                2.0 * residual * inv
            };
            if upstream == 0.0 {
                continue;
            }
            let dz = model.head.backward(&head_trace, upstream, &mut head_grads)?;
            model.encoder.backward_into(&ti, &dz, &mut encoder_grads)?;
            let neg: Vec<f64> = dz.iter().map(|v| -v).collect();
            model.encoder.backward_into(&tj, &neg, &mut encoder_grads)?;
        }
    }
    Ok(LossEval {
        loss: regression + penalty_weight * penalty,
        regression,
        penalty,
        encoder_grads,
        head_grads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub penalty: f64,
    pub mad_mse: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainedEmbedding {
    pub model: EmbeddingModel,
    pub log: Vec<EpochLog>,
}

/// Fixed-epoch SGD on [`mad_loss`]; encoder and head train jointly. When
/// `oracle` is given the epoch log also records the MSE against it.
pub fn train_embedding(
    dataset: &Dataset,
    config: &TrainConfig,
    oracle: Option<(&Env, &GroundTruth)>,
) -> Result<TrainedEmbedding> {
    train_embedding_with(dataset, config, oracle, |_, _| Ok(()))
}

/// [`train_embedding`] with a hook called after every epoch.
pub fn train_embedding_with(
    dataset: &Dataset,
    config: &TrainConfig,
    oracle: Option<(&Env, &GroundTruth)>,
    mut on_epoch: impl FnMut(usize, &EmbeddingModel) -> Result<()>,
) -> Result<TrainedEmbedding> {
    config.validate()?;
    let input_dim = dataset
        .trajectories
        .iter()
        .find_map(|t| t.states.first())
        .ok_or(Error::EmptyDataset)?
        .dim();
    let mut model = EmbeddingModel::init(config, input_dim, &mut seed::rng_for(config.seed, "init"))?;
    let mut rng = seed::rng_for(config.seed, "pairs");
    let mut enc_opt = Sgd::new(config.lr, config.momentum);
    let mut head_opt = Sgd::new(config.lr, config.momentum);
    let batches = (dataset.trajectories.len() * config.pairs_per_trajectory).div_ceil(config.batch_size).max(1);
    let max_offset = config.max_pair_offset.or(Some(dataset.env_spec.horizon));
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (mut loss_sum, mut penalty_sum) = (0.0, 0.0);
        for _ in 0..batches {
            let general = sample_pairs(dataset, config.batch_size, &mut rng, SampleMode::General, max_offset)?;
            let onestep = sample_pairs(dataset, config.batch_size, &mut rng, SampleMode::Onestep, None)?;
            let mut eval = mad_loss(&model, &general, &onestep, config.penalty_weight)?;
            loss_sum += eval.loss;
            penalty_sum += eval.penalty;
            if let Some(limit) = config.grad_clip {
                let norm = (eval.encoder_grads.norm().powi(2) + eval.head_grads.norm().powi(2)).sqrt();
                if norm > limit {
                    eval.encoder_grads.scale(limit / norm);
                    eval.head_grads.scale(limit / norm);
                }
            }
            enc_opt.step(&mut model.encoder, &eval.encoder_grads)?;
            head_opt.step(&mut model.head, &eval.head_grads)?;
            model.head.project();
        }
        if !model.encoder.values().iter().chain(model.head.values()).all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig(format!("training diverged in epoch {epoch}; lower the learning rate")));
        }
        let mad_mse = match oracle {
            Some((_, gt)) => Some(evalharness::mad_mse(&model, &gt.table, &gt.states)?.mse),
            None => None,
        };
        log.push(EpochLog {
            epoch,
            loss: loss_sum / batches as f64,
            penalty: penalty_sum / batches as f64,
            mad_mse,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        on_epoch(epoch, &model)?;
    }
    Ok(TrainedEmbedding { model, log })
}

pub fn write_log_csv(path: &Path, log: &[EpochLog], comment: Option<&str>) -> Result<()> {
    let mut out = String::new();
    if let Some(c) = comment {
        out.push_str(&format!("# {c}\n"));
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["epoch", "loss", "penalty", "mad_mse", "wall_ms"])?;
    for e in log {
        writer.write_record([
            e.epoch.to_string(),
            format!("{:?}", e.loss),
            format!("{:?}", e.penalty),
            e.mad_mse.map(|v| format!("{v:?}")).unwrap_or_default(),
            e.wall_ms.to_string(),
        ])?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    out.push_str(&String::from_utf8_lossy(&bytes));
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Fraction of one-step pairs embedded further apart than `1 + slack`.
pub fn onestep_violation_rate(model: &impl DistanceEstimator, dataset: &Dataset, slack: f64) -> Result<f64> {
    let mut total = 0usize;
    let mut bad = 0usize;
    for traj in &dataset.trajectories {
        for (s, _, next) in traj.transitions() {
            total += 1;
            if model.estimate(s, next)? > 1.0 + slack {
                bad += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(bad as f64 / total as f64)
}
