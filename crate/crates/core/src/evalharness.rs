//! Evaluation against the exact oracle and the end-to-end experiment runner.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, LatentPlanner, LearnedModels, PlanRecord, TransitionConfig};
use crate::envs::{BehaviorPolicy, Env, EnvKind, EnvSpec, State};
use crate::error::{Error, Result};
use crate::madlearn::{self, EmbeddingModel, HeadKind, TrainConfig};
use crate::oracle::{self, GroundTruth, MadTable};
use crate::seed;

/// Anything that predicts a directed distance between two states.
pub trait DistanceEstimator {
    fn estimate(&self, from: &State, to: &State) -> Result<f64>;

    /// `out[i][j] = estimate(states[i], states[j])`.
    fn pairwise(&self, states: &[State]) -> Result<Vec<Vec<f64>>> {
        states
            .iter()
            .map(|a| states.iter().map(|b| self.estimate(a, b)).collect())
            .collect()
    }
}

impl DistanceEstimator for LearnedModels {
    fn estimate(&self, from: &State, to: &State) -> Result<f64> {
        self.embedding.estimate(from, to)
    }

    fn pairwise(&self, states: &[State]) -> Result<Vec<Vec<f64>>> {
        self.embedding.pairwise(states)
    }
}

/// Embeds each state once.
pub fn embedding_pairwise(model: &EmbeddingModel, states: &[State]) -> Result<Vec<Vec<f64>>> {
    let zs = states.iter().map(|s| model.embed(s)).collect::<Result<Vec<_>>>()?;
    zs.iter()
        .map(|a| zs.iter().map(|b| model.head.distance(a, b)).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseStats {
    pub mse: f64,
    /// Ordered pairs `i != j` that entered the mean.
    pub n_pairs: usize,
    /// Ordered pairs `i != j` dropped because the target is unreachable.
    pub excluded: usize,
}

fn mse_against(
    est: &impl DistanceEstimator,
    table: &MadTable,
    states: &[State],
    target: impl Fn(usize, usize) -> Option<f64>,
) -> Result<MseStats> {
    crate::error::check_dim(table.n(), states.len())?;
    let pred = est.pairwise(states)?;
    let (mut sum, mut n, mut excluded) = (0.0, 0usize, 0usize);
    for i in 0..states.len() {
        for j in 0..states.len() {
            if i == j {
                continue;
            }
            match target(i, j) {
                Some(t) => {
                    let r = pred[i][j] - t;
                    sum += r * r;
                    n += 1;
                }
                None => excluded += 1,
            }
        }
    }
    if n == 0 {
        return Err(Error::NoFinitePairs);
    }
    Ok(MseStats { mse: sum / n as f64, n_pairs: n, excluded })
}

/// Mean squared error against the true distance over finite ordered pairs.
pub fn mad_mse(est: &impl DistanceEstimator, table: &MadTable, states: &[State]) -> Result<MseStats> {
    mse_against(est, table, states, |i, j| table.get(i, j).map(f64::from))
}

/// Same pairs as [`mad_mse`], but the target is `min(d(i, j), d(j, i))`:
/// what a symmetric head can at best represent.
pub fn symmetrized_mse(est: &impl DistanceEstimator, table: &MadTable, states: &[State]) -> Result<MseStats> {
    mse_against(est, table, states, |i, j| {
        table.get(i, j).map(|d| f64::from(d.min(table.raw(j, i))))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanningStats {
    pub success_rate: f64,
    /// Mean steps over successful rollouts; NaN when none succeeded.
    pub mean_steps: f64,
    pub n_pairs: usize,
}

/// Greedy rollouts between `n_pairs` start/goal pairs drawn uniformly (with
/// replacement) among distinct, mutually reachable evaluation states.
pub fn plan_pairs(
    env: &Env,
    planner: &impl LatentPlanner,
    truth: &GroundTruth,
    n_pairs: usize,
    budget: usize,
    seed_value: u64,
) -> Result<Vec<PlanRecord>> {
    if n_pairs == 0 || budget == 0 {
        return Err(Error::InvalidConfig("planning needs n_pairs >= 1 and budget >= 1".into()));
    }
    let t = &truth.table;
    let candidates: Vec<(usize, usize)> = (0..t.n())
        .flat_map(|i| (0..t.n()).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && t.get(i, j).is_some() && t.get(j, i).is_some())
        .collect();
    if candidates.is_empty() {
        return Err(Error::NoFinitePairs);
    }
    let mut rng = seed::rng(seed_value);
    (0..n_pairs)
        .map(|_| {
            let (i, j) = candidates[rng.gen_range(0..candidates.len())];
            let goal = &truth.states[j];
            Ok(dynamics::rollout(env, planner, &truth.states[i], goal, budget)?.record(goal))
        })
        .collect()
}

/// Success rate and mean steps of [`plan_pairs`].
pub fn eval_planning(
    env: &Env,
    planner: &impl LatentPlanner,
    truth: &GroundTruth,
    n_pairs: usize,
    budget: usize,
    seed_value: u64,
) -> Result<PlanningStats> {
    Ok(planning_stats(&plan_pairs(env, planner, truth, n_pairs, budget, seed_value)?))
}

pub fn planning_stats(records: &[PlanRecord]) -> PlanningStats {
    let successes: Vec<_> = records.iter().filter(|r| r.reached).collect();
    let mean_steps = if successes.is_empty() {
        f64::NAN
    } else {
        successes.iter().map(|r| r.steps as f64).sum::<f64>() / successes.len() as f64
    };
    PlanningStats {
        success_rate: successes.len() as f64 / records.len().max(1) as f64,
        mean_steps,
        n_pairs: records.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env: EnvKind,
    pub head: HeadKind,
    pub seed: u64,
    pub mad_mse: f64,
    pub sym_mse: f64,
    pub success_rate: f64,
    pub mean_steps: f64,
    pub n_pairs: usize,
    pub excluded_pairs: usize,
}

const REPORT_COLUMNS: [&str; 9] = [
    "env",
    "head",
    "seed",
    "mad_mse",
    "sym_mse",
    "success_rate",
    "mean_steps",
    "n_pairs",
    "excluded_pairs",
];

/// Report CSV. Floats use Rust's shortest round-trip formatting so the file
/// re-parses to identical values. An optional `# comment` line goes first.
pub fn reports_to_csv(reports: &[EvalReport], comment: Option<&str>) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(REPORT_COLUMNS)?;
    for r in reports {
        writer.write_record([
            r.env.name().to_owned(),
            r.head.name().to_owned(),
            r.seed.to_string(),
            format!("{:?}", r.mad_mse),
            format!("{:?}", r.sym_mse),
            format!("{:?}", r.success_rate),
            format!("{:?}", r.mean_steps),
            r.n_pairs.to_string(),
            r.excluded_pairs.to_string(),
        ])?;
    }
    finish_csv(writer, comment)
}

fn finish_csv(writer: csv::Writer<Vec<u8>>, comment: Option<&str>) -> Result<String> {
    let bytes = writer.into_inner().map_err(|e| Error::Malformed { what: "CSV", reason: e.to_string() })?;
    let mut out = String::new();
    if let Some(c) = comment {
        let _ = writeln!(out, "# {c}");
    }
    out.push_str(&String::from_utf8(bytes).expect("CSV writer emits UTF-8"));
    Ok(out)
}

pub fn reports_from_csv(text: &str) -> Result<Vec<EvalReport>> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for record in reader.deserialize() {
        out.push(record?);
    }
    Ok(out)
}

/// Mean and (population) standard deviation per (env, head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub env: EnvKind,
    pub head: HeadKind,
    pub runs: usize,
    pub mad_mse_mean: f64,
    pub mad_mse_std: f64,
    pub sym_mse_mean: f64,
    pub sym_mse_std: f64,
    pub success_rate_mean: f64,
    pub success_rate_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn summarize(reports: &[EvalReport]) -> Vec<SummaryRow> {
    let mut keys: Vec<(EnvKind, HeadKind)> = Vec::new();
    for r in reports {
        if !keys.contains(&(r.env, r.head)) {
            keys.push((r.env, r.head));
        }
    }
    keys.into_iter()
        .map(|(env, head)| {
            let rows: Vec<&EvalReport> = reports.iter().filter(|r| r.env == env && r.head == head).collect();
            let col = |f: fn(&EvalReport) -> f64| mean_std(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (mad_mse_mean, mad_mse_std) = col(|r| r.mad_mse);
            let (sym_mse_mean, sym_mse_std) = col(|r| r.sym_mse);
            let (success_rate_mean, success_rate_std) = col(|r| r.success_rate);
            SummaryRow {
                env,
                head,
                runs: rows.len(),
                mad_mse_mean,
                mad_mse_std,
                sym_mse_mean,
                sym_mse_std,
                success_rate_mean,
                success_rate_std,
            }
        })
        .collect()
}

pub fn summary_to_csv(rows: &[SummaryRow], comment: Option<&str>) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record([
        "env",
        "head",
        "runs",
        "mad_mse_mean",
        "mad_mse_std",
        "sym_mse_mean",
        "sym_mse_std",
        "success_rate_mean",
        "success_rate_std",
    ])?;
    for r in rows {
        writer.write_record([
            r.env.name().to_owned(),
            r.head.name().to_owned(),
            r.runs.to_string(),
            format!("{:?}", r.mad_mse_mean),
            format!("{:?}", r.mad_mse_std),
            format!("{:?}", r.sym_mse_mean),
            format!("{:?}", r.sym_mse_std),
            format!("{:?}", r.success_rate_mean),
            format!("{:?}", r.success_rate_std),
        ])?;
    }
    finish_csv(writer, comment)
}

/// Per-epoch training curve row, for MSE-vs-epoch plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub env: EnvKind,
    pub head: HeadKind,
    pub seed: u64,
    pub epoch: usize,
    pub loss: f64,
    pub penalty: f64,
    pub mad_mse: f64,
}

pub fn curves_to_csv(rows: &[CurveRow], comment: Option<&str>) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["env", "head", "seed", "epoch", "loss", "penalty", "mad_mse"])?;
    for r in rows {
        writer.write_record([
            r.env.name().to_owned(),
            r.head.name().to_owned(),
            r.seed.to_string(),
            r.epoch.to_string(),
            format!("{:?}", r.loss),
            format!("{:?}", r.penalty),
            format!("{:?}", r.mad_mse),
        ])?;
    }
    finish_csv(writer, comment)
}

fn default_episodes() -> usize {
    200
}

/// One environment of an experiment with its collection settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSetup {
    pub spec: EnvSpec,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default)]
    pub policy: BehaviorPolicy,
    /// Overrides `train.embedding_dim` for this environment.
    #[serde(default)]
    pub embedding_dim: Option<usize>,
    /// Overrides `train.epochs` for this environment.
    #[serde(default)]
    pub epochs: Option<usize>,
}

fn default_resolution() -> usize {
    10
}
fn default_plan_pairs() -> usize {
    100
}
fn default_budget_factor() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Point-mass evaluation grid is `resolution x resolution` cell centres.
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_plan_pairs")]
    pub plan_pairs: usize,
    /// Planning budget is `budget_factor * diameter` of the ground truth.
    #[serde(default = "default_budget_factor")]
    pub budget_factor: usize,
    #[serde(default)]
    pub log_mad_mse: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            resolution: default_resolution(),
            plan_pairs: default_plan_pairs(),
            budget_factor: default_budget_factor(),
            log_mad_mse: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub envs: Vec<EnvSetup>,
    pub heads: Vec<HeadKind>,
    pub seeds: Vec<u64>,
    /// Template; `head`, `seed` and the per-env overrides are filled in per run.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub transition: TransitionConfig,
    #[serde(default)]
    pub eval: EvalSettings,
}

impl ExperimentConfig {
    /// Four 8x8-scale environments, both heads, seeds 0..5, with per-epoch
    /// MAD-MSE logging.
    pub fn standard_suite() -> Self {
        let horizon = 30;
        let setup = |spec| EnvSetup { spec, episodes: default_episodes(), policy: BehaviorPolicy::UniformRandom, embedding_dim: None, epochs: None };
        ExperimentConfig {
            envs: vec![
                setup(EnvSpec::grid(8, 8, horizon)),
                setup(EnvSpec::oneway_barrier(8, 8, horizon)),
                setup(EnvSpec::pointmass(horizon)),
                setup(EnvSpec::pointmass_drift([0.025, 0.0], horizon)),
            ],
            heads: vec![HeadKind::Pnorm, HeadKind::Widenorm],
            seeds: (0..5).collect(),
            train: TrainConfig::default(),
            transition: TransitionConfig::default(),
            eval: EvalSettings { log_mad_mse: true, ..EvalSettings::default() },
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub reports: Vec<EvalReport>,
    pub curves: Vec<CurveRow>,
}

/// Evaluation resolution for an environment (`None` for grids).
pub fn eval_resolution(env: &Env, settings: &EvalSettings) -> Option<usize> {
    (!env.is_discrete()).then_some(settings.resolution)
}

/// Full pipeline for one (environment, head, seed): collect, train the
/// embedding and the transition model, then evaluate.
pub fn run_single(
    setup: &EnvSetup,
    env: &Env,
    truth: &GroundTruth,
    head: HeadKind,
    run_seed: u64,
    config: &ExperimentConfig,
) -> Result<(EvalReport, Vec<CurveRow>)> {
    let dataset = env.collect(
        setup.policy,
        setup.episodes,
        setup.spec.horizon,
        seed::derive(run_seed, "collect"),
    );
    let mut train = config.train.clone();
    train.head = head;
    train.seed = seed::derive(run_seed, "train");
    if let Some(d) = setup.embedding_dim {
        train.embedding_dim = d;
    }
    if let Some(e) = setup.epochs {
        train.epochs = e;
    }
    let oracle = config.eval.log_mad_mse.then_some((env, truth));
    let trained = madlearn::train_embedding(&dataset, &train, oracle)?;
    let mut transition = config.transition.clone();
    transition.seed = seed::derive(run_seed, "transition");
    let dynamics = dynamics::train_transition(&dataset, &trained.model, env.num_actions(), &transition)?;
    let models = LearnedModels { embedding: trained.model, transition: dynamics.model };

    let mse = mad_mse(&models, &truth.table, &truth.states)?;
    let sym = symmetrized_mse(&models, &truth.table, &truth.states)?;
    let budget = config.eval.budget_factor * truth.table.diameter() as usize;
    let plan = eval_planning(
        env,
        &models,
        truth,
        config.eval.plan_pairs,
        budget.max(1),
        seed::derive(run_seed, "eval"),
    )?;
    let report = EvalReport {
        env: env.kind(),
        head,
        seed: run_seed,
        mad_mse: mse.mse,
        sym_mse: sym.mse,
        success_rate: plan.success_rate,
        mean_steps: plan.mean_steps,
        n_pairs: mse.n_pairs,
        excluded_pairs: mse.excluded,
    };
    let curves = trained
        .log
        .iter()
        .map(|e| CurveRow {
            env: env.kind(),
            head,
            seed: run_seed,
            epoch: e.epoch,
            loss: e.loss,
            penalty: e.penalty,
            mad_mse: e.mad_mse.unwrap_or(f64::NAN),
        })
        .collect();
    Ok((report, curves))
}

/// Runs every (environment, head, seed) combination in config order.
/// The dataset for a given (environment, seed) is shared by all heads.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    if config.envs.is_empty() || config.heads.is_empty() || config.seeds.is_empty() {
        return Err(Error::InvalidConfig("experiment needs at least one env, head and seed".into()));
    }
    let mut out = ExperimentOutput::default();
    for setup in &config.envs {
        let env = Env::new(setup.spec.clone())?;
        let truth = oracle::ground_truth(&env, eval_resolution(&env, &config.eval))?;
        for &head in &config.heads {
            for &s in &config.seeds {
                let (report, curves) = run_single(setup, &env, &truth, head, s, config)?;
                out.reports.push(report);
                out.curves.extend(curves);
            }
        }
    }
    Ok(out)
}

/// Writes `report.csv`, `summary.csv` and `curves.csv` into `dir`.
pub fn write_experiment(dir: &Path, output: &ExperimentOutput, comment: Option<&str>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("report.csv", reports_to_csv(&output.reports, comment)?),
        ("summary.csv", summary_to_csv(&summarize(&output.reports), comment)?),
        ("curves.csv", curves_to_csv(&output.curves, comment)?),
    ];
    for (name, text) in files {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{floyd_warshall, AdjacencyMatrix};

    /// Looks distances up in a fixed table keyed by the first feature.
    struct TableEstimator(Vec<Vec<f64>>);

    impl DistanceEstimator for TableEstimator {
        fn estimate(&self, from: &State, to: &State) -> Result<f64> {
            Ok(self.0[from.0[0] as usize][to.0[0] as usize])
        }
    }

    fn index_states(n: usize) -> Vec<State> {
        (0..n).map(|i| State(vec![i as f64])).collect()
    }

    fn cycle_table() -> MadTable {
        floyd_warshall(&AdjacencyMatrix::from_edges(3, [(0, 1), (1, 2), (2, 0)]))
    }

    #[test]
    fn exact_estimator_has_zero_error() {
        let t = cycle_table();
        let exact = TableEstimator((0..3).map(|i| (0..3).map(|j| f64::from(t.raw(i, j))).collect()).collect());
        let stats = mad_mse(&exact, &t, &index_states(3)).unwrap();
        assert_eq!(stats.mse, 0.0);
        assert_eq!(stats.n_pairs, 6);
        // long direction predicted 2 against a symmetrized target of 1
        let sym = symmetrized_mse(&exact, &t, &index_states(3)).unwrap();
        assert_eq!(sym.mse, 0.5);
    }

    #[test]
    fn zero_estimator_on_cycle() {
        let t = cycle_table();
        let zero = TableEstimator(vec![vec![0.0; 3]; 3]);
        assert_eq!(mad_mse(&zero, &t, &index_states(3)).unwrap().mse, 2.5);
        let ones = TableEstimator(vec![vec![1.0; 3]; 3]);
        assert_eq!(symmetrized_mse(&ones, &t, &index_states(3)).unwrap().mse, 0.0);
    }

    #[test]
    fn degenerate_and_unreachable() {
        let single = MadTable::from_rows(vec![vec![0]]);
        let est = TableEstimator(vec![vec![0.0]]);
        assert!(matches!(mad_mse(&est, &single, &index_states(1)), Err(Error::NoFinitePairs)));
        let split = floyd_warshall(&AdjacencyMatrix::from_edges(3, [(0, 1), (1, 0), (1, 2)]));
        let est = TableEstimator(vec![vec![1.0; 3]; 3]);
        let stats = mad_mse(&est, &split, &index_states(3)).unwrap();
        assert_eq!(stats.excluded, 2);
        assert_eq!(stats.n_pairs, 4);
    }

    #[test]
    fn symmetric_table_gives_equal_errors() {
        let path = floyd_warshall(&AdjacencyMatrix::from_edges(4, [(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2)]));
        let est = TableEstimator(vec![vec![0.0, 0.5, 3.0, 1.0], vec![2.0, 0.0, 1.0, 7.0], vec![1.0; 4], vec![0.0; 4]]);
        let a = mad_mse(&est, &path, &index_states(4)).unwrap();
        let b = symmetrized_mse(&est, &path, &index_states(4)).unwrap();
        assert_eq!(a, b);
    }

    fn report(env: EnvKind, head: HeadKind, seed: u64, mad: f64) -> EvalReport {
        EvalReport {
            env,
            head,
            seed,
            mad_mse: mad,
            sym_mse: mad / 3.0,
            success_rate: 0.37,
            mean_steps: f64::NAN,
            n_pairs: 90,
            excluded_pairs: 0,
        }
    }

    #[test]
    fn report_csv_round_trip() {
        let reports = vec![
            report(EnvKind::GridOneway, HeadKind::Pnorm, 1, 0.1 + 0.2),
            report(EnvKind::PointmassAsymmetric, HeadKind::Widenorm, 2, 1e-17),
        ];
        let text = reports_to_csv(&reports, Some("config_hash=abc seed=1")).unwrap();
        let back = reports_from_csv(&text).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in reports.iter().zip(&back) {
            assert_eq!((a.env, a.head, a.seed, a.n_pairs), (b.env, b.head, b.seed, b.n_pairs));
            assert_eq!(a.mad_mse.to_bits(), b.mad_mse.to_bits());
            assert_eq!(a.sym_mse.to_bits(), b.sym_mse.to_bits());
            assert!(b.mean_steps.is_nan());
        }
    }

    #[test]
    fn summary_statistics() {
        let reports = vec![
            report(EnvKind::GridSymmetric, HeadKind::Pnorm, 0, 1.0),
            report(EnvKind::GridSymmetric, HeadKind::Pnorm, 1, 3.0),
            report(EnvKind::GridSymmetric, HeadKind::Widenorm, 0, 2.0),
        ];
        let rows = summarize(&reports);
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].mad_mse_mean, rows[0].mad_mse_std, rows[0].runs), (2.0, 1.0, 2));
        assert_eq!((rows[1].mad_mse_mean, rows[1].mad_mse_std), (2.0, 0.0));
    }
}
