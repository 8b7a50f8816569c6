//! `mad`: collect data, compute ground truth, train and evaluate MAD embeddings.

mod artifacts;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mad_core::checkpoint::{Checkpoint, EmbeddingCheckpoint, TransitionCheckpoint};
use mad_core::dynamics::{self, LearnedModels};
use mad_core::envs::{Dataset, Env, State, Trajectory};
use mad_core::evalharness::{self, EvalSettings};
use mad_core::madlearn;
use mad_core::oracle::{self, GroundTruth};

use artifacts::Manifest;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "mad", version, about = "Minimum-action-distance embeddings: data, training, planning, reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config JSON; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config leaf, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> anyhow::Result<(RunConfig, PathBuf)> {
        let mut config = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        let dir = config.output_dir.clone();
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok((config, dir))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the behavior policy and write dataset.jsonl.
    Collect(Common),
    /// Write the exact distance table mad.csv.
    Oracle(Common),
    /// Train the embedding on dataset.jsonl; writes embedding.json and train_log.csv.
    Train(Common),
    /// Train the latent transition model; writes transition.json and transition_log.csv.
    TrainModel(Common),
    /// Greedy rollout(s) with the trained models.
    Plan(PlanArgs),
    /// Run the full experiment grid; writes report.csv, summary.csv, curves.csv.
    Report(Common),
    /// Print the resolved config JSON.
    ShowConfig(Common),
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    common: Common,
    /// Start as `x,y`: a cell on grids, a position on the point mass.
    #[arg(long, requires = "goal")]
    start: Option<String>,
    #[arg(long, requires = "start")]
    goal: Option<String>,
    /// Evaluate this many random start/goal pairs instead; writes plans.jsonl.
    #[arg(long, conflicts_with = "start")]
    pairs: Option<usize>,
    /// Step budget; defaults to `eval.budget_factor` times the oracle diameter.
    #[arg(long)]
    budget: Option<usize>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Collect(c) => collect(&c),
        Command::Oracle(c) => cmd_oracle(&c),
        Command::Train(c) => train(&c),
        Command::TrainModel(c) => train_model(&c),
        Command::Plan(p) => plan(&p),
        Command::Report(c) => report(&c),
        Command::ShowConfig(c) => {
            let config = RunConfig::load(c.config.as_deref(), &c.overrides)?;
            println!("{}", serde_json::to_string_pretty(&config)?);
            Ok(())
        }
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn collect(c: &Common) -> anyhow::Result<()> {
    let (config, dir) = c.load()?;
    let env = config.env()?;
    let hash = config.hash();
    artifacts::check_consistent(&dir, &hash)?;
    let spec = config.env_spec();
    let ds = env.collect(config.collection.policy, config.collection.episodes, spec.horizon, config.phase_seed("collect"));
    write(&dir.join(artifacts::DATASET), &ds.to_jsonl(Some(&hash))?)
}

fn ground_truth(env: &Env, eval: &EvalSettings) -> anyhow::Result<GroundTruth> {
    Ok(oracle::ground_truth(env, evalharness::eval_resolution(env, eval))?)
}

fn cmd_oracle(c: &Common) -> anyhow::Result<()> {
    let (config, dir) = c.load()?;
    let env = config.env()?;
    artifacts::check_consistent(&dir, &config.hash())?;
    let truth = ground_truth(&env, &config.eval)?;
    let mut comment = config.provenance();
    if let Some(k) = truth.resolution {
        comment.push_str(&format!(" resolution={k}"));
    }
    write(&dir.join(artifacts::ORACLE), &truth.table.to_csv(Some(&comment)))
}

fn load_dataset(dir: &Path, hash: &str) -> anyhow::Result<Dataset> {
    let path = dir.join(artifacts::DATASET);
    artifacts::require_hash(&path, hash)?;
    Ok(Dataset::read_jsonl(&path)?.0)
}

fn load_checkpoint<T>(path: &Path, hash: &str) -> anyhow::Result<T>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    artifacts::require_hash(path, hash)?;
    Ok(Checkpoint::<T>::load(path)?.model)
}

fn train(c: &Common) -> anyhow::Result<()> {
    let (config, dir) = c.load()?;
    let env = config.env()?;
    let hash = config.hash();
    let ds = load_dataset(&dir, &hash)?;
    let mut train = config.train.clone();
    train.seed = config.phase_seed("train");
    let truth = if config.eval.log_mad_mse { Some(ground_truth(&env, &config.eval)?) } else { None };
    let every = config.checkpoint_every;
    let trained = madlearn::train_embedding_with(&ds, &train, truth.as_ref().map(|t| (&env, t)), |epoch, model| {
        if let Some(n) = every {
            if (epoch + 1) % n == 0 {
                let path = dir.join(format!("embedding_epoch{}.json", epoch + 1));
                Checkpoint::new(model.clone(), hash.clone(), train.seed).save(&path)?;
            }
        }
        Ok(())
    })?;
    if let Some(last) = trained.log.last() {
        println!("final loss {:.4} penalty {:.4}", last.loss, last.penalty);
    }
    write(
        &dir.join(artifacts::EMBEDDING),
        &EmbeddingCheckpoint::new(trained.model, hash, train.seed).to_json()?,
    )?;
    let log_path = dir.join(artifacts::TRAIN_LOG);
    madlearn::write_log_csv(&log_path, &trained.log, Some(&config.provenance()))?;
    println!("wrote {}", log_path.display());
    Ok(())
}

fn train_model(c: &Common) -> anyhow::Result<()> {
    let (config, dir) = c.load()?;
    let env = config.env()?;
    let hash = config.hash();
    let ds = load_dataset(&dir, &hash)?;
    let embedding = load_checkpoint(&dir.join(artifacts::EMBEDDING), &hash)?;
    let mut transition = config.transition.clone();
    transition.seed = config.phase_seed("transition");
    let trained = dynamics::train_transition(&ds, &embedding, env.num_actions(), &transition)?;
    write(
        &dir.join(artifacts::TRANSITION),
        &TransitionCheckpoint::new(trained.model, hash, transition.seed).to_json()?,
    )?;
    let mut log = format!("# {}\nepoch,loss\n", config.provenance());
    for (epoch, loss) in trained.log.iter().enumerate() {
        log.push_str(&format!("{epoch},{loss:?}\n"));
    }
    write(&dir.join(artifacts::TRANSITION_LOG), &log)
}

fn parse_state(env: &Env, text: &str) -> anyhow::Result<State> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let [x, y] = parts[..] else {
        bail!("expected `x,y`, got {text:?}");
    };
    if env.is_discrete() {
        let cell = [x.parse().context("grid x")?, y.parse().context("grid y")?];
        let spec = env.spec();
        if cell[0] >= spec.width || cell[1] >= spec.height {
            bail!("cell {cell:?} outside the {}x{} grid", spec.width, spec.height);
        }
        Ok(env.state_of_cell(cell))
    } else {
        let (x, y): (f64, f64) = (x.parse().context("x")?, y.parse().context("y")?);
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            bail!("position ({x}, {y}) outside the unit arena");
        }
        Ok(State(vec![x, y]))
    }
}

#[derive(Serialize)]
struct PlanOutput<'a> {
    config_hash: &'a str,
    seed: u64,
    start: &'a State,
    goal: &'a State,
    reached: bool,
    steps: usize,
    trajectory: &'a Trajectory,
}

#[derive(Serialize)]
struct PlansHeader<'a> {
    config_hash: &'a str,
    seed: u64,
    budget: usize,
}

fn plan(p: &PlanArgs) -> anyhow::Result<()> {
    let (config, dir) = p.common.load()?;
    let env = config.env()?;
    let hash = config.hash();
    let models = LearnedModels {
        embedding: load_checkpoint(&dir.join(artifacts::EMBEDDING), &hash)?,
        transition: load_checkpoint(&dir.join(artifacts::TRANSITION), &hash)?,
    };
    let truth = ground_truth(&env, &config.eval)?;
    let budget = p.budget.unwrap_or(config.eval.budget_factor * truth.table.diameter() as usize).max(1);
    let seed = config.phase_seed("eval");
    if let (Some(start), Some(goal)) = (&p.start, &p.goal) {
        let (start, goal) = (parse_state(&env, start)?, parse_state(&env, goal)?);
        let result = dynamics::rollout(&env, &models, &start, &goal, budget)?;
        println!("reached {} in {} steps (budget {budget})", result.reached, result.steps);
        let out = PlanOutput {
            config_hash: &hash,
            seed,
            start: &start,
            goal: &goal,
            reached: result.reached,
            steps: result.steps,
            trajectory: &result.trajectory,
        };
        return write(&dir.join(artifacts::PLAN), &serde_json::to_string_pretty(&out)?);
    }
    let n = p.pairs.unwrap_or(config.eval.plan_pairs);
    let records = evalharness::plan_pairs(&env, &models, &truth, n, budget, seed)?;
    let stats = evalharness::planning_stats(&records);
    println!("success rate {:.3} mean steps {:.2} over {} pairs", stats.success_rate, stats.mean_steps, stats.n_pairs);
    let mut text = serde_json::to_string(&PlansHeader { config_hash: &hash, seed, budget })? + "\n";
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write(&dir.join(artifacts::PLANS), &text)
}

fn report(c: &Common) -> anyhow::Result<()> {
    let (config, dir) = c.load()?;
    let hash = config.hash();
    artifacts::check_consistent(&dir, &hash)?;
    let experiment = config.experiment();
    let output = evalharness::run_experiment(&experiment)?;
    evalharness::write_experiment(&dir, &output, Some(&config.provenance()))?;
    write(&dir.join(artifacts::CONFIG), &(serde_json::to_string_pretty(&config)? + "\n"))?;
    let manifest = Manifest {
        config_hash: hash,
        seed: config.collection.seed,
        files: [artifacts::REPORT, artifacts::SUMMARY, artifacts::CURVES, artifacts::CONFIG]
            .map(str::to_owned)
            .to_vec(),
    };
    write(&dir.join(artifacts::MANIFEST), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    println!("{:<22} {:<9} {:>12} {:>12} {:>8}", "env", "head", "mad_mse", "sym_mse", "success");
    for row in evalharness::summarize(&output.reports) {
        println!(
            "{:<22} {:<9} {:>12.4} {:>12.4} {:>8.3}",
            row.env.name(),
            row.head.name(),
            row.mad_mse_mean,
            row.sym_mse_mean,
            row.success_rate_mean
        );
    }
    Ok(())
}
