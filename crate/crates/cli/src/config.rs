use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use mad_core::dynamics::TransitionConfig;
use mad_core::envs::{BehaviorPolicy, EnvSpec};
use mad_core::evalharness::{EnvSetup, EvalSettings, ExperimentConfig};
use mad_core::madlearn::{HeadKind, TrainConfig};
use mad_core::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Collection {
    pub episodes: usize,
    /// Overrides `env_spec.horizon` when set.
    pub horizon: Option<usize>,
    pub policy: BehaviorPolicy,
    /// Root seed; every phase derives its own stream from it.
    pub seed: u64,
}

impl Default for Collection {
    fn default() -> Self {
        Collection { episodes: 200, horizon: None, policy: BehaviorPolicy::UniformRandom, seed: 0 }
    }
}

/// What `report` runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportPlan {
    pub envs: Vec<EnvSetup>,
    pub heads: Vec<HeadKind>,
    pub seeds: Vec<u64>,
}

impl Default for ReportPlan {
    fn default() -> Self {
        let suite = ExperimentConfig::standard_suite();
        ReportPlan { envs: suite.envs, heads: suite.heads, seeds: suite.seeds }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env_spec: EnvSpec,
    pub collection: Collection,
    pub train: TrainConfig,
    pub transition: TransitionConfig,
    pub eval: EvalSettings,
    pub report: ReportPlan,
    /// Extra embedding checkpoint every this many epochs.
    pub checkpoint_every: Option<usize>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env_spec: EnvSpec::grid(8, 8, 30),
            collection: Collection::default(),
            train: TrainConfig::default(),
            transition: TransitionConfig::default(),
            eval: EvalSettings { log_mad_mse: true, ..EvalSettings::default() },
            report: ReportPlan::default(),
            checkpoint_every: None,
            output_dir: PathBuf::from("results"),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `key=value` overrides
    /// and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let parsed: RunConfig =
                    serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
                serde_json::to_value(parsed)?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        let config: RunConfig = serde_json::from_value(value).context("config after overrides")?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.env()?;
        self.train.validate()?;
        self.transition.validate()?;
        if self.collection.episodes == 0 {
            bail!("collection.episodes must be positive");
        }
        if self.checkpoint_every == Some(0) {
            bail!("checkpoint_every must be positive");
        }
        Ok(())
    }

    /// Environment spec with the collection horizon applied.
    pub fn env_spec(&self) -> EnvSpec {
        let mut spec = self.env_spec.clone();
        if let Some(h) = self.collection.horizon {
            spec.horizon = h;
        }
        spec
    }

    pub fn env(&self) -> mad_core::Result<mad_core::envs::Env> {
        mad_core::envs::Env::new(self.env_spec())
    }

    /// Hash of everything except the output directory.
    pub fn hash(&self) -> String {
        let mut clone = self.clone();
        clone.output_dir = PathBuf::new();
        let text = serde_json::to_string(&clone).expect("config serializes");
        seed::content_hash(text.as_bytes())
    }

    pub fn phase_seed(&self, phase: &str) -> u64 {
        seed::derive(self.collection.seed, phase)
    }

    /// Provenance line written at the top of CSV artifacts.
    pub fn provenance(&self) -> String {
        format!("config_hash={} seed={}", self.hash(), self.collection.seed)
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            envs: self.report.envs.clone(),
            heads: self.report.heads.clone(),
            seeds: self.report.seeds.clone(),
            train: self.train.clone(),
            transition: self.transition.clone(),
            eval: self.eval.clone(),
        }
    }
}

/// `a.b.c=value`; the value is parsed as JSON and falls back to a string.
fn apply_override(root: &mut Value, item: &str) -> anyhow::Result<()> {
    let Some((path, raw)) = item.split_once('=') else {
        bail!("override {item:?} is not key=value");
    };
    let new: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut slot = root;
    for key in path.split('.') {
        slot = match slot {
            Value::Object(map) => map.get_mut(key).with_context(|| format!("unknown config key {path:?}"))?,
            Value::Array(items) => {
                let idx: usize = key.parse().with_context(|| format!("{key:?} in {path:?} is not an index"))?;
                let len = items.len();
                items.get_mut(idx).with_context(|| format!("index {idx} out of range ({len}) in {path:?}"))?
            }
            _ => bail!("{path:?} descends into a scalar"),
        };
    }
    *slot = new;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_leaves() {
        let c = RunConfig::load(None, &["train.lr=0.5".into(), "env_spec.width=4".into(), "train.head=widenorm".into()]).unwrap();
        assert_eq!(c.train.lr, 0.5);
        assert_eq!(c.env_spec.width, 4);
        assert_eq!(c.train.head, HeadKind::Widenorm);
    }

    #[test]
    fn bad_overrides_rejected() {
        assert!(RunConfig::load(None, &["train.nope=1".into()]).is_err());
        assert!(RunConfig::load(None, &["train.lr".into()]).is_err());
        assert!(RunConfig::load(None, &["train.lr=-1".into()]).is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.collection.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
    }
}
