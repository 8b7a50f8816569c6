//! File names inside an output directory and the config hash each one carries.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;

pub const DATASET: &str = "dataset.jsonl";
pub const ORACLE: &str = "mad.csv";
pub const EMBEDDING: &str = "embedding.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const TRANSITION: &str = "transition.json";
pub const TRANSITION_LOG: &str = "transition_log.csv";
pub const PLAN: &str = "plan.json";
pub const PLANS: &str = "plans.jsonl";
pub const REPORT: &str = "report.csv";
pub const SUMMARY: &str = "summary.csv";
pub const CURVES: &str = "curves.csv";
pub const CONFIG: &str = "config.json";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub files: Vec<String>,
}

/// Config hash embedded in an artifact, if the file is one we recognise.
pub fn embedded_hash(path: &Path) -> anyhow::Result<Option<String>> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let from_json = |v: &Value| v.get("config_hash").and_then(Value::as_str).map(str::to_owned);
    if name == CONFIG {
        let config: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        return Ok(Some(config.hash()));
    }
    if name.ends_with(".csv") {
        let first = text.lines().next().unwrap_or_default();
        return Ok(first
            .strip_prefix("# ")
            .and_then(|c| c.split_whitespace().find_map(|kv| kv.strip_prefix("config_hash=")))
            .map(str::to_owned));
    }
    if name.ends_with(".jsonl") {
        let first = text.lines().next().unwrap_or_default();
        return Ok(serde_json::from_str::<Value>(first).ok().as_ref().and_then(from_json));
    }
    if name.ends_with(".json") {
        return Ok(serde_json::from_str::<Value>(&text).ok().as_ref().and_then(from_json));
    }
    Ok(None)
}

/// Fails if any recognised artifact in `dir` was produced under another config.
pub fn check_consistent(dir: &Path, expected: &str) -> anyhow::Result<()> {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return Ok(());
    };
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
    paths.sort();
    for path in paths {
        if let Some(found) = embedded_hash(&path)? {
            if found != expected {
                bail!(
                    "{} was produced by config {found}, not {expected}; refusing to mix artifacts (use a fresh output_dir)",
                    path.display()
                );
            }
        }
    }
    Ok(())
}

/// Loads an input artifact and checks it carries `expected`.
pub fn require_hash(path: &Path, expected: &str) -> anyhow::Result<()> {
    if !path.exists() {
        bail!("missing input {}", path.display());
    }
    match embedded_hash(path)? {
        Some(found) if found == expected => Ok(()),
        Some(found) => bail!("{} was produced by config {found}, not {expected}", path.display()),
        None => bail!("{} carries no config hash", path.display()),
    }
}
