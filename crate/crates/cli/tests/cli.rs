use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn small_config(dir: &Path) -> PathBuf {
    let config = json!({
        "env_spec": { "kind": "grid_symmetric", "width": 3, "height": 3, "horizon": 6 },
        "collection": { "episodes": 20, "seed": 4 },
        "train": { "embedding_dim": 4, "hidden": [8], "epochs": 5 },
        "transition": { "hidden": [8], "epochs": 3 },
        "eval": { "plan_pairs": 5 },
        "report": {
            "envs": [{ "spec": { "kind": "grid_symmetric", "width": 3, "height": 3, "horizon": 6 }, "episodes": 10 }],
            "heads": ["pnorm", "widenorm"],
            "seeds": [0]
        }
    });
    let path = dir.join("config.in.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn mad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mad")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mad(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

struct Run {
    _tmp: tempfile::TempDir,
    config: String,
    out: PathBuf,
}

impl Run {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let config = small_config(tmp.path()).to_str().unwrap().to_owned();
        let out = tmp.path().join("out");
        Run { _tmp: tmp, config, out }
    }

    fn run(&self, cmd: &str, extra: &[&str]) -> String {
        let mut args = vec![cmd, "--config", &self.config, "--out", self.out.to_str().unwrap()];
        args.extend(extra);
        ok(&args)
    }

    fn read(&self, name: &str) -> String {
        std::fs::read_to_string(self.out.join(name)).unwrap()
    }
}

#[test]
fn oracle_table_for_three_by_three_grid() {
    let run = Run::new();
    run.run("collect", &[]);
    run.run("oracle", &[]);
    let text = run.read("mad.csv");
    let rows: Vec<Vec<i64>> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 9);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row.len(), 9);
        assert_eq!(row[i], 0);
    }
    // opposite corners
    assert_eq!(rows[0][8], 4);
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let run = Run::new();
    run.run("collect", &[]);
    run.run("train", &[]);
    let first = run.read("embedding.json");
    run.run("train", &[]);
    assert_eq!(first, run.read("embedding.json"));
}

#[test]
fn periodic_checkpoints() {
    let run = Run::new();
    let every = ["--set", "checkpoint_every=2"];
    run.run("collect", &every);
    run.run("train", &every);
    assert!(run.out.join("embedding_epoch2.json").exists());
    assert!(run.out.join("embedding_epoch4.json").exists());
    assert!(!run.out.join("embedding_epoch3.json").exists());
}

#[test]
fn plan_from_goal_is_immediate() {
    let run = Run::new();
    run.run("collect", &[]);
    run.run("train", &[]);
    run.run("train-model", &[]);
    run.run("plan", &["--start", "1,1", "--goal", "1,1"]);
    let plan: Value = serde_json::from_str(&run.read("plan.json")).unwrap();
    assert_eq!(plan["reached"], true);
    assert_eq!(plan["steps"], 0);

    run.run("plan", &["--pairs", "4"]);
    let lines: Vec<Value> = run.read("plans.jsonl").lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0]["config_hash"], plan["config_hash"]);
}

#[test]
fn mixed_configs_are_refused() {
    let run = Run::new();
    run.run("collect", &[]);
    let args = ["train", "--config", &run.config, "--out", run.out.to_str().unwrap(), "--set", "train.lr=0.01"];
    let out = mad(&args);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));
}

#[test]
fn overrides_reach_the_resolved_config() {
    let run = Run::new();
    let text = ok(&["show-config", "--config", &run.config, "--set", "train.lr=0.5", "--set", "report.seeds=[1,2]"]);
    let config: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(config["train"]["lr"], 0.5);
    assert_eq!(config["report"]["seeds"], json!([1, 2]));
    assert_eq!(config["train"]["hidden"], json!([8]));

    let out = mad(&["show-config", "--set", "train.nope=1"]);
    assert!(!out.status.success());
}

#[test]
fn report_writes_tables_with_provenance() {
    let run = Run::new();
    let stdout = run.run("report", &[]);
    assert!(stdout.contains("widenorm"));
    for name in ["report.csv", "summary.csv", "curves.csv"] {
        assert!(run.read(name).starts_with("# "), "{name}");
    }
    let report = run.read("report.csv");
    assert_eq!(report.lines().filter(|l| !l.starts_with('#')).count(), 3);
    let manifest: Value = serde_json::from_str(&run.read("manifest.json")).unwrap();
    assert!(report.contains(manifest["config_hash"].as_str().unwrap()));
}
