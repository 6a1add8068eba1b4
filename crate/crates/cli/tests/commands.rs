use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use tempfile::TempDir;
use trajrefine::backbone::Scene;
use trajrefine::metrics::{self, Summary};
use trajrefine::model::{Model, ModelConfig};
use trajrefine::training::from_checkpoint;
use trajrefine_cli::commands::{checkpoint_name, load_dataset, COMPARISON_FILE, MIGRATION_FILE};
use trajrefine_cli::reports::{split, EvalSummary, ScenarioRow, HISTOGRAM_FILE, SCENARIOS_FILE, SUMMARY_FILE};
use trajrefine_cli::{run, CliError};
use trajrefine_numerics::Checkpoint;

const MICRO: &str = r#"{
  "generator": {"n_scenarios": 8, "seed": 3},
  "train": {"epochs": 2, "iterations": 2},
  "seed": 7
}"#;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(ws.path("micro.json"), MICRO).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn run(&self, args: &[&str]) -> Result<String, CliError> {
        let mut out = Vec::new();
        run(std::iter::once("trajrefine").chain(args.iter().copied()), &mut out)?;
        Ok(String::from_utf8(out).unwrap())
    }

    fn ok(&self, args: &[&str]) -> String {
        self.run(args).unwrap_or_else(|e| panic!("{args:?}: {e}"))
    }

    fn generate(&self, name: &str, extra: &[&str]) {
        let (cfg, out) = (self.arg("micro.json"), self.arg(name));
        let mut args = vec!["generate", "--config", &cfg, "--out", &out];
        args.extend_from_slice(extra);
        self.ok(&args);
    }

    fn train(&self, data: &str, dir: &str, extra: &[&str]) {
        let (cfg, data, dir) = (self.arg("micro.json"), self.arg(data), self.arg(dir));
        let mut args = vec!["train", "--config", &cfg, "--data", &data, "--out-dir", &dir];
        args.extend_from_slice(extra);
        self.ok(&args);
    }

    /// Generates `data.jsonl` and trains `run/`.
    fn trained(&self) {
        self.generate("data.jsonl", &[]);
        self.train("data.jsonl", "run", &[]);
    }

    fn eval(&self, dir: &str, extra: &[&str]) -> Result<String, CliError> {
        let ckpt = self.path("run").join(checkpoint_name(2)).display().to_string();
        let (cfg, data, dir) = (self.arg("micro.json"), self.arg("data.jsonl"), self.arg(dir));
        let mut args = vec![
            "eval", "--config", &cfg, "--checkpoint", &ckpt, "--data", &data, "--out-dir", &dir,
        ];
        args.extend_from_slice(extra);
        self.run(&args)
    }

    fn summary(&self, dir: &str) -> EvalSummary {
        serde_json::from_slice(&fs::read(self.path(dir).join(SUMMARY_FILE)).unwrap()).unwrap()
    }

    fn rows(&self, dir: &str) -> Vec<ScenarioRow> {
        csv::Reader::from_path(self.path(dir).join(SCENARIOS_FILE))
            .unwrap()
            .deserialize()
            .map(Result::unwrap)
            .collect()
    }
}

fn records(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(Result::unwrap)
        .collect()
}

#[test]
fn generate_writes_configured_count_reproducibly() {
    let ws = Workspace::new();
    ws.generate("a.jsonl", &[]);
    ws.generate("b.jsonl", &[]);
    let a = fs::read(ws.path("a.jsonl")).unwrap();
    assert_eq!(a, fs::read(ws.path("b.jsonl")).unwrap());
    assert_eq!(a.iter().filter(|&&b| b == b'\n').count(), 8);
    assert_eq!(load_dataset(&ws.path("a.jsonl")).unwrap().len(), 8);

    ws.generate("c.jsonl", &["--set", "generator.n_scenarios=5"]);
    assert_eq!(load_dataset(&ws.path("c.jsonl")).unwrap().len(), 5);
}

#[test]
fn unknown_keys_are_named() {
    let ws = Workspace::new();
    fs::write(ws.path("bad.json"), r#"{"generator": {"betta": 1}}"#).unwrap();
    let (cfg, out) = (ws.arg("bad.json"), ws.arg("x.jsonl"));
    let err = ws.run(&["generate", "--config", &cfg, "--out", &out]).unwrap_err();
    assert!(err.to_string().contains("betta"), "{err}");
    assert!(!ws.path("x.jsonl").exists());

    let err = ws
        .run(&["generate", "--set", "generator.betta=0.8", "--out", &out])
        .unwrap_err();
    assert!(err.to_string().contains("generator.betta"), "{err}");
}

#[test]
fn train_micro_run_writes_a_checkpoint_per_epoch() {
    let ws = Workspace::new();
    ws.trained();
    let run = ws.path("run");
    for epoch in 1..=2 {
        let ck = Checkpoint::load(run.join(checkpoint_name(epoch))).unwrap();
        assert_eq!(from_checkpoint(&ck).unwrap().1.epoch, epoch);
    }
    assert!(!run.join(checkpoint_name(3)).exists());
    let log = records(&run.join("metrics.csv"));
    assert_eq!(log.len(), 2, "one batch of 8 per epoch");
    assert!(run.join("config.json").is_file());
}

#[test]
fn freeze_backbone_keeps_backbone_bitwise() {
    let ws = Workspace::new();
    ws.generate("data.jsonl", &[]);
    ws.train("data.jsonl", "frozen", &["--freeze-backbone"]);
    let ck = Checkpoint::load(ws.path("frozen").join(checkpoint_name(2))).unwrap();
    let (model, state, _) = from_checkpoint(&ck).unwrap();
    let initial = model.init(7).unwrap();
    let mut changed = 0;
    for (name, init) in initial.iter() {
        let now = state.store.get(name).unwrap();
        if name.starts_with("backbone/") {
            assert_eq!(now, init, "{name}");
        } else if now != init {
            changed += 1;
        }
    }
    assert!(changed > 0, "refinement parameters should train");
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let ws = Workspace::new();
    ws.trained();
    let first = ws.path("run").join(checkpoint_name(1)).display().to_string();
    ws.train("data.jsonl", "resumed", &["--resume", &first]);
    assert_eq!(
        fs::read(ws.path("run").join(checkpoint_name(2))).unwrap(),
        fs::read(ws.path("resumed").join(checkpoint_name(2))).unwrap()
    );
    assert!(!ws.path("resumed").join(checkpoint_name(1)).exists());
}

#[test]
fn horizon_mismatch_fails_before_training() {
    let ws = Workspace::new();
    ws.trained();
    ws.generate("short.jsonl", &["--set", "generator.t_f=20"]);
    let first = ws.path("run").join(checkpoint_name(1)).display().to_string();
    let (cfg, data, dir) = (ws.arg("micro.json"), ws.arg("short.jsonl"), ws.arg("bad"));
    let err = ws
        .run(&["train", "--config", &cfg, "--data", &data, "--out-dir", &dir, "--resume", &first])
        .unwrap_err();
    assert!(err.to_string().contains("t_f 20"), "{err}");
    assert!(!ws.path("bad").exists());
}

#[test]
fn zero_iterations_reproduce_backbone_metrics() {
    let ws = Workspace::new();
    ws.trained();
    ws.eval("eval0", &["--mode", "fixed", "--iterations", "0"]).unwrap();
    let summary = ws.summary("eval0");

    let ck = Checkpoint::load(ws.path("run").join(checkpoint_name(2))).unwrap();
    let (model, state, _) = from_checkpoint(&ck).unwrap();
    let scenarios = load_dataset(&ws.path("data.jsonl")).unwrap();
    let pairs: Vec<(f64, f64)> = scenarios
        .iter()
        .map(|s| {
            let scene = Scene::new(s).unwrap();
            let p = model.backbone.predict(&state.store, &scene).unwrap();
            let gt = scene.future.as_ref().unwrap();
            (
                metrics::min_ade(&p.trajectories, gt).unwrap(),
                metrics::min_fde(&p.trajectories, gt).unwrap(),
            )
        })
        .collect();
    let direct = Summary::from_pairs(&pairs).unwrap();
    assert_eq!(summary.result, direct);
    assert_eq!(summary.per_iteration, vec![direct]);
    for (row, (ade, fde)) in ws.rows("eval0").iter().zip(&pairs) {
        assert_eq!((row.min_ade, row.min_fde), (*ade, *fde));
        assert_eq!(row.iterations, 0);
    }
}

#[test]
fn adaptive_threshold_semantics() {
    let ws = Workspace::new();
    ws.trained();
    ws.eval("strict", &["--mode", "adaptive", "--threshold", "1.0", "--max-iterations", "3"])
        .unwrap();
    for row in ws.rows("strict") {
        let q0 = split(&row.scores).unwrap()[0];
        if q0 <= 1.0 {
            assert!(row.iterations >= 1, "{} skipped with score {q0}", row.id);
        }
    }
    for (name, threshold, budget) in [("a", "0.0", "2"), ("b", "0.5", "4"), ("c", "0.9", "1")] {
        ws.eval(name, &["--mode", "adaptive", "--threshold", threshold, "--max-iterations", budget])
            .unwrap();
        let s = ws.summary(name);
        let budget: usize = budget.parse().unwrap();
        assert!(s.mean_iterations <= budget as f64);
        assert!(ws.rows(name).iter().all(|r| r.iterations <= budget));
        assert_eq!(s.exits.values().sum::<usize>(), 8);
    }
}

#[test]
fn incompatible_checkpoint_is_rejected() {
    let ws = Workspace::new();
    ws.trained();
    let err = ws.eval("bad", &["--set", "refine.hidden=32"]).unwrap_err();
    assert!(err.to_string().contains("shape"), "{err}");
    assert!(!ws.path("bad").exists());
}

#[test]
fn analyze_compares_runs_and_recomputes_migration() {
    let ws = Workspace::new();
    ws.trained();
    ws.eval("anchor", &["--iterations", "3"]).unwrap();
    ws.eval("agent", &["--iterations", "3", "--encoding", "agent-centric"]).unwrap();
    let (a, b, out) = (ws.arg("anchor"), ws.arg("agent"), ws.arg("analysis"));
    ws.ok(&["analyze", "--eval", &a, "--eval", &b, "--out-dir", &out]);
    let out = ws.path("analysis");

    let comparison = records(&out.join(COMPARISON_FILE));
    let metrics: Vec<&str> = comparison.iter().map(|r| &r[0]).collect();
    assert_eq!(metrics, ["min_ade", "min_fde", "miss_rate", "mean_iterations"]);
    assert!(comparison.iter().all(|r| r.len() == 3));
    assert_ne!(&comparison[1][1], &comparison[1][2], "encodings should differ");

    let hist = records(&out.join(HISTOGRAM_FILE));
    assert_eq!(hist.len(), 2 * 4 * 10);
    for run in ["anchor", "agent"] {
        for it in 0..4 {
            let rows: Vec<_> = hist.iter().filter(|r| &r[0] == run && r[1] == *it.to_string()).collect();
            assert_eq!(rows.len(), 10);
            assert_eq!(rows.iter().map(|r| r[5].parse::<usize>().unwrap()).sum::<usize>(), 8);
        }
    }

    let migration = records(&out.join(MIGRATION_FILE));
    for row in &migration {
        let labels: Vec<Vec<f64>> = ws.rows(&row[0]).iter().map(|r| split(&r.labels).unwrap()).collect();
        let low: Vec<_> = labels.iter().filter(|l| l[0] < 0.2).collect();
        let high: Vec<_> = labels.iter().filter(|l| l[0] > 0.8).collect();
        let frac = |set: &[&Vec<f64>], moved: fn(&Vec<f64>) -> bool| {
            if set.is_empty() {
                0.0
            } else {
                set.iter().filter(|l| moved(l)).count() as f64 / set.len() as f64
            }
        };
        assert_eq!(row[1].parse::<usize>().unwrap(), low.len());
        assert_eq!(row[2].parse::<f64>().unwrap(), frac(&low, |l| l[l.len() - 1] > l[0]));
        assert_eq!(row[3].parse::<usize>().unwrap(), high.len());
        assert_eq!(row[4].parse::<f64>().unwrap(), frac(&high, |l| l[l.len() - 1] < l[0]));
        let high_at = |i: usize| labels.iter().filter(|l| l[i] >= 0.8).count() as f64 / 8.0;
        assert_eq!(row[5].parse::<f64>().unwrap(), high_at(0));
        assert_eq!(row[6].parse::<f64>().unwrap(), high_at(3));
    }
}

#[test]
fn analyze_lists_every_missing_input() {
    let ws = Workspace::new();
    fs::create_dir(ws.path("empty")).unwrap();
    let (dir, out) = (ws.arg("empty"), ws.arg("analysis"));
    match ws.run(&["analyze", "--eval", &dir, "--out-dir", &out]) {
        Err(CliError::MissingInputs(files)) => {
            let names: Vec<_> = files.iter().map(|f| f.file_name().unwrap().to_owned()).collect();
            assert_eq!(names, [SUMMARY_FILE, SCENARIOS_FILE]);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn binary_exit_status() {
    let ws = Workspace::new();
    fs::write(ws.path("bad.json"), r#"{"generator": {"betta": 1}}"#).unwrap();
    let bin = env!("CARGO_BIN_EXE_trajrefine");
    let out = Command::new(bin)
        .args(["generate", "--config", &ws.arg("bad.json"), "--out", &ws.arg("x.jsonl")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("betta"));

    let out = Command::new(bin).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(bin)
        .args(["generate", "--config", &ws.arg("micro.json"), "--out", &ws.arg("ok.jsonl")])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("8 scenarios"));
}

#[test]
fn model_defaults_match_recorded_hyperparameters() {
    let m = ModelConfig::default();
    assert_eq!(m.refine.beta, 0.8);
    assert_eq!((m.refine.r_min, m.refine.r_max), (2.0, 10.0));
    assert_eq!((m.refine.hidden, m.refine.heads), (64, 8));
    assert!(Model::new(m, 20, 30).is_ok());
}
