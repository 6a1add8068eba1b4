//! The four subcommands. Each writes its outputs atomically and reports
//! progress on `out`.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use trajrefine::evaluation::{evaluate_adaptive, evaluate_fixed, scenes_from, FixedEval};
use trajrefine::metrics::{score_distribution, ScoreDistribution};
use trajrefine::model::{Model, ModelConfig};
use trajrefine::scenario::{generate as generate_scenarios, parse_dataset, to_jsonl, Maneuver, Scenario};
use trajrefine::training::{from_checkpoint, to_checkpoint, train as run_training, LogRow, TrainState, LOG_HEADER};
use trajrefine::Scene;
use trajrefine_numerics::{Checkpoint, ParameterStore};

use crate::config::{from_value, EvalMode, Override, RunConfig};
use crate::error::{CliError, Result};
use crate::reports::{
    csv_bytes, histogram_rows, join, json_bytes, read_csv, read_json, split, write_atomic, EvalSummary,
    Migration, ScenarioRow, HISTOGRAM_FILE, METRICS_FILE, SCENARIOS_FILE, SUMMARY_FILE,
};

pub const CONFIG_FILE: &str = "config.json";

/// File name of the checkpoint written after `epoch`.
pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.ckpt")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ManeuverMix {
    pub straight: usize,
    pub left: usize,
    pub right: usize,
}

impl ManeuverMix {
    pub fn of(scenarios: &[Scenario]) -> Self {
        let mut mix = ManeuverMix::default();
        for s in scenarios {
            match s.maneuver() {
                Some(Maneuver::Straight) => mix.straight += 1,
                Some(Maneuver::Left) => mix.left += 1,
                Some(Maneuver::Right) => mix.right += 1,
                None => {}
            }
        }
        mix
    }
}

pub fn generate(cfg: &RunConfig, path: &Path, out: &mut dyn Write) -> Result<ManeuverMix> {
    let scenarios = generate_scenarios(&cfg.generator)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_atomic(path, &to_jsonl(&scenarios)?)?;
    let mix = ManeuverMix::of(&scenarios);
    let _ = writeln!(
        out,
        "wrote {} scenarios to {} (straight {}, left {}, right {})",
        scenarios.len(),
        path.display(),
        mix.straight,
        mix.left,
        mix.right
    );
    Ok(mix)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Scenario>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    parse_dataset(BufReader::new(file)).map_err(|e| match e {
        trajrefine::Error::Dataset { line, field, message } => {
            CliError::report(path, format!("line {line}: field `{field}`: {message}"))
        }
        other => other.into(),
    })
}

fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let scenarios = load_dataset(path)?;
    if scenarios.is_empty() {
        return Err(CliError::report(path, "dataset is empty"));
    }
    Ok(scenes_from(&scenarios)?)
}

fn check_horizons(model: &Model, scenes: &[Scene], data: &Path) -> Result<()> {
    if let Some(s) = scenes.iter().find(|s| (s.t_h, s.t_f) != (model.t_h, model.t_f)) {
        return Err(CliError::report(
            data,
            format!(
                "scenario `{}` has horizons (t_h {}, t_f {}) but the model expects (t_h {}, t_f {})",
                s.id, s.t_h, s.t_f, model.t_h, model.t_f
            ),
        ));
    }
    Ok(())
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub out_dir: &'a Path,
    pub resume: Option<&'a Path>,
    /// Worker override that applies to resumed runs as well.
    pub jobs: Option<usize>,
}

/// Keeps the header and rows up to `epoch` of an existing log.
fn truncated_log(path: &Path, epoch: usize) -> Result<String> {
    let mut text = format!("{LOG_HEADER}\n");
    if let Ok(file) = File::open(path) {
        for line in BufReader::new(file).lines().skip(1) {
            let line = line.map_err(|e| CliError::io(path, e))?;
            let row_epoch: usize = line
                .split(',')
                .next()
                .and_then(|e| e.parse().ok())
                .ok_or_else(|| CliError::report(path, format!("malformed log row `{line}`")))?;
            if row_epoch <= epoch {
                text.push_str(&line);
                text.push('\n');
            }
        }
    }
    Ok(text)
}

pub fn train(cfg: &RunConfig, args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let scenes = load_scenes(args.data)?;
    let (model, mut state, mut train_cfg, seed) = match args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path).map_err(|e| CliError::report(path, e.to_string()))?;
            let (model, state, meta) = from_checkpoint(&ck)?;
            let mut tc = meta.train;
            tc.freeze_backbone |= cfg.train.freeze_backbone;
            (model, state, tc, meta.seed)
        }
        None => {
            let model = Model::new(cfg.model(), scenes[0].t_h, scenes[0].t_f)?;
            let state = TrainState::fresh(&model, cfg.seed)?;
            (model, state, cfg.train.clone(), cfg.seed)
        }
    };
    if let Some(j) = args.jobs {
        train_cfg.jobs = j;
    }
    check_horizons(&model, &scenes, args.data)?;
    fs::create_dir_all(args.out_dir).map_err(|e| CliError::io(args.out_dir, e))?;
    if args.resume.is_none() {
        let mut recorded = cfg.clone();
        recorded.train = train_cfg.clone();
        write_atomic(&args.out_dir.join(CONFIG_FILE), &json_bytes(&recorded)?)?;
    }
    let log_path = args.out_dir.join(METRICS_FILE);
    write_atomic(&log_path, truncated_log(&log_path, state.epoch)?.as_bytes())?;

    let total = train_cfg.total_epochs();
    let mut failure: Option<CliError> = None;
    let result = run_training(&model, &scenes, &train_cfg, seed, &mut state, |s, rows: &[LogRow]| {
        let save = || -> Result<()> {
            let bytes = to_checkpoint(&model, s, &train_cfg, seed)?.to_bytes()?;
            write_atomic(&args.out_dir.join(checkpoint_name(s.epoch)), &bytes)?;
            let mut log = OpenOptions::new()
                .append(true)
                .open(&log_path)
                .map_err(|e| CliError::io(&log_path, e))?;
            let text: String = rows.iter().map(|r| r.csv() + "\n").collect();
            log.write_all(text.as_bytes()).map_err(|e| CliError::io(&log_path, e))?;
            Ok(())
        };
        if let Err(e) = save() {
            failure = Some(e);
            return Err(trajrefine::Error::Io(std::io::Error::other("checkpoint write failed")));
        }
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&LogRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let _ = writeln!(
            out,
            "epoch {}/{}: loss {:.4} (cls {:.4}, reg {:.4}, score {:.4}) lr {:.2e}",
            s.epoch,
            total,
            mean(|r| r.loss),
            mean(|r| r.loss_cls),
            mean(|r| r.loss_reg),
            mean(|r| r.loss_score),
            rows.last().map_or(0.0, |r| r.lr),
        );
        Ok(())
    });
    if let Some(e) = failure {
        return Err(e);
    }
    result?;
    let _ = writeln!(out, "checkpoints in {}", args.out_dir.display());
    Ok(())
}

/// Checkpoint model configuration with any `backbone.*` / `refine.*`
/// overrides applied on top.
fn eval_model_config(recorded: &ModelConfig, overrides: &[Override]) -> Result<ModelConfig> {
    let mut doc = serde_json::to_value(recorded)?;
    for o in overrides
        .iter()
        .filter(|o| matches!(o.path[0].as_str(), "backbone" | "refine"))
    {
        o.apply(&mut doc)?;
    }
    from_value(doc, "model configuration")
}

fn check_parameters(model: &Model, store: &ParameterStore) -> Result<()> {
    let reference = model.init(0)?;
    for (name, t) in reference.iter() {
        match store.get(name) {
            Ok(have) if have.shape() == t.shape() => {}
            Ok(have) => {
                return Err(trajrefine::Error::Incompatible(format!(
                    "parameter `{name}` has shape {:?}, configuration expects {:?}",
                    have.shape(),
                    t.shape()
                ))
                .into())
            }
            Err(_) => {
                return Err(trajrefine::Error::Incompatible(format!("checkpoint lacks parameter `{name}`")).into())
            }
        }
    }
    Ok(())
}

fn fixed_rows(fixed: &FixedEval) -> Vec<ScenarioRow> {
    fixed
        .records
        .iter()
        .map(|r| ScenarioRow {
            id: r.id.clone(),
            iterations: r.min_fde.len() - 1,
            exit: "fixed".into(),
            min_ade: *r.min_ade.last().expect("iteration 0"),
            min_fde: *r.min_fde.last().expect("iteration 0"),
            mode_fde: join(&r.mode_fde),
            scores: join(&r.scores),
            labels: join(&r.labels),
            min_fde_trace: join(&r.min_fde),
        })
        .collect()
}

pub fn eval(
    cfg: &RunConfig,
    overrides: &[Override],
    checkpoint: &Path,
    data: &Path,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<EvalSummary> {
    let ck = Checkpoint::load(checkpoint).map_err(|e| CliError::report(checkpoint, e.to_string()))?;
    let (_, state, meta) = from_checkpoint(&ck)?;
    let model = Model::new(eval_model_config(&meta.model, overrides)?, meta.t_h, meta.t_f)?;
    check_parameters(&model, &state.store)?;
    let scenes = load_scenes(data)?;
    check_horizons(&model, &scenes, data)?;
    let jobs = cfg.eval.jobs;

    let sweep = match cfg.eval.mode {
        EvalMode::Fixed => cfg.eval.iterations,
        EvalMode::Adaptive => cfg.inference.max_iterations,
    };
    let fixed = evaluate_fixed(&model, &state.store, &scenes, sweep, jobs)?;
    let labels: Vec<Option<Vec<f64>>> = fixed.records.iter().map(|r| Some(r.labels.clone())).collect();
    let dist = score_distribution(&labels)?;

    let mut rows = fixed_rows(&fixed);
    let mut exits = BTreeMap::new();
    let (result, mean_iterations, inference) = match cfg.eval.mode {
        EvalMode::Fixed => (
            *fixed.per_iteration.last().expect("iteration 0"),
            sweep as f64,
            None,
        ),
        EvalMode::Adaptive => {
            let adaptive = evaluate_adaptive(&model, &state.store, &scenes, &cfg.inference, jobs)?;
            for (row, r) in rows.iter_mut().zip(&adaptive.records) {
                let exit = serde_json::to_value(r.exit)?
                    .as_str()
                    .unwrap_or_default()
                    .to_string();
                *exits.entry(exit.clone()).or_insert(0) += 1;
                row.iterations = r.iterations;
                row.exit = exit;
                row.min_ade = r.min_ade;
                row.min_fde = r.min_fde;
                row.mode_fde = join(&r.mode_fde);
                row.scores = join(&r.scores);
            }
            (adaptive.summary, adaptive.mean_iterations, Some(cfg.inference.clone()))
        }
    };
    let summary = EvalSummary {
        mode: cfg.eval.mode,
        checkpoint: checkpoint.display().to_string(),
        dataset: data.display().to_string(),
        scenarios: scenes.len(),
        model: model.config.clone(),
        sweep_iterations: sweep,
        inference,
        per_iteration: fixed.per_iteration.clone(),
        result,
        mean_iterations,
        exits,
        high_fraction: dist.high_fraction.clone(),
        migration: Migration::from(&dist),
    };

    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    write_atomic(&out_dir.join(SCENARIOS_FILE), &csv_bytes(&rows)?)?;
    write_atomic(&out_dir.join(HISTOGRAM_FILE), &csv_bytes(&histogram_rows(&dist))?)?;
    write_atomic(&out_dir.join(SUMMARY_FILE), &json_bytes(&summary)?)?;

    for (i, s) in fixed.per_iteration.iter().enumerate() {
        let _ = writeln!(
            out,
            "iteration {i}: minADE {:.4} minFDE {:.4} MR {:.4}",
            s.min_ade, s.min_fde, s.miss_rate
        );
    }
    if cfg.eval.mode == EvalMode::Adaptive {
        let _ = writeln!(
            out,
            "adaptive: minADE {:.4} minFDE {:.4} MR {:.4} mean iterations {:.3}",
            result.min_ade, result.min_fde, result.miss_rate, mean_iterations
        );
    }
    let _ = writeln!(out, "reports in {}", out_dir.display());
    Ok(summary)
}

/// One evaluation directory as seen by `analyze`.
#[derive(Clone, Debug)]
pub struct EvalRun {
    pub name: String,
    pub summary: EvalSummary,
    pub distribution: ScoreDistribution,
}

pub fn load_eval(dir: &Path) -> Result<(EvalSummary, ScoreDistribution)> {
    let summary: EvalSummary = read_json(&dir.join(SUMMARY_FILE))?;
    let path = dir.join(SCENARIOS_FILE);
    let rows: Vec<ScenarioRow> = read_csv(&path)?;
    let labels = rows
        .iter()
        .map(|r| {
            split(&r.labels)
                .map(Some)
                .map_err(|e| CliError::report(&path, format!("scenario `{}`: labels: {e}", r.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    if labels.is_empty() {
        return Err(CliError::report(&path, "no scenarios"));
    }
    Ok((summary, score_distribution(&labels)?))
}

fn run_names(dirs: &[PathBuf]) -> Vec<String> {
    let base: Vec<String> = dirs
        .iter()
        .enumerate()
        .map(|(i, d)| {
            d.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("run{i}"))
        })
        .collect();
    base.iter()
        .enumerate()
        .map(|(i, n)| {
            if base.iter().filter(|m| *m == n).count() > 1 {
                format!("{n}#{i}")
            } else {
                n.clone()
            }
        })
        .collect()
}

pub const COMPARISON_FILE: &str = "comparison.csv";
pub const RUNS_FILE: &str = "runs.csv";
pub const MIGRATION_FILE: &str = "migration.csv";

pub fn analyze(dirs: &[PathBuf], out_dir: &Path, out: &mut dyn Write) -> Result<Vec<EvalRun>> {
    let missing: Vec<PathBuf> = dirs
        .iter()
        .flat_map(|d| [d.join(SUMMARY_FILE), d.join(SCENARIOS_FILE)])
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::MissingInputs(missing));
    }
    let runs = dirs
        .iter()
        .zip(run_names(dirs))
        .map(|(d, name)| {
            let (summary, distribution) = load_eval(d)?;
            Ok(EvalRun {
                name,
                summary,
                distribution,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let table = |header: Vec<String>, body: Vec<Vec<String>>| -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&header)?;
        for r in body {
            w.write_record(&r)?;
        }
        w.into_inner().map_err(|e| CliError::Usage(format!("csv buffer: {e}")))
    };

    let mut header = vec!["metric".to_string()];
    header.extend(runs.iter().map(|r| r.name.clone()));
    let metrics: [(&str, fn(&EvalSummary) -> f64); 4] = [
        ("min_ade", |s| s.result.min_ade),
        ("min_fde", |s| s.result.min_fde),
        ("miss_rate", |s| s.result.miss_rate),
        ("mean_iterations", |s| s.mean_iterations),
    ];
    let comparison: Vec<Vec<String>> = metrics
        .iter()
        .map(|(name, f)| {
            std::iter::once(name.to_string())
                .chain(runs.iter().map(|r| f(&r.summary).to_string()))
                .collect()
        })
        .collect();

    let runs_table: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            let s = &r.summary;
            let refine = &s.model.refine;
            vec![
                r.name.clone(),
                serde_json::to_value(s.mode).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                s.sweep_iterations.to_string(),
                refine.n_anchors.map_or("auto".into(), |n| n.to_string()),
                refine.radius.to_string(),
                refine.encoding.to_string(),
                s.inference.as_ref().map_or(String::new(), |i| i.threshold.to_string()),
                s.scenarios.to_string(),
            ]
        })
        .collect();

    let mut hist = Vec::new();
    let mut migration = Vec::new();
    for r in &runs {
        for h in histogram_rows(&r.distribution) {
            hist.push(vec![
                r.name.clone(),
                h.iteration.to_string(),
                h.bin.to_string(),
                h.lower.to_string(),
                h.upper.to_string(),
                h.count.to_string(),
            ]);
        }
        let d = &r.distribution;
        migration.push(vec![
            r.name.clone(),
            d.initially_low.to_string(),
            d.low_improved.to_string(),
            d.initially_high.to_string(),
            d.high_worsened.to_string(),
            d.high_fraction.first().copied().unwrap_or(0.0).to_string(),
            d.high_fraction.last().copied().unwrap_or(0.0).to_string(),
        ]);
    }

    let cols = |names: &[&str]| names.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    write_atomic(&out_dir.join(COMPARISON_FILE), &table(header, comparison.clone())?)?;
    write_atomic(
        &out_dir.join(RUNS_FILE),
        &table(
            cols(&["run", "mode", "sweep_iterations", "n_anchors", "radius", "encoding", "threshold", "scenarios"]),
            runs_table,
        )?,
    )?;
    write_atomic(
        &out_dir.join(HISTOGRAM_FILE),
        &table(cols(&["run", "iteration", "bin", "lower", "upper", "count"]), hist)?,
    )?;
    write_atomic(
        &out_dir.join(MIGRATION_FILE),
        &table(
            cols(&[
                "run",
                "initially_low",
                "low_improved",
                "initially_high",
                "high_worsened",
                "high_fraction_initial",
                "high_fraction_final",
            ]),
            migration,
        )?,
    )?;
    for row in &comparison {
        let _ = writeln!(out, "{}", row.join("\t"));
    }
    let _ = writeln!(out, "analysis in {}", out_dir.display());
    Ok(runs)
}
