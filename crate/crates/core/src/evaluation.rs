//! Dataset-level evaluation: a fixed-iteration sweep and adaptive
//! inference, each reduced to per-scenario records and summaries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use trajrefine_numerics::ParameterStore;

use crate::backbone::Scene;
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::metrics::{min_ade, min_fde, mode_fdes, Summary};
use crate::model::{IterationOutput, Model};
use crate::quality::{quality_labels, Exit, InferenceConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedRecord {
    pub id: String,
    /// minADE after each iteration `0..=I`.
    pub min_ade: Vec<f64>,
    /// minFDE after each iteration; these are the label errors.
    pub min_fde: Vec<f64>,
    /// Per-mode endpoint errors after the last iteration.
    pub mode_fde: Vec<f64>,
    /// Decision score (most probable mode) after each iteration.
    pub scores: Vec<f64>,
    pub labels: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedEval {
    pub per_iteration: Vec<Summary>,
    pub records: Vec<FixedRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveRecord {
    pub id: String,
    pub iterations: usize,
    pub exit: Exit,
    pub scores: Vec<f64>,
    pub min_ade: f64,
    pub min_fde: f64,
    pub mode_fde: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveEval {
    pub summary: Summary,
    pub mean_iterations: f64,
    pub records: Vec<AdaptiveRecord>,
}

fn gt(scene: &Scene) -> Result<&[Point]> {
    scene.future.as_deref().ok_or_else(|| Error::Scenario {
        id: scene.id.clone(),
        message: "evaluation needs a ground-truth future".into(),
    })
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn fixed_record(scene: &Scene, outputs: &[IterationOutput]) -> Result<FixedRecord> {
    let gt = gt(scene)?;
    let min_ade = outputs
        .iter()
        .map(|o| min_ade(&o.trajectories, gt))
        .collect::<Result<Vec<_>>>()?;
    let min_fde = outputs
        .iter()
        .map(|o| min_fde(&o.trajectories, gt))
        .collect::<Result<Vec<_>>>()?;
    let last = outputs.last().expect("iteration 0 always present");
    Ok(FixedRecord {
        id: scene.id.clone(),
        labels: quality_labels(&min_fde)?,
        mode_fde: mode_fdes(&last.trajectories, gt)?,
        scores: outputs.iter().map(IterationOutput::decision_score).collect(),
        min_ade,
        min_fde,
    })
}

/// Runs `iterations` refinement passes on every scene and reports metrics
/// after each pass, iteration 0 being the backbone.
pub fn evaluate_fixed(model: &Model, store: &ParameterStore, scenes: &[Scene], iterations: usize, jobs: usize) -> Result<FixedEval> {
    if scenes.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    let records: Vec<FixedRecord> = pool(jobs)?.install(|| {
        scenes
            .par_iter()
            .map(|s| fixed_record(s, &model.infer_fixed(store, s, iterations)?))
            .collect::<Result<Vec<_>>>()
    })?;
    let per_iteration = (0..=iterations)
        .map(|i| {
            let pairs: Vec<(f64, f64)> = records.iter().map(|r| (r.min_ade[i], r.min_fde[i])).collect();
            Summary::from_pairs(&pairs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FixedEval {
        per_iteration,
        records,
    })
}

pub fn evaluate_adaptive(model: &Model, store: &ParameterStore, scenes: &[Scene], cfg: &InferenceConfig, jobs: usize) -> Result<AdaptiveEval> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    let records: Vec<AdaptiveRecord> = pool(jobs)?.install(|| {
        scenes
            .par_iter()
            .map(|s| {
                let gt = gt(s)?;
                let run = model.adaptive_infer(store, s, cfg)?;
                Ok(AdaptiveRecord {
                    id: s.id.clone(),
                    iterations: run.iterations,
                    exit: run.exit,
                    min_ade: min_ade(&run.output.trajectories, gt)?,
                    min_fde: min_fde(&run.output.trajectories, gt)?,
                    mode_fde: mode_fdes(&run.output.trajectories, gt)?,
                    scores: run.scores,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let pairs: Vec<(f64, f64)> = records.iter().map(|r| (r.min_ade, r.min_fde)).collect();
    let total: usize = records.iter().map(|r| r.iterations).sum();
    Ok(AdaptiveEval {
        summary: Summary::from_pairs(&pairs)?,
        mean_iterations: total as f64 / records.len() as f64,
        records,
    })
}

/// Builds scenes in parallel, preserving order.
pub fn scenes_from(scenarios: &[crate::scenario::Scenario]) -> Result<Vec<Scene>> {
    scenarios.par_iter().map(Scene::new).collect()
}
