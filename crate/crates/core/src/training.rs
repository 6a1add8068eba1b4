//! Losses and the training loop.
//!
//! The objective is `L_cls + L_reg + alpha * L_score`, all winner-take-all
//! on the mode whose final endpoint is closest to the ground truth. The
//! regression term is a Laplace likelihood of each segment's waypoints in
//! the frame of that segment's anchor, matching the frame its offsets and
//! scales are predicted in.
//!
//! Training optionally starts with backbone-only epochs (classification
//! plus Laplace regression on the initial predictions) before the joint
//! phase. Each phase has its own cosine schedule and fresh optimizer
//! moments.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use trajrefine_numerics::{cosine_lr, laplace_nll, AdamW, Checkpoint, Gradients, Graph, NumericsError, ParameterStore, Tensor, Var};

use crate::backbone::{Scene, PREFIX as BACKBONE};
use crate::error::{Error, Result};
use crate::geometry::{Point, Pose2};
use crate::metrics::{best_mode, min_fde};
use crate::model::{Model, ModelConfig, Rollout, RolloutOptions};
use crate::quality::{quality_labels, PREFIX as SCORE};
use crate::refine::{rotate_pairs, SegmentVars, PREFIX as REFINE};

/// Probability floor inside the classification log.
pub const MIN_PROBABILITY: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    /// Refinement iterations unrolled per training example.
    pub iterations: usize,
    /// Joint-phase epochs.
    pub epochs: usize,
    /// Backbone-only epochs run before the joint phase.
    pub backbone_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Attention dropout during training.
    pub dropout: f64,
    pub freeze_backbone: bool,
    /// Apply the regression loss to every iteration's output, not just the
    /// last one.
    pub reg_all_iterations: bool,
    /// Cut gradients between refinement iterations.
    pub stop_gradient: bool,
    /// Worker threads for per-example gradients.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.01,
            iterations: 5,
            epochs: 32,
            backbone_epochs: 0,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            dropout: 0.1,
            freeze_backbone: false,
            reg_all_iterations: false,
            stop_gradient: false,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("train.alpha {} must be >= 0", self.alpha));
        }
        if self.iterations == 0 {
            return bad("train.iterations must be >= 1".into());
        }
        if self.batch_size == 0 || self.jobs == 0 {
            return bad("train.batch_size and train.jobs must be >= 1".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("train.lr must be > 0 and train.weight_decay >= 0".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("train.dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.backbone_epochs + self.epochs
    }
}

/// `-log p[best]` from `1 x K` logits, floored at `p = 1e-12`.
pub fn loss_cls(g: &mut Graph, logits: Var, best: usize) -> Result<Var> {
    let lsm = g.log_softmax_rows(logits)?;
    let lp = g.element(lsm, 0, best)?;
    if g.scalar(lp) < MIN_PROBABILITY.ln() {
        return Ok(g.constant(Tensor::scalar(-MIN_PROBABILITY.ln()))?);
    }
    Ok(g.scale(lp, -1.0)?)
}

/// Laplace NLL of the best mode's waypoints, each segment measured in the
/// frame its scales were predicted in.
pub fn loss_reg(g: &mut Graph, trajectories: Var, segments: &[SegmentVars], gt: &[Point], best: usize) -> Result<Var> {
    let row = g.slice_rows(trajectories, best, 1)?;
    let mut mus = Vec::with_capacity(segments.len());
    let mut scales = Vec::with_capacity(segments.len());
    let mut target = Vec::with_capacity(2 * gt.len());
    for seg in segments {
        let heading = seg.headings[best];
        let mu = g.slice_cols(row, 2 * seg.waypoints.start, 2 * seg.waypoints.len())?;
        mus.push(rotate_pairs(g, mu, &[-heading])?);
        scales.push(g.slice_rows(seg.scales, best, 1)?);
        let frame = Pose2 {
            x: 0.0,
            y: 0.0,
            heading,
        };
        for p in &gt[seg.waypoints.clone()] {
            target.extend(frame.to_frame_unchecked(*p));
        }
    }
    let mu = g.concat_cols(&mus)?;
    let b = g.concat_cols(&scales)?;
    let t = g.constant(Tensor::row_vector(target))?;
    Ok(laplace_nll(g, mu, b, t)?)
}

/// Mean absolute error between the best mode's predicted scores
/// (`K x 1` per iteration) and the labels.
pub fn loss_score(g: &mut Graph, scores: &[Var], labels: &[f64], best: usize) -> Result<Var> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::invalid(
            "loss_score",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    let picked = scores
        .iter()
        .map(|s| g.element(*s, best, 0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let q = g.concat_cols(&picked)?;
    let l = g.constant(Tensor::row_vector(labels.to_vec()))?;
    let d = g.sub(q, l)?;
    let d = g.abs(d)?;
    Ok(g.mean(d)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_reg: f64,
    /// Unweighted score loss; the total uses `alpha * loss_score`.
    pub loss_score: f64,
}

/// Per-iteration best-mode endpoint errors of a rollout.
pub fn iteration_errors(g: &Graph, rollout: &Rollout, gt: &[Point]) -> Result<Vec<f64>> {
    rollout
        .states
        .iter()
        .map(|s| min_fde(&crate::backbone::trajectories_from(g.value(s.trajectories)), gt))
        .collect()
}

/// Builds the joint loss for one scene. Returns the total and its parts.
pub fn joint_loss(g: &mut Graph, scene: &Scene, cfg: &TrainConfig, rollout: &Rollout) -> Result<(Var, LossParts)> {
    let gt = ground_truth(scene)?;
    let last = rollout.states.last().expect("rollout has a state");
    let best = best_mode(&crate::backbone::trajectories_from(g.value(last.trajectories)), gt)?;
    let cls = loss_cls(g, last.logits, best)?;
    let reg = if cfg.reg_all_iterations {
        let terms = rollout
            .states
            .iter()
            .skip(1)
            .zip(&rollout.segments)
            .map(|(s, segs)| loss_reg(g, s.trajectories, segs, gt, best))
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat_cols(&terms)?;
        g.mean(cat)?
    } else {
        let segs = rollout.segments.last().expect("at least one iteration");
        loss_reg(g, last.trajectories, segs, gt, best)?
    };
    let labels = quality_labels(&iteration_errors(g, rollout, gt)?)?;
    let score = loss_score(g, &rollout.scores, &labels, best)?;
    let weighted = g.scale(score, cfg.alpha)?;
    let total = g.add(cls, reg)?;
    let total = g.add(total, weighted)?;
    Ok((
        total,
        LossParts {
            loss: g.scalar(total),
            loss_cls: g.scalar(cls),
            loss_reg: g.scalar(reg),
            loss_score: g.scalar(score),
        },
    ))
}

/// Classification plus Laplace regression on the backbone output alone.
pub fn backbone_loss(g: &mut Graph, model: &Model, scene: &Scene) -> Result<(Var, LossParts)> {
    let gt = ground_truth(scene)?;
    let bb = model.backbone.forward(g, scene)?;
    let best = best_mode(&crate::backbone::trajectories_from(g.value(bb.trajectories)), gt)?;
    let cls = loss_cls(g, bb.logits, best)?;
    let mu = g.slice_rows(bb.trajectories, best, 1)?;
    let b = g.slice_rows(bb.scales, best, 1)?;
    let t = g.constant(Tensor::row_vector(gt.iter().flat_map(|p| *p).collect()))?;
    let reg = laplace_nll(g, mu, b, t)?;
    let total = g.add(cls, reg)?;
    Ok((
        total,
        LossParts {
            loss: g.scalar(total),
            loss_cls: g.scalar(cls),
            loss_reg: g.scalar(reg),
            loss_score: 0.0,
        },
    ))
}

fn ground_truth(scene: &Scene) -> Result<&[Point]> {
    scene.future.as_deref().ok_or_else(|| Error::Scenario {
        id: scene.id.clone(),
        message: "no ground-truth future".into(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Backbone,
    Joint,
}

/// Loss and gradients for one scene. `dropout_seed` fixes the dropout mask.
pub fn example_gradients(
    model: &Model,
    store: &ParameterStore,
    scene: &Scene,
    cfg: &TrainConfig,
    phase: Phase,
    dropout_seed: u64,
) -> Result<(LossParts, Gradients)> {
    let mut g = Graph::new(store);
    if cfg.dropout > 0.0 {
        g = g.with_dropout(cfg.dropout, dropout_seed);
    }
    let run = |g: &mut Graph| -> Result<(Var, LossParts)> {
        match phase {
            Phase::Backbone => backbone_loss(g, model, scene),
            Phase::Joint => {
                let rollout = model.rollout(
                    g,
                    scene,
                    RolloutOptions {
                        iterations: cfg.iterations,
                        stop_gradient: cfg.stop_gradient,
                        plans: None,
                        scores: true,
                    },
                )?;
                joint_loss(g, scene, cfg, &rollout)
            }
        }
    };
    let non_finite = |e: Error| match e {
        Error::Numerics(NumericsError::NonFinite { .. }) => Error::NonFiniteLoss(scene.id.clone()),
        other => other,
    };
    let (total, parts) = run(&mut g).map_err(non_finite)?;
    if !parts.loss.is_finite() {
        return Err(Error::NonFiniteLoss(scene.id.clone()));
    }
    g.backward(total).map_err(|e| non_finite(e.into()))?;
    let mut grads = g.param_grads();
    grads.fill_missing(store);
    Ok((parts, grads))
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub loss_score: f64,
}

pub const LOG_HEADER: &str = "epoch,step,lr,loss,loss_cls,loss_reg,loss_score";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e}",
            self.epoch, self.step, self.lr, self.loss, self.loss_cls, self.loss_reg, self.loss_score
        )
    }
}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Dropout seed for example `slot` of global step `step`.
pub fn dropout_seed(seed: u64, step: u64, slot: usize) -> u64 {
    mix(mix(seed ^ mix(step)) ^ slot as u64)
}

/// Training progress that survives a restart.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ParameterStore,
    pub optimizer: AdamW,
    /// Epochs completed.
    pub epoch: usize,
}

impl TrainState {
    pub fn fresh(model: &Model, seed: u64) -> Result<Self> {
        Ok(TrainState {
            store: model.init(seed)?,
            optimizer: AdamW::new(),
            epoch: 0,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub model: ModelConfig,
    pub t_h: usize,
    pub t_f: usize,
    pub epoch: usize,
    pub seed: u64,
    pub train: TrainConfig,
    pub optimizer_steps: u64,
    pub store_step: u64,
}

pub const CHECKPOINT_FORMAT: &str = "trajrefine-model";
const OPTIMIZER_PREFIX: &str = "optimizer/";

pub fn to_checkpoint(model: &Model, state: &TrainState, cfg: &TrainConfig, seed: u64) -> Result<Checkpoint> {
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        model: model.config.clone(),
        t_h: model.t_h,
        t_f: model.t_f,
        epoch: state.epoch,
        seed,
        // Worker count never changes results, so checkpoints omit it.
        train: TrainConfig { jobs: 1, ..cfg.clone() },
        optimizer_steps: state.optimizer.steps(),
        store_step: state.store.step(),
    };
    let mut ck = Checkpoint {
        meta: serde_json::to_value(meta)?,
        ..Default::default()
    };
    for (name, t) in state.store.iter() {
        ck.tensors.insert(name.to_string(), t.clone());
    }
    for (name, t) in state.optimizer.state() {
        ck.tensors.insert(format!("{OPTIMIZER_PREFIX}{name}"), t);
    }
    Ok(ck)
}

/// Rebuilds the model and training state from a checkpoint.
pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Model, TrainState, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_value(ck.meta.clone())
        .map_err(|e| Error::Incompatible(format!("checkpoint metadata: {e}")))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::Incompatible(format!("unknown checkpoint format `{}`", meta.format)));
    }
    let model = Model::new(meta.model.clone(), meta.t_h, meta.t_f)?;
    let reference = model.init(0)?;
    let mut store = ParameterStore::new();
    let mut opt_state = Vec::new();
    for (name, t) in &ck.tensors {
        if let Some(rest) = name.strip_prefix(OPTIMIZER_PREFIX) {
            opt_state.push((rest.to_string(), t.clone()));
        } else {
            let want = reference
                .get(name)
                .map_err(|_| Error::Incompatible(format!("unexpected parameter `{name}`")))?;
            if want.shape() != t.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
            store.insert(name.clone(), t.clone())?;
        }
    }
    if let Some(missing) = reference.names().find(|n| !store.contains(n)) {
        return Err(Error::Incompatible(format!("checkpoint lacks parameter `{missing}`")));
    }
    store.set_step(meta.store_step);
    let optimizer = AdamW::restore(meta.optimizer_steps, opt_state)?;
    Ok((
        model,
        TrainState {
            store,
            optimizer,
            epoch: meta.epoch,
        },
        meta,
    ))
}

/// Trains from `state.epoch` up to `cfg.total_epochs()`, calling
/// `on_epoch` after every epoch with that epoch's log rows.
pub fn train(
    model: &Model,
    scenes: &[Scene],
    cfg: &TrainConfig,
    seed: u64,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&TrainState, &[LogRow]) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::invalid("train", "empty dataset"));
    }
    for s in scenes {
        if (s.t_h, s.t_f) != (model.t_h, model.t_f) {
            return Err(Error::Incompatible(format!(
                "scenario `{}` has horizon ({}, {}), model expects ({}, {})",
                s.id, s.t_h, s.t_f, model.t_h, model.t_f
            )));
        }
        ground_truth(s)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let steps_per_epoch = scenes.len().div_ceil(cfg.batch_size) as u64;
    let mut order: Vec<usize> = (0..scenes.len()).collect();

    while state.epoch < cfg.total_epochs() {
        let epoch = state.epoch + 1;
        let phase = if epoch <= cfg.backbone_epochs {
            Phase::Backbone
        } else {
            Phase::Joint
        };
        let (phase_start, phase_epochs) = match phase {
            Phase::Backbone => (0, cfg.backbone_epochs),
            Phase::Joint => (cfg.backbone_epochs, cfg.epochs),
        };
        if phase == Phase::Joint && epoch == phase_start + 1 && cfg.backbone_epochs > 0 {
            state.optimizer = AdamW::new();
        }
        state.store.unfreeze_prefix("");
        match phase {
            Phase::Backbone => {
                state.store.freeze_prefix(REFINE);
                state.store.freeze_prefix(SCORE);
            }
            Phase::Joint if cfg.freeze_backbone => state.store.freeze_prefix(BACKBONE),
            Phase::Joint => {}
        }
        let total_steps = phase_epochs as u64 * steps_per_epoch;

        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed ^ mix(epoch as u64))));
        let mut rows = Vec::with_capacity(steps_per_epoch as usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let phase_step = (epoch - 1 - phase_start) as u64 * steps_per_epoch + b as u64;
            let global = (epoch - 1) as u64 * steps_per_epoch + b as u64;
            let store = &state.store;
            let results: Vec<Result<(LossParts, Gradients)>> = pool.install(|| {
                batch
                    .par_iter()
                    .enumerate()
                    .map(|(slot, &i)| {
                        example_gradients(model, store, &scenes[i], cfg, phase, dropout_seed(seed, global, slot))
                    })
                    .collect()
            });
            let mut grads = Gradients::new();
            let mut parts = LossParts::default();
            for r in results {
                let (p, gr) = r?;
                grads.accumulate(&gr);
                parts.loss += p.loss;
                parts.loss_cls += p.loss_cls;
                parts.loss_reg += p.loss_reg;
                parts.loss_score += p.loss_score;
            }
            let k = 1.0 / batch.len() as f64;
            grads.scale(k);
            let lr = cosine_lr(phase_step, total_steps, cfg.lr)?;
            state.optimizer.step(&mut state.store, &grads, lr, cfg.weight_decay)?;
            rows.push(LogRow {
                epoch,
                step: global + 1,
                lr,
                loss: parts.loss * k,
                loss_cls: parts.loss_cls * k,
                loss_reg: parts.loss_reg * k,
                loss_score: parts.loss_score * k,
            });
        }
        state.store.unfreeze_prefix("");
        state.epoch = epoch;
        on_epoch(state, &rows)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_seeds_differ() {
        let a = dropout_seed(1, 0, 0);
        assert_ne!(a, dropout_seed(1, 0, 1));
        assert_ne!(a, dropout_seed(1, 1, 0));
        assert_ne!(a, dropout_seed(2, 0, 0));
        assert_eq!(a, dropout_seed(1, 0, 0));
    }

    #[test]
    fn cls_examples() {
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let logits = g.constant(Tensor::zeros(1, 6)).unwrap();
        let l = loss_cls(&mut g, logits, 3).unwrap();
        assert!((g.scalar(l) - 6f64.ln()).abs() < 1e-12);
        let sharp = g
            .constant(Tensor::row_vector(vec![0.0, 800.0, 0.0]))
            .unwrap();
        let l = loss_cls(&mut g, sharp, 1).unwrap();
        assert!(g.scalar(l).abs() < 1e-12);
        let l = loss_cls(&mut g, sharp, 0).unwrap();
        assert!((g.scalar(l) + MIN_PROBABILITY.ln()).abs() < 1e-9);
    }

    #[test]
    fn score_loss_examples() {
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let s = g.constant(Tensor::filled(2, 1, 0.5)).unwrap();
        let l = loss_score(&mut g, &[s, s], &[0.0, 1.0], 1).unwrap();
        assert!((g.scalar(l) - 0.5).abs() < 1e-15);
        let a = g.constant(Tensor::new(2, 1, vec![0.2, 0.7]).unwrap()).unwrap();
        let l = loss_score(&mut g, &[a], &[0.7], 1).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        assert!(loss_score(&mut g, &[a], &[0.7, 0.1], 1).is_err());
    }
}
