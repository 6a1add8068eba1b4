//! First-stage predictor: K candidate futures, their probabilities, and a
//! per-mode embedding, all in the target agent's frame at t = 0.
//!
//! The target history is flattened through an MLP into one agent token,
//! which cross-attends over the nearest map points and neighbor waypoints.
//! Learned per-mode queries are added to the resulting scene feature and
//! decoded by shared trajectory, probability, and scale heads.

use rand::Rng;
use serde::{Deserialize, Serialize};
use trajrefine_numerics::{Graph, Mlp, MultiHeadAttention, ParameterStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::geometry::{displacement_heading, Point, Pose2};
use crate::retrieval::SceneElements;
use crate::scenario::Scenario;

/// Meters per network unit for positions fed to or decoded by networks.
pub const POSITION_SCALE: f64 = 10.0;
/// Scale of semantic codes fed to networks.
pub const SEMANTIC_SCALE: f64 = 4.0;
/// Minimum displacement for a heading to be defined.
pub const MIN_HEADING_DISPLACEMENT: f64 = 1e-6;
/// Floor added after softplus on every Laplace scale head.
pub const SCALE_FLOOR: f64 = 1e-3;

pub const PREFIX: &str = "backbone/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub dim: usize,
    pub modes: usize,
    pub heads: usize,
    /// Scene tokens attended by the agent token.
    pub max_tokens: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            dim: 128,
            modes: 6,
            heads: 8,
            max_tokens: 128,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 || self.max_tokens == 0 {
            return Err(Error::Config("backbone.modes and max_tokens must be positive".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "backbone.dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// The target agent's pose at t = 0. Heading follows the last history
/// displacement, or 0 for a stationary agent.
pub fn target_frame(scenario: &Scenario) -> Result<Pose2> {
    let h = &scenario.target.history;
    if h.len() < 2 {
        return Err(Error::Scenario {
            id: scenario.id.clone(),
            message: "history shorter than 2".into(),
        });
    }
    let (prev, last) = (h[h.len() - 2], h[h.len() - 1]);
    let heading = displacement_heading(prev, last, MIN_HEADING_DISPLACEMENT).unwrap_or(0.0);
    Pose2::new(last[0], last[1], heading)
}

/// Agent-centric view of a scenario: everything the networks consume.
#[derive(Clone, Debug)]
pub struct Scene {
    pub id: String,
    pub frame: Pose2,
    pub t_h: usize,
    pub t_f: usize,
    /// Target history in the target frame.
    pub history: Vec<Point>,
    pub elements: SceneElements,
    /// Ground-truth future in the target frame, when known.
    pub future: Option<Vec<Point>>,
}

impl Scene {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        let frame = target_frame(scenario)?;
        let history = scenario
            .target
            .history
            .iter()
            .map(|p| frame.to_frame(*p))
            .collect::<Result<Vec<_>>>()?;
        let future = match &scenario.target.future {
            Some(f) => Some(f.iter().map(|p| frame.to_frame(*p)).collect::<Result<Vec<_>>>()?),
            None => None,
        };
        Ok(Scene {
            id: scenario.id.clone(),
            frame,
            t_h: scenario.t_h,
            t_f: scenario.t_f,
            history,
            elements: SceneElements::collect(scenario, &frame)?,
            future,
        })
    }

    /// Maps a target-frame trajectory back to world coordinates.
    pub fn to_world(&self, trajectory: &[Point]) -> Vec<Point> {
        trajectory
            .iter()
            .map(|p| self.frame.from_frame_unchecked(*p))
            .collect()
    }
}

/// Initial predictions in the target frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    /// `K x T_f` waypoints.
    pub trajectories: Vec<Vec<Point>>,
    pub probabilities: Vec<f64>,
    /// `K x D` embeddings.
    pub embeddings: Tensor,
}

/// Graph handles produced by one backbone forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BackboneVars {
    /// `K x 2T_f`, interleaved `x, y` per step, meters.
    pub trajectories: Var,
    /// `1 x K` logits.
    pub logits: Var,
    /// `1 x K`.
    pub probabilities: Var,
    /// `K x D`.
    pub embeddings: Var,
    /// `K x 2T_f` Laplace scales in the target frame.
    pub scales: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub t_h: usize,
    pub t_f: usize,
    history: Mlp,
    token: Mlp,
    attention: MultiHeadAttention,
    mode_query: String,
    mode: Mlp,
    trajectory: Mlp,
    probability: Mlp,
    scale: Mlp,
}

impl Backbone {
    pub fn new(config: BackboneConfig, t_h: usize, t_f: usize) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let p = |s: &str| format!("{PREFIX}{s}");
        Ok(Backbone {
            history: Mlp::new(&p("history"), 2 * t_h, d, d),
            token: Mlp::new(&p("token"), 3, d, d),
            attention: MultiHeadAttention::new(&p("attention"), d, config.heads)?,
            mode_query: p("mode_query"),
            mode: Mlp::new(&p("mode"), d, d, d),
            trajectory: Mlp::new(&p("trajectory_head"), d, d, 2 * t_f),
            probability: Mlp::new(&p("probability_head"), d, d, 1),
            scale: Mlp::new(&p("scale_head"), d, d, 2 * t_f),
            config,
            t_h,
            t_f,
        })
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        for m in [
            &self.history,
            &self.token,
            &self.mode,
            &self.trajectory,
            &self.probability,
            &self.scale,
        ] {
            m.init(store, rng)?;
        }
        self.attention.init(store, rng)?;
        store.init_uniform(&self.mode_query, self.config.modes, self.config.dim, 1.0, rng)?;
        Ok(())
    }

    /// Zeroes the trajectory, probability, and scale heads.
    pub fn zero_heads(&self, store: &mut ParameterStore) {
        for prefix in ["trajectory_head", "probability_head", "scale_head"] {
            store.zero_prefix(&format!("{PREFIX}{prefix}"));
        }
    }

    fn check(&self, scene: &Scene) -> Result<()> {
        if scene.t_h != self.t_h || scene.t_f != self.t_f {
            return Err(Error::Incompatible(format!(
                "scenario `{}` has horizon ({}, {}), model expects ({}, {})",
                scene.id, scene.t_h, scene.t_f, self.t_h, self.t_f
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, scene: &Scene) -> Result<BackboneVars> {
        self.check(scene)?;
        let hist: Vec<f64> = scene
            .history
            .iter()
            .flat_map(|p| [p[0] / POSITION_SCALE, p[1] / POSITION_SCALE])
            .collect();
        let hist = g.constant(Tensor::row_vector(hist))?;
        let agent = self.history.forward(g, hist)?;

        let ids = scene.elements.nearest([0.0, 0.0], self.config.max_tokens);
        let feats: Vec<f64> = ids
            .iter()
            .flat_map(|&i| {
                let p = scene.elements.positions[i];
                [
                    p[0] / POSITION_SCALE,
                    p[1] / POSITION_SCALE,
                    f64::from(scene.elements.semantic[i]) / SEMANTIC_SCALE,
                ]
            })
            .collect();
        let tokens = g.constant(Tensor::new(ids.len(), 3, feats)?)?;
        let tokens = self.token.forward(g, tokens)?;
        let context = self.attention.forward(g, agent, tokens, tokens)?;
        let scene_feat = g.add(agent, context)?;

        let queries = g.param(&self.mode_query)?;
        let queries = g.add_row(queries, scene_feat)?;
        let embeddings = self.mode.forward(g, queries)?;

        let traj = self.trajectory.forward(g, embeddings)?;
        let trajectories = g.scale(traj, POSITION_SCALE)?;
        let logits = self.probability.forward(g, embeddings)?;
        let logits = g.transpose(logits)?;
        let probabilities = g.softmax_rows(logits)?;
        let raw = self.scale.forward(g, embeddings)?;
        let scales = g.softplus(raw)?;
        let scales = g.add_scalar(scales, SCALE_FLOOR)?;
        Ok(BackboneVars {
            trajectories,
            logits,
            probabilities,
            embeddings,
            scales,
        })
    }

    /// Deterministic inference.
    pub fn predict(&self, store: &ParameterStore, scene: &Scene) -> Result<PredictionSet> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, scene)?;
        Ok(PredictionSet {
            trajectories: trajectories_from(g.value(out.trajectories)),
            probabilities: g.value(out.probabilities).data().to_vec(),
            embeddings: g.value(out.embeddings).clone(),
        })
    }
}

/// Splits a `K x 2T` interleaved tensor into per-mode waypoint lists.
pub fn trajectories_from(t: &Tensor) -> Vec<Vec<Point>> {
    (0..t.rows())
        .map(|k| t.row(k).chunks_exact(2).map(|c| [c[0], c[1]]).collect())
        .collect()
}

/// Inverse of [`trajectories_from`].
pub fn trajectories_to_tensor(trajs: &[Vec<Point>]) -> Result<Tensor> {
    let cols = trajs.first().map_or(0, |t| 2 * t.len());
    let data: Vec<f64> = trajs.iter().flatten().flat_map(|p| [p[0], p[1]]).collect();
    Ok(Tensor::new(trajs.len(), cols, data)?)
}
