//! The full predictor: backbone, refiner, and score decoder sharing one
//! parameter store, plus fixed-iteration and adaptive inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use trajrefine_numerics::{Graph, ParameterStore, Var};

use crate::backbone::{trajectories_from, Backbone, BackboneConfig, BackboneVars, Scene};
use crate::error::Result;
use crate::geometry::Point;
use crate::quality::{adaptive_control, Exit, InferenceConfig, ScoreDecoder};
use crate::refine::{IterationPlan, RefineConfig, Refiner, SegmentVars, StateVars};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub refine: RefineConfig,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub t_h: usize,
    pub t_f: usize,
    pub backbone: Backbone,
    pub refiner: Refiner,
    pub score: ScoreDecoder,
}

/// Knobs for one differentiable rollout.
#[derive(Clone, Copy, Debug, Default)]
pub struct RolloutOptions<'p> {
    pub iterations: usize,
    /// Detach trajectories and embeddings between iterations.
    pub stop_gradient: bool,
    /// Replay these plans instead of planning from the live trajectories.
    pub plans: Option<&'p [IterationPlan]>,
    /// Decode quality scores after every iteration.
    pub scores: bool,
}

/// Graph handles for a backbone pass followed by refinement iterations.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub backbone: BackboneVars,
    /// `states[i]` is the state after iteration `i`; `states[0]` is the
    /// compressed backbone output.
    pub states: Vec<StateVars>,
    pub plans: Vec<IterationPlan>,
    /// Per iteration `1..=I`, per segment.
    pub segments: Vec<Vec<SegmentVars>>,
    /// `K x 1` scores after each state, when requested.
    pub scores: Vec<Var>,
}

/// Values of one iteration's output.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationOutput {
    /// `K x T_f` target-frame waypoints.
    pub trajectories: Vec<Vec<Point>>,
    pub probabilities: Vec<f64>,
    /// Per-mode predicted quality.
    pub scores: Vec<f64>,
}

impl IterationOutput {
    pub fn top_mode(&self) -> usize {
        argmax(&self.probabilities)
    }

    /// Score of the most probable mode.
    pub fn decision_score(&self) -> f64 {
        self.scores[self.top_mode()]
    }
}

/// Index of the largest value; the first on ties.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, x)| if *x > best.1 { (i, *x) } else { best })
        .0
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveRun {
    pub output: IterationOutput,
    pub iterations: usize,
    pub scores: Vec<f64>,
    pub exit: Exit,
}

impl Model {
    pub fn new(config: ModelConfig, t_h: usize, t_f: usize) -> Result<Self> {
        let backbone = Backbone::new(config.backbone.clone(), t_h, t_f)?;
        let refiner = Refiner::new(config.refine.clone(), config.backbone.dim, t_f)?;
        let score = ScoreDecoder::new(config.refine.hidden);
        Ok(Model {
            config,
            t_h,
            t_f,
            backbone,
            refiner,
            score,
        })
    }

    /// Fresh parameters, deterministic in `seed`.
    pub fn init(&self, seed: u64) -> Result<ParameterStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        self.backbone.init(&mut store, &mut rng)?;
        self.refiner.init(&mut store, &mut rng)?;
        self.score.init(&mut store, &mut rng)?;
        Ok(store)
    }

    pub fn rollout(&self, g: &mut Graph, scene: &Scene, opts: RolloutOptions) -> Result<Rollout> {
        let index = self.refiner.index(scene)?;
        let bb = self.backbone.forward(g, scene)?;
        let mut state =
            self.refiner
                .initial_state(g, bb.trajectories, bb.embeddings, bb.logits, bb.probabilities)?;
        let mut out = Rollout {
            backbone: bb,
            states: vec![state],
            plans: Vec::with_capacity(opts.iterations),
            segments: Vec::with_capacity(opts.iterations),
            scores: Vec::new(),
        };
        let mut hidden = None;
        if opts.scores {
            let (h, q) = self.score.step(g, None, state.embeddings)?;
            hidden = Some(h);
            out.scores.push(q);
        }
        for i in 0..opts.iterations {
            let mut input = state;
            if opts.stop_gradient {
                input.trajectories = g.detach(input.trajectories)?;
                input.embeddings = g.detach(input.embeddings)?;
            }
            let replay = opts.plans.map(|p| &p[i]);
            let (next, plan, segments) = self.refiner.refine_iteration(g, &index, &input, replay)?;
            if opts.scores {
                let (h, q) = self.score.step(g, hidden, next.embeddings)?;
                hidden = Some(h);
                out.scores.push(q);
            }
            state = next;
            out.states.push(state);
            out.plans.push(plan);
            out.segments.push(segments);
        }
        Ok(out)
    }

    fn output(g: &Graph, state: &StateVars, scores: Var) -> IterationOutput {
        IterationOutput {
            trajectories: trajectories_from(g.value(state.trajectories)),
            probabilities: g.value(state.probabilities).data().to_vec(),
            scores: g.value(scores).data().to_vec(),
        }
    }

    /// Outputs after each of iterations `0..=iterations`.
    pub fn infer_fixed(&self, store: &ParameterStore, scene: &Scene, iterations: usize) -> Result<Vec<IterationOutput>> {
        let mut g = Graph::new(store);
        let r = self.rollout(
            &mut g,
            scene,
            RolloutOptions {
                iterations,
                scores: true,
                ..Default::default()
            },
        )?;
        Ok(r.states
            .iter()
            .zip(&r.scores)
            .map(|(s, q)| Self::output(&g, s, *q))
            .collect())
    }

    /// Runs refinement only as long as the predicted quality asks for it.
    pub fn adaptive_infer(&self, store: &ParameterStore, scene: &Scene, cfg: &InferenceConfig) -> Result<AdaptiveRun> {
        let mut g = Graph::new(store);
        let index = self.refiner.index(scene)?;
        let bb = self.backbone.forward(&mut g, scene)?;
        let mut state =
            self.refiner
                .initial_state(&mut g, bb.trajectories, bb.embeddings, bb.logits, bb.probabilities)?;
        let mut hidden = None;
        let mut last = None;
        let outcome = adaptive_control(cfg, |i| {
            if i > 0 {
                state = self.refiner.refine_iteration(&mut g, &index, &state, None)?.0;
            }
            let (h, q) = self.score.step(&mut g, hidden, state.embeddings)?;
            hidden = Some(h);
            let out = Self::output(&g, &state, q);
            let score = out.decision_score();
            last = Some(out);
            Ok(score)
        })?;
        Ok(AdaptiveRun {
            output: last.expect("controller evaluates iteration 0"),
            iterations: outcome.iterations,
            scores: outcome.scores,
            exit: outcome.exit,
        })
    }
}
