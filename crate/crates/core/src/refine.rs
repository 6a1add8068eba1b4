//! Iterative segment-wise refinement.
//!
//! Each iteration splits every mode's trajectory into `N` segments whose
//! endpoints become anchors. Around each anchor, map points and neighbor
//! waypoints inside a speed- and iteration-dependent radius are retrieved,
//! expressed in the anchor frame, and encoded. The mode embedding attends
//! over that context one segment at a time; after each attention step an
//! offset head adjusts only that segment's waypoints.
//!
//! Planning (anchors, radii, retrieval) is separated from the
//! differentiable part so a plan can be replayed with perturbed
//! parameters.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use trajrefine_numerics::{Graph, Mlp, MultiHeadAttention, ParameterStore, Tensor, Var};

use crate::backbone::{Scene, POSITION_SCALE, SCALE_FLOOR, SEMANTIC_SCALE, MIN_HEADING_DISPLACEMENT};
use crate::error::{Error, Result};
use crate::geometry::{displacement_heading, distance, Point, Pose2};
use crate::retrieval::{naive_within, sort_hits, ElementKind, GridIndex, SceneElements};
use crate::scenario::DT;

pub const PREFIX: &str = "refine/";

/// How the retrieval radius shrinks over iterations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RadiusMode {
    /// `beta * (1/2)^(i-1) * v`, clamped.
    Exp,
    /// Factor interpolated evenly from `beta` to `beta * (1/2)^(I-1)`.
    Linear,
    /// Constant radius in meters, unclamped.
    Fixed(f64),
}

impl fmt::Display for RadiusMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RadiusMode::Exp => f.write_str("adaptive:exp"),
            RadiusMode::Linear => f.write_str("adaptive:linear"),
            RadiusMode::Fixed(r) => write!(f, "fixed:{r}"),
        }
    }
}

impl FromStr for RadiusMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive:exp" | "exp" => Ok(RadiusMode::Exp),
            "adaptive:linear" | "linear" => Ok(RadiusMode::Linear),
            _ => {
                let r = s
                    .strip_prefix("fixed:")
                    .and_then(|r| r.parse::<f64>().ok())
                    .filter(|r| *r > 0.0 && r.is_finite())
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "radius `{s}`: expected fixed:<meters>, adaptive:linear, or adaptive:exp"
                        ))
                    })?;
                Ok(RadiusMode::Fixed(r))
            }
        }
    }
}

impl Serialize for RadiusMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RadiusMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Frame in which retrieved context and predicted offsets are expressed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    AnchorCentric,
    AgentCentric,
}

impl FromStr for Encoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchor-centric" => Ok(Encoding::AnchorCentric),
            "agent-centric" => Ok(Encoding::AgentCentric),
            _ => Err(Error::Config(format!(
                "encoding `{s}`: expected anchor-centric or agent-centric"
            ))),
        }
    }
}

impl fmt::Display for Encoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Encoding::AnchorCentric => "anchor-centric",
            Encoding::AgentCentric => "agent-centric",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Anchor count; `None` picks `max(1, ceil(T_f / 15))`.
    pub n_anchors: Option<usize>,
    pub beta: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub radius: RadiusMode,
    /// Iteration count over which linear decay runs from `beta` to its
    /// final value.
    pub decay_iterations: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_context: usize,
    pub encoding: Encoding,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            n_anchors: None,
            beta: 0.8,
            r_min: 2.0,
            r_max: 10.0,
            radius: RadiusMode::Exp,
            decay_iterations: 5,
            hidden: 64,
            heads: 8,
            max_context: 128,
            encoding: Encoding::AnchorCentric,
        }
    }
}

impl RefineConfig {
    pub fn anchors_for(&self, t_f: usize) -> usize {
        self.n_anchors.unwrap_or_else(|| t_f.div_ceil(15).max(1))
    }

    pub fn validate(&self, t_f: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let n = self.anchors_for(t_f);
        if n == 0 || n > t_f {
            return bad(format!("refine.n_anchors {n} must be in 1..={t_f}"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("refine.beta {} must be positive", self.beta));
        }
        if !(self.r_min > 0.0 && self.r_min <= self.r_max && self.r_max.is_finite()) {
            return bad(format!(
                "refine radius bounds [{}, {}] must satisfy 0 < r_min <= r_max",
                self.r_min, self.r_max
            ));
        }
        if self.decay_iterations == 0 {
            return bad("refine.decay_iterations must be >= 1".into());
        }
        if self.max_context == 0 {
            return bad("refine.max_context must be >= 1".into());
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!(
                "refine.hidden {} not divisible by {} heads",
                self.hidden, self.heads
            ));
        }
        Ok(())
    }

    /// Largest radius any query can use, which sizes the grid cells.
    pub fn max_radius(&self) -> f64 {
        match self.radius {
            RadiusMode::Fixed(r) => r,
            _ => self.r_max,
        }
    }
}

/// Retrieval radius at iteration `i >= 1` for segment-average speed `v`.
pub fn retrieval_radius(i: usize, v: f64, cfg: &RefineConfig) -> f64 {
    let i = i.max(1);
    let factor = match cfg.radius {
        RadiusMode::Fixed(r) => return r,
        RadiusMode::Exp => cfg.beta * 0.5f64.powi(i as i32 - 1),
        RadiusMode::Linear => {
            let last = cfg.beta * 0.5f64.powi(cfg.decay_iterations as i32 - 1);
            let t = if cfg.decay_iterations <= 1 {
                1.0
            } else {
                ((i - 1) as f64 / (cfg.decay_iterations - 1) as f64).min(1.0)
            };
            cfg.beta + t * (last - cfg.beta)
        }
    };
    (factor * v).clamp(cfg.r_min, cfg.r_max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub pose: Pose2,
    /// Segment-average speed, m/s.
    pub speed: f64,
    /// Steps `(start, end]`; step `s` is waypoint index `s - 1`.
    pub segment: (usize, usize),
}

impl Anchor {
    /// Waypoint indices covered by the segment.
    pub fn waypoints(&self) -> Range<usize> {
        self.segment.0..self.segment.1
    }
}

/// Segment boundary steps `floor(k * T_f / N)` for `k = 1..=N`.
pub fn segment_boundaries(t_f: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > t_f {
        return Err(Error::invalid(
            "segment_boundaries",
            format!("{n} anchors for {t_f} future steps"),
        ));
    }
    Ok((1..=n).map(|k| k * t_f / n).collect())
}

/// Splits `trajectory` (waypoints for steps `1..=T_f`, the agent at the
/// origin at step 0) into `n` segments and returns their end anchors.
pub fn select_anchors(trajectory: &[Point], n: usize) -> Result<Vec<Anchor>> {
    let bounds = segment_boundaries(trajectory.len(), n)?;
    let at = |step: usize| if step == 0 { [0.0, 0.0] } else { trajectory[step - 1] };
    let mut start = 0;
    let mut out = Vec::with_capacity(n);
    for end in bounds {
        let p = at(end);
        let heading = displacement_heading(at(end - 1), p, MIN_HEADING_DISPLACEMENT).unwrap_or(0.0);
        let path: f64 = (start..end).map(|s| distance(at(s), at(s + 1))).sum();
        out.push(Anchor {
            pose: Pose2::new(p[0], p[1], heading)?,
            speed: path / ((end - start) as f64 * DT),
            segment: (start, end),
        });
        start = end;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextElement {
    /// Anchor frame, or target frame under agent-centric encoding.
    pub position: Point,
    pub semantic: u8,
    /// Distance to the anchor.
    pub dist: f64,
    pub kind: ElementKind,
    /// Index into the scene's element list.
    pub id: usize,
}

/// Scene elements with a grid index, built once per scenario.
#[derive(Clone, Debug)]
pub struct ContextIndex<'a> {
    pub elements: &'a SceneElements,
    grid: GridIndex,
}

impl<'a> ContextIndex<'a> {
    pub fn new(elements: &'a SceneElements, cell: f64) -> Result<Self> {
        if elements.n_map == 0 {
            return Err(Error::invalid("ContextIndex::new", "scene has no map points"));
        }
        Ok(ContextIndex {
            elements,
            grid: GridIndex::build(elements, cell)?,
        })
    }

    /// Context within `radius` of the anchor, nearest `cap` kept, with the
    /// nearest map point as fallback when nothing is in range.
    pub fn retrieve(&self, anchor: &Anchor, radius: f64, cap: usize, encoding: Encoding) -> Vec<ContextElement> {
        let hits = self.grid.within(self.elements, anchor.pose.position(), radius);
        self.finish(hits, anchor, cap, encoding)
    }

    /// [`Self::retrieve`] by linear scan.
    pub fn retrieve_naive(&self, anchor: &Anchor, radius: f64, cap: usize, encoding: Encoding) -> Vec<ContextElement> {
        let hits = naive_within(self.elements, anchor.pose.position(), radius);
        self.finish(hits, anchor, cap, encoding)
    }

    fn finish(&self, mut hits: Vec<(f64, usize)>, anchor: &Anchor, cap: usize, encoding: Encoding) -> Vec<ContextElement> {
        if hits.is_empty() {
            // n_map > 0 is checked at construction
            hits.extend(self.elements.nearest_map_point(anchor.pose.position()));
        }
        sort_hits(&mut hits);
        hits.truncate(cap);
        hits.into_iter()
            .map(|(dist, id)| {
                let p = self.elements.positions[id];
                let position = match encoding {
                    Encoding::AnchorCentric => anchor.pose.to_frame_unchecked(p),
                    Encoding::AgentCentric => p,
                };
                ContextElement {
                    position,
                    semantic: self.elements.semantic[id],
                    dist,
                    kind: self.elements.kind[id],
                    id,
                }
            })
            .collect()
    }
}

/// Anchors and retrieved context for one segment, one entry per mode.
#[derive(Clone, Debug)]
pub struct SegmentPlan {
    pub anchors: Vec<Anchor>,
    pub contexts: Vec<Vec<ContextElement>>,
    pub radii: Vec<f64>,
}

impl SegmentPlan {
    pub fn waypoints(&self) -> Range<usize> {
        self.anchors[0].waypoints()
    }
}

#[derive(Clone, Debug)]
pub struct IterationPlan {
    /// 1-based refinement iteration.
    pub iteration: usize,
    pub segments: Vec<SegmentPlan>,
}

/// Graph handles for the refinement state.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    /// `K x 2T_f` in the target frame.
    pub trajectories: Var,
    /// `K x H`.
    pub embeddings: Var,
    /// `1 x K`.
    pub logits: Var,
    pub probabilities: Var,
    pub iteration: usize,
}

/// Value snapshot of a refinement state.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineState {
    pub trajectories: Vec<Vec<Point>>,
    pub embeddings: Tensor,
    pub probabilities: Vec<f64>,
    pub iteration: usize,
}

impl RefineState {
    pub fn from_vars(g: &Graph, s: &StateVars) -> Self {
        RefineState {
            trajectories: crate::backbone::trajectories_from(g.value(s.trajectories)),
            embeddings: g.value(s.embeddings).clone(),
            probabilities: g.value(s.probabilities).data().to_vec(),
            iteration: s.iteration,
        }
    }
}

/// Outputs of one refined segment used by the regression loss.
#[derive(Clone, Debug)]
pub struct SegmentVars {
    /// `K x 2L` Laplace scales in each mode's anchor frame.
    pub scales: Var,
    pub waypoints: Range<usize>,
    /// Per-mode heading of the frame the scales refer to.
    pub headings: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Refiner {
    pub config: RefineConfig,
    pub t_f: usize,
    pub n_anchors: usize,
    compressor: Mlp,
    position: Mlp,
    semantic: Mlp,
    distance: Mlp,
    fusion: Mlp,
    attention: MultiHeadAttention,
    offset: Mlp,
    scale: Mlp,
    probability: Mlp,
}

impl Refiner {
    pub fn new(config: RefineConfig, backbone_dim: usize, t_f: usize) -> Result<Self> {
        config.validate(t_f)?;
        let h = config.hidden;
        let p = |s: &str| format!("{PREFIX}{s}");
        Ok(Refiner {
            compressor: Mlp::new(&p("compressor"), backbone_dim, h, h),
            position: Mlp::new(&p("position_encoder"), 2, h, h),
            semantic: Mlp::new(&p("semantic_encoder"), 1, h, h),
            distance: Mlp::new(&p("distance_encoder"), 1, h, h),
            fusion: Mlp::new(&p("fusion"), h, h, h),
            attention: MultiHeadAttention::new(&p("attention"), h, config.heads)?,
            offset: Mlp::new(&p("offset_head"), h, h, 2 * t_f),
            scale: Mlp::new(&p("scale_head"), h, h, 2 * t_f),
            probability: Mlp::new(&p("probability_head"), h, h, 1),
            n_anchors: config.anchors_for(t_f),
            config,
            t_f,
        })
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        for m in [
            &self.compressor,
            &self.position,
            &self.semantic,
            &self.distance,
            &self.fusion,
            &self.offset,
            &self.scale,
            &self.probability,
        ] {
            m.init(store, rng)?;
        }
        Ok(self.attention.init(store, rng)?)
    }

    pub fn index<'a>(&self, scene: &'a Scene) -> Result<ContextIndex<'a>> {
        ContextIndex::new(&scene.elements, self.config.max_radius())
    }

    /// Maps backbone embeddings to the refinement width.
    pub fn compress(&self, g: &mut Graph, embeddings: Var) -> Result<Var> {
        Ok(self.compressor.forward(g, embeddings)?)
    }

    /// Per-element position, semantic, and distance encodings, summed and
    /// fused. Context groups are stacked; the returned ranges locate each.
    pub fn encode_context(&self, g: &mut Graph, groups: &[Vec<ContextElement>]) -> Result<(Var, Vec<Range<usize>>)> {
        let total: usize = groups.iter().map(Vec::len).sum();
        if groups.iter().any(Vec::is_empty) || total == 0 {
            return Err(Error::invalid("encode_context", "empty context"));
        }
        let mut pos = Vec::with_capacity(2 * total);
        let mut sem = Vec::with_capacity(total);
        let mut dist = Vec::with_capacity(total);
        let mut ranges = Vec::with_capacity(groups.len());
        let mut start = 0;
        for group in groups {
            for e in group {
                pos.extend([e.position[0] / POSITION_SCALE, e.position[1] / POSITION_SCALE]);
                sem.push(f64::from(e.semantic) / SEMANTIC_SCALE);
                dist.push(e.dist / POSITION_SCALE);
            }
            ranges.push(start..start + group.len());
            start += group.len();
        }
        let pos = g.constant(Tensor::new(total, 2, pos)?)?;
        let sem = g.constant(Tensor::new(total, 1, sem)?)?;
        let dist = g.constant(Tensor::new(total, 1, dist)?)?;
        let a = self.position.forward(g, pos)?;
        let b = self.semantic.forward(g, sem)?;
        let c = self.distance.forward(g, dist)?;
        let sum = g.add(a, b)?;
        let sum = g.add(sum, c)?;
        Ok((self.fusion.forward(g, sum)?, ranges))
    }

    /// Anchors, radii, and context for every segment of every mode, from
    /// the current trajectories (`K x 2T_f`).
    pub fn plan_iteration(&self, index: &ContextIndex, trajectories: &Tensor, iteration: usize) -> Result<IterationPlan> {
        let trajs = crate::backbone::trajectories_from(trajectories);
        let per_mode = trajs
            .iter()
            .map(|t| select_anchors(t, self.n_anchors))
            .collect::<Result<Vec<_>>>()?;
        let segments = (0..self.n_anchors)
            .map(|j| {
                let anchors: Vec<Anchor> = per_mode.iter().map(|a| a[j].clone()).collect();
                let radii: Vec<f64> = anchors
                    .iter()
                    .map(|a| retrieval_radius(iteration, a.speed, &self.config))
                    .collect();
                let contexts = anchors
                    .iter()
                    .zip(&radii)
                    .map(|(a, r)| index.retrieve(a, *r, self.config.max_context, self.config.encoding))
                    .collect();
                SegmentPlan {
                    anchors,
                    contexts,
                    radii,
                }
            })
            .collect();
        Ok(IterationPlan { iteration, segments })
    }

    /// Starting state from the backbone outputs.
    pub fn initial_state(&self, g: &mut Graph, trajectories: Var, embeddings: Var, logits: Var, probabilities: Var) -> Result<StateVars> {
        let embeddings = self.compress(g, embeddings)?;
        Ok(StateVars {
            trajectories,
            embeddings,
            logits,
            probabilities,
            iteration: 0,
        })
    }

    /// Attends over one segment's context and adds the predicted offsets
    /// to that segment's waypoints.
    pub fn refine_segment(&self, g: &mut Graph, state: &mut StateVars, plan: &SegmentPlan) -> Result<SegmentVars> {
        let (ctx, ranges) = self.encode_context(g, &plan.contexts)?;
        let attended = self
            .attention
            .forward_segmented(g, state.embeddings, ctx, ctx, &ranges)?;
        state.embeddings = g.add(state.embeddings, attended)?;

        let wp = plan.waypoints();
        let (c0, width) = (2 * wp.start, 2 * wp.len());
        let headings: Vec<f64> = match self.config.encoding {
            Encoding::AnchorCentric => plan.anchors.iter().map(|a| a.pose.heading).collect(),
            Encoding::AgentCentric => vec![0.0; plan.anchors.len()],
        };
        let offsets = self.offset.forward(g, state.embeddings)?;
        let offsets = g.slice_cols(offsets, c0, width)?;
        let offsets = g.scale(offsets, POSITION_SCALE)?;
        let offsets = match self.config.encoding {
            Encoding::AnchorCentric => rotate_pairs(g, offsets, &headings)?,
            Encoding::AgentCentric => offsets,
        };
        let offsets = g.pad_cols(offsets, c0, 2 * self.t_f)?;
        state.trajectories = g.add(state.trajectories, offsets)?;

        let raw = self.scale.forward(g, state.embeddings)?;
        let raw = g.slice_cols(raw, c0, width)?;
        let scales = g.softplus(raw)?;
        let scales = g.add_scalar(scales, SCALE_FLOOR)?;
        Ok(SegmentVars {
            scales,
            waypoints: wp,
            headings,
        })
    }

    /// One full pass over all segments followed by probability re-decoding.
    /// Without a plan, one is computed from the current trajectories.
    pub fn refine_iteration(
        &self,
        g: &mut Graph,
        index: &ContextIndex,
        state: &StateVars,
        plan: Option<&IterationPlan>,
    ) -> Result<(StateVars, IterationPlan, Vec<SegmentVars>)> {
        let iteration = state.iteration + 1;
        let plan = match plan {
            Some(p) => p.clone(),
            None => self.plan_iteration(index, g.value(state.trajectories), iteration)?,
        };
        let mut next = *state;
        let segments = plan
            .segments
            .iter()
            .map(|s| self.refine_segment(g, &mut next, s))
            .collect::<Result<Vec<_>>>()?;
        let logits = self.probability.forward(g, next.embeddings)?;
        next.logits = g.transpose(logits)?;
        next.probabilities = g.softmax_rows(next.logits)?;
        next.iteration = iteration;
        Ok((next, plan, segments))
    }
}

/// Rotates interleaved `x, y` pairs of row `r` by `headings[r]`.
pub fn rotate_pairs(g: &mut Graph, x: Var, headings: &[f64]) -> Result<Var> {
    let (rows, cols) = (g.value(x).rows(), g.value(x).cols());
    if rows != headings.len() || cols % 2 != 0 {
        return Err(Error::invalid(
            "rotate_pairs",
            format!("{rows}x{cols} input for {} headings", headings.len()),
        ));
    }
    let swap = Tensor::from_fn(cols, cols, |i, j| if i ^ 1 == j { 1.0 } else { 0.0 });
    let cos = Tensor::from_fn(rows, cols, |r, _| headings[r].cos());
    let sin = Tensor::from_fn(rows, cols, |r, c| {
        let s = headings[r].sin();
        if c % 2 == 0 {
            -s
        } else {
            s
        }
    });
    let swap = g.constant(swap)?;
    let cos = g.constant(cos)?;
    let sin = g.constant(sin)?;
    let swapped = g.matmul(x, swap)?;
    let a = g.mul(x, cos)?;
    let b = g.mul(swapped, sin)?;
    Ok(g.add(a, b)?)
}
