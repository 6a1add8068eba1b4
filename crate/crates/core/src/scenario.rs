//! Scenario data model, a deterministic synthetic generator, and JSON-lines
//! dataset IO.
//!
//! Generated scenarios place a target vehicle on an approach lane leading
//! into a junction with straight, left, and right exits. The target follows
//! one exit with (optionally) constant acceleration; waypoints carry clipped
//! Gaussian noise. Surrounding agents drive along other lanes. Each scenario
//! is finally moved by a random rigid motion so nothing is axis-aligned.
//!
//! Randomness comes from ChaCha8 seeded with `config.seed`; scenario `i`
//! uses stream `i`, so scenarios can be generated in any order or in
//! parallel with identical results.

use std::collections::HashSet;
use std::f64::consts::{FRAC_PI_2, PI};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{distance, Point, Polyline, Pose2};

/// Sampling interval in seconds (10 Hz).
pub const DT: f64 = 0.1;

pub const SEMANTIC_LANE: u8 = 0;
pub const SEMANTIC_CROSSWALK: u8 = 1;

pub const AGENT_VEHICLE: u8 = 0;
pub const AGENT_PEDESTRIAN: u8 = 1;
pub const AGENT_CYCLIST: u8 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub history: Vec<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub future: Option<Vec<Point>>,
    pub semantic: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub t_h: usize,
    pub t_f: usize,
    pub target: AgentTrack,
    pub others: Vec<AgentTrack>,
    pub map: Vec<Polyline>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Maneuver {
    Straight,
    Left,
    Right,
}

impl Maneuver {
    pub fn as_str(self) -> &'static str {
        match self {
            Maneuver::Straight => "straight",
            Maneuver::Left => "left",
            Maneuver::Right => "right",
        }
    }

    pub fn is_turn(self) -> bool {
        self != Maneuver::Straight
    }
}

impl Scenario {
    /// Maneuver label encoded as the id suffix by the generator.
    pub fn maneuver(&self) -> Option<Maneuver> {
        match self.id.rsplit('-').next()? {
            "straight" => Some(Maneuver::Straight),
            "left" => Some(Maneuver::Left),
            "right" => Some(Maneuver::Right),
            _ => None,
        }
    }

    pub fn ground_truth(&self) -> Option<&[Point]> {
        self.target.future.as_deref()
    }

    /// Checks the structural invariants. Errors name the offending field.
    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        let fail = |field: &str, msg: String| Err((field.to_string(), msg));
        if self.t_h < 2 {
            return fail("t_h", format!("must be >= 2, got {}", self.t_h));
        }
        if self.t_f < 1 {
            return fail("t_f", "must be >= 1".into());
        }
        check_track(&self.target, self.t_h, self.t_f, "target")?;
        for (i, o) in self.others.iter().enumerate() {
            check_track(o, self.t_h, self.t_f, &format!("others[{i}]"))?;
        }
        if self.map.is_empty() {
            return fail("map", "must contain at least one polyline".into());
        }
        for (i, line) in self.map.iter().enumerate() {
            if let Err(e) = line.validate() {
                return fail(&format!("map[{i}].points"), e.to_string());
            }
        }
        Ok(())
    }

    /// Applies a rigid motion to every coordinate in the scenario.
    pub fn transformed(&self, rigid: &Pose2) -> Scenario {
        let tp = |p: &Point| rigid.from_frame_unchecked(*p);
        let track = |t: &AgentTrack| AgentTrack {
            history: t.history.iter().map(tp).collect(),
            future: t.future.as_ref().map(|f| f.iter().map(tp).collect()),
            semantic: t.semantic,
        };
        Scenario {
            id: self.id.clone(),
            t_h: self.t_h,
            t_f: self.t_f,
            target: track(&self.target),
            others: self.others.iter().map(track).collect(),
            map: self
                .map
                .iter()
                .map(|l| Polyline {
                    points: l.points.iter().map(tp).collect(),
                    semantic: l.semantic,
                })
                .collect(),
        }
    }
}

fn check_track(
    t: &AgentTrack,
    t_h: usize,
    t_f: usize,
    name: &str,
) -> std::result::Result<(), (String, String)> {
    if t.history.len() != t_h {
        return Err((
            format!("{name}.history"),
            format!("expected {t_h} waypoints, got {}", t.history.len()),
        ));
    }
    if let Some(f) = &t.future {
        if f.len() != t_f {
            return Err((
                format!("{name}.future"),
                format!("expected {t_f} waypoints, got {}", f.len()),
            ));
        }
    }
    let all = t.history.iter().chain(t.future.iter().flatten());
    if all.clone().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err((format!("{name}"), "non-finite waypoint".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_scenarios: usize,
    pub t_h: usize,
    pub t_f: usize,
    /// Extra lanes besides the junction's own lanes, inclusive range.
    pub lane_count: [usize; 2],
    /// Lane length in meters.
    pub lane_length: [f64; 2],
    /// Initial target speed in m/s.
    pub speed: [f64; 2],
    /// Target acceleration in m/s^2.
    pub accel: [f64; 2],
    pub turn_probability: f64,
    /// Per-coordinate waypoint noise, clipped at three standard deviations.
    pub noise_std: f64,
    pub agent_count: [usize; 2],
    /// Map polyline resampling distance in meters.
    pub point_spacing: f64,
    /// Turn radius range in meters.
    pub turn_radius: [f64; 2],
    /// Apply a random global rigid motion to every scenario.
    pub random_placement: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 7,
            n_scenarios: 1000,
            t_h: 20,
            t_f: 30,
            lane_count: [1, 3],
            lane_length: [40.0, 80.0],
            speed: [4.0, 14.0],
            accel: [-1.0, 1.0],
            turn_probability: 0.5,
            noise_std: 0.05,
            agent_count: [2, 4],
            point_spacing: 2.0,
            turn_radius: [8.0, 20.0],
            random_placement: true,
        }
    }
}

impl GeneratorConfig {
    /// Horizon preset resembling the longer benchmark: 5 s history, 6 s future.
    pub fn long_horizon() -> Self {
        GeneratorConfig {
            t_h: 50,
            t_f: 60,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.t_h < 2 {
            return bad(format!("generator.t_h must be >= 2, got {}", self.t_h));
        }
        if self.t_f < 1 {
            return bad("generator.t_f must be >= 1".into());
        }
        for (name, r) in [
            ("lane_length", self.lane_length),
            ("speed", self.speed),
            ("accel", self.accel),
            ("turn_radius", self.turn_radius),
        ] {
            if !(r[0].is_finite() && r[1].is_finite()) || r[0] > r[1] {
                return bad(format!("generator.{name} range {r:?} is empty"));
            }
        }
        for (name, r) in [("lane_count", self.lane_count), ("agent_count", self.agent_count)] {
            if r[0] > r[1] {
                return bad(format!("generator.{name} range {r:?} is empty"));
            }
        }
        if self.speed[0] <= 0.0 {
            return bad("generator.speed must be positive".into());
        }
        if self.lane_length[0] <= 0.0 || self.turn_radius[0] <= 0.0 {
            return bad("generator lane_length and turn_radius must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.turn_probability) {
            return bad(format!(
                "generator.turn_probability {} outside [0, 1]",
                self.turn_probability
            ));
        }
        if !(self.noise_std >= 0.0) {
            return bad("generator.noise_std must be >= 0".into());
        }
        if !(self.point_spacing > 0.0) {
            return bad("generator.point_spacing must be > 0".into());
        }
        Ok(())
    }

    /// Upper bound on the target's per-step displacement.
    pub fn max_step_displacement(&self) -> f64 {
        let a = self.accel[0].abs().max(self.accel[1].abs());
        let horizon = self.t_h.max(self.t_f) as f64 * DT;
        let v_max = self.speed[1] + a * horizon;
        v_max * DT + 2.0 * 3.0 * self.noise_std * 2f64.sqrt()
    }
}

/// A path built from straight pieces and circular arcs, parameterized by
/// arc length. Lengths before the start extend the first piece backwards.
#[derive(Clone, Debug)]
struct Route {
    pieces: Vec<Piece>,
}

#[derive(Clone, Copy, Debug)]
struct Piece {
    start: Pose2,
    length: f64,
    // signed curvature, 0 for straight
    curvature: f64,
}

impl Piece {
    fn at(&self, s: f64) -> Pose2 {
        let h = self.start.heading;
        if self.curvature == 0.0 {
            Pose2 {
                x: self.start.x + s * h.cos(),
                y: self.start.y + s * h.sin(),
                heading: h,
            }
        } else {
            let k = self.curvature;
            let h1 = h + k * s;
            Pose2 {
                x: self.start.x + (h1.sin() - h.sin()) / k,
                y: self.start.y - (h1.cos() - h.cos()) / k,
                heading: h1,
            }
        }
    }

    fn end(&self) -> Pose2 {
        self.at(self.length)
    }
}

impl Route {
    fn new() -> Self {
        Route { pieces: Vec::new() }
    }

    fn cursor(&self, origin: Pose2) -> Pose2 {
        self.pieces.last().map_or(origin, Piece::end)
    }

    fn push(&mut self, origin: Pose2, length: f64, curvature: f64) {
        let start = self.cursor(origin);
        self.pieces.push(Piece {
            start,
            length,
            curvature,
        });
    }

    fn length(&self) -> f64 {
        self.pieces.iter().map(|p| p.length).sum()
    }

    fn at(&self, mut s: f64) -> Point {
        if s <= 0.0 {
            return self.pieces[0].at(s).position();
        }
        for p in &self.pieces {
            if s <= p.length {
                return p.at(s).position();
            }
            s -= p.length;
        }
        let last = self.pieces.last().expect("non-empty path");
        let end = last.end();
        [end.x + s * end.heading.cos(), end.y + s * end.heading.sin()]
    }

    fn sample(&self, from: f64, to: f64, spacing: f64) -> Vec<Point> {
        let n = ((to - from) / spacing).ceil().max(1.0) as usize;
        (0..=n)
            .map(|i| self.at(from + (to - from) * i as f64 / n as f64))
            .collect()
    }
}

/// Arc length travelled after `t` seconds from speed `v0` under constant
/// acceleration `a`, with speed floored at zero.
fn travelled(v0: f64, a: f64, t: f64) -> f64 {
    if a == 0.0 {
        return v0 * t;
    }
    let stop = -v0 / a;
    let tt = if a < 0.0 { t.min(stop) } else { t.max(stop) };
    v0 * tt + 0.5 * a * tt * tt
}

struct Road {
    path: Route,
    length: f64,
}

fn straight_road(start: Pose2, length: f64) -> Road {
    let mut path = Route::new();
    path.push(start, length, 0.0);
    Road { path, length }
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

fn uniform_usize(rng: &mut impl Rng, r: [usize; 2]) -> usize {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

fn noisy(points: Vec<Point>, noise: Option<&Normal<f64>>, clip: f64, rng: &mut impl Rng) -> Vec<Point> {
    match noise {
        None => points,
        Some(n) => points
            .into_iter()
            .map(|p| {
                let dx: f64 = n.sample(rng);
                let dy: f64 = n.sample(rng);
                [p[0] + dx.clamp(-clip, clip), p[1] + dy.clamp(-clip, clip)]
            })
            .collect(),
    }
}

/// Generates one scenario. Deterministic in `(config, index)`.
pub fn generate_one(config: &GeneratorConfig, index: usize) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let (t_h, t_f) = (config.t_h, config.t_f);

    let v0 = uniform(&mut rng, config.speed);
    let accel = uniform(&mut rng, config.accel);
    let future_len = travelled(v0, accel, t_f as f64 * DT);
    let history_len = -travelled(v0, accel, -((t_h - 1) as f64) * DT);

    let maneuver = if rng.gen::<f64>() < config.turn_probability {
        if rng.gen::<bool>() {
            Maneuver::Left
        } else {
            Maneuver::Right
        }
    } else {
        Maneuver::Straight
    };

    // Junction entry somewhere along the first part of the future.
    let junction = (future_len * uniform(&mut rng, [0.15, 0.6])).max(1.0);
    let approach_back = uniform(&mut rng, config.lane_length).max(history_len + 5.0);
    let exit_len = uniform(&mut rng, config.lane_length).max(future_len - junction + 10.0);
    let radius = uniform(&mut rng, config.turn_radius);
    let angle = uniform(&mut rng, [PI / 3.0, 2.0 * PI / 3.0]);

    let entry = Pose2 {
        x: junction,
        y: 0.0,
        heading: 0.0,
    };
    let approach = {
        let start = Pose2 {
            x: -approach_back,
            y: 0.0,
            heading: 0.0,
        };
        straight_road(start, approach_back + junction)
    };
    let exit_for = |sign: f64| -> Road {
        let mut path = Route::new();
        path.push(entry, radius * angle, sign / radius);
        path.push(entry, exit_len, 0.0);
        let length = path.length();
        Road { path, length }
    };
    let straight_exit = straight_road(entry, exit_len);
    let left_exit = exit_for(1.0);
    let right_exit = exit_for(-1.0);

    let chosen = match maneuver {
        Maneuver::Straight => &straight_exit,
        Maneuver::Left => &left_exit,
        Maneuver::Right => &right_exit,
    };
    // Full target route: approach up to the junction, then the exit.
    let route = |s: f64| -> Point {
        if s <= junction {
            approach.path.at(s + approach_back)
        } else {
            chosen.path.at(s - junction)
        }
    };

    let clip = 3.0 * config.noise_std;
    let normal = if config.noise_std > 0.0 {
        Some(Normal::new(0.0, config.noise_std).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };

    let target_history: Vec<Point> = (0..t_h)
        .map(|k| route(travelled(v0, accel, -((t_h - 1 - k) as f64) * DT)))
        .collect();
    let target_future: Vec<Point> = (1..=t_f)
        .map(|k| route(travelled(v0, accel, k as f64 * DT)))
        .collect();
    let target = AgentTrack {
        history: noisy(target_history, normal.as_ref(), clip, &mut rng),
        future: Some(noisy(target_future, normal.as_ref(), clip, &mut rng)),
        semantic: AGENT_VEHICLE,
    };

    let spacing = config.point_spacing;
    let mut roads: Vec<(Road, u8)> = vec![
        (approach, SEMANTIC_LANE),
        (straight_exit, SEMANTIC_LANE),
        (left_exit, SEMANTIC_LANE),
        (right_exit, SEMANTIC_LANE),
    ];

    // Extra lanes: parallel lanes on either side and a cross street.
    let extra = uniform_usize(&mut rng, config.lane_count);
    for j in 0..extra {
        let len = uniform(&mut rng, config.lane_length);
        let road = match j % 4 {
            0 => straight_road(
                Pose2 { x: -approach_back, y: 3.5, heading: 0.0 },
                approach_back + junction + len,
            ),
            1 => straight_road(
                Pose2 { x: junction + len, y: -3.5, heading: PI },
                approach_back + junction + len,
            ),
            2 => straight_road(
                Pose2 { x: junction + radius, y: -len, heading: FRAC_PI_2 },
                2.0 * len,
            ),
            _ => straight_road(
                Pose2 { x: junction + radius + 3.5, y: len, heading: -FRAC_PI_2 },
                2.0 * len,
            ),
        };
        roads.push((road, SEMANTIC_LANE));
    }
    let crosswalk = straight_road(
        Pose2 { x: junction - 3.0, y: -6.0, heading: FRAC_PI_2 },
        12.0,
    );

    let mut map = Vec::with_capacity(roads.len() + 1);
    for (road, sem) in &roads {
        map.push(Polyline::new(road.path.sample(0.0, road.length, spacing), *sem)?);
    }
    map.push(Polyline::new(crosswalk.path.sample(0.0, 12.0, spacing), SEMANTIC_CROSSWALK)?);

    let n_agents = uniform_usize(&mut rng, config.agent_count);
    let mut others = Vec::with_capacity(n_agents);
    for _ in 0..n_agents {
        let pedestrian = rng.gen::<f64>() < 0.15;
        let (road, semantic, speed) = if pedestrian {
            (&crosswalk, AGENT_PEDESTRIAN, uniform(&mut rng, [0.8, 1.8]))
        } else {
            let idx = rng.gen_range(0..roads.len());
            let class = if rng.gen::<f64>() < 0.1 { AGENT_CYCLIST } else { AGENT_VEHICLE };
            (&roads[idx].0, class, uniform(&mut rng, config.speed))
        };
        let len = if pedestrian { 12.0 } else { road.length };
        let s0 = rng.gen_range(0.0..len.max(1e-3));
        let hist: Vec<Point> = (0..t_h)
            .map(|k| road.path.at(s0 - (t_h - 1 - k) as f64 * DT * speed))
            .collect();
        others.push(AgentTrack {
            history: noisy(hist, normal.as_ref(), clip, &mut rng),
            future: None,
            semantic,
        });
    }

    let mut scenario = Scenario {
        id: format!("{}-{index:06}-{}", config.seed, maneuver.as_str()),
        t_h,
        t_f,
        target,
        others,
        map,
    };
    if config.random_placement {
        let rigid = Pose2::new(
            rng.gen_range(-500.0..500.0),
            rng.gen_range(-500.0..500.0),
            rng.gen_range(-PI..PI),
        )?;
        scenario = scenario.transformed(&rigid);
    }
    Ok(scenario)
}

/// Generates `config.n_scenarios` scenarios; bit-identical across runs.
pub fn generate(config: &GeneratorConfig) -> Result<Vec<Scenario>> {
    config.validate()?;
    (0..config.n_scenarios)
        .into_par_iter()
        .map(|i| generate_one(config, i))
        .collect()
}

pub fn to_jsonl(scenarios: &[Scenario]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in scenarios {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_dataset(scenarios: &[Scenario], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in scenarios {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Scenario>> {
    parse_dataset(BufReader::new(std::fs::File::open(path)?))
}

/// Parses JSON-lines. Blank lines are skipped; all records must share one
/// horizon and have unique ids.
pub fn parse_dataset(reader: impl BufRead) -> Result<Vec<Scenario>> {
    let mut out: Vec<Scenario> = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scenario: Scenario = serde_json::from_str(&line).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .unwrap_or("<record>")
                .to_string();
            Error::Dataset {
                line: line_no,
                field,
                message: msg,
            }
        })?;
        scenario.validate().map_err(|(field, message)| Error::Dataset {
            line: line_no,
            field,
            message,
        })?;
        if let Some(first) = out.first() {
            if (first.t_h, first.t_f) != (scenario.t_h, scenario.t_f) {
                return Err(Error::Dataset {
                    line: line_no,
                    field: "t_h/t_f".into(),
                    message: format!(
                        "horizon ({}, {}) differs from first record ({}, {})",
                        scenario.t_h, scenario.t_f, first.t_h, first.t_f
                    ),
                });
            }
        }
        if !ids.insert(scenario.id.clone()) {
            return Err(Error::Dataset {
                line: line_no,
                field: "id".into(),
                message: format!("duplicate id `{}`", scenario.id),
            });
        }
        out.push(scenario);
    }
    Ok(out)
}

/// Largest consecutive-step displacement over history and future.
pub fn max_step(track: &AgentTrack) -> f64 {
    let pts: Vec<Point> = track
        .history
        .iter()
        .chain(track.future.iter().flatten())
        .copied()
        .collect();
    pts.windows(2).map(|w| distance(w[0], w[1])).fold(0.0, f64::max)
}
