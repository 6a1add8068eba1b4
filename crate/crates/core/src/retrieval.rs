//! Scene elements in the target frame and radius queries over them.
//!
//! Map polyline points and surrounding-agent history waypoints are
//! flattened once per scenario into [`SceneElements`]. A [`GridIndex`]
//! buckets them into square cells; [`naive_within`] is the linear-scan
//! reference the index must agree with.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::{distance, Point, Pose2};
use crate::scenario::Scenario;

/// Semantic code of agent waypoints is `AGENT_SEMANTIC_BASE + agent class`,
/// keeping map and agent codes disjoint.
pub const AGENT_SEMANTIC_BASE: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ElementKind {
    MapPoint { polyline: usize, index: usize },
    AgentWaypoint { agent: usize, step: usize },
}

/// Flattened scene, all positions in one frame (the target frame).
#[derive(Clone, Debug)]
pub struct SceneElements {
    pub positions: Vec<Point>,
    pub semantic: Vec<u8>,
    pub kind: Vec<ElementKind>,
    /// Elements `0..n_map` are map points.
    pub n_map: usize,
}

impl SceneElements {
    /// Collects all map points and agent history waypoints of `scenario`,
    /// expressed in `frame`.
    pub fn collect(scenario: &Scenario, frame: &Pose2) -> Result<Self> {
        if scenario.map.is_empty() {
            return Err(Error::Scenario {
                id: scenario.id.clone(),
                message: "empty map".into(),
            });
        }
        let mut out = SceneElements {
            positions: Vec::new(),
            semantic: Vec::new(),
            kind: Vec::new(),
            n_map: 0,
        };
        for (li, line) in scenario.map.iter().enumerate() {
            for (pi, p) in line.points.iter().enumerate() {
                out.positions.push(frame.to_frame(*p)?);
                out.semantic.push(line.semantic);
                out.kind.push(ElementKind::MapPoint {
                    polyline: li,
                    index: pi,
                });
            }
        }
        out.n_map = out.positions.len();
        for (ai, agent) in scenario.others.iter().enumerate() {
            for (k, p) in agent.history.iter().enumerate() {
                out.positions.push(frame.to_frame(*p)?);
                out.semantic.push(AGENT_SEMANTIC_BASE + agent.semantic);
                out.kind.push(ElementKind::AgentWaypoint { agent: ai, step: k });
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Ids of the `cap` elements nearest to `center`, ordered by
    /// `(distance, id)`.
    pub fn nearest(&self, center: Point, cap: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = self
            .positions
            .iter()
            .enumerate()
            .map(|(i, p)| (distance(*p, center), i))
            .collect();
        sort_hits(&mut all);
        all.truncate(cap);
        all.into_iter().map(|(_, i)| i).collect()
    }

    /// Nearest map point to `center`, ties broken by id.
    pub fn nearest_map_point(&self, center: Point) -> Option<(f64, usize)> {
        (0..self.n_map)
            .map(|i| (distance(self.positions[i], center), i))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
    }
}

pub(crate) fn sort_hits(hits: &mut [(f64, usize)]) {
    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
}

/// All `(distance, id)` with distance <= radius, by linear scan.
pub fn naive_within(elements: &SceneElements, center: Point, radius: f64) -> Vec<(f64, usize)> {
    let mut hits: Vec<(f64, usize)> = elements
        .positions
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let d = distance(*p, center);
            (d <= radius).then_some((d, i))
        })
        .collect();
    sort_hits(&mut hits);
    hits
}

/// Uniform grid over element positions.
#[derive(Clone, Debug)]
pub struct GridIndex {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl GridIndex {
    pub fn build(elements: &SceneElements, cell: f64) -> Result<Self> {
        if !(cell > 0.0 && cell.is_finite()) {
            return Err(Error::invalid("GridIndex::build", format!("cell size {cell}")));
        }
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in elements.positions.iter().enumerate() {
            cells.entry(Self::key(cell, *p)).or_default().push(i);
        }
        Ok(GridIndex { cell, cells })
    }

    fn key(cell: f64, p: Point) -> (i64, i64) {
        ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64)
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    /// All `(distance, id)` with distance <= radius, sorted by
    /// `(distance, id)`.
    pub fn within(&self, elements: &SceneElements, center: Point, radius: f64) -> Vec<(f64, usize)> {
        let (cx, cy) = Self::key(self.cell, center);
        let reach = (radius / self.cell).ceil() as i64;
        let mut hits = Vec::new();
        for ix in cx - reach..=cx + reach {
            for iy in cy - reach..=cy + reach {
                let Some(ids) = self.cells.get(&(ix, iy)) else {
                    continue;
                };
                for &i in ids {
                    let d = distance(elements.positions[i], center);
                    if d <= radius {
                        hits.push((d, i));
                    }
                }
            }
        }
        sort_hits(&mut hits);
        hits
    }
}
