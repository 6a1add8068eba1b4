//! Planar rigid transforms and polylines.
//!
//! Headings are counter-clockwise from +x, normalized into `(-pi, pi]`.
//! A frame's heading maps to the local +x axis.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(x, y)` in meters.
pub type Point = [f64; 2];

pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

pub fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn finite(p: Point) -> Result<()> {
    if p[0].is_finite() && p[1].is_finite() {
        Ok(())
    } else {
        Err(Error::Geometry(format!("non-finite point {p:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, heading: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && heading.is_finite()) {
            return Err(Error::Geometry(format!(
                "non-finite pose ({x}, {y}, {heading})"
            )));
        }
        Ok(Pose2 {
            x,
            y,
            heading: normalize_angle(heading),
        })
    }

    pub fn identity() -> Self {
        Pose2 {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
        }
    }

    pub fn position(&self) -> Point {
        [self.x, self.y]
    }

    /// Expresses a point given in the parent frame in this frame.
    pub fn to_frame(&self, p: Point) -> Result<Point> {
        finite(p)?;
        Ok(self.to_frame_unchecked(p))
    }

    /// Maps a point given in this frame back to the parent frame.
    pub fn from_frame(&self, p: Point) -> Result<Point> {
        finite(p)?;
        Ok(self.from_frame_unchecked(p))
    }

    #[inline]
    pub(crate) fn to_frame_unchecked(&self, p: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    #[inline]
    pub(crate) fn from_frame_unchecked(&self, p: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        [c * p[0] - s * p[1] + self.x, s * p[0] + c * p[1] + self.y]
    }

    /// Applies this rigid motion to `pose`.
    pub fn transform_pose(&self, pose: &Pose2) -> Result<Pose2> {
        let p = self.from_frame([pose.x, pose.y])?;
        Pose2::new(p[0], p[1], self.heading + pose.heading)
    }

    /// Expresses `pose` (given in the parent frame) in this frame.
    pub fn relative_pose(&self, pose: &Pose2) -> Result<Pose2> {
        let p = self.to_frame([pose.x, pose.y])?;
        Pose2::new(p[0], p[1], pose.heading - self.heading)
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.heading.sin_cos();
        Pose2 {
            x: -(c * self.x + s * self.y),
            y: -(-s * self.x + c * self.y),
            heading: normalize_angle(-self.heading),
        }
    }
}

/// Heading of the displacement `from -> to`, or `None` when the two points
/// are closer than `min_len`.
pub fn displacement_heading(from: Point, to: Point, min_len: f64) -> Option<f64> {
    let (dx, dy) = (to[0] - from[0], to[1] - from[1]);
    if dx.hypot(dy) < min_len {
        None
    } else {
        Some(dy.atan2(dx))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<Point>,
    pub semantic: u8,
}

impl Polyline {
    pub fn new(points: Vec<Point>, semantic: u8) -> Result<Self> {
        let line = Polyline { points, semantic };
        line.validate()?;
        Ok(line)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::Geometry(format!(
                "polyline needs at least 2 points, got {}",
                self.points.len()
            )));
        }
        for p in &self.points {
            finite(*p)?;
        }
        for (i, w) in self.points.windows(2).enumerate() {
            if distance(w[0], w[1]) <= 1e-9 {
                return Err(Error::Geometry(format!(
                    "polyline points {i} and {} coincide",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| distance(w[0], w[1])).sum()
    }
}
