//! Scenario-adaptive trajectory refinement.
//!
//! A backbone predicts several candidate futures for a target agent. A
//! refiner then repeatedly adjusts them segment by segment, using scene
//! context retrieved around anchors placed on each candidate. A learned
//! quality score decides per scenario how many refinement passes to run.

pub mod backbone;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod quality;
pub mod refine;
pub mod retrieval;
pub mod scenario;
pub mod training;

pub use backbone::{PredictionSet, Scene};
pub use error::{Error, Result};
pub use geometry::{Point, Polyline, Pose2};
pub use model::{Model, ModelConfig};
pub use scenario::{AgentTrack, GeneratorConfig, Maneuver, Scenario};
