//! Quality labels, the recurrent score decoder, and the adaptive
//! iteration controller.
//!
//! A quality label says how close an iteration's prediction is to the best
//! one reached across all iterations: 1 at the smallest error, 0 at the
//! largest. The score decoder learns to predict it from the sequence of
//! mode embeddings, so at inference refinement can be skipped when the
//! initial prediction already scores well, and stopped once the score
//! starts falling.

use rand::Rng;
use serde::{Deserialize, Serialize};
use trajrefine_numerics::{Graph, GruCell, Mlp, ParameterStore, Tensor, Var};

use crate::error::{Error, Result};

pub const PREFIX: &str = "score/";

/// Below this spread of errors every label is 1.
pub const DEGENERATE_RANGE: f64 = 1e-6;

/// `(d_max - d_i) / (d_max - d_min)` for each iteration's error `d_i`.
pub fn quality_labels(errors: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::invalid("quality_labels", "no errors"));
    }
    if let Some(d) = errors.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
        return Err(Error::invalid("quality_labels", format!("error {d} is negative or non-finite")));
    }
    let max = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let range = max - min;
    if range < DEGENERATE_RANGE {
        return Ok(vec![1.0; errors.len()]);
    }
    Ok(errors.iter().map(|d| ((max - d) / range).clamp(0.0, 1.0)).collect())
}

/// GRU over embedding snapshots followed by an MLP and a sigmoid.
#[derive(Clone, Debug)]
pub struct ScoreDecoder {
    gru: GruCell,
    head: Mlp,
    hidden: usize,
}

impl ScoreDecoder {
    pub fn new(hidden: usize) -> Self {
        ScoreDecoder {
            gru: GruCell::new(&format!("{PREFIX}gru"), hidden, hidden),
            head: Mlp::new(&format!("{PREFIX}head"), hidden, hidden, 1),
            hidden,
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        self.gru.init(store, rng)?;
        self.head.init(store, rng)?;
        Ok(())
    }

    /// Feeds one `K x H` snapshot; returns the new hidden state and the
    /// `K x 1` scores.
    pub fn step(&self, g: &mut Graph, hidden: Option<Var>, snapshot: Var) -> Result<(Var, Var)> {
        let k = g.value(snapshot).rows();
        let h = match hidden {
            Some(h) => h,
            None => g.constant(Tensor::zeros(k, self.hidden))?,
        };
        let h = self.gru.step(g, h, snapshot)?;
        let logit = self.head.forward(g, h)?;
        Ok((h, g.sigmoid(logit)?))
    }

    /// Scores after the last of `snapshots`, in iteration order.
    pub fn decode(&self, g: &mut Graph, snapshots: &[Var]) -> Result<Var> {
        let mut hidden = None;
        let mut score = None;
        for s in snapshots {
            let (h, q) = self.step(g, hidden, *s)?;
            hidden = Some(h);
            score = Some(q);
        }
        score.ok_or_else(|| Error::invalid("score_decode", "no embedding snapshots"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Skip refinement when the initial score exceeds this.
    pub threshold: f64,
    pub max_iterations: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            threshold: 0.5,
            max_iterations: 5,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "inference.threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exit {
    /// Initial score above threshold.
    Skipped,
    /// Score fell; the iteration that lowered it is returned.
    ScoreDropped,
    MaxIterations,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlOutcome {
    pub iterations: usize,
    /// Scores `q_0 ..= q_iterations`.
    pub scores: Vec<f64>,
    pub exit: Exit,
}

/// Adaptive iteration control. `score_after(i)` must perform iteration `i`
/// (nothing for `i = 0`) and return the resulting scalar score.
pub fn adaptive_control(
    cfg: &InferenceConfig,
    mut score_after: impl FnMut(usize) -> Result<f64>,
) -> Result<ControlOutcome> {
    let q0 = score_after(0)?;
    let mut scores = vec![q0];
    if q0 > cfg.threshold {
        return Ok(ControlOutcome {
            iterations: 0,
            scores,
            exit: Exit::Skipped,
        });
    }
    for i in 1..=cfg.max_iterations {
        let q = score_after(i)?;
        let prev = scores[i - 1];
        scores.push(q);
        if q < prev {
            return Ok(ControlOutcome {
                iterations: i,
                scores,
                exit: Exit::ScoreDropped,
            });
        }
    }
    Ok(ControlOutcome {
        iterations: cfg.max_iterations,
        scores,
        exit: Exit::MaxIterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scripted(trace: &[f64], cfg: &InferenceConfig) -> ControlOutcome {
        adaptive_control(cfg, |i| Ok(trace[i])).unwrap()
    }

    #[test]
    fn label_examples() {
        let q = quality_labels(&[2.0, 1.0, 0.5]).unwrap();
        assert_eq!(q[0], 0.0);
        assert!((q[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(q[2], 1.0);
        assert_eq!(quality_labels(&[1.0, 1.0, 1.0]).unwrap(), vec![1.0; 3]);
        let q = quality_labels(&[0.5, 2.0, 1.0]).unwrap();
        assert_eq!(q[0], 1.0);
        assert_eq!(q[1], 0.0);
        assert!(quality_labels(&[1.0, -0.1]).is_err());
        assert!(quality_labels(&[]).is_err());
    }

    #[test]
    fn three_exits() {
        let cfg = InferenceConfig {
            threshold: 0.5,
            max_iterations: 5,
        };
        let skip = scripted(&[0.8], &cfg);
        assert_eq!((skip.iterations, skip.exit), (0, Exit::Skipped));
        let drop = scripted(&[0.3, 0.6, 0.55, 0.9, 0.9, 0.9], &cfg);
        assert_eq!((drop.iterations, drop.exit), (2, Exit::ScoreDropped));
        let cfg3 = InferenceConfig {
            max_iterations: 3,
            ..cfg
        };
        let max = scripted(&[0.1, 0.2, 0.3, 0.4], &cfg3);
        assert_eq!((max.iterations, max.exit), (3, Exit::MaxIterations));
        assert_eq!(max.scores.len(), 4);
    }

    #[test]
    fn zero_decoder_scores_half() {
        let mut store = ParameterStore::new();
        let dec = ScoreDecoder::new(8);
        dec.init(&mut store, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0)).unwrap();
        store.zero_prefix(PREFIX);
        let mut g = Graph::new(&store);
        let snaps: Vec<Var> = (0..3)
            .map(|i| g.constant(Tensor::filled(6, 8, i as f64)).unwrap())
            .collect();
        let q = dec.decode(&mut g, &snaps).unwrap();
        assert!(g.value(q).data().iter().all(|v| *v == 0.5));
    }
}
