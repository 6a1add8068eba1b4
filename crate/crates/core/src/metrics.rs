//! Displacement metrics and the quality-score distribution analysis.
//!
//! The best mode of a prediction set is the one whose endpoint lies
//! closest to the ground truth; minADE reports that mode's average error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{distance, Point};

pub const MISS_THRESHOLD: f64 = 2.0;
pub const HISTOGRAM_BINS: usize = 10;
/// Labels below this count as initially low in migration stats.
pub const LOW_SCORE: f64 = 0.2;
/// Labels above this count as initially high.
pub const HIGH_SCORE: f64 = 0.8;

fn check(prediction: &[Point], gt: &[Point]) -> Result<()> {
    if prediction.len() != gt.len() || gt.is_empty() {
        return Err(Error::invalid(
            "metrics",
            format!("prediction has {} steps, ground truth {}", prediction.len(), gt.len()),
        ));
    }
    Ok(())
}

pub fn ade(prediction: &[Point], gt: &[Point]) -> Result<f64> {
    check(prediction, gt)?;
    let total: f64 = prediction.iter().zip(gt).map(|(a, b)| distance(*a, *b)).sum();
    Ok(total / gt.len() as f64)
}

pub fn fde(prediction: &[Point], gt: &[Point]) -> Result<f64> {
    check(prediction, gt)?;
    Ok(distance(prediction[prediction.len() - 1], gt[gt.len() - 1]))
}

/// Endpoint errors of every mode.
pub fn mode_fdes(predictions: &[Vec<Point>], gt: &[Point]) -> Result<Vec<f64>> {
    if predictions.is_empty() {
        return Err(Error::invalid("metrics", "no modes"));
    }
    predictions.iter().map(|p| fde(p, gt)).collect()
}

/// Mode with the smallest endpoint error; the first on ties.
pub fn best_mode(predictions: &[Vec<Point>], gt: &[Point]) -> Result<usize> {
    let f = mode_fdes(predictions, gt)?;
    Ok(f.iter()
        .enumerate()
        .fold((0, f64::INFINITY), |b, (i, d)| if *d < b.1 { (i, *d) } else { b })
        .0)
}

pub fn min_ade(predictions: &[Vec<Point>], gt: &[Point]) -> Result<f64> {
    ade(&predictions[best_mode(predictions, gt)?], gt)
}

pub fn min_fde(predictions: &[Vec<Point>], gt: &[Point]) -> Result<f64> {
    Ok(mode_fdes(predictions, gt)?.into_iter().fold(f64::INFINITY, f64::min))
}

/// Fraction of values strictly above `threshold`.
pub fn miss_rate(min_fdes: &[f64], threshold: f64) -> Result<f64> {
    if min_fdes.is_empty() {
        return Err(Error::invalid("miss_rate", "no scenarios"));
    }
    if !(threshold > 0.0) {
        return Err(Error::invalid("miss_rate", format!("threshold {threshold}")));
    }
    let misses = min_fdes.iter().filter(|d| **d > threshold).count();
    Ok(misses as f64 / min_fdes.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub count: usize,
}

impl Summary {
    /// Aggregates per-scenario `(min_ade, min_fde)` pairs in order.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        let fdes: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let n = pairs.len() as f64;
        Ok(Summary {
            min_ade: pairs.iter().map(|p| p.0).sum::<f64>() / n,
            min_fde: fdes.iter().sum::<f64>() / n,
            miss_rate: miss_rate(&fdes, MISS_THRESHOLD)?,
            count: pairs.len(),
        })
    }
}

/// Bin of a value in `[0, 1]` among [`HISTOGRAM_BINS`] equal bins; 1.0
/// falls in the last bin.
pub fn histogram_bin(q: f64) -> usize {
    ((q.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    /// `histograms[i][b]`: scenarios whose iteration-`i` label is in bin `b`.
    pub histograms: Vec<[usize; HISTOGRAM_BINS]>,
    /// Fraction of scenarios with label >= 0.8 per iteration.
    pub high_fraction: Vec<f64>,
    pub initially_low: usize,
    pub initially_high: usize,
    /// Of the initially low, the fraction whose final label is larger.
    pub low_improved: f64,
    /// Of the initially high, the fraction whose final label is smaller.
    pub high_worsened: f64,
}

/// Histograms and migration statistics from per-scenario label traces
/// (`labels[s][i]` for iteration `i`). Traces must share one length.
pub fn score_distribution(labels: &[Option<Vec<f64>>]) -> Result<ScoreDistribution> {
    let traces: Vec<&Vec<f64>> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l.as_ref().ok_or_else(|| {
                Error::invalid("score_distribution", format!("record {i} has no ground-truth labels"))
            })
        })
        .collect::<Result<_>>()?;
    let Some(first) = traces.first() else {
        return Err(Error::invalid("score_distribution", "no records"));
    };
    let n_iter = first.len();
    if n_iter == 0 || traces.iter().any(|t| t.len() != n_iter) {
        return Err(Error::invalid("score_distribution", "label traces differ in length"));
    }
    let mut histograms = vec![[0usize; HISTOGRAM_BINS]; n_iter];
    let mut high = vec![0usize; n_iter];
    for t in &traces {
        for (i, q) in t.iter().enumerate() {
            histograms[i][histogram_bin(*q)] += 1;
            if *q >= HIGH_SCORE {
                high[i] += 1;
            }
        }
    }
    let (mut low_n, mut low_up, mut high_n, mut high_down) = (0, 0, 0, 0);
    for t in &traces {
        let (q0, qf) = (t[0], t[n_iter - 1]);
        if q0 < LOW_SCORE {
            low_n += 1;
            low_up += usize::from(qf > q0);
        }
        if q0 > HIGH_SCORE {
            high_n += 1;
            high_down += usize::from(qf < q0);
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(ScoreDistribution {
        high_fraction: high.iter().map(|h| frac(*h, traces.len())).collect(),
        histograms,
        initially_low: low_n,
        initially_high: high_n,
        low_improved: frac(low_up, low_n),
        high_worsened: frac(high_down, high_n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(offset: [f64; 2], n: usize) -> Vec<Point> {
        (1..=n).map(|k| [k as f64 + offset[0], offset[1]]).collect()
    }

    #[test]
    fn examples() {
        let gt = line([0.0, 0.0], 5);
        let preds = vec![line([1.0, 0.0], 5), gt.clone()];
        assert_eq!(min_ade(&preds, &gt).unwrap(), 0.0);
        assert_eq!(min_fde(&preds, &gt).unwrap(), 0.0);
        assert_eq!(min_ade(&preds[..1], &gt).unwrap(), 1.0);
        let spread: Vec<Vec<Point>> = [3.0, 0.5, 2.0].iter().map(|d| line([0.0, *d], 5)).collect();
        assert_eq!(min_fde(&spread, &gt).unwrap(), 0.5);
        assert!(min_fde(&[line([0.0, 0.0], 4)], &gt).is_err());
    }

    #[test]
    fn miss_rate_boundary() {
        assert_eq!(miss_rate(&[0.0, 0.0], 2.0).unwrap(), 0.0);
        assert_eq!(miss_rate(&[2.5], 2.0).unwrap(), 1.0);
        assert_eq!(miss_rate(&[2.0], 2.0).unwrap(), 0.0);
        assert!(miss_rate(&[], 2.0).is_err());
    }

    #[test]
    fn constant_traces_do_not_migrate() {
        let labels: Vec<Option<Vec<f64>>> = [0.1, 0.5, 0.9, 1.0].iter().map(|q| Some(vec![*q; 4])).collect();
        let d = score_distribution(&labels).unwrap();
        assert!(d.histograms.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(d.histograms[0].iter().sum::<usize>(), 4);
        assert_eq!(d.histograms[0][9], 2);
        assert_eq!((d.low_improved, d.high_worsened), (0.0, 0.0));
        assert!(score_distribution(&[None]).is_err());
    }
}
