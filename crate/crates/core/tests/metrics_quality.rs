use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajrefine::geometry::Point;
use trajrefine::metrics::{
    histogram_bin, min_ade, min_fde, miss_rate, score_distribution, Summary, HISTOGRAM_BINS, MISS_THRESHOLD,
};
use trajrefine::quality::{adaptive_control, quality_labels, Exit, InferenceConfig, DEGENERATE_RANGE};
use trajrefine::refine::{retrieval_radius, RadiusMode, RefineConfig};

fn labels_oracle(d: &[f64]) -> Vec<f64> {
    let mut sorted = d.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    if hi - lo < 1e-6 {
        return vec![1.0; d.len()];
    }
    d.iter().map(|x| (hi - x) / (hi - lo)).collect()
}

#[test]
fn labels_match_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 0..1000 {
        let len = rng.gen_range(1..=8);
        let mut d: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..20.0)).collect();
        if n % 10 == 0 {
            let base = d[0];
            d.iter_mut().for_each(|x| *x = base + rng.gen_range(0.0..0.5 * DEGENERATE_RANGE));
        }
        let got = quality_labels(&d).unwrap();
        let want = labels_oracle(&d);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
            assert!((0.0..=1.0).contains(g));
        }
    }
}

proptest! {
    #[test]
    fn labels_pin_extremes(d in prop::collection::vec(0.0f64..50.0, 2..10)) {
        let q = quality_labels(&d).unwrap();
        let (imin, imax) = (
            (0..d.len()).min_by(|a, b| d[*a].total_cmp(&d[*b])).unwrap(),
            (0..d.len()).max_by(|a, b| d[*a].total_cmp(&d[*b])).unwrap(),
        );
        prop_assert!(q.iter().all(|x| (0.0..=1.0).contains(x)));
        prop_assert_eq!(q[imin], 1.0);
        if d[imax] - d[imin] >= DEGENERATE_RANGE {
            prop_assert_eq!(q[imax], 0.0);
        }
    }

    #[test]
    fn radius_non_increasing_and_bounded(v in 0.0f64..60.0, linear in any::<bool>()) {
        let cfg = RefineConfig {
            radius: if linear { RadiusMode::Linear } else { RadiusMode::Exp },
            ..Default::default()
        };
        let mut prev = f64::INFINITY;
        for i in 1..12 {
            let r = retrieval_radius(i, v, &cfg);
            prop_assert!(r <= prev && (cfg.r_min..=cfg.r_max).contains(&r));
            prev = r;
        }
    }

    #[test]
    fn controller_never_exceeds_budget(
        trace in prop::collection::vec(0.0f64..1.0, 12),
        threshold in 0.0f64..1.0,
        max in 0usize..10,
    ) {
        let cfg = InferenceConfig { threshold, max_iterations: max };
        let mut calls = Vec::new();
        let out = adaptive_control(&cfg, |i| {
            calls.push(i);
            Ok(trace[i])
        })
        .unwrap();
        prop_assert!(out.iterations <= max);
        prop_assert_eq!(out.iterations == 0, trace[0] > threshold || max == 0);
        prop_assert_eq!(calls, (0..=out.iterations).collect::<Vec<_>>());
        prop_assert_eq!(out.scores.len(), out.iterations + 1);
    }
}

#[test]
fn radius_grid_closed_form() {
    let cfg = RefineConfig::default();
    for i in 1..=6 {
        for v in [0.0, 1.0, 5.0, 10.0, 30.0] {
            let want = (0.8 * v / 2f64.powi(i - 1)).max(2.0).min(10.0);
            assert!((retrieval_radius(i as usize, v, &cfg) - want).abs() < 1e-12);
        }
    }
    assert!((retrieval_radius(1, 10.0, &cfg) - 8.0).abs() < 1e-12);
    let fixed = RefineConfig {
        radius: RadiusMode::Fixed(50.0),
        ..Default::default()
    };
    assert_eq!(retrieval_radius(3, 1.0, &fixed), 50.0);
}

#[test]
fn linear_decay_hits_both_ends() {
    let cfg = RefineConfig {
        radius: RadiusMode::Linear,
        decay_iterations: 5,
        r_min: 0.0,
        r_max: 1e9,
        ..Default::default()
    };
    assert!((retrieval_radius(1, 10.0, &cfg) - 8.0).abs() < 1e-12);
    assert!((retrieval_radius(3, 10.0, &cfg) - 4.25).abs() < 1e-12);
    assert!((retrieval_radius(5, 10.0, &cfg) - 0.5).abs() < 1e-12);
    assert!((retrieval_radius(9, 10.0, &cfg) - 0.5).abs() < 1e-12);
}

#[test]
fn controller_scripted_exits() {
    let cfg = InferenceConfig::default();
    let run = |t: &[f64]| adaptive_control(&cfg, |i| Ok(t[i])).unwrap();
    let a = run(&[0.51]);
    assert_eq!((a.iterations, a.exit), (0, Exit::Skipped));
    let b = run(&[0.5, 0.6, 0.4, 0.9, 0.9, 0.9]);
    assert_eq!((b.iterations, b.exit), (2, Exit::ScoreDropped));
    let c = run(&[0.1, 0.2, 0.2, 0.3, 0.4, 0.45]);
    assert_eq!((c.iterations, c.exit), (5, Exit::MaxIterations));
}

#[test]
fn zero_threshold_with_rising_scores_is_fixed_refinement() {
    let cfg = InferenceConfig {
        threshold: 0.0,
        max_iterations: 4,
    };
    let out = adaptive_control(&cfg, |i| Ok(i as f64 / 10.0)).unwrap();
    assert_eq!((out.iterations, out.exit), (4, Exit::MaxIterations));
}

fn random_set(rng: &mut impl Rng, k: usize, t: usize) -> (Vec<Vec<Point>>, Vec<Point>) {
    let walk = |rng: &mut ChaCha8Rng| {
        let mut p = [0.0, 0.0];
        (0..t)
            .map(|_| {
                p = [p[0] + rng.gen_range(-1.5..1.5), p[1] + rng.gen_range(-1.5..1.5)];
                p
            })
            .collect::<Vec<Point>>()
    };
    let mut inner = ChaCha8Rng::seed_from_u64(rng.gen());
    let preds = (0..k).map(|_| walk(&mut inner)).collect();
    (preds, walk(&mut inner))
}

fn brute(preds: &[Vec<Point>], gt: &[Point]) -> (f64, f64) {
    let mut best = (f64::INFINITY, f64::INFINITY);
    for p in preds {
        let d: Vec<f64> = p
            .iter()
            .zip(gt)
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .collect();
        let fde = d[d.len() - 1];
        if fde < best.1 {
            best = (d.iter().sum::<f64>() / d.len() as f64, fde);
        }
    }
    best
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut pairs = Vec::new();
    for _ in 0..1000 {
        let (preds, gt) = random_set(&mut rng, 6, 30);
        let (ade, fde) = brute(&preds, &gt);
        assert!((min_ade(&preds, &gt).unwrap() - ade).abs() < 1e-12);
        assert!((min_fde(&preds, &gt).unwrap() - fde).abs() < 1e-12);
        pairs.push((ade, fde));
    }
    let s = Summary::from_pairs(&pairs).unwrap();
    let misses = pairs.iter().filter(|p| p.1 > 2.0).count() as f64 / 1000.0;
    assert!((s.miss_rate - misses).abs() < 1e-12);
    assert!(misses > 0.0 && misses < 1.0);
}

#[test]
fn miss_rate_is_strict() {
    assert_eq!(miss_rate(&[MISS_THRESHOLD, 1.0], MISS_THRESHOLD).unwrap(), 0.0);
    assert_eq!(miss_rate(&[2.0 + 1e-12, 1.0], MISS_THRESHOLD).unwrap(), 0.5);
    assert!(miss_rate(&[], 2.0).is_err());
}

#[test]
fn min_ade_uses_the_endpoint_winner() {
    let gt: Vec<Point> = vec![[0.0, 0.0], [0.0, 0.0]];
    let close_end = vec![[5.0, 0.0], [0.1, 0.0]];
    let close_path = vec![[0.0, 0.0], [0.5, 0.0]];
    let preds = vec![close_path, close_end];
    assert!((min_fde(&preds, &gt).unwrap() - 0.1).abs() < 1e-15);
    assert!((min_ade(&preds, &gt).unwrap() - 2.55).abs() < 1e-12);
}

#[test]
fn distribution_counts() {
    let traces = vec![
        Some(vec![0.0, 0.5, 1.0]),
        Some(vec![0.9, 0.95, 0.85]),
        Some(vec![1.0, 0.0, 0.5]),
        Some(vec![0.1, 0.05, 0.0]),
    ];
    let d = score_distribution(&traces).unwrap();
    assert_eq!(d.histograms.len(), 3);
    assert!(d.histograms.iter().all(|h| h.iter().sum::<usize>() == 4));
    assert_eq!(d.histograms[0][0], 1);
    assert_eq!(d.histograms[0][HISTOGRAM_BINS - 1], 2);
    assert_eq!(d.high_fraction, vec![0.5, 0.25, 0.5]);
    assert_eq!((d.initially_low, d.initially_high), (2, 2));
    assert_eq!((d.low_improved, d.high_worsened), (0.5, 1.0));
    assert!(score_distribution(&[Some(vec![0.1]), None]).is_err());
    assert!(score_distribution(&[Some(vec![0.1]), Some(vec![0.1, 0.2])]).is_err());
    assert_eq!(histogram_bin(1.0), HISTOGRAM_BINS - 1);
    assert_eq!(histogram_bin(0.0), 0);
    assert_eq!(histogram_bin(0.3), 3);
}

#[test]
fn constant_traces_do_not_migrate() {
    let traces: Vec<Option<Vec<f64>>> = [0.05, 0.5, 0.95].iter().map(|q| Some(vec![*q; 4])).collect();
    let d = score_distribution(&traces).unwrap();
    assert!(d.histograms.windows(2).all(|w| w[0] == w[1]));
    assert_eq!((d.low_improved, d.high_worsened), (0.0, 0.0));
}

proptest! {
    #[test]
    fn miss_rate_monotone_in_threshold(
        fdes in prop::collection::vec(0.0f64..6.0, 1..40),
        a in 0.01f64..6.0,
        b in 0.01f64..6.0,
    ) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(miss_rate(&fdes, hi).unwrap() <= miss_rate(&fdes, lo).unwrap());
    }
}
