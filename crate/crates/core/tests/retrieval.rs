use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajrefine::backbone::Scene;
use trajrefine::geometry::{Polyline, Pose2};
use trajrefine::refine::{select_anchors, Anchor, ContextIndex, Encoding};
use trajrefine::retrieval::{naive_within, ElementKind, GridIndex, SceneElements};
use trajrefine::scenario::{generate, AgentTrack, GeneratorConfig, Scenario};

fn anchor_at(x: f64, y: f64, heading: f64) -> Anchor {
    Anchor {
        pose: Pose2::new(x, y, heading).unwrap(),
        speed: 5.0,
        segment: (0, 1),
    }
}

fn toy() -> Scenario {
    Scenario {
        id: "toy".into(),
        t_h: 2,
        t_f: 1,
        target: AgentTrack {
            history: vec![[-1.0, 0.0], [0.0, 0.0]],
            future: Some(vec![[1.0, 0.0]]),
            semantic: 0,
        },
        others: vec![AgentTrack {
            history: vec![[0.0, 30.0], [0.0, 31.0]],
            future: None,
            semantic: 1,
        }],
        map: vec![
            Polyline::new(vec![[5.0, 0.0], [9.0, 0.0]], 0).unwrap(),
            Polyline::new(vec![[0.0, 0.0], [0.0, -20.0]], 1).unwrap(),
        ],
    }
}

#[test]
fn radius_threshold_semantics() {
    let scene = Scene::new(&toy()).unwrap();
    let index = ContextIndex::new(&scene.elements, 10.0).unwrap();
    let got = index.retrieve(&anchor_at(0.0, 0.0, 0.0), 8.0, 128, Encoding::AnchorCentric);
    let kinds: Vec<ElementKind> = got.iter().map(|e| e.kind).collect();
    assert!(kinds.contains(&ElementKind::MapPoint { polyline: 0, index: 0 }));
    assert!(!kinds.contains(&ElementKind::MapPoint { polyline: 0, index: 1 }));
    for e in &got {
        assert!(e.dist <= 8.0);
        assert!((e.dist - e.position[0].hypot(e.position[1])).abs() < 1e-9);
    }
}

#[test]
fn coincident_anchor_sees_origin() {
    let scene = Scene::new(&toy()).unwrap();
    let index = ContextIndex::new(&scene.elements, 10.0).unwrap();
    let got = index.retrieve(&anchor_at(5.0, 0.0, 1.0), 2.0, 128, Encoding::AnchorCentric);
    assert_eq!(got[0].dist, 0.0);
    assert_eq!(got[0].position, [0.0, 0.0]);
}

#[test]
fn empty_neighborhood_falls_back_to_nearest_map_point() {
    let scene = Scene::new(&toy()).unwrap();
    let index = ContextIndex::new(&scene.elements, 10.0).unwrap();
    // the agent waypoint at (0, 30) is closer but only map points qualify
    let got = index.retrieve(&anchor_at(0.0, 29.0, 0.0), 0.5, 128, Encoding::AnchorCentric);
    assert_eq!(got.len(), 1);
    assert!(matches!(got[0].kind, ElementKind::MapPoint { polyline: 1, index: 0 }));
    assert_eq!(got[0].dist, 29.0);
}

#[test]
fn cap_keeps_nearest() {
    let scenarios = generate(&GeneratorConfig {
        n_scenarios: 5,
        ..Default::default()
    })
    .unwrap();
    for s in &scenarios {
        let scene = Scene::new(s).unwrap();
        let index = ContextIndex::new(&scene.elements, 10.0).unwrap();
        let a = anchor_at(0.0, 0.0, 0.0);
        let all = index.retrieve(&a, 10.0, usize::MAX, Encoding::AnchorCentric);
        let capped = index.retrieve(&a, 10.0, 7, Encoding::AnchorCentric);
        assert_eq!(capped.len(), all.len().min(7));
        assert_eq!(&all[..capped.len()], &capped[..]);
    }
}

#[test]
fn agent_centric_keeps_target_frame() {
    let scene = Scene::new(&toy()).unwrap();
    let index = ContextIndex::new(&scene.elements, 10.0).unwrap();
    let a = anchor_at(3.0, 0.0, 0.7);
    let anchored = index.retrieve(&a, 4.0, 128, Encoding::AnchorCentric);
    let agent = index.retrieve(&a, 4.0, 128, Encoding::AgentCentric);
    assert_eq!(anchored.len(), agent.len());
    for (x, y) in anchored.iter().zip(&agent) {
        assert_eq!(x.id, y.id);
        assert_eq!(y.position, scene.elements.positions[y.id]);
        let back = a.pose.from_frame(x.position).unwrap();
        assert!((back[0] - y.position[0]).abs() < 1e-12 && (back[1] - y.position[1]).abs() < 1e-12);
    }
}

/// Spatial index against a linear scan: 200 scenarios x 4 anchors x 3 radii.
#[test]
fn grid_retrieval_equals_linear_scan() {
    let scenarios = generate(&GeneratorConfig {
        n_scenarios: 200,
        seed: 31,
        ..Default::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for s in &scenarios {
        let scene = Scene::new(s).unwrap();
        let index = ContextIndex::new(&scene.elements, 10.0).unwrap();
        let future = scene.future.as_ref().unwrap();
        let mut anchors = select_anchors(future, 4).unwrap();
        for a in &mut anchors {
            a.pose.x += rng.gen_range(-3.0..3.0);
            a.pose.y += rng.gen_range(-3.0..3.0);
        }
        for a in &anchors {
            for r in [2.0, 5.0, 10.0] {
                let grid: BTreeSet<usize> = index
                    .retrieve(a, r, usize::MAX, Encoding::AnchorCentric)
                    .iter()
                    .map(|e| e.id)
                    .collect();
                let scan: BTreeSet<usize> = index
                    .retrieve_naive(a, r, usize::MAX, Encoding::AnchorCentric)
                    .iter()
                    .map(|e| e.id)
                    .collect();
                assert_eq!(grid, scan, "scenario {} radius {r}", s.id);
                let capped = index.retrieve(a, r, 16, Encoding::AnchorCentric);
                let capped_scan = index.retrieve_naive(a, r, 16, Encoding::AnchorCentric);
                assert_eq!(capped, capped_scan);
            }
        }
    }
}

#[test]
fn grid_handles_queries_far_outside_the_scene() {
    let s = &generate(&GeneratorConfig {
        n_scenarios: 1,
        ..Default::default()
    })
    .unwrap()[0];
    let el = SceneElements::collect(s, &Pose2::identity()).unwrap();
    let grid = GridIndex::build(&el, 10.0).unwrap();
    for c in [[1e4, -1e4], [-7.5, 3.2]] {
        assert_eq!(grid.within(&el, c, 10.0), naive_within(&el, c, 10.0));
    }
}
