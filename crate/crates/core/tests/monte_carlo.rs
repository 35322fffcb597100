//! Seeded statistical checks of estimation, scoring and merging.

mod common;

use std::f64::consts::PI;

use common::{par_map, percentile, run_bundled, SEEDS};
use isgraph::a_graph::build_a_graph;
use isgraph::eval::{compute_ape, ground_truth_correspondence, Alignment};
use isgraph::factor_graph::{information, FactorGraph, FactorKind, Measurement, SolverConfig, VariableKind};
use isgraph::geometry::{wrap_angle, FrameTransform, Pose2};
use isgraph::matcher::{score_candidate, GraphView, MatchCandidate, MatchStatus, MatcherConfig};
use isgraph::merger::merge_candidate;
use isgraph::plans;
use isgraph::s_graph::{simulate, SGraphConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn noisy_traversal_keeps_map_frame_ape_small() {
    let (scenario, plan) = plans::bundled_scenario("asymmetric_five_room").unwrap();
    let seeds: Vec<u64> = (0..SEEDS).collect();
    let rmse = par_map(&seeds, |seed| {
        let mut sim = scenario.sim.clone();
        sim.seed = *seed;
        let (s, offset) = simulate(&plan, &sim, &SGraphConfig::default()).unwrap();
        let inv = offset.inverse();
        let gt: Vec<Pose2> = s.ground_truth().iter().map(|g| inv.compose(g)).collect();
        compute_ape(&s.trajectory(), &gt, Alignment::None).unwrap().rmse
    });
    let p95 = percentile(&rmse, 95.0);
    assert!(p95 <= 0.15, "95th percentile {p95}");
}

#[test]
fn ground_truth_candidate_scores_high_under_sensor_noise() {
    let (scenario, plan) = plans::bundled_scenario("asymmetric_five_room").unwrap();
    let a = build_a_graph(&plan).unwrap();
    let a_view = GraphView::from_graph(&a.graph).unwrap();
    let cfg = MatcherConfig::default();
    let seeds: Vec<u64> = (0..SEEDS).collect();
    let scores = par_map(&seeds, |seed| {
        let mut sim = scenario.sim.clone();
        sim.seed = *seed;
        let (s, _) = simulate(&plan, &sim, &SGraphConfig::default()).unwrap();
        let truth = ground_truth_correspondence(&a, &plan, &s).unwrap();
        let c = MatchCandidate {
            pairs: truth,
            affinity: 0.0,
            transform_hint: FrameTransform::map_to_plan(Pose2::identity()),
        };
        let s_view = GraphView::from_graph(&s.graph).unwrap();
        score_candidate(&c, &a_view, &s_view, &cfg).unwrap().0
    });
    let p5 = percentile(&scores, 5.0);
    assert!(p5 >= 0.8, "5th percentile {p5}");
}

#[test]
fn merged_transform_and_odometry_consistency() {
    let seeds: Vec<u64> = (0..SEEDS).collect();
    let rows = par_map(&seeds, |seed| {
        let out = run_bundled("asymmetric_five_room", *seed);
        assert_eq!(out.report.status, MatchStatus::Matched, "seed {seed}");
        let err = out.report.transform_error.unwrap();
        // Odometry chi2 before the merge: re-simulate the same S-Graph.
        let (scenario, plan) = plans::bundled_scenario("asymmetric_five_room").unwrap();
        let mut sim = scenario.sim.clone();
        sim.seed = *seed;
        let (s, _) = simulate(&plan, &sim, &SGraphConfig::default()).unwrap();
        let before = s.graph.cost_of_kind(FactorKind::Odometry).unwrap();
        let after = out.merged.as_ref().unwrap().graph.cost_of_kind(FactorKind::Odometry).unwrap();
        (err[0], err[1], before, after)
    });
    let t: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let r: Vec<f64> = rows.iter().map(|r| r.1).collect();
    assert!(percentile(&t, 95.0) <= 0.05, "translation {}", percentile(&t, 95.0));
    assert!(percentile(&r, 95.0) <= 0.5f64.to_radians(), "rotation {}", percentile(&r, 95.0));
    let before: f64 = rows.iter().map(|r| r.2).sum();
    let after: f64 = rows.iter().map(|r| r.3).sum();
    assert!(after < 1.1 * before, "odometry chi2 {before} -> {after}");
}

#[test]
fn merge_is_insensitive_to_the_starting_transform() {
    let out = run_bundled("corridor_rooms", 17);
    let merged = out.merged.unwrap();
    let (scenario, plan) = plans::bundled_scenario("corridor_rooms").unwrap();
    let mut sim = scenario.sim.clone();
    sim.seed = 17;
    let (s, _) = simulate(&plan, &sim, &SGraphConfig::default()).unwrap();
    let base = merged.map_to_plan();
    for k in 0..8 {
        let a = k as f64 * PI / 4.0;
        let start = base.compose(&Pose2::new(0.5 * a.cos(), 0.5 * a.sin(), 10f64.to_radians() * a.sin()));
        let options = isgraph::merger::MergeOptions {
            initial_transform: Some(start),
            ..Default::default()
        };
        let other = merge_candidate(&out.agraph, s.clone(), &merged.candidate, &options).unwrap();
        assert!(other.map_to_plan().approx_eq(&base, 1e-6), "{:?}", other.map_to_plan());
    }
}

/// Four rooms of the 2×2 grid, an anchored keyframe at each room center seeing
/// its four inward-facing surfaces with noisy plane offsets.
#[test]
fn four_room_planes_land_within_three_sigma() {
    let plan = plans::bundled_plan("symmetric_grid").unwrap();
    let geoms = plan.room_geometries().unwrap();
    let s_d = 0.02;
    let mut errors = Vec::new();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut noise = |s: f64| {
            let z: f64 = StandardNormal.sample(&mut rng);
            s * z
        };
        let mut g = FactorGraph::new();
        let mut truth = Vec::new();
        let mut planes = std::collections::BTreeMap::new();
        let mut seen_from = Vec::new();
        for (k, geom) in geoms.iter().enumerate() {
            let c = geom.center();
            let pose = Pose2::new(c.x, c.y, 0.4 * k as f64 - 0.6);
            let kf = g.add_variable(VariableKind::Keyframe, &pose.to_array()).unwrap();
            g.add_prior(kf, information::anchor(3)).unwrap();
            let mut room_planes = Vec::new();
            for surface in &geom.surfaces {
                let face = plan.face(surface).unwrap();
                // Inward facing form: normal toward the room, signed offset.
                let n = face.facing;
                let phi = n.y.atan2(n.x);
                let d = n.dot(&face.a);
                let id = *planes.entry(surface.clone()).or_insert_with(|| {
                    let v = g
                        .add_variable(VariableKind::PlaneVar, &[phi + noise(0.05), d + noise(0.1)])
                        .unwrap();
                    truth.push((v, phi, d));
                    v
                });
                room_planes.push(id);
                seen_from.push((id, pose));
                let bphi = wrap_angle(phi - pose.theta);
                let bd = d - n.dot(&pose.translation());
                g.add_factor(
                    Measurement::PosePlane {
                        phi: bphi,
                        dist: bd + noise(s_d),
                    },
                    vec![kf, id],
                    information::plane(),
                )
                .unwrap();
            }
            let v: Vec<_> = room_planes.iter().map(|p| g.value(*p).unwrap().clone()).collect();
            let refs: Vec<_> = v.iter().collect();
            let (center, _) = isgraph::factor_graph::room_center(&refs);
            let room = g.add_variable(VariableKind::Room, center.as_slice()).unwrap();
            let mut vars = vec![room];
            vars.extend(room_planes);
            g.add_factor(Measurement::RoomToWalls, vars, information::structure()).unwrap();
        }
        g.optimize(&SolverConfig::default()).unwrap();
        // Offsets are compared as seen from each observing keyframe: the
        // origin-frame offset of a distant plane also carries the angle error
        // times the lever arm.
        let body = |phi: f64, d: f64, p: &Pose2| d - (phi.cos() * p.x + phi.sin() * p.y);
        for (id, phi, d) in &truth {
            let v = g.value(*id).unwrap();
            for (_, p) in seen_from.iter().filter(|(o, _)| o == id) {
                errors.push(body(v[0], v[1], p) - body(*phi, *d, p));
            }
        }
    }
    let inside = errors.iter().filter(|e| e.abs() <= 3.0 * s_d).count() as f64 / errors.len() as f64;
    let rms = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
    assert!(inside >= 0.99, "{inside} of offsets within 3 sigma");
    assert!(rms <= s_d, "offset rms {rms}");
}
