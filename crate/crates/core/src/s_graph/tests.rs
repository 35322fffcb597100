use super::*;
use crate::a_graph::{FaceSide, FloorPlan};
use crate::factor_graph::FactorKind;
use crate::plans;

fn surface(name: &str) -> SurfaceRef {
    SurfaceRef {
        wall: name.into(),
        side: FaceSide::Left,
    }
}

/// Body-frame observation of the map-frame line `normal(angle)·p = offset`
/// between `a` and `b`, seen from `pose`.
fn observe(pose: &Pose2, angle: f64, offset: f64, a: [f64; 2], b: [f64; 2], name: &str) -> Observation {
    let n = Point2::new(angle.cos(), angle.sin());
    let inv = pose.inverse();
    let ends = [a, b].map(|p| {
        let q = inv.transform_point(&Point2::new(p[0], p[1]));
        [q.x, q.y]
    });
    Observation {
        surface: surface(name),
        phi: wrap_angle(angle - pose.theta),
        dist: offset - n.dot(&pose.translation()),
        extent: ends,
    }
}

/// The four inward-facing surfaces of the rectangle `[x0, x1] × [y0, y1]`.
fn box_observations(pose: &Pose2, x0: f64, x1: f64, y0: f64, y1: f64) -> Vec<Observation> {
    vec![
        observe(pose, 0.0, x0, [x0, y0], [x0, y1], "west"),
        observe(pose, PI, -x1, [x1, y0], [x1, y1], "east"),
        observe(pose, FRAC_PI_2, y0, [x0, y0], [x1, y0], "south"),
        observe(pose, -FRAC_PI_2, -y1, [x0, y1], [x1, y1], "north"),
    ]
}

fn step(index: usize, motion: Motion, observations: Vec<Observation>) -> StepOutput {
    StepOutput {
        index,
        motion,
        observations,
        ground_truth: Pose2::identity(),
    }
}

#[test]
fn first_step_anchors_keyframe_and_creates_planes() {
    let mut s = SGraph::new(SGraphConfig::default());
    let pose = Pose2::new(2.5, 2.0, 0.0);
    s.update(&step(0, Motion::Start(pose), box_observations(&pose, 0.0, 5.0, 0.0, 4.0)))
        .unwrap();
    assert_eq!(s.keyframes().len(), 1);
    assert_eq!(s.graph.count_factors(FactorKind::Prior), 1);
    assert_eq!(s.planes().len(), 4);
    assert!(s.keyframe_pose(0).approx_eq(&pose, 1e-9));
}

#[test]
fn detects_room_at_center_and_is_idempotent() {
    let mut s = SGraph::new(SGraphConfig::default());
    let pose = Pose2::new(1.0, 1.0, 0.3);
    s.update(&step(0, Motion::Start(pose), box_observations(&pose, 0.0, 5.0, 0.0, 4.0)))
        .unwrap();
    assert_eq!(s.rooms().len(), 1);
    let room = *s.rooms().keys().next().unwrap();
    let c = s.graph.value(room).unwrap();
    // Midpoint of the plane offsets per axis.
    assert!((c[0] - 2.5).abs() < 1e-9 && (c[1] - 2.0).abs() < 1e-9);
    assert!(s.detect_rooms().unwrap().is_empty());
    assert_eq!(s.rooms().len(), 1);
    assert_eq!(s.graph.count_factors(FactorKind::RoomToWalls), 1);
    let floor = s.floor().unwrap();
    assert_eq!(s.graph.factors_of(floor).count(), 1);
}

#[test]
fn corridor_pair_becomes_two_wall_room_and_is_superseded() {
    let mut s = SGraph::new(SGraphConfig::default());
    let walls = |pose: &Pose2| {
        vec![
            observe(pose, FRAC_PI_2, 0.0, [0.0, 0.0], [20.0, 0.0], "south"),
            observe(pose, -FRAC_PI_2, -2.0, [0.0, 2.0], [20.0, 2.0], "north"),
        ]
    };
    let mut pose = Pose2::new(2.0, 1.0, 0.0);
    s.update(&step(0, Motion::Start(pose), walls(&pose))).unwrap();
    for k in 1..4 {
        let z = Pose2::new(1.0, 0.0, 0.0);
        pose = pose.compose(&z);
        s.update(&step(k, Motion::Relative(z), walls(&pose))).unwrap();
    }
    assert_eq!(s.rooms().len(), 0);
    assert_eq!(s.two_wall_rooms().len(), 1);
    let gamma = *s.two_wall_rooms().keys().next().unwrap();
    let v = s.graph.value(gamma).unwrap();
    assert!((v[1] - 1.0).abs() < 1e-6, "{v}");
    assert!(s.detect_rooms().unwrap().is_empty());

    // Closing the corridor with two end walls turns it into a room.
    let mut obs = walls(&pose);
    obs.push(observe(&pose, 0.0, 0.0, [0.0, 0.0], [0.0, 2.0], "west"));
    obs.push(observe(&pose, PI, -8.0, [8.0, 0.0], [8.0, 2.0], "east"));
    let z = Pose2::new(0.5, 0.0, 0.0);
    s.update(&step(4, Motion::Relative(z), obs)).unwrap();
    assert_eq!(s.rooms().len(), 1);
    assert!(s.two_wall_rooms().is_empty());
    assert!(s.graph.variable(gamma).is_none());
    let floor = s.floor().unwrap();
    let (_, f) = s.graph.factors_of(floor).next().unwrap();
    assert_eq!(f.variables.len(), 2);
}

#[test]
fn association_rules() {
    let mut s = SGraph::new(SGraphConfig::default());
    let pose = Pose2::identity();
    s.update(&step(0, Motion::Start(pose), vec![])).unwrap();
    let a = s.graph.add_variable(VariableKind::PlaneVar, &[0.0, 1.0]).unwrap();
    let b = s.graph.add_variable(VariableKind::PlaneVar, &[0.0, 1.3]).unwrap();
    s.sightings.insert(a, vec![]);
    s.sightings.insert(b, vec![]);

    let near_b = observe(&pose, 0.02, 1.2, [1.2, 0.0], [1.2, 1.0], "x");
    let r = s.associate_planes(0, &[near_b]).unwrap();
    assert_eq!((r[0].plane, r[0].created), (b, false));

    let near_a = observe(&pose, 0.0, 1.1, [1.1, 0.0], [1.1, 1.0], "x");
    assert_eq!(s.associate_planes(0, &[near_a]).unwrap()[0].plane, a);

    // Same offset, opposite facing: a different surface.
    let back = observe(&pose, PI, -1.0, [1.0, 0.0], [1.0, 1.0], "x");
    let r = s.associate_planes(0, &[back]).unwrap();
    assert!(r[0].created);
    let new_id = r[0].plane;
    assert!(new_id != a && new_id != b);

    // Re-observation of the new plane maps to it.
    let again = observe(&pose, PI, -1.0, [1.0, 0.0], [1.0, 1.0], "x");
    assert_eq!(s.associate_planes(0, &[again]).unwrap()[0].plane, new_id);
}

#[test]
fn association_tie_prefers_lowest_index() {
    let mut s = SGraph::new(SGraphConfig::default());
    let pose = Pose2::identity();
    s.update(&step(0, Motion::Start(pose), vec![])).unwrap();
    let a = s.graph.add_variable(VariableKind::PlaneVar, &[0.0, 1.0]).unwrap();
    let b = s.graph.add_variable(VariableKind::PlaneVar, &[0.0, 1.5]).unwrap();
    s.sightings.insert(b, vec![]);
    s.sightings.insert(a, vec![]);
    let mid = observe(&pose, 0.0, 1.25, [1.25, 0.0], [1.25, 1.0], "x");
    assert_eq!(s.associate_planes(0, &[mid]).unwrap()[0].plane, a);
}

fn check_structure(s: &SGraph) {
    let g = &s.graph;
    for (i, kf) in s.keyframes().iter().enumerate() {
        let odo: Vec<_> = g
            .factors_of(*kf)
            .filter(|(id, _)| id.kind == FactorKind::Odometry)
            .map(|(_, f)| f.variables.clone())
            .collect();
        if i > 0 {
            assert!(odo.contains(&vec![s.keyframes()[i - 1], *kf]));
        }
        let incoming = odo.iter().filter(|v| v[1] == *kf).count();
        assert_eq!(incoming, usize::from(i > 0));
    }
    for p in s.planes() {
        assert!(g
            .factors_of(p)
            .any(|(id, _)| id.kind == FactorKind::PosePlane));
    }
    for room in s.rooms().keys() {
        let n = g
            .factors_of(*room)
            .filter(|(id, _)| id.kind == FactorKind::RoomToWalls)
            .count();
        assert_eq!(n, 1);
    }
    for gamma in s.two_wall_rooms().keys() {
        let fs: Vec<_> = g
            .factors_of(*gamma)
            .filter(|(id, _)| id.kind == FactorKind::WallCenter)
            .collect();
        assert_eq!(fs.len(), 1);
        assert_eq!(fs[0].1.variables.len(), 3);
    }
    if let Some(floor) = s.floor() {
        let fs: Vec<_> = g.factors_of(floor).collect();
        assert_eq!(fs.len(), 1);
        let members: BTreeSet<_> = fs[0].1.variables[1..].iter().copied().collect();
        let rooms: BTreeSet<_> = s
            .rooms()
            .keys()
            .chain(s.two_wall_rooms().keys())
            .copied()
            .collect();
        assert_eq!(members, rooms);
    }
}

fn noiseless_run(name: &str, offset: Option<Pose2>) -> (FloorPlan, SGraph, Pose2) {
    let (scenario, plan) = plans::bundled_scenario(name).unwrap();
    let mut sim = scenario.sim.noiseless();
    sim.map_offset = offset;
    let mut simulator = Simulator::new(&plan, sim).unwrap();
    let truth = simulator.map_offset();
    let mut s = SGraph::new(SGraphConfig::default());
    while let Some(st) = simulator.step() {
        s.update(&st).unwrap();
        check_structure(&s);
    }
    (plan, s, truth)
}

/// Every plane matches its plan surface mapped into the map frame.
fn assert_planes_match_plan(plan: &FloorPlan, s: &SGraph, offset: &Pose2, tol: f64) {
    let to_map = offset.inverse();
    for p in s.planes() {
        let surface = s.plane_surface(p).unwrap();
        let face = plan.face(&surface).unwrap();
        let n = to_map.rotation() * face.facing;
        let a = to_map.transform_point(&face.a);
        let v = s.graph.value(p).unwrap();
        assert!(wrap_angle(v[0] - n.y.atan2(n.x)).abs() < tol, "{surface}");
        assert!((v[1] - n.dot(&a)).abs() < tol, "{surface}");
        assert!(s
            .sightings(p)
            .iter()
            .all(|x| x.surface == surface));
    }
}

#[test]
fn noiseless_two_room_run_recovers_plan_surfaces() {
    let offset = Pose2::new(2.0, 1.0, 30f64.to_radians());
    let (plan, s, truth) = noiseless_run("two_room_doorway", Some(offset));
    assert!(truth.approx_eq(&offset, 0.0));
    assert_planes_match_plan(&plan, &s, &offset, 1e-6);
    assert_eq!(s.rooms().len(), 2);
    for (est, gt) in s.trajectory().iter().zip(s.ground_truth()) {
        assert!(offset.compose(est).approx_eq(gt, 1e-6));
    }
}

#[test]
fn noiseless_identity_offset_reproduces_plan_geometry() {
    let (plan, s, truth) = noiseless_run("asymmetric_five_room", Some(Pose2::identity()));
    assert_planes_match_plan(&plan, &s, &truth, 1e-6);
    assert_eq!(s.rooms().len(), 5);
    let geoms = plan.room_geometries().unwrap();
    for room in s.rooms().keys() {
        let c = s.graph.value(*room).unwrap();
        let c = Point2::new(c[0], c[1]);
        assert!(
            geoms.iter().any(|g| (g.center() - c).norm() < 1e-6),
            "room at {c} has no plan counterpart"
        );
    }
}

#[test]
fn every_bundled_scenario_keeps_structure() {
    for name in plans::BUNDLED_SCENARIOS {
        let (_, s, _) = noiseless_run(name, None);
        assert!(!s.rooms().is_empty(), "{name}");
    }
}

#[test]
fn identical_runs_serialize_identically() {
    let (scenario, plan) = plans::bundled_scenario("two_room_doorway").unwrap();
    let (a, _) = simulate(&plan, &scenario.sim, &SGraphConfig::default()).unwrap();
    let (b, _) = simulate(&plan, &scenario.sim, &SGraphConfig::default()).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(
        a.trajectory_csv(&a.trajectory()),
        b.trajectory_csv(&b.trajectory())
    );
}

#[test]
fn rooms_satisfy_the_opposition_predicate() {
    let (scenario, plan) = plans::bundled_scenario("corridor_rooms").unwrap();
    let (mut s, _) = simulate(&plan, &scenario.sim, &SGraphConfig::default()).unwrap();
    for planes in s.rooms().values() {
        let f: Vec<Facing> = planes.iter().map(|p| s.facing(*p)).collect();
        assert!(wrap_angle(f[1].angle - f[0].angle - PI).abs() < 0.15);
        assert!(wrap_angle(f[3].angle - f[2].angle - PI).abs() < 0.15);
        assert!((wrap_angle(f[2].angle - f[0].angle).abs() - FRAC_PI_2).abs() < 0.15);
    }
    assert!(s.detect_rooms().unwrap().is_empty());
}
