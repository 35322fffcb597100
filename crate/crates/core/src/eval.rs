//! Trajectory and map metrics, and the end-to-end scenario runner.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::a_graph::{build_a_graph, AGraph, FloorPlan, SurfaceRef, WallFace};
use crate::error::{Error, Result};
use crate::factor_graph::VariableId;
use crate::geometry::{estimate_transform_closed_form, wrap_angle, FrameTransform, Point2, Pose2};
use crate::matcher::{
    extend_match, match_views, GraphView, MatchCandidate, MatchLevel, MatchPair, MatchResult,
    MatchStatus,
};
use crate::merger::{localized_trajectory, merge_candidate, MergeOptions, MergedState};
use crate::plans::{load_scenario, Scenario};
use crate::s_graph::{SGraph, Simulator};

/// Spacing of the samples taken along estimated planes.
pub const MAP_SAMPLE_STEP: f64 = 0.1;
/// Largest distance at which an unmatched plane is tied to a plan surface.
pub const MAP_ASSOCIATION_RADIUS: f64 = 0.5;
const ASSOCIATION_COS: f64 = 0.988_771_077_936_042_3; // cos(0.15)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Alignment {
    None,
    SE2Umeyama,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApeReport {
    pub rmse: f64,
    pub mean: f64,
    pub max: f64,
    pub per_pose: Vec<f64>,
    pub alignment: Alignment,
}

/// Translational error of each estimated pose against ground truth, after
/// an optional rigid alignment of the estimates onto the ground truth.
pub fn compute_ape(estimated: &[Pose2], ground_truth: &[Pose2], align: Alignment) -> Result<ApeReport> {
    if estimated.len() != ground_truth.len() {
        return Err(Error::Evaluation(format!(
            "trajectory lengths differ: {} estimated, {} ground truth",
            estimated.len(),
            ground_truth.len()
        )));
    }
    if estimated.is_empty() {
        return Err(Error::Evaluation("empty trajectory".into()));
    }
    let pairs: Vec<(Point2, Point2)> = estimated
        .iter()
        .zip(ground_truth)
        .map(|(e, g)| (e.translation(), g.translation()))
        .collect();
    let t = match align {
        Alignment::None => Pose2::identity(),
        Alignment::SE2Umeyama if pairs.len() == 1 => {
            let d = pairs[0].1 - pairs[0].0;
            Pose2::new(d.x, d.y, 0.0)
        }
        Alignment::SE2Umeyama => estimate_transform_closed_form(&pairs)?,
    };
    let per_pose: Vec<f64> = pairs
        .iter()
        .map(|(e, g)| (t.transform_point(e) - g).norm())
        .collect();
    let n = per_pose.len() as f64;
    Ok(ApeReport {
        rmse: (per_pose.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        mean: per_pose.iter().sum::<f64>() / n,
        max: per_pose.iter().copied().fold(0.0, f64::max),
        per_pose,
        alignment: align,
    })
}

/// An estimated wall-surface segment in the plan frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatedPlane {
    pub plane: VariableId,
    /// Unit normal toward the observed side.
    pub normal: Point2,
    pub segment: [Point2; 2],
    /// Plan surface assigned by the match, if any.
    pub surface: Option<SurfaceRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapRmseReport {
    pub rmse: f64,
    pub n_points: usize,
    pub n_planes: usize,
}

fn point_segment_distance(p: &Point2, a: &Point2, b: &Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (a + ab * t - p).norm()
}

fn samples(segment: &[Point2; 2]) -> Vec<Point2> {
    let d = segment[1] - segment[0];
    let len = d.norm();
    let n = (len / MAP_SAMPLE_STEP).floor() as usize;
    let u = if len > 0.0 { d / len } else { d };
    (0..=n)
        .map(|k| segment[0] + u * (k as f64 * MAP_SAMPLE_STEP))
        .collect()
}

/// Plan face closest to an unmatched estimate among the faces oriented
/// like it, if within the association radius.
fn nearest_face<'a>(est: &EstimatedPlane, faces: &'a [WallFace]) -> Option<&'a WallFace> {
    let pts = samples(&est.segment);
    faces
        .iter()
        .filter(|f| f.facing.dot(&est.normal) >= ASSOCIATION_COS)
        .map(|f| {
            let d = pts
                .iter()
                .map(|p| point_segment_distance(p, &f.a, &f.b))
                .sum::<f64>()
                / pts.len() as f64;
            (d, f)
        })
        .filter(|(d, _)| *d <= MAP_ASSOCIATION_RADIUS)
        .min_by(|x, y| x.0.total_cmp(&y.0).then_with(|| x.1.surface.cmp(&y.1.surface)))
        .map(|(_, f)| f)
}

/// RMS distance from samples along each estimated plane to the plane of
/// its associated plan surface.
pub fn compute_map_rmse(estimated: &[EstimatedPlane], plan: &FloorPlan) -> Result<MapRmseReport> {
    let faces = plan.faces();
    let mut sum = 0.0;
    let mut n_points = 0;
    let mut n_planes = 0;
    for est in estimated {
        let face = match &est.surface {
            Some(s) => faces.iter().find(|f| &f.surface == s),
            None => nearest_face(est, &faces),
        };
        let Some(face) = face else { continue };
        n_planes += 1;
        for p in samples(&est.segment) {
            let e = face.plane.signed_distance(&p);
            sum += e * e;
            n_points += 1;
        }
    }
    if n_points == 0 {
        return Err(Error::Evaluation("no estimated plane has an associated plan surface".into()));
    }
    Ok(MapRmseReport {
        rmse: (sum / n_points as f64).sqrt(),
        n_points,
        n_planes,
    })
}

/// Plan-frame planes of a merged state, tagged with the surfaces the match
/// assigned them.
pub fn estimated_planes(ms: &MergedState, a: &AGraph) -> Vec<EstimatedPlane> {
    let matched: BTreeMap<VariableId, VariableId> = ms
        .candidate
        .pairs
        .iter()
        .filter(|p| p.level == MatchLevel::WallSurface)
        .map(|p| (p.s_node, p.a_node))
        .collect();
    let theta = ms.map_to_plan().theta;
    ms.planes_in_plan()
        .into_iter()
        .map(|(plane, segment)| {
            let phi = ms.sgraph.graph.value(plane).expect("plane exists")[0] + theta;
            EstimatedPlane {
                plane,
                normal: Point2::new(phi.cos(), phi.sin()),
                segment,
                surface: matched.get(&plane).and_then(|v| a.surface_of(*v)).cloned(),
            }
        })
        .collect()
}

/// Room and wall-surface correspondences implied by the simulator's record
/// of which plan surface produced each plane observation.
pub fn ground_truth_correspondence(a: &AGraph, plan: &FloorPlan, s: &SGraph) -> Result<Vec<MatchPair>> {
    let geometries = plan.room_geometries()?;
    let mut pairs = BTreeSet::new();
    for (room, planes) in s.rooms() {
        let surfaces: Option<Vec<SurfaceRef>> = planes.iter().map(|p| s.plane_surface(*p)).collect();
        let Some(surfaces) = surfaces else { continue };
        let set: BTreeSet<&SurfaceRef> = surfaces.iter().collect();
        let Some(geom) = geometries
            .iter()
            .find(|g| g.surfaces.iter().collect::<BTreeSet<_>>() == set)
        else {
            continue;
        };
        pairs.insert(MatchPair::room(a.rooms[&geom.id], *room));
        for (p, surface) in planes.iter().zip(&surfaces) {
            pairs.insert(MatchPair::wall(a.surfaces[surface], *p));
        }
    }
    Ok(pairs.into_iter().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchEvent {
    pub keyframe: usize,
    pub status: MatchStatus,
    pub candidates: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub estimation_s: f64,
    pub matching_s: f64,
    pub merge_s: f64,
    pub total_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub keyframes: usize,
    pub planes: usize,
    pub rooms: usize,
    pub status: MatchStatus,
    /// Keyframe at which the first unambiguous match happened.
    pub match_keyframe: Option<usize>,
    pub match_history: Vec<MatchEvent>,
    pub true_transform: FrameTransform,
    pub transform: Option<FrameTransform>,
    /// Translation and rotation error of the estimated transform.
    pub transform_error: Option<[f64; 2]>,
    pub matched_rooms: usize,
    pub matched_surfaces: usize,
    /// Whether the merged correspondences agree with the simulator record.
    pub correspondence_correct: Option<bool>,
    pub merge_converged: Option<bool>,
    pub ape: Option<ApeReport>,
    pub ape_aligned: Option<ApeReport>,
    pub map_rmse: Option<MapRmseReport>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Everything a run produces, kept in memory.
pub struct RunOutcome {
    pub report: RunReport,
    pub timing: Timing,
    pub agraph: AGraph,
    /// Final S-Graph JSON before merging.
    pub sgraph_json: String,
    pub trajectory_map_csv: String,
    pub match_result: MatchResult,
    pub merged: Option<MergedState>,
    pub planes: Vec<EstimatedPlane>,
    pub trajectory_plan_csv: Option<String>,
}

fn same_rooms(c: &MatchCandidate, truth: &[MatchPair]) -> bool {
    let truth: BTreeMap<VariableId, VariableId> = truth.iter().map(|p| (p.s_node, p.a_node)).collect();
    c.pairs.iter().all(|p| truth.get(&p.s_node) == Some(&p.a_node))
}

/// Simulates, estimates, matches after every update until a unique match,
/// finishes the trajectory, then merges and evaluates.
pub fn run_pipeline(scenario: &Scenario, plan: &FloorPlan) -> Result<RunOutcome> {
    let start = Instant::now();
    let mut timing = Timing::default();
    let agraph = build_a_graph(plan)?;
    let a_view = GraphView::from_graph(&agraph.graph)?;
    let mut simulator = Simulator::new(plan, scenario.sim.clone())?;
    let true_transform = FrameTransform::map_to_plan(simulator.map_offset());
    let mut s = SGraph::new(scenario.sgraph.clone());

    let mut history = Vec::new();
    let mut decision: Option<MatchResult> = None;
    let mut last = MatchResult::no_match();
    while let Some(step) = simulator.step() {
        let t0 = Instant::now();
        s.update(&step)?;
        timing.estimation_s += t0.elapsed().as_secs_f64();
        if decision.is_some() || s.rooms().len() < scenario.matcher.min_rooms.max(2) {
            continue;
        }
        let t0 = Instant::now();
        let s_view = GraphView::from_graph(&s.graph)?;
        let result = match_views(&a_view, &s_view, &scenario.matcher);
        timing.matching_s += t0.elapsed().as_secs_f64();
        history.push(MatchEvent {
            keyframe: step.index,
            status: result.status,
            candidates: result.cluster.len(),
        });
        if result.status == MatchStatus::Matched {
            decision = Some(result.clone());
        }
        last = result;
    }

    let sgraph_json = s.to_json();
    let trajectory_map_csv = s.trajectory_csv(&s.trajectory());
    let truth = ground_truth_correspondence(&agraph, plan, &s)?;
    let ground_truth = s.ground_truth().to_vec();
    let mut report = RunReport {
        seed: scenario.sim.seed,
        keyframes: s.keyframes().len(),
        planes: s.planes().len(),
        rooms: s.rooms().len(),
        status: last.status,
        match_keyframe: history
            .iter()
            .find(|e| e.status == MatchStatus::Matched)
            .map(|e| e.keyframe),
        match_history: history,
        true_transform,
        transform: None,
        transform_error: None,
        matched_rooms: 0,
        matched_surfaces: 0,
        correspondence_correct: None,
        merge_converged: None,
        ape: None,
        ape_aligned: None,
        map_rmse: None,
    };

    let Some(decision) = decision else {
        timing.total_s = start.elapsed().as_secs_f64();
        return Ok(RunOutcome {
            report,
            timing,
            agraph,
            sgraph_json,
            trajectory_map_csv,
            match_result: last,
            merged: None,
            planes: Vec::new(),
            trajectory_plan_csv: None,
        });
    };

    let t0 = Instant::now();
    let s_view = GraphView::from_graph(&s.graph)?;
    let best = decision.best.clone().expect("matched result has a best candidate");
    let candidate = match extend_match(&best, &a_view, &s_view, &scenario.matcher) {
        Ok(c) => c,
        Err(_) => {
            // Room variables of the early match no longer exist; match the
            // final graph instead.
            let again = match_views(&a_view, &s_view, &scenario.matcher);
            match (again.status, again.best) {
                (MatchStatus::Matched, Some(c)) => c,
                _ => return Err(Error::Structural("early match no longer applies".into())),
            }
        }
    };
    let merged = merge_candidate(&agraph, s, &candidate, &MergeOptions::default())?;
    timing.merge_s = t0.elapsed().as_secs_f64();

    let localized = localized_trajectory(&merged);
    let t = merged.map_to_plan();
    let planes = estimated_planes(&merged, &agraph);
    report.status = MatchStatus::Matched;
    report.transform = Some(merged.frame_transform());
    report.transform_error = Some([
        (t.translation() - true_transform.pose.translation()).norm(),
        wrap_angle(t.theta - true_transform.pose.theta).abs(),
    ]);
    report.matched_rooms = candidate.room_pairs().count();
    report.matched_surfaces = candidate.wall_pairs().count();
    report.correspondence_correct = Some(same_rooms(&candidate, &truth));
    report.merge_converged = Some(merged.report.converged);
    report.ape = Some(compute_ape(&localized, &ground_truth, Alignment::None)?);
    report.ape_aligned = Some(compute_ape(&localized, &ground_truth, Alignment::SE2Umeyama)?);
    report.map_rmse = compute_map_rmse(&planes, plan).ok();
    let trajectory_plan_csv = Some(merged.sgraph.trajectory_csv(&localized));
    timing.total_s = start.elapsed().as_secs_f64();
    Ok(RunOutcome {
        report,
        timing,
        agraph,
        sgraph_json,
        trajectory_map_csv,
        match_result: decision,
        merged: Some(merged),
        planes,
        trajectory_plan_csv,
    })
}

/// Process exit status for a run outcome.
pub fn exit_code(status: MatchStatus) -> i32 {
    match status {
        MatchStatus::Matched => 0,
        MatchStatus::Ambiguous => 2,
        MatchStatus::NoMatch => 3,
    }
}

pub const OUTPUT_FILES: [&str; 10] = [
    "plan.json",
    "agraph.json",
    "sgraph.json",
    "match.json",
    "trajectory_map.csv",
    "isgraph.json",
    "trajectory_plan.csv",
    "planes_plan.json",
    "report.json",
    "timing.json",
];

/// Writes the outputs of a run into `dir`. Files that need a merge are
/// skipped when no merge happened.
pub fn write_outputs(outcome: &RunOutcome, plan: &FloorPlan, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut files = vec![
        ("plan.json", plan.to_json()),
        ("agraph.json", outcome.agraph.to_json()),
        ("sgraph.json", outcome.sgraph_json.clone()),
        ("match.json", outcome.match_result.to_json()),
        ("trajectory_map.csv", outcome.trajectory_map_csv.clone()),
        ("report.json", outcome.report.to_json()),
        (
            "timing.json",
            serde_json::to_string_pretty(&outcome.timing).expect("timing serializes"),
        ),
    ];
    if let (Some(merged), Some(csv)) = (&outcome.merged, &outcome.trajectory_plan_csv) {
        files.push(("isgraph.json", merged.to_json()));
        files.push(("trajectory_plan.csv", csv.clone()));
        files.push((
            "planes_plan.json",
            serde_json::to_string_pretty(&outcome.planes).expect("planes serialize"),
        ));
    }
    let mut written = Vec::new();
    for (name, content) in files {
        let path = dir.join(name);
        std::fs::write(&path, content)?;
        written.push(path);
    }
    Ok(written)
}

/// Loads a scenario file, optionally overriding its seed, runs it and
/// writes the outputs.
pub fn run_scenario(path: impl AsRef<Path>, out_dir: impl AsRef<Path>, seed: Option<u64>) -> Result<RunOutcome> {
    let (mut scenario, plan) = load_scenario(path)?;
    if let Some(seed) = seed {
        scenario.sim.seed = seed;
    }
    let outcome = run_pipeline(&scenario, &plan)?;
    write_outputs(&outcome, &plan, out_dir.as_ref())?;
    Ok(outcome)
}

#[derive(Debug, Deserialize)]
struct TrajectoryRow {
    #[allow(dead_code)]
    t: usize,
    x: f64,
    y: f64,
    theta: f64,
    gt_x: f64,
    gt_y: f64,
    gt_theta: f64,
}

/// Reads a `t,x,y,theta,gt_x,gt_y,gt_theta` CSV into estimate and ground
/// truth trajectories.
pub fn read_trajectory_csv(path: &Path) -> Result<(Vec<Pose2>, Vec<Pose2>)> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Evaluation(format!("{}: {e}", path.display())))?;
    let mut est = Vec::new();
    let mut gt = Vec::new();
    for row in reader.deserialize() {
        let r: TrajectoryRow = row.map_err(|e| Error::Evaluation(format!("{}: {e}", path.display())))?;
        est.push(Pose2::new(r.x, r.y, r.theta));
        gt.push(Pose2::new(r.gt_x, r.gt_y, r.gt_theta));
    }
    Ok((est, gt))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ape: ApeReport,
    pub ape_aligned: ApeReport,
    pub map_rmse: Option<MapRmseReport>,
}

/// Recomputes the metrics from the files of a finished run.
pub fn evaluate_dir(dir: &Path) -> Result<EvalSummary> {
    let traj = dir.join("trajectory_plan.csv");
    if !traj.exists() {
        return Err(Error::Evaluation(format!(
            "{} has no plan-frame trajectory; the run did not merge",
            dir.display()
        )));
    }
    let (est, gt) = read_trajectory_csv(&traj)?;
    let plan = crate::a_graph::load_plan(dir.join("plan.json"))?;
    let planes_path = dir.join("planes_plan.json");
    let text = std::fs::read_to_string(&planes_path)?;
    let planes: Vec<EstimatedPlane> = serde_json::from_str(&text).map_err(|source| Error::Parse {
        context: planes_path.display().to_string(),
        source,
    })?;
    Ok(EvalSummary {
        ape: compute_ape(&est, &gt, Alignment::None)?,
        ape_aligned: compute_ape(&est, &gt, Alignment::SE2Umeyama)?,
        map_rmse: compute_map_rmse(&planes, &plan).ok(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::a_graph::FaceSide;
    use crate::plans;
    use proptest::prelude::*;

    fn line(n: usize, f: impl Fn(f64) -> Pose2) -> Vec<Pose2> {
        (0..n).map(|i| f(i as f64)).collect()
    }

    #[test]
    fn ape_examples() {
        let gt = line(20, |i| Pose2::new(0.3 * i, (0.2 * i).sin(), 0.1 * i));
        let r = compute_ape(&gt, &gt, Alignment::None).unwrap();
        assert_eq!((r.rmse, r.mean, r.max), (0.0, 0.0, 0.0));

        let shifted: Vec<Pose2> = gt.iter().map(|p| Pose2::new(p.x + 0.06, p.y - 0.08, p.theta)).collect();
        let r = compute_ape(&shifted, &gt, Alignment::None).unwrap();
        assert!((r.rmse - 0.1).abs() < 1e-12 && (r.max - 0.1).abs() < 1e-12);
        let r = compute_ape(&shifted, &gt, Alignment::SE2Umeyama).unwrap();
        assert!(r.rmse < 1e-9);

        assert!(matches!(
            compute_ape(&gt[..3], &gt, Alignment::None),
            Err(Error::Evaluation(_))
        ));
        assert!(compute_ape(&[], &[], Alignment::None).is_err());
    }

    #[test]
    fn ape_statistics_are_ordered() {
        let gt = line(10, |i| Pose2::new(i, 0.0, 0.0));
        let est = line(10, |i| Pose2::new(i, 0.01 * i * i, 0.0));
        let r = compute_ape(&est, &gt, Alignment::None).unwrap();
        assert!(r.max >= r.rmse && r.rmse >= r.mean && r.mean >= 0.0);
        // Independent oracle: errors are the y offsets.
        let expected = ((0..10).map(|i| (0.01 * (i * i) as f64).powi(2)).sum::<f64>() / 10.0).sqrt();
        assert!((r.rmse - expected).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn aligned_ape_ignores_rigid_motion(x in -10.0..10.0f64, y in -10.0..10.0f64, th in -3.1..3.1f64,
                                           noise in prop::collection::vec(-0.2..0.2f64, 24)) {
            let gt = line(12, |i| Pose2::new(0.5 * i, (0.7 * i).cos(), 0.0));
            let est: Vec<Pose2> = gt.iter().enumerate()
                .map(|(i, p)| Pose2::new(p.x + noise[2 * i], p.y + noise[2 * i + 1], p.theta))
                .collect();
            let t = Pose2::new(x, y, th);
            let moved: Vec<Pose2> = est.iter().map(|p| t.compose(p)).collect();
            let r0 = compute_ape(&est, &gt, Alignment::SE2Umeyama).unwrap();
            let r1 = compute_ape(&moved, &gt, Alignment::SE2Umeyama).unwrap();
            prop_assert!((r0.rmse - r1.rmse).abs() <= 1e-9);
        }
    }

    fn plan_planes(plan: &FloorPlan, shift: f64, tag: bool) -> Vec<EstimatedPlane> {
        plan.faces()
            .into_iter()
            .enumerate()
            .map(|(i, f)| {
                let off = f.facing * shift;
                EstimatedPlane {
                    plane: VariableId::new(crate::factor_graph::VariableKind::PlaneVar, i),
                    normal: f.facing,
                    segment: [f.a + off, f.b + off],
                    surface: tag.then(|| f.surface.clone()),
                }
            })
            .collect()
    }

    #[test]
    fn map_rmse_examples() {
        let plan = plans::bundled_plan("two_room_doorway").unwrap();
        for tag in [true, false] {
            let r = compute_map_rmse(&plan_planes(&plan, 0.0, tag), &plan).unwrap();
            assert!(r.rmse < 1e-12, "{r:?}");
            let r = compute_map_rmse(&plan_planes(&plan, 0.05, tag), &plan).unwrap();
            assert!((r.rmse - 0.05).abs() < 1e-12, "{r:?}");
            assert_eq!(r.n_planes, plan.faces().len());
        }
        let far = plan_planes(&plan, 3.0, false);
        assert!(matches!(compute_map_rmse(&far, &plan), Err(Error::Evaluation(_))));
    }

    #[test]
    fn map_rmse_sample_count() {
        let plan = plans::bundled_plan("single_room").unwrap();
        let face = plan
            .face(&SurfaceRef {
                wall: "w_south".into(),
                side: FaceSide::Left,
            })
            .unwrap();
        let est = EstimatedPlane {
            plane: VariableId::new(crate::factor_graph::VariableKind::PlaneVar, 0),
            normal: face.facing,
            segment: [face.a, face.a + (face.b - face.a).normalize() * 1.0],
            surface: Some(face.surface.clone()),
        };
        // 1 m at 0.1 m spacing, both ends included.
        let r = compute_map_rmse(&[est], &plan).unwrap();
        assert_eq!(r.n_points, 11);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn map_rmse_grows_by_uniform_offset(delta in 0.0..0.3f64) {
            let plan = plans::bundled_plan("asymmetric_five_room").unwrap();
            let base = compute_map_rmse(&plan_planes(&plan, 0.0, true), &plan).unwrap();
            let moved = compute_map_rmse(&plan_planes(&plan, delta, true), &plan).unwrap();
            prop_assert!((moved.rmse - base.rmse - delta).abs() < 1e-9);
        }
    }

    #[test]
    fn asymmetric_scenario_localizes() {
        let (scenario, plan) = plans::bundled_scenario("asymmetric_five_room").unwrap();
        let out = run_pipeline(&scenario, &plan).unwrap();
        let r = &out.report;
        assert_eq!(r.status, MatchStatus::Matched);
        assert_eq!(r.correspondence_correct, Some(true));
        assert!(r.ape.as_ref().unwrap().rmse <= 0.1, "{:?}", r.ape);
        assert!(r.map_rmse.as_ref().unwrap().rmse <= 0.05, "{:?}", r.map_rmse);
        assert_eq!(exit_code(r.status), 0);
    }

    #[test]
    fn truncated_symmetric_grid_is_ambiguous_and_not_merged() {
        let (scenario, plan) = plans::bundled_scenario("symmetric_grid_two_rooms").unwrap();
        let out = run_pipeline(&scenario, &plan).unwrap();
        assert_eq!(out.report.status, MatchStatus::Ambiguous);
        assert!(out.match_result.cluster.len() >= 2);
        assert!(out.merged.is_none() && out.report.ape.is_none());
        assert_eq!(exit_code(out.report.status), 2);
    }

    #[test]
    fn run_scenario_writes_identical_files_twice() {
        let path = plans::bundled_scenario_path("two_room_doorway");
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            run_scenario(&path, d.path(), Some(11)).unwrap();
        }
        for name in OUTPUT_FILES.iter().filter(|n| **n != "timing.json") {
            let a = std::fs::read(dirs[0].path().join(name));
            let b = std::fs::read(dirs[1].path().join(name));
            assert_eq!(a.is_ok(), b.is_ok(), "{name}");
            if let (Ok(a), Ok(b)) = (a, b) {
                assert!(a == b, "{name} differs");
            }
        }
        let report: RunReport =
            serde_json::from_str(&std::fs::read_to_string(dirs[0].path().join("report.json")).unwrap()).unwrap();
        assert_eq!(report.seed, 11);
    }

    #[test]
    fn evaluate_dir_reproduces_run_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_scenario(plans::bundled_scenario_path("asymmetric_five_room"), dir.path(), None).unwrap();
        let summary = evaluate_dir(dir.path()).unwrap();
        let ape = out.report.ape.unwrap();
        assert!((summary.ape.rmse - ape.rmse).abs() < 1e-12);
        let rmse = out.report.map_rmse.unwrap();
        assert!((summary.map_rmse.unwrap().rmse - rmse.rmse).abs() < 1e-12);
    }

    #[test]
    fn ground_truth_correspondence_matches_plan_rooms() {
        let (scenario, plan) = plans::bundled_scenario("asymmetric_five_room").unwrap();
        let (s, _) = crate::s_graph::simulate(&plan, &scenario.sim, &scenario.sgraph).unwrap();
        let a = build_a_graph(&plan).unwrap();
        let truth = ground_truth_correspondence(&a, &plan, &s).unwrap();
        let rooms = truth.iter().filter(|p| p.level == MatchLevel::Room).count();
        assert_eq!(rooms, s.rooms().len());
        for p in truth.iter().filter(|p| p.level == MatchLevel::Room) {
            let name = a.room_of(p.a_node).unwrap();
            let center = plan.room_geometry(plan.room(name).unwrap()).unwrap().center();
            let v = s.graph.value(p.s_node).unwrap();
            let est = scenario.sim.map_offset.unwrap_or(s.ground_truth()[0]);
            let at = est.transform_point(&Point2::new(v[0], v[1]));
            assert!((at - center).norm() < 0.2, "{name}");
        }
    }
}
