//! Merging a matched A-Graph and S-Graph into one graph with a map→plan
//! transform variable, and the globally localized trajectory it yields.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::a_graph::AGraph;
use crate::error::{Error, Result};
use crate::factor_graph::{
    information, FactorGraph, FactorId, Measurement, SolveReport, SolverConfig, VariableId,
    VariableKind,
};
use crate::geometry::{FrameTransform, Point2, Pose2};
use crate::matcher::{MatchCandidate, MatchLevel, MatchResult, MatchStatus};
use crate::s_graph::SGraph;

#[derive(Clone, Debug)]
pub struct MergeOptions {
    /// Starting value of the transform; the match hint when absent.
    pub initial_transform: Option<Pose2>,
    pub solver: SolverConfig,
    /// Leaves plan variables free, held by strong priors.
    pub unfix_plan: bool,
}

impl Default for MergeOptions {
    fn default() -> Self {
        Self {
            initial_transform: None,
            // The transform sits in a shallow valley along the rotation;
            // stop on a much smaller relative decrease than online updates.
            solver: SolverConfig {
                rel_tol: 1e-14,
                ..SolverConfig::default()
            },
            unfix_plan: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MergedState {
    pub graph: FactorGraph,
    pub transform: VariableId,
    /// S-Graph after the merge, its values refreshed from the merged graph.
    pub sgraph: SGraph,
    /// Original S-Graph and A-Graph ids to merged ids.
    pub s_vars: BTreeMap<VariableId, VariableId>,
    pub a_vars: BTreeMap<VariableId, VariableId>,
    pub merge_factors: Vec<FactorId>,
    pub candidate: MatchCandidate,
    pub report: SolveReport,
}

#[derive(Serialize)]
struct MergedDocument<'a> {
    transform: FrameTransform,
    merge_factors: &'a [FactorId],
    report: &'a SolveReport,
    graph: crate::factor_graph::GraphDocument,
}

impl MergedState {
    pub fn map_to_plan(&self) -> Pose2 {
        Pose2::from_slice(self.graph.value(self.transform).expect("transform exists").as_slice())
    }

    pub fn frame_transform(&self) -> FrameTransform {
        FrameTransform::map_to_plan(self.map_to_plan())
    }

    /// Sum of merge-factor costs at the current values.
    pub fn merge_cost(&self) -> Result<f64> {
        self.merge_factors
            .iter()
            .map(|f| self.graph.factor_cost(*f))
            .sum()
    }

    /// Observed S-Graph plane segments expressed in the plan frame.
    pub fn planes_in_plan(&self) -> Vec<(VariableId, [Point2; 2])> {
        let t = self.map_to_plan();
        self.sgraph
            .planes()
            .into_iter()
            .filter_map(|p| {
                let seg = self.sgraph.plane_segment(p)?;
                Some((p, seg.map(|q| t.transform_point(&q))))
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        let doc = MergedDocument {
            transform: self.frame_transform(),
            merge_factors: &self.merge_factors,
            report: &self.report,
            graph: self.graph.to_document(),
        };
        serde_json::to_string_pretty(&doc).expect("merged state serializes")
    }
}

fn copy_graph(
    from: &FactorGraph,
    into: &mut FactorGraph,
    fixed: bool,
) -> Result<BTreeMap<VariableId, VariableId>> {
    let mut map = BTreeMap::new();
    for (id, var) in from.variables() {
        let new = into.add_variable(id.kind, var.value.as_slice())?;
        into.set_fixed(new, fixed || var.fixed)?;
        map.insert(*id, new);
    }
    for (_, f) in from.factors() {
        let vars = f.variables.iter().map(|v| map[v]).collect();
        into.add_factor(f.measurement.clone(), vars, f.information.clone())?;
    }
    Ok(map)
}

/// Merges with default options.
pub fn merge(a: &AGraph, s: SGraph, m: &MatchResult) -> Result<MergedState> {
    merge_with(a, s, m, &MergeOptions::default())
}

/// Unions both graphs, ties every matched room and surface pair through
/// the transform variable, and optimizes. Only a Matched result merges.
pub fn merge_with(a: &AGraph, s: SGraph, m: &MatchResult, options: &MergeOptions) -> Result<MergedState> {
    let candidate = match (m.status, &m.best) {
        (MatchStatus::Matched, Some(c)) => c.clone(),
        (MatchStatus::Ambiguous, _) => {
            return Err(Error::MergeRefused(format!(
                "match is ambiguous between {} candidates",
                m.cluster.len()
            )))
        }
        _ => return Err(Error::MergeRefused("no match was found".into())),
    };
    merge_candidate(a, s, &candidate, options)
}

/// Merges an explicit candidate, bypassing the status check.
pub fn merge_candidate(
    a: &AGraph,
    mut s: SGraph,
    candidate: &MatchCandidate,
    options: &MergeOptions,
) -> Result<MergedState> {
    let mut graph = FactorGraph::new();
    let s_vars = copy_graph(&s.graph, &mut graph, false)?;
    let a_vars = copy_graph(&a.graph, &mut graph, !options.unfix_plan)?;
    if options.unfix_plan {
        for id in a_vars.values() {
            graph.add_prior(*id, information::anchor(id.kind.dim()))?;
        }
    }
    let transform = graph.add_variable(VariableKind::Transform, &Pose2::identity().to_array())?;
    let hint = options
        .initial_transform
        .unwrap_or(candidate.transform_hint.pose);

    let mut merge_factors = Vec::new();
    for pair in &candidate.pairs {
        let (Some(av), Some(sv)) = (a_vars.get(&pair.a_node), s_vars.get(&pair.s_node)) else {
            return Err(Error::MergeRefused(format!(
                "pair {:?} ↔ {:?} names a missing variable",
                pair.a_node, pair.s_node
            )));
        };
        let measurement = match pair.level {
            MatchLevel::Room => Measurement::RoomToRoom,
            MatchLevel::WallSurface => {
                let pa = graph.value(*av)?;
                let ps = graph.value(*sv)?;
                let flip = (ps[0] + hint.theta - pa[0]).cos() < 0.0;
                Measurement::PlaneToPlane { flip }
            }
        };
        merge_factors.push(graph.add_factor(
            measurement,
            vec![*av, *sv, transform],
            information::merge(),
        )?);
    }
    graph.set_value(transform, &hint.to_array())?;
    let report = graph.optimize(&options.solver)?;

    for (orig, merged) in &s_vars {
        let v = graph.value(*merged)?.clone();
        s.graph.set_value(*orig, v.as_slice())?;
    }
    Ok(MergedState {
        graph,
        transform,
        sgraph: s,
        s_vars,
        a_vars,
        merge_factors,
        candidate: candidate.clone(),
        report,
    })
}

/// Keyframe poses in the plan frame, in keyframe order.
pub fn localized_trajectory(ms: &MergedState) -> Vec<Pose2> {
    let t = ms.map_to_plan();
    ms.sgraph
        .trajectory()
        .iter()
        .map(|p| t.compose(p))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::a_graph::build_a_graph;
    use crate::factor_graph::FactorKind;
    use crate::matcher::{match_graphs, MatcherConfig};
    use crate::plans;
    use crate::s_graph::{simulate, SGraphConfig, SimConfig};

    fn noiseless(offset: Option<Pose2>) -> (AGraph, SGraph, Pose2) {
        let (scenario, plan) = plans::bundled_scenario("asymmetric_five_room").unwrap();
        let mut sim: SimConfig = scenario.sim.noiseless();
        sim.map_offset = offset;
        let (s, map_offset) = simulate(&plan, &sim, &SGraphConfig::default()).unwrap();
        (build_a_graph(&plan).unwrap(), s, map_offset)
    }

    fn matched(a: &AGraph, s: &SGraph) -> MatchResult {
        let m = match_graphs(&a.graph, &s.graph, &MatcherConfig::default()).unwrap();
        assert_eq!(m.status, MatchStatus::Matched);
        m
    }

    #[test]
    fn recovers_offset_exactly_without_noise() {
        let offset = Pose2::new(2.0, 1.0, 30f64.to_radians());
        let (a, s, _) = noiseless(Some(offset));
        let gt = s.ground_truth().to_vec();
        let m = matched(&a, &s);
        let ms = merge(&a, s, &m).unwrap();
        assert!(ms.map_to_plan().approx_eq(&offset, 1e-6), "{:?}", ms.map_to_plan());
        for (p, g) in localized_trajectory(&ms).iter().zip(&gt) {
            assert!(p.approx_eq(g, 1e-6));
        }
    }

    #[test]
    fn identity_offset_leaves_no_merge_cost() {
        let (a, s, map_offset) = noiseless(Some(Pose2::identity()));
        assert_eq!(map_offset, Pose2::identity());
        let m = matched(&a, &s);
        let ms = merge(&a, s, &m).unwrap();
        assert!(ms.map_to_plan().approx_eq(&Pose2::identity(), 1e-9));
        assert!(ms.merge_cost().unwrap() <= 1e-12);
        let before = ms.sgraph.trajectory();
        let after = localized_trajectory(&ms);
        for (p, q) in before.iter().zip(&after) {
            assert!(p.approx_eq(q, 1e-9));
        }
    }

    #[test]
    fn union_keeps_every_variable_and_adds_merge_factors() {
        let (a, s, _) = noiseless(None);
        let m = matched(&a, &s);
        let (na, ns) = (a.graph.num_variables(), s.graph.num_variables());
        let (fa, fs) = (a.graph.num_factors(), s.graph.num_factors());
        let ms = merge(&a, s, &m).unwrap();
        assert_eq!(ms.graph.num_variables(), na + ns + 1);
        let c = m.best.unwrap();
        assert_eq!(ms.merge_factors.len(), c.pairs.len());
        assert_eq!(ms.graph.num_factors(), fa + fs + c.pairs.len());
        assert_eq!(
            ms.graph.count_factors(FactorKind::RoomToRoom),
            c.room_pairs().count()
        );
        assert!(ms.a_vars.values().all(|v| ms.graph.is_fixed(*v)));
        assert!(!ms.graph.is_fixed(ms.transform));
        for kind in [VariableKind::Keyframe, VariableKind::Room, VariableKind::Doorway, VariableKind::Wall] {
            assert!(ms.graph.count_variables(kind) > 0, "{kind:?}");
        }
    }

    #[test]
    fn refuses_unmatched_results() {
        let (a, s, _) = noiseless(None);
        let mut m = matched(&a, &s);
        m.status = MatchStatus::Ambiguous;
        m.cluster = vec![m.best.clone().unwrap(); 2];
        let err = merge(&a, s.clone(), &m).unwrap_err();
        assert!(matches!(err, Error::MergeRefused(ref r) if r.contains("ambiguous")));
        let err = merge(&a, s, &MatchResult::no_match()).unwrap_err();
        assert!(matches!(err, Error::MergeRefused(_)));
    }

    #[test]
    fn perturbed_starts_reach_the_same_optimum() {
        let (scenario, plan) = plans::bundled_scenario("asymmetric_five_room").unwrap();
        let (s, _) = simulate(&plan, &scenario.sim, &SGraphConfig::default()).unwrap();
        let a = build_a_graph(&plan).unwrap();
        let m = matched(&a, &s);
        let base = merge(&a, s.clone(), &m).unwrap().map_to_plan();
        for (dx, dy, dth) in [(0.5, 0.0, 0.0), (0.0, -0.5, 0.0), (0.3, 0.3, 10f64.to_radians()), (-0.4, 0.2, -10f64.to_radians())] {
            let start = base.compose(&Pose2::new(dx, dy, dth));
            let options = MergeOptions {
                initial_transform: Some(start),
                ..Default::default()
            };
            let other = merge_with(&a, s.clone(), &m, &options).unwrap().map_to_plan();
            assert!(other.approx_eq(&base, 1e-6), "{other:?} vs {base:?}");
        }
    }

    #[test]
    fn unfixed_plan_stays_put_under_priors() {
        let (a, s, _) = noiseless(Some(Pose2::new(-3.0, 4.0, 135f64.to_radians())));
        let m = matched(&a, &s);
        let options = MergeOptions {
            unfix_plan: true,
            ..Default::default()
        };
        let ms = merge_with(&a, s, &m, &options).unwrap();
        for (orig, merged) in &ms.a_vars {
            let d = ms.graph.value(*merged).unwrap() - a.graph.value(*orig).unwrap();
            assert!(d.amax() < 1e-6);
        }
    }
}
