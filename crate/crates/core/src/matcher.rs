//! Hierarchical matching of plan rooms and wall surfaces against the rooms
//! and planes the robot has estimated.
//!
//! Room assignments are proposed first, gated by room size and pairwise
//! center distances. Each surviving assignment is expanded to wall-surface
//! pairs, combined, scored after a rigid alignment, and the scores are
//! clustered to expose symmetric solutions.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor_graph::{FactorGraph, FactorKind, VariableId, VariableKind};
use crate::geometry::{
    estimate_transform_closed_form, wrap_angle, Axis, FrameTransform, Point2, Pose2,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatcherConfig {
    /// Maximum per-axis difference of room sizes.
    pub dimension_gate: f64,
    /// Maximum difference between matched pairwise room distances.
    pub distance_gate: f64,
    pub room_affinity_min: f64,
    pub accept: f64,
    /// Relative width of the winning score cluster.
    pub cluster_width: f64,
    pub room_scale: f64,
    pub plane_scale: f64,
    pub min_rooms: usize,
    /// Above this many S-rooms the enumeration switches to a beam search.
    pub exhaustive_limit: usize,
    pub beam_width: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            dimension_gate: 0.3,
            distance_gate: 0.5,
            room_affinity_min: 0.5,
            accept: 0.6,
            cluster_width: 0.1,
            room_scale: 0.25,
            plane_scale: 0.1,
            min_rooms: 2,
            exhaustive_limit: 8,
            beam_width: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatchLevel {
    Room,
    WallSurface,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MatchPair {
    pub level: MatchLevel,
    pub a_node: VariableId,
    pub s_node: VariableId,
}

impl MatchPair {
    pub fn room(a_node: VariableId, s_node: VariableId) -> Self {
        Self {
            level: MatchLevel::Room,
            a_node,
            s_node,
        }
    }

    pub fn wall(a_node: VariableId, s_node: VariableId) -> Self {
        Self {
            level: MatchLevel::WallSurface,
            a_node,
            s_node,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchCandidate {
    /// Sorted, injective in both directions at each level.
    pub pairs: Vec<MatchPair>,
    pub affinity: f64,
    pub transform_hint: FrameTransform,
}

impl MatchCandidate {
    pub fn room_pairs(&self) -> impl Iterator<Item = &MatchPair> {
        self.pairs.iter().filter(|p| p.level == MatchLevel::Room)
    }

    pub fn wall_pairs(&self) -> impl Iterator<Item = &MatchPair> {
        self.pairs.iter().filter(|p| p.level == MatchLevel::WallSurface)
    }

    pub fn is_injective(&self) -> bool {
        injective(&self.pairs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchStatus {
    Matched,
    Ambiguous,
    NoMatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub status: MatchStatus,
    pub best: Option<MatchCandidate>,
    pub cluster: Vec<MatchCandidate>,
}

impl MatchResult {
    pub fn no_match() -> Self {
        Self {
            status: MatchStatus::NoMatch,
            best: None,
            cluster: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("match result serializes")
    }
}

/// A room with its four bounding planes, as seen by the matcher.
#[derive(Clone, Debug, PartialEq)]
pub struct RoomView {
    pub id: VariableId,
    pub center: Point2,
    pub planes: [VariableId; 4],
    /// Gaps between the two parallel plane pairs.
    pub size: (f64, f64),
}

/// Rooms and planes of a graph, read from its current values.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphView {
    pub rooms: Vec<RoomView>,
    pub planes: BTreeMap<VariableId, (f64, f64)>,
}

fn normal(phi: f64) -> Point2 {
    Point2::new(phi.cos(), phi.sin())
}

/// Offset of the plane line `n(phi)·p = d` measured along unit `u`.
fn offset_along(plane: (f64, f64), u: &Point2) -> f64 {
    plane.1 / normal(plane.0).dot(u)
}

impl GraphView {
    pub fn from_graph(graph: &FactorGraph) -> Result<GraphView> {
        let mut planes = BTreeMap::new();
        for id in graph.variable_ids(VariableKind::PlaneVar) {
            let v = graph.value(id)?;
            planes.insert(id, (v[0], v[1]));
        }
        let mut rooms = Vec::new();
        for id in graph.variable_ids(VariableKind::Room) {
            let factor = graph
                .factors_of(id)
                .find(|(fid, _)| fid.kind == FactorKind::RoomToWalls)
                .map(|(_, f)| f)
                .ok_or_else(|| {
                    Error::Structural(format!("room {id:?} lacks four connected planes"))
                })?;
            let p: [VariableId; 4] = factor.variables[1..]
                .try_into()
                .map_err(|_| Error::Structural(format!("room {id:?} lacks four connected planes")))?;
            let v = graph.value(id)?;
            let center = Point2::new(v[0], v[1]);
            let size = room_size(&p.map(|k| planes[&k]));
            rooms.push(RoomView {
                id,
                center,
                planes: p,
                size,
            });
        }
        Ok(GraphView { rooms, planes })
    }

    pub fn room(&self, id: VariableId) -> Result<&RoomView> {
        self.rooms
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::Structural(format!("room {id:?} lacks four connected planes")))
    }

    fn plane(&self, id: VariableId) -> Result<(f64, f64)> {
        self.planes
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Structural(format!("plane {id:?} is missing")))
    }
}

/// Gaps of the two parallel plane pairs among four planes; the first gap
/// is the one containing the first plane.
fn room_size(planes: &[(f64, f64); 4]) -> (f64, f64) {
    let u = normal(planes[0].0);
    let partner = (1..4)
        .max_by(|a, b| {
            let pa = normal(planes[*a].0).dot(&u).abs();
            let pb = normal(planes[*b].0).dot(&u).abs();
            pa.total_cmp(&pb)
        })
        .unwrap();
    let rest: Vec<usize> = (1..4).filter(|k| *k != partner).collect();
    let v = normal(planes[rest[0]].0);
    let first = (offset_along(planes[0], &u) - offset_along(planes[partner], &u)).abs();
    let second = (offset_along(planes[rest[0]], &v) - offset_along(planes[rest[1]], &v)).abs();
    (first, second)
}

fn sizes_agree(a: (f64, f64), s: (f64, f64), gate: f64) -> bool {
    let straight = (a.0 - s.0).abs() <= gate && (a.1 - s.1).abs() <= gate;
    let swapped = (a.0 - s.1).abs() <= gate && (a.1 - s.0).abs() <= gate;
    straight || swapped
}

fn injective(pairs: &[MatchPair]) -> bool {
    let mut a_seen = BTreeMap::new();
    let mut s_seen = BTreeMap::new();
    for p in pairs {
        if *a_seen.entry((p.level, p.a_node)).or_insert(p.s_node) != p.s_node {
            return false;
        }
        if *s_seen.entry((p.level, p.s_node)).or_insert(p.a_node) != p.a_node {
            return false;
        }
    }
    true
}

fn by_affinity(a: &MatchCandidate, b: &MatchCandidate) -> Ordering {
    b.affinity
        .total_cmp(&a.affinity)
        .then_with(|| a.pairs.cmp(&b.pairs))
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Closed-form alignment of matched room centers and the RMS residual.
fn align_rooms(a: &GraphView, s: &GraphView, pairs: &[(usize, usize)]) -> Result<(Pose2, f64)> {
    let pts: Vec<(Point2, Point2)> = pairs
        .iter()
        .map(|(si, ai)| (s.rooms[*si].center, a.rooms[*ai].center))
        .collect();
    let pose = estimate_transform_closed_form(&pts)?;
    let err = rms(pts
        .iter()
        .map(|(sc, ac)| (pose.transform_point(sc) - ac).norm_squared()));
    Ok((pose, err))
}

/// Whether assigning S-room `si` to A-room `ai` keeps every pairwise center
/// distance consistent with the partial assignment.
fn distance_consistent(
    a: &GraphView,
    s: &GraphView,
    partial: &[(usize, usize)],
    si: usize,
    ai: usize,
    gate: f64,
) -> bool {
    partial.iter().all(|(sk, ak)| {
        let ds = (s.rooms[si].center - s.rooms[*sk].center).norm();
        let da = (a.rooms[ai].center - a.rooms[*ak].center).norm();
        (ds - da).abs() <= gate
    })
}

fn gate_table(a: &GraphView, s: &GraphView, cfg: &MatcherConfig) -> Vec<Vec<usize>> {
    s.rooms
        .iter()
        .map(|sr| {
            (0..a.rooms.len())
                .filter(|ai| sizes_agree(a.rooms[*ai].size, sr.size, cfg.dimension_gate))
                .collect()
        })
        .collect()
}

fn enumerate_exhaustive(
    a: &GraphView,
    s: &GraphView,
    gates: &[Vec<usize>],
    cfg: &MatcherConfig,
) -> Vec<Vec<(usize, usize)>> {
    fn go(
        a: &GraphView,
        s: &GraphView,
        gates: &[Vec<usize>],
        cfg: &MatcherConfig,
        partial: &mut Vec<(usize, usize)>,
        used: &mut BTreeSet<usize>,
        out: &mut Vec<Vec<(usize, usize)>>,
    ) {
        let si = partial.len();
        if si == s.rooms.len() {
            out.push(partial.clone());
            return;
        }
        for &ai in &gates[si] {
            if used.contains(&ai) || !distance_consistent(a, s, partial, si, ai, cfg.distance_gate)
            {
                continue;
            }
            used.insert(ai);
            partial.push((si, ai));
            go(a, s, gates, cfg, partial, used, out);
            partial.pop();
            used.remove(&ai);
        }
    }
    let mut out = Vec::new();
    go(a, s, gates, cfg, &mut Vec::new(), &mut BTreeSet::new(), &mut out);
    out
}

fn enumerate_beam(
    a: &GraphView,
    s: &GraphView,
    gates: &[Vec<usize>],
    cfg: &MatcherConfig,
) -> Vec<Vec<(usize, usize)>> {
    let mut beam: Vec<(f64, Vec<(usize, usize)>)> = vec![(0.0, Vec::new())];
    for si in 0..s.rooms.len() {
        let mut next = Vec::new();
        for (_, partial) in &beam {
            for &ai in &gates[si] {
                if partial.iter().any(|(_, ak)| *ak == ai)
                    || !distance_consistent(a, s, partial, si, ai, cfg.distance_gate)
                {
                    continue;
                }
                let mut grown = partial.clone();
                grown.push((si, ai));
                let cost = if grown.len() >= 2 {
                    align_rooms(a, s, &grown).map_or(f64::INFINITY, |(_, e)| e)
                } else {
                    let (x, y) = (a.rooms[ai].size, s.rooms[si].size);
                    (x.0 - y.0).abs().min((x.0 - y.1).abs()) + (x.1 - y.1).abs().min((x.1 - y.0).abs())
                };
                next.push((cost, grown));
            }
        }
        next.sort_by(|x, y| x.0.total_cmp(&y.0).then_with(|| x.1.cmp(&y.1)));
        next.truncate(cfg.beam_width);
        beam = next;
    }
    beam.into_iter().map(|(_, p)| p).collect()
}

/// Room-level candidates: injective assignments of every S-room to an
/// A-room passing the size gate and pairwise distance consistency, with
/// affinity from the aligned room-center residual.
pub fn propose_room_pairs(a: &GraphView, s: &GraphView, cfg: &MatcherConfig) -> Vec<MatchCandidate> {
    if s.rooms.len() < cfg.min_rooms.max(2) || a.rooms.len() < s.rooms.len() {
        return Vec::new();
    }
    let gates = gate_table(a, s, cfg);
    let assignments = if s.rooms.len() <= cfg.exhaustive_limit {
        enumerate_exhaustive(a, s, &gates, cfg)
    } else {
        enumerate_beam(a, s, &gates, cfg)
    };
    let mut out: Vec<MatchCandidate> = assignments
        .into_iter()
        .filter_map(|assign| {
            let (pose, err) = align_rooms(a, s, &assign).ok()?;
            let affinity = (-err / cfg.room_scale).exp();
            (affinity >= cfg.room_affinity_min).then(|| {
                let mut pairs: Vec<MatchPair> = assign
                    .iter()
                    .map(|(si, ai)| MatchPair::room(a.rooms[*ai].id, s.rooms[*si].id))
                    .collect();
                pairs.sort();
                MatchCandidate {
                    pairs,
                    affinity,
                    transform_hint: FrameTransform::map_to_plan(pose),
                }
            })
        })
        .collect();
    out.sort_by(by_affinity);
    out
}

/// Side of a room a plane bounds: the axis and sign of the offset from the
/// room center to the plane.
fn side_role(plane: (f64, f64), center: &Point2) -> (Axis, bool) {
    let n = normal(plane.0);
    let foot = center + n * (plane.1 - n.dot(center));
    let v = foot - center;
    if v.x.abs() >= v.y.abs() {
        (Axis::X, v.x > 0.0)
    } else {
        (Axis::Y, v.y > 0.0)
    }
}

/// Map-frame plane `(phi, d)` expressed in the plan frame through `t`.
pub fn transform_cp(t: &Pose2, plane: (f64, f64)) -> (f64, f64) {
    let phi = wrap_angle(plane.0 + t.theta);
    (phi, plane.1 + normal(phi).dot(&t.translation()))
}

fn roles(planes: [(VariableId, (f64, f64)); 4], center: &Point2) -> Result<BTreeMap<(Axis, bool), VariableId>> {
    let mut out = BTreeMap::new();
    for (id, p) in planes {
        if out.insert(side_role(p, center), id).is_some() {
            return Err(Error::Structural(format!(
                "two planes bound the same side of the room at {center}"
            )));
        }
    }
    Ok(out)
}

/// Wall-surface pairs of a matched room pair, by side role once the
/// S-room is expressed in the plan frame through `hint`.
pub fn propose_wall_pairs(
    room_pair: &MatchPair,
    a: &GraphView,
    s: &GraphView,
    hint: &Pose2,
) -> Result<Vec<MatchPair>> {
    if room_pair.level != MatchLevel::Room {
        return Err(Error::InvalidInput("wall pairs need a room-level pair".into()));
    }
    let ar = a.room(room_pair.a_node)?;
    let sr = s.room(room_pair.s_node)?;
    let mut a_planes = Vec::with_capacity(4);
    let mut s_planes = Vec::with_capacity(4);
    for k in 0..4 {
        a_planes.push((ar.planes[k], a.plane(ar.planes[k])?));
        s_planes.push((sr.planes[k], transform_cp(hint, s.plane(sr.planes[k])?)));
    }
    let a_roles = roles(a_planes.try_into().unwrap(), &ar.center)?;
    let s_roles = roles(s_planes.try_into().unwrap(), &hint.transform_point(&sr.center))?;
    a_roles
        .iter()
        .map(|(role, a_id)| {
            s_roles
                .get(role)
                .map(|s_id| MatchPair::wall(*a_id, *s_id))
                .ok_or_else(|| Error::Structural("room sides do not correspond".into()))
        })
        .collect()
}

/// Expands room candidates with their wall pairs, dropping any whose union
/// maps a surface inconsistently.
pub fn combine_bottom_up(candidates: &[(MatchCandidate, Vec<MatchPair>)]) -> Vec<MatchCandidate> {
    candidates
        .iter()
        .filter_map(|(c, walls)| {
            let pairs: BTreeSet<MatchPair> = c.pairs.iter().chain(walls).copied().collect();
            let pairs: Vec<MatchPair> = pairs.into_iter().collect();
            injective(&pairs).then(|| MatchCandidate {
                pairs,
                ..c.clone()
            })
        })
        .collect()
}

/// Global affinity of an all-level candidate after aligning its room
/// centers, with the alignment as transform hint.
pub fn score_candidate(
    c: &MatchCandidate,
    a: &GraphView,
    s: &GraphView,
    cfg: &MatcherConfig,
) -> Result<(f64, FrameTransform)> {
    let centers: Vec<(Point2, Point2)> = c
        .room_pairs()
        .map(|p| Ok((s.room(p.s_node)?.center, a.room(p.a_node)?.center)))
        .collect::<Result<_>>()?;
    let pose = estimate_transform_closed_form(&centers)?;
    let e_room = rms(centers
        .iter()
        .map(|(sc, ac)| (pose.transform_point(sc) - ac).norm_squared()));
    let residuals: Vec<f64> = c
        .wall_pairs()
        .map(|p| {
            let (aphi, ad) = a.plane(p.a_node)?;
            let (mut phi, mut d) = transform_cp(&pose, s.plane(p.s_node)?);
            if normal(phi).dot(&normal(aphi)) < 0.0 {
                phi += std::f64::consts::PI;
                d = -d;
            }
            let dphi = wrap_angle(phi - aphi);
            Ok(dphi * dphi + (d - ad) * (d - ad))
        })
        .collect::<Result<_>>()?;
    let e_plane = rms(residuals.into_iter());
    let affinity = (-(e_room / cfg.room_scale + e_plane / cfg.plane_scale)).exp();
    Ok((affinity, FrameTransform::map_to_plan(pose)))
}

/// Sorts scored candidates and keeps the prefix within the cluster width
/// of the top score.
pub fn cluster_and_decide(mut scored: Vec<MatchCandidate>, cfg: &MatcherConfig) -> MatchResult {
    scored.sort_by(by_affinity);
    let Some(top) = scored.first() else {
        return MatchResult::no_match();
    };
    if top.affinity < cfg.accept {
        return MatchResult::no_match();
    }
    let floor = top.affinity * (1.0 - cfg.cluster_width);
    let cluster: Vec<MatchCandidate> = scored
        .iter()
        .take_while(|c| c.affinity >= floor)
        .cloned()
        .collect();
    let status = if cluster.len() == 1 {
        MatchStatus::Matched
    } else {
        MatchStatus::Ambiguous
    };
    MatchResult {
        status,
        best: Some(cluster[0].clone()),
        cluster,
    }
}

/// Full pipeline on two views.
pub fn match_views(a: &GraphView, s: &GraphView, cfg: &MatcherConfig) -> MatchResult {
    let rooms = propose_room_pairs(a, s, cfg);
    let expanded: Vec<(MatchCandidate, Vec<MatchPair>)> = rooms
        .into_iter()
        .filter_map(|c| {
            let hint = c.transform_hint.pose;
            let walls: Result<Vec<Vec<MatchPair>>> = c
                .room_pairs()
                .map(|p| propose_wall_pairs(p, a, s, &hint))
                .collect();
            walls.ok().map(|w| (c, w.concat()))
        })
        .collect();
    let scored = combine_bottom_up(&expanded)
        .into_iter()
        .filter_map(|mut c| {
            let (affinity, hint) = score_candidate(&c, a, s, cfg).ok()?;
            c.affinity = affinity;
            c.transform_hint = hint;
            Some(c)
        })
        .collect();
    cluster_and_decide(scored, cfg)
}

/// Matches an S-Graph snapshot against an A-Graph. Fails only when either
/// graph has a room without its four planes.
pub fn match_graphs(a: &FactorGraph, s: &FactorGraph, cfg: &MatcherConfig) -> Result<MatchResult> {
    let a = GraphView::from_graph(a)?;
    let s = GraphView::from_graph(s)?;
    Ok(match_views(&a, &s, cfg))
}

/// Grows an accepted candidate with every unmatched S-room that lands on a
/// size-compatible A-room under the candidate's alignment, then rescores.
pub fn extend_match(
    c: &MatchCandidate,
    a: &GraphView,
    s: &GraphView,
    cfg: &MatcherConfig,
) -> Result<MatchCandidate> {
    let (_, hint) = score_candidate(c, a, s, cfg)?;
    let mut pairs: Vec<MatchPair> = c.pairs.clone();
    let used_a: BTreeSet<VariableId> = c.room_pairs().map(|p| p.a_node).collect();
    let used_s: BTreeSet<VariableId> = c.room_pairs().map(|p| p.s_node).collect();
    let mut taken = used_a.clone();
    for sr in s.rooms.iter().filter(|r| !used_s.contains(&r.id)) {
        let at = hint.pose.transform_point(&sr.center);
        let best = a
            .rooms
            .iter()
            .filter(|ar| !taken.contains(&ar.id))
            .filter(|ar| sizes_agree(ar.size, sr.size, cfg.dimension_gate))
            .map(|ar| ((ar.center - at).norm(), ar))
            .filter(|(d, _)| *d <= cfg.distance_gate)
            .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.id.cmp(&y.1.id)));
        let Some((_, ar)) = best else { continue };
        let room = MatchPair::room(ar.id, sr.id);
        let Ok(walls) = propose_wall_pairs(&room, a, s, &hint.pose) else {
            continue;
        };
        let mut grown = pairs.clone();
        grown.push(room);
        grown.extend(walls);
        grown.sort();
        grown.dedup();
        if injective(&grown) {
            pairs = grown;
            taken.insert(ar.id);
        }
    }
    let mut out = MatchCandidate {
        pairs,
        affinity: c.affinity,
        transform_hint: hint,
    };
    let (affinity, hint) = score_candidate(&out, a, s, cfg)?;
    out.affinity = affinity;
    out.transform_hint = hint;
    Ok(out)
}
