//! Situational graph estimated online in the map frame: keyframes chained
//! by odometry, wall-surface planes, four-wall and two-wall rooms, and a
//! floor node over all rooms.
//!
//! Plane variables keep their normal facing the side the robot observed
//! them from, with a signed offset, so a surface seen from either side of
//! the origin has a single representation.

mod sim;

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use sim::{
    by_surface, simulate_step, Motion, Observation, SimConfig, Simulator, StepOutput,
    DEFAULT_KEYFRAME_SPACING, DEFAULT_ODOM_NOISE, DEFAULT_PLANE_NOISE, DEFAULT_SENSOR_RANGE,
};

use crate::a_graph::SurfaceRef;
use crate::error::{Error, Result};
use crate::factor_graph::{
    information, room_center, wall_center, FactorGraph, FactorId, Measurement, SolveReport,
    SolverConfig, VariableId, VariableKind,
};
use crate::geometry::{wrap_angle, Point2, Pose2};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SGraphConfig {
    /// Association gates on the facing angle and the offset.
    pub assoc_angle: f64,
    pub assoc_dist: f64,
    /// Angular tolerance for parallel, opposed and orthogonal planes.
    pub angle_tol: f64,
    pub min_room_gap: f64,
    pub max_room_gap: f64,
    /// Keyframes that must see both planes of a pair before it becomes a
    /// two-wall room.
    pub two_wall_min_keyframes: usize,
    /// Margin used when testing whether a plane crosses a room interior.
    pub interior_margin: f64,
    /// Odometry noise assumed by the estimator, translation and rotation
    /// per step.
    pub odom_sigma: [f64; 2],
    /// Plane observation noise assumed by the estimator, angle and offset.
    pub plane_sigma: [f64; 2],
    pub solver: SolverConfig,
}

impl Default for SGraphConfig {
    fn default() -> Self {
        Self {
            assoc_angle: 0.15,
            assoc_dist: 0.35,
            angle_tol: 0.15,
            min_room_gap: 1.0,
            max_room_gap: 15.0,
            two_wall_min_keyframes: 3,
            interior_margin: 0.05,
            odom_sigma: DEFAULT_ODOM_NOISE,
            plane_sigma: DEFAULT_PLANE_NOISE,
            solver: SolverConfig::default(),
        }
    }
}

impl SGraphConfig {
    pub fn validate(&self) -> Result<()> {
        let sigmas = self.odom_sigma.iter().chain(&self.plane_sigma);
        if sigmas.clone().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidInput("estimator sigmas must be finite and > 0".into()));
        }
        if !(self.min_room_gap > 0.0 && self.max_room_gap > self.min_room_gap) {
            return Err(Error::InvalidInput("room gap range is empty".into()));
        }
        self.solver.validate()
    }
}

/// One observation of a plane: the keyframe and the body-frame endpoints
/// of the visible part.
#[derive(Clone, Debug, PartialEq)]
pub struct Sighting {
    pub keyframe: usize,
    pub extent: [Point2; 2],
    pub surface: SurfaceRef,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Association {
    pub observation: usize,
    pub plane: VariableId,
    pub created: bool,
}

#[derive(Clone, Debug)]
pub struct SGraph {
    pub graph: FactorGraph,
    pub config: SGraphConfig,
    keyframes: Vec<VariableId>,
    ground_truth: Vec<Pose2>,
    sightings: BTreeMap<VariableId, Vec<Sighting>>,
    rooms: BTreeMap<VariableId, [VariableId; 4]>,
    two_wall_rooms: BTreeMap<VariableId, [VariableId; 2]>,
    floor: Option<(VariableId, FactorId)>,
    last_report: Option<SolveReport>,
}

/// Plane in facing form: unit normal toward the observed side and offset.
#[derive(Clone, Copy, Debug)]
struct Facing {
    id: VariableId,
    angle: f64,
    normal: Point2,
    offset: f64,
}

impl Facing {
    fn new(id: VariableId, v: &DVector<f64>) -> Self {
        Facing {
            id,
            angle: v[0],
            normal: Point2::new(v[0].cos(), v[0].sin()),
            offset: v[1],
        }
    }

    fn in_front(&self, p: &Point2) -> bool {
        self.normal.dot(p) > self.offset
    }

    /// Offset of the plane's line measured along `u`.
    fn offset_along(&self, u: &Point2) -> f64 {
        self.offset / self.normal.dot(u)
    }
}

/// Opposed pair facing each other, as a slab along the first normal.
#[derive(Clone, Copy, Debug)]
struct Slab {
    first: usize,
    second: usize,
    axis: Point2,
    lo: f64,
    hi: f64,
}

fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    a.1.min(b.1) - a.0.max(b.0)
}

impl SGraph {
    pub fn new(config: SGraphConfig) -> Self {
        SGraph {
            graph: FactorGraph::new(),
            config,
            keyframes: Vec::new(),
            ground_truth: Vec::new(),
            sightings: BTreeMap::new(),
            rooms: BTreeMap::new(),
            two_wall_rooms: BTreeMap::new(),
            floor: None,
            last_report: None,
        }
    }

    fn odometry_information(&self) -> DMatrix<f64> {
        let [t, r] = self.config.odom_sigma;
        information::diagonal(&[1.0 / (t * t), 1.0 / (t * t), 1.0 / (r * r)])
    }

    fn plane_information(&self) -> DMatrix<f64> {
        let [a, d] = self.config.plane_sigma;
        information::diagonal(&[1.0 / (a * a), 1.0 / (d * d)])
    }

    pub fn keyframes(&self) -> &[VariableId] {
        &self.keyframes
    }

    pub fn keyframe_pose(&self, index: usize) -> Pose2 {
        let v = self.graph.value(self.keyframes[index]).expect("keyframe exists");
        Pose2::from_slice(v.as_slice())
    }

    /// Keyframe estimates in the map frame, in keyframe order.
    pub fn trajectory(&self) -> Vec<Pose2> {
        (0..self.keyframes.len()).map(|i| self.keyframe_pose(i)).collect()
    }

    /// Ground-truth plan-frame poses recorded alongside each keyframe.
    pub fn ground_truth(&self) -> &[Pose2] {
        &self.ground_truth
    }

    pub fn planes(&self) -> Vec<VariableId> {
        self.sightings.keys().copied().collect()
    }

    pub fn rooms(&self) -> &BTreeMap<VariableId, [VariableId; 4]> {
        &self.rooms
    }

    pub fn two_wall_rooms(&self) -> &BTreeMap<VariableId, [VariableId; 2]> {
        &self.two_wall_rooms
    }

    pub fn floor(&self) -> Option<VariableId> {
        self.floor.map(|f| f.0)
    }

    pub fn last_report(&self) -> Option<&SolveReport> {
        self.last_report.as_ref()
    }

    pub fn sightings(&self, plane: VariableId) -> &[Sighting] {
        self.sightings.get(&plane).map_or(&[], |s| s.as_slice())
    }

    /// Plan surface most often behind a plane's observations.
    pub fn plane_surface(&self, plane: VariableId) -> Option<SurfaceRef> {
        let mut votes: BTreeMap<&SurfaceRef, usize> = BTreeMap::new();
        for s in self.sightings(plane) {
            *votes.entry(&s.surface).or_default() += 1;
        }
        votes
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(a.0)))
            .map(|(s, _)| s.clone())
    }

    /// Extent of the observed part of a plane projected on `dir`, using the
    /// current keyframe estimates.
    pub fn plane_extent(&self, plane: VariableId, dir: &Point2) -> Option<(f64, f64)> {
        let sightings = self.sightings.get(&plane)?;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in sightings {
            let pose = self.keyframe_pose(s.keyframe);
            for p in &s.extent {
                let t = dir.dot(&pose.transform_point(p));
                lo = lo.min(t);
                hi = hi.max(t);
            }
        }
        (lo <= hi).then_some((lo, hi))
    }

    /// Map-frame segment covering the observed part of a plane.
    pub fn plane_segment(&self, plane: VariableId) -> Option<[Point2; 2]> {
        let f = Facing::new(plane, self.graph.value(plane).ok()?);
        let tangent = Point2::new(-f.normal.y, f.normal.x);
        let (lo, hi) = self.plane_extent(plane, &tangent)?;
        let base = f.normal * f.offset;
        Some([base + tangent * lo, base + tangent * hi])
    }

    fn facing(&self, id: VariableId) -> Facing {
        Facing::new(id, self.graph.value(id).expect("plane exists"))
    }

    /// Matches each observation against the known planes, creating new
    /// plane variables for unmatched ones.
    pub fn associate_planes(
        &mut self,
        keyframe: usize,
        observations: &[Observation],
    ) -> Result<Vec<Association>> {
        if keyframe >= self.keyframes.len() {
            return Err(Error::InvalidInput(format!("keyframe {keyframe} is not registered")));
        }
        let pose = self.keyframe_pose(keyframe);
        let mut out = Vec::with_capacity(observations.len());
        for (i, obs) in observations.iter().enumerate() {
            let angle = wrap_angle(obs.phi + pose.theta);
            let normal = Point2::new(angle.cos(), angle.sin());
            let offset = obs.dist + normal.dot(&pose.translation());
            let best = self
                .sightings
                .keys()
                .map(|id| self.facing(*id))
                .filter(|p| wrap_angle(p.angle - angle).abs() < self.config.assoc_angle)
                .map(|p| ((p.offset - offset).abs(), p.id))
                .filter(|(dd, _)| *dd < self.config.assoc_dist)
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let association = match best {
                Some((_, plane)) => Association {
                    observation: i,
                    plane,
                    created: false,
                },
                None => {
                    let plane = self
                        .graph
                        .add_variable(VariableKind::PlaneVar, &[angle, offset])?;
                    self.sightings.insert(plane, Vec::new());
                    Association {
                        observation: i,
                        plane,
                        created: true,
                    }
                }
            };
            out.push(association);
        }
        Ok(out)
    }

    /// Registers one simulator step: keyframe, odometry, plane factors,
    /// room detection, then a full optimization.
    pub fn update(&mut self, step: &StepOutput) -> Result<SolveReport> {
        if self.keyframes.is_empty() {
            self.config.validate()?;
        }
        let (initial, relative) = match (&step.motion, self.keyframes.last()) {
            (Motion::Start(p), None) => (*p, None),
            (Motion::Relative(z), Some(_)) => {
                let prev = self.keyframe_pose(self.keyframes.len() - 1);
                (prev.compose(z), Some(*z))
            }
            (Motion::Start(_), Some(_)) => {
                return Err(Error::InvalidInput("start motion after the first keyframe".into()))
            }
            (Motion::Relative(_), None) => {
                return Err(Error::InvalidInput("first step must carry a start pose".into()))
            }
        };
        let kf = self
            .graph
            .add_variable(VariableKind::Keyframe, &initial.to_array())?;
        match relative {
            None => {
                self.graph.add_prior(kf, information::anchor(3))?;
            }
            Some(z) => {
                let prev = *self.keyframes.last().unwrap();
                self.graph.add_factor(
                    Measurement::Odometry { relative: z },
                    vec![prev, kf],
                    self.odometry_information(),
                )?;
            }
        }
        self.keyframes.push(kf);
        self.ground_truth.push(step.ground_truth);
        let index = self.keyframes.len() - 1;

        let associations = self.associate_planes(index, &step.observations)?;
        for a in associations {
            let obs = &step.observations[a.observation];
            self.graph.add_factor(
                Measurement::PosePlane {
                    phi: obs.phi,
                    dist: obs.dist,
                },
                vec![kf, a.plane],
                self.plane_information(),
            )?;
            self.sightings.entry(a.plane).or_default().push(Sighting {
                keyframe: index,
                extent: obs.extent_points(),
                surface: obs.surface.clone(),
            });
        }
        self.detect_rooms()?;
        let report = self.graph.optimize(&self.config.solver)?;
        self.last_report = Some(report.clone());
        Ok(report)
    }

    fn slabs(&self, planes: &[Facing]) -> Vec<Slab> {
        let tol = self.config.angle_tol;
        let mut out = Vec::new();
        for i in 0..planes.len() {
            for j in i + 1..planes.len() {
                let (a, b) = (&planes[i], &planes[j]);
                if wrap_angle(b.angle - a.angle - PI).abs() >= tol {
                    continue;
                }
                let axis = a.normal;
                let lo = a.offset;
                let hi = b.offset_along(&axis);
                let gap = hi - lo;
                if gap >= self.config.min_room_gap && gap <= self.config.max_room_gap {
                    out.push(Slab {
                        first: i,
                        second: j,
                        axis,
                        lo,
                        hi,
                    });
                }
            }
        }
        out
    }

    /// Whether a plane other than the slab's own lies strictly inside the
    /// slab and overlaps `span` along the slab's tangent.
    fn crossed(&self, planes: &[Facing], slab: &Slab, span: (f64, f64)) -> bool {
        let m = self.config.interior_margin;
        let tangent = Point2::new(-slab.axis.y, slab.axis.x);
        planes.iter().enumerate().any(|(k, p)| {
            if k == slab.first || k == slab.second {
                return false;
            }
            if p.normal.dot(&slab.axis).abs() < (self.config.angle_tol).cos() {
                return false;
            }
            let off = p.offset_along(&slab.axis);
            if off <= slab.lo + m || off >= slab.hi - m {
                return false;
            }
            self.plane_extent(p.id, &tangent)
                .is_some_and(|e| overlap(e, (span.0 + m, span.1 - m)) > 0.0)
        })
    }

    /// Slab bounds expressed along `dir`, which is parallel or
    /// anti-parallel to the slab axis.
    fn slab_along(slab: &Slab, dir: &Point2) -> (f64, f64) {
        if slab.axis.dot(dir) >= 0.0 {
            (slab.lo, slab.hi)
        } else {
            (-slab.hi, -slab.lo)
        }
    }

    fn four_wall_candidates(&self, planes: &[Facing], slabs: &[Slab]) -> Vec<[usize; 4]> {
        let tol = self.config.angle_tol;
        let m = self.config.interior_margin;
        let positions: Vec<Point2> = self.trajectory().iter().map(|p| p.translation()).collect();
        let mut out = Vec::new();
        for (si, s) in slabs.iter().enumerate() {
            for t in &slabs[si + 1..] {
                let ids = [s.first, s.second, t.first, t.second];
                if BTreeSet::from(ids).len() < 4 {
                    continue;
                }
                let rel = wrap_angle(planes[t.first].angle - planes[s.first].angle);
                if (rel.abs() - FRAC_PI_2).abs() >= tol {
                    continue;
                }
                // Each plane's observed extent must reach into the other
                // slab's span.
                let s_dir = Point2::new(-s.axis.y, s.axis.x);
                let t_dir = Point2::new(-t.axis.y, t.axis.x);
                let s_span = Self::slab_along(t, &s_dir);
                let t_span = Self::slab_along(s, &t_dir);
                let reaches = |k: usize, dir: &Point2, span: (f64, f64)| {
                    self.plane_extent(planes[k].id, dir)
                        .is_some_and(|e| overlap(e, span) > m)
                };
                if !(reaches(s.first, &s_dir, s_span)
                    && reaches(s.second, &s_dir, s_span)
                    && reaches(t.first, &t_dir, t_span)
                    && reaches(t.second, &t_dir, t_span))
                {
                    continue;
                }
                let inside = positions
                    .iter()
                    .any(|p| ids.iter().all(|k| planes[*k].in_front(p)));
                if !inside {
                    continue;
                }
                if self.crossed(planes, s, s_span) || self.crossed(planes, t, t_span) {
                    continue;
                }
                out.push(ids);
            }
        }
        out
    }

    /// Scans the current planes for new rooms. Returns the room variables
    /// added by this call; a four-wall room replaces any two-wall room
    /// over the same pair of planes.
    pub fn detect_rooms(&mut self) -> Result<Vec<VariableId>> {
        let planes: Vec<Facing> = self.sightings.keys().map(|id| self.facing(*id)).collect();
        let slabs = self.slabs(&planes);
        let mut added = Vec::new();
        let mut changed = false;

        let known: BTreeSet<BTreeSet<VariableId>> = self
            .rooms
            .values()
            .map(|p| p.iter().copied().collect())
            .collect();
        for ids in self.four_wall_candidates(&planes, &slabs) {
            let vars = ids.map(|k| planes[k].id);
            if known.contains(&vars.iter().copied().collect::<BTreeSet<_>>()) {
                continue;
            }
            let values: Vec<&DVector<f64>> = vars
                .iter()
                .map(|v| self.graph.value(*v))
                .collect::<Result<_>>()?;
            let (center, _) = room_center(&values);
            let room = self
                .graph
                .add_variable(VariableKind::Room, center.as_slice())?;
            let mut fv = vec![room];
            fv.extend(vars);
            self.graph
                .add_factor(Measurement::RoomToWalls, fv, information::structure())?;
            self.rooms.insert(room, vars);
            added.push(room);
            changed = true;
        }

        let in_room = |a: VariableId, b: VariableId, rooms: &BTreeMap<VariableId, [VariableId; 4]>| {
            rooms.values().any(|p| p.contains(&a) && p.contains(&b))
        };
        let superseded: Vec<VariableId> = self
            .two_wall_rooms
            .iter()
            .filter(|(_, p)| in_room(p[0], p[1], &self.rooms))
            .map(|(g, _)| *g)
            .collect();
        for g in superseded {
            self.graph.remove_variable(g);
            self.two_wall_rooms.remove(&g);
            changed = true;
        }

        let positions: Vec<Point2> = self.trajectory().iter().map(|p| p.translation()).collect();
        for slab in &slabs {
            let (a, b) = (planes[slab.first].id, planes[slab.second].id);
            if in_room(a, b, &self.rooms)
                || self.two_wall_rooms.values().any(|p| *p == [a, b])
            {
                continue;
            }
            let seen_a: BTreeSet<usize> = self.sightings[&a].iter().map(|s| s.keyframe).collect();
            let common: Vec<usize> = self.sightings[&b]
                .iter()
                .map(|s| s.keyframe)
                .filter(|k| seen_a.contains(k))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if common.len() < self.config.two_wall_min_keyframes {
                continue;
            }
            let tangent = Point2::new(-slab.axis.y, slab.axis.x);
            let (Some(ea), Some(eb)) = (
                self.plane_extent(a, &tangent),
                self.plane_extent(b, &tangent),
            ) else {
                continue;
            };
            let span = (ea.0.max(eb.0), ea.1.min(eb.1));
            if span.1 <= span.0 || self.crossed(&planes, slab, span) {
                continue;
            }
            let anchor =
                common.iter().map(|k| positions[*k]).sum::<Point2>() / common.len() as f64;
            let (center, _, _) = wall_center(
                self.graph.value(a)?,
                self.graph.value(b)?,
                &anchor,
            );
            let gamma = self
                .graph
                .add_variable(VariableKind::TwoWallRoom, center.as_slice())?;
            self.graph.add_factor(
                Measurement::WallCenter {
                    anchor: [anchor.x, anchor.y],
                },
                vec![gamma, a, b],
                information::structure(),
            )?;
            self.two_wall_rooms.insert(gamma, [a, b]);
            added.push(gamma);
            changed = true;
        }

        if changed {
            self.rebuild_floor()?;
        }
        Ok(added)
    }

    fn rebuild_floor(&mut self) -> Result<()> {
        let members: Vec<VariableId> = self
            .rooms
            .keys()
            .chain(self.two_wall_rooms.keys())
            .copied()
            .collect();
        let previous = self.floor.take();
        if let Some((_, factor)) = previous {
            self.graph.remove_factor(factor);
        }
        if members.is_empty() {
            if let Some((floor, _)) = previous {
                self.graph.remove_variable(floor);
            }
            return Ok(());
        }
        let centroid = members
            .iter()
            .map(|r| {
                let v = self.graph.value(*r)?;
                Ok(Point2::new(v[0], v[1]))
            })
            .collect::<Result<Vec<_>>>()?
            .iter()
            .sum::<Point2>()
            / members.len() as f64;
        let floor = match previous {
            Some((f, _)) => f,
            None => self
                .graph
                .add_variable(VariableKind::Floor, centroid.as_slice())?,
        };
        let mut vars = vec![floor];
        vars.extend(&members);
        let factor = self
            .graph
            .add_factor(Measurement::FloorToRooms, vars, information::floor())?;
        self.floor = Some((floor, factor));
        Ok(())
    }

    /// Plan surfaces behind a room's planes, from the observation log.
    pub fn room_surfaces(&self, room: VariableId) -> Option<Vec<Option<SurfaceRef>>> {
        self.rooms
            .get(&room)
            .map(|p| p.iter().map(|v| self.plane_surface(*v)).collect())
    }

    /// `t,x,y,theta,gt_x,gt_y,gt_theta` rows, one per keyframe.
    pub fn trajectory_csv(&self, estimates: &[Pose2]) -> String {
        let mut out = String::from("t,x,y,theta,gt_x,gt_y,gt_theta\n");
        for (i, (e, g)) in estimates.iter().zip(&self.ground_truth).enumerate() {
            let _ = writeln!(
                out,
                "{i},{},{},{},{},{},{}",
                e.x, e.y, e.theta, g.x, g.y, g.theta
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        self.graph.to_json()
    }
}

/// Free-function form of [`SGraph::update`].
pub fn update_s_graph(sgraph: &mut SGraph, step: &StepOutput) -> Result<SolveReport> {
    sgraph.update(step)
}

/// Runs a whole simulation into a fresh S-Graph.
pub fn simulate(plan: &crate::a_graph::FloorPlan, sim: &SimConfig, config: &SGraphConfig) -> Result<(SGraph, Pose2)> {
    let mut simulator = Simulator::new(plan, sim.clone())?;
    let offset = simulator.map_offset();
    let mut sgraph = SGraph::new(config.clone());
    while let Some(step) = simulator.step() {
        sgraph.update(&step)?;
    }
    Ok((sgraph, offset))
}

#[cfg(test)]
mod tests;
