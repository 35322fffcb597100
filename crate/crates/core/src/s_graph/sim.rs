//! Synthetic robot: follows a waypoint path through the plan, reporting
//! noisy odometry and the wall surfaces it can see as body-frame planes.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::a_graph::{FloorPlan, SurfaceRef, WallFace, DOOR_WIDTH};
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Point2, Pose2};

/// Spacing of visibility samples along a wall surface.
const SAMPLE_SPACING: f64 = 0.25;
/// A surface needs this many visible samples to be reported.
const MIN_VISIBLE_SAMPLES: usize = 3;

pub const DEFAULT_KEYFRAME_SPACING: f64 = 0.5;
pub const DEFAULT_ODOM_NOISE: [f64; 2] = [0.01, 0.2 * std::f64::consts::PI / 180.0];
pub const DEFAULT_PLANE_NOISE: [f64; 2] = [0.3 * std::f64::consts::PI / 180.0, 0.02];
pub const DEFAULT_SENSOR_RANGE: f64 = 8.0;

fn default_spacing() -> f64 {
    DEFAULT_KEYFRAME_SPACING
}

fn default_odom_noise() -> [f64; 2] {
    DEFAULT_ODOM_NOISE
}

fn default_plane_noise() -> [f64; 2] {
    DEFAULT_PLANE_NOISE
}

fn default_sensor_range() -> f64 {
    DEFAULT_SENSOR_RANGE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub waypoints: Vec<[f64; 2]>,
    #[serde(default = "default_spacing")]
    pub keyframe_spacing: f64,
    /// `(sigma_xy per step, sigma_theta per step)`.
    #[serde(default = "default_odom_noise")]
    pub odom_noise: [f64; 2],
    /// `(sigma_phi, sigma_d)`.
    #[serde(default = "default_plane_noise")]
    pub plane_noise: [f64; 2],
    #[serde(default = "default_sensor_range")]
    pub sensor_range: f64,
    #[serde(default)]
    pub seed: u64,
    /// True map→plan transform. `None` puts the map origin at the first
    /// ground-truth pose.
    #[serde(default)]
    pub map_offset: Option<Pose2>,
}

impl SimConfig {
    pub fn new(waypoints: Vec<[f64; 2]>) -> Self {
        Self {
            waypoints,
            keyframe_spacing: DEFAULT_KEYFRAME_SPACING,
            odom_noise: DEFAULT_ODOM_NOISE,
            plane_noise: DEFAULT_PLANE_NOISE,
            sensor_range: DEFAULT_SENSOR_RANGE,
            seed: 0,
            map_offset: None,
        }
    }

    pub fn noiseless(mut self) -> Self {
        self.odom_noise = [0.0, 0.0];
        self.plane_noise = [0.0, 0.0];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = self.odom_noise.iter().chain(&self.plane_noise);
        if sigmas.clone().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidInput("noise sigmas must be finite and >= 0".into()));
        }
        if !(self.keyframe_spacing > 0.0) || !self.keyframe_spacing.is_finite() {
            return Err(Error::InvalidInput("keyframe spacing must be positive".into()));
        }
        if !(self.sensor_range > 0.0) {
            return Err(Error::InvalidInput("sensor range must be positive".into()));
        }
        if self.waypoints.len() < 2 {
            return Err(Error::InvalidInput("need at least 2 waypoints".into()));
        }
        if self.waypoints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("waypoints must be finite".into()));
        }
        Ok(())
    }
}

/// A wall surface seen from a keyframe. `phi` and `dist` describe the
/// surface in the body frame with the normal facing the robot; `extent`
/// holds the body-frame endpoints of the visible part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub surface: SurfaceRef,
    pub phi: f64,
    pub dist: f64,
    pub extent: [[f64; 2]; 2],
}

impl Observation {
    pub fn extent_points(&self) -> [Point2; 2] {
        self.extent.map(|p| Point2::new(p[0], p[1]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Motion {
    /// Map-frame pose of the first keyframe.
    Start(Pose2),
    /// Noisy relative motion from the previous keyframe.
    Relative(Pose2),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub index: usize,
    pub motion: Motion,
    pub observations: Vec<Observation>,
    pub ground_truth: Pose2,
}

struct FaceSamples {
    face: WallFace,
    wall_index: usize,
    /// Parameter along `a -> b` and position of every sample outside other
    /// walls' material.
    samples: Vec<(f64, Point2)>,
}

struct Segment {
    a: Point2,
    b: Point2,
    openings: Vec<Point2>,
}

pub struct Simulator {
    config: SimConfig,
    faces: Vec<FaceSamples>,
    walls: Vec<Segment>,
    path: Vec<Point2>,
    cumulative: Vec<f64>,
    steps: usize,
    next: usize,
    previous: Option<Pose2>,
    map_offset: Pose2,
    rng: ChaCha8Rng,
}

/// Parameter `t` along `p -> q` where it crosses `a -> b`, if it does.
fn crossing(p: &Point2, q: &Point2, a: &Point2, b: &Point2) -> Option<f64> {
    let r = q - p;
    let s = b - a;
    let denom = r.x * s.y - r.y * s.x;
    if denom.abs() < 1e-12 {
        return None;
    }
    let ap = a - p;
    let t = (ap.x * s.y - ap.y * s.x) / denom;
    let u = (ap.x * r.y - ap.y * r.x) / denom;
    let eps = 1e-9;
    ((-eps..=1.0 + eps).contains(&t) && (-eps..=1.0 + eps).contains(&u)).then_some(t)
}

impl Segment {
    fn in_opening(&self, p: &Point2) -> bool {
        self.openings
            .iter()
            .any(|o| (o - p).norm() <= DOOR_WIDTH / 2.0 + 1e-9)
    }

    /// Whether `p -> q` passes through the wall outside its openings.
    fn blocks(&self, p: &Point2, q: &Point2) -> bool {
        match crossing(p, q, &self.a, &self.b) {
            Some(t) => !self.in_opening(&(p + (q - p) * t)),
            None => false,
        }
    }
}

impl Simulator {
    pub fn new(plan: &FloorPlan, config: SimConfig) -> Result<Simulator> {
        config.validate()?;
        let openings = plan.openings();
        let walls: Vec<Segment> = plan
            .walls
            .iter()
            .map(|w| Segment {
                a: w.start(),
                b: w.end(),
                openings: openings.get(&w.id).cloned().unwrap_or_default(),
            })
            .collect();

        let mut faces = Vec::new();
        for (wall_index, w) in plan.walls.iter().enumerate() {
            for face in [
                w.face(crate::a_graph::FaceSide::Left),
                w.face(crate::a_graph::FaceSide::Right),
            ] {
                let len = (face.b - face.a).norm();
                let n = (len / SAMPLE_SPACING).ceil().max(1.0) as usize;
                let samples = (0..n)
                    .map(|i| (i as f64 + 0.5) / n as f64)
                    .map(|t| (t, face.a + (face.b - face.a) * t))
                    .filter(|(_, p)| {
                        let on_center = p - face.facing * (w.thickness / 2.0);
                        !walls[wall_index].in_opening(&on_center)
                    })
                    .filter(|(_, p)| {
                        plan.walls.iter().enumerate().all(|(j, other)| {
                            j == wall_index || other.distance_to(p) >= other.thickness / 2.0
                        })
                    })
                    .collect();
                faces.push(FaceSamples {
                    face,
                    wall_index,
                    samples,
                });
            }
        }

        let mut path: Vec<Point2> = Vec::new();
        for w in &config.waypoints {
            let p = Point2::new(w[0], w[1]);
            if path.last().is_none_or(|q| (q - p).norm() > 1e-9) {
                path.push(p);
            }
        }
        if path.len() < 2 {
            return Err(Error::Simulation("waypoint path has zero length".into()));
        }
        let (lo, hi) = plan.bounds();
        for p in &path {
            if p.x < lo.x || p.y < lo.y || p.x > hi.x || p.y > hi.y {
                return Err(Error::Simulation(format!(
                    "waypoint ({}, {}) lies outside the plan",
                    p.x, p.y
                )));
            }
            for (w, seg) in plan.walls.iter().zip(&walls) {
                if w.distance_to(p) < w.thickness / 2.0 && !seg.in_opening(p) {
                    return Err(Error::Simulation(format!(
                        "waypoint ({}, {}) lies inside wall `{}`",
                        p.x, p.y, w.id
                    )));
                }
            }
        }
        for pair in path.windows(2) {
            for (w, seg) in plan.walls.iter().zip(&walls) {
                if seg.blocks(&pair[0], &pair[1]) {
                    return Err(Error::Simulation(format!(
                        "path from ({}, {}) to ({}, {}) crosses wall `{}` outside a doorway",
                        pair[0].x, pair[0].y, pair[1].x, pair[1].y, w.id
                    )));
                }
            }
        }

        let mut cumulative = vec![0.0];
        for pair in path.windows(2) {
            cumulative.push(cumulative.last().unwrap() + (pair[1] - pair[0]).norm());
        }
        let total = *cumulative.last().unwrap();
        let steps = (total / config.keyframe_spacing + 1e-9).floor() as usize + 1;

        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut sim = Simulator {
            config,
            faces,
            walls,
            path,
            cumulative,
            steps,
            next: 0,
            previous: None,
            map_offset: Pose2::identity(),
            rng,
        };
        let first = sim.pose_at(0);
        sim.map_offset = sim.config.map_offset.unwrap_or(first);
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// True map→plan transform used to generate the data.
    pub fn map_offset(&self) -> Pose2 {
        self.map_offset
    }

    pub fn num_steps(&self) -> usize {
        self.steps
    }

    /// Ground-truth plan-frame pose of step `k`.
    pub fn pose_at(&self, k: usize) -> Pose2 {
        let s = (k as f64 * self.config.keyframe_spacing).min(*self.cumulative.last().unwrap());
        let last = self.path.len() - 2;
        let i = (0..=last)
            .find(|&i| s < self.cumulative[i + 1])
            .unwrap_or(last);
        let (a, b) = (self.path[i], self.path[i + 1]);
        let dir = (b - a) / (b - a).norm();
        let p = a + dir * (s - self.cumulative[i]);
        Pose2::new(p.x, p.y, dir.y.atan2(dir.x))
    }

    fn gaussian(&mut self, sigma: f64) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        sigma * z
    }

    /// Noise-free observations from a plan-frame pose.
    pub fn observe(&self, pose: &Pose2) -> Vec<Observation> {
        let robot = pose.translation();
        let body = pose.inverse();
        let mut out = Vec::new();
        for fs in &self.faces {
            let face = &fs.face;
            if face.facing.dot(&(robot - face.a)) <= 0.0 {
                continue;
            }
            let visible: Vec<f64> = fs
                .samples
                .iter()
                .filter(|(_, p)| (p - robot).norm() <= self.config.sensor_range)
                .filter(|(_, p)| {
                    self.walls
                        .iter()
                        .enumerate()
                        .all(|(j, w)| j == fs.wall_index || !w.blocks(&robot, p))
                })
                .map(|(t, _)| *t)
                .collect();
            if visible.len() < MIN_VISIBLE_SAMPLES {
                continue;
            }
            let (t0, t1) = visible
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
                    (lo.min(*t), hi.max(*t))
                });
            let ends = [t0, t1].map(|t| {
                let p = body.transform_point(&(face.a + (face.b - face.a) * t));
                [p.x, p.y]
            });
            let offset = face.facing.dot(&face.a);
            let phi = face.facing.y.atan2(face.facing.x);
            out.push(Observation {
                surface: face.surface.clone(),
                phi: wrap_angle(phi - pose.theta),
                dist: offset - face.facing.dot(&robot),
                extent: ends,
            });
        }
        out
    }

    /// Advances one keyframe along the path; `None` once the path is done.
    pub fn step(&mut self) -> Option<StepOutput> {
        if self.next >= self.steps {
            return None;
        }
        let k = self.next;
        self.next += 1;
        let truth = self.pose_at(k);
        let motion = match self.previous {
            None => Motion::Start(self.map_offset.inverse().compose(&truth)),
            Some(prev) => {
                let exact = prev.between(&truth);
                let [sxy, sth] = self.config.odom_noise;
                let (nx, ny, nth) = (self.gaussian(sxy), self.gaussian(sxy), self.gaussian(sth));
                Motion::Relative(Pose2::new(exact.x + nx, exact.y + ny, exact.theta + nth))
            }
        };
        self.previous = Some(truth);
        let mut observations = self.observe(&truth);
        let [sphi, sd] = self.config.plane_noise;
        for o in &mut observations {
            o.phi = wrap_angle(o.phi + self.gaussian(sphi));
            o.dist += self.gaussian(sd);
        }
        Some(StepOutput {
            index: k,
            motion,
            observations,
            ground_truth: truth,
        })
    }

    /// Remaining steps of the run.
    pub fn run(mut self) -> Vec<StepOutput> {
        std::iter::from_fn(|| self.step()).collect()
    }
}

/// Free-function form of [`Simulator::step`].
pub fn simulate_step(sim: &mut Simulator) -> Option<StepOutput> {
    sim.step()
}

/// Observations grouped by surface, for tests and diagnostics.
pub fn by_surface(obs: &[Observation]) -> BTreeMap<SurfaceRef, &Observation> {
    obs.iter().map(|o| (o.surface.clone(), o)).collect()
}
