//! Planar geometric kernel: SE(2) poses, oriented wall planes in
//! closest-point form, and frame transforms between the online map frame
//! and the plan frame.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point2 = Vector2<f64>;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let r = angle.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

pub fn rotation(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Derivative of [`rotation`] with respect to its angle.
pub fn rotation_derivative(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(-s, -c, c, -s)
}

/// Rigid planar pose. `theta` is kept in `(-pi, pi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Display for Pose2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6}, {:.6} rad)", self.x, self.y, self.theta)
    }
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub const fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.theta]
    }

    pub fn translation(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn rotation(&self) -> Matrix2<f64> {
        rotation(self.theta)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let t = self.transform_point(&other.translation());
        Pose2::new(t.x, t.y, self.theta + other.theta)
    }

    pub fn inverse(&self) -> Pose2 {
        let t = -(self.rotation().transpose() * self.translation());
        Pose2::new(t.x, t.y, -self.theta)
    }

    pub fn transform_point(&self, p: &Point2) -> Point2 {
        self.rotation() * p + self.translation()
    }

    /// Relative pose `self⁻¹ ∘ other`.
    pub fn between(&self, other: &Pose2) -> Pose2 {
        self.inverse().compose(other)
    }

    pub fn approx_eq(&self, other: &Pose2, tol: f64) -> bool {
        (self.x - other.x).abs() <= tol
            && (self.y - other.y).abs() <= tol
            && wrap_angle(self.theta - other.theta).abs() <= tol
    }
}

/// Reference frame tag: `M` is the robot's online map frame, `B` the plan frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Frame {
    #[serde(rename = "M")]
    Map,
    #[serde(rename = "B")]
    Plan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

/// Oriented planar wall surface. The closest point of the plane to the frame
/// origin is `dist * normal`, with `dist >= 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: Point2,
    pub dist: f64,
    pub frame: Frame,
}

impl Plane {
    /// Builds the plane from its azimuth and signed distance, normalized so the
    /// normal points away from the origin.
    pub fn from_cp(phi: f64, dist: f64, frame: Frame) -> Plane {
        let (s, c) = phi.sin_cos();
        normalize_away_from_origin(Point2::new(c, s), dist, frame)
            .expect("unit normal from azimuth")
    }

    /// Azimuth of the normal.
    pub fn phi(&self) -> f64 {
        self.normal.y.atan2(self.normal.x)
    }

    /// `[phi, theta, d]` with the elevation fixed at zero for vertical walls.
    pub fn cp_triplet(&self) -> [f64; 3] {
        [self.phi(), 0.0, self.dist]
    }

    pub fn closest_point(&self) -> Point2 {
        self.normal * self.dist
    }

    /// Unit direction along the plane, the normal rotated by +90°.
    pub fn tangent(&self) -> Point2 {
        Point2::new(-self.normal.y, self.normal.x)
    }

    pub fn signed_distance(&self, p: &Point2) -> f64 {
        self.normal.dot(p) - self.dist
    }

    pub fn project(&self, p: &Point2) -> Point2 {
        p - self.normal * self.signed_distance(p)
    }

    pub fn axis(&self) -> Axis {
        classify_axis(self)
    }
}

/// Flips the sign of `(normal, dist)` so that `dist >= 0` and rescales the
/// normal to unit length.
pub fn normalize_away_from_origin(normal: Point2, dist: f64, frame: Frame) -> Result<Plane> {
    let norm = normal.norm();
    if !(norm > 0.0) || !norm.is_finite() || !dist.is_finite() {
        return Err(Error::InvalidInput(format!(
            "plane normal must be finite and non-zero, got ({}, {})",
            normal.x, normal.y
        )));
    }
    let n = normal / norm;
    let plane = if dist < 0.0 {
        Plane {
            normal: -n,
            dist: -dist,
            frame,
        }
    } else {
        Plane {
            normal: n,
            dist,
            frame,
        }
    };
    Ok(plane)
}

/// Ties (`|n_x| == |n_y|`) resolve to `X`.
pub fn classify_axis(p: &Plane) -> Axis {
    if p.normal.x.abs() >= p.normal.y.abs() {
        Axis::X
    } else {
        Axis::Y
    }
}

/// Rigid transform between two frames: `target = pose ∘ source`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTransform {
    pub pose: Pose2,
    pub source: Frame,
    pub target: Frame,
}

impl FrameTransform {
    pub fn new(pose: Pose2, source: Frame, target: Frame) -> Self {
        Self {
            pose,
            source,
            target,
        }
    }

    /// The `^B x_M` transform taking map coordinates into plan coordinates.
    pub fn map_to_plan(pose: Pose2) -> Self {
        Self::new(pose, Frame::Map, Frame::Plan)
    }

    pub fn identity(frame: Frame) -> Self {
        Self::new(Pose2::identity(), frame, frame)
    }

    pub fn inverse(&self) -> Self {
        Self::new(self.pose.inverse(), self.target, self.source)
    }

    pub fn compose(&self, inner: &FrameTransform) -> Result<FrameTransform> {
        if inner.target != self.source {
            return Err(Error::FrameMismatch(format!(
                "cannot compose {:?}->{:?} after {:?}->{:?}",
                self.source, self.target, inner.source, inner.target
            )));
        }
        Ok(Self::new(
            self.pose.compose(&inner.pose),
            inner.source,
            self.target,
        ))
    }

    pub fn transform_point(&self, p: &Point2) -> Point2 {
        self.pose.transform_point(p)
    }
}

/// Re-expresses `p` in the target frame of `t`, normalized away from the
/// target origin.
pub fn transform_plane(t: &FrameTransform, p: &Plane) -> Result<Plane> {
    if p.frame != t.source {
        return Err(Error::FrameMismatch(format!(
            "plane is in {:?} but transform maps {:?}->{:?}",
            p.frame, t.source, t.target
        )));
    }
    let normal = t.pose.rotation() * p.normal;
    let dist = p.dist + normal.dot(&t.pose.translation());
    normalize_away_from_origin(normal, dist, t.target)
}

/// Least-squares rigid 2D alignment (rotation + translation, no scale)
/// minimizing `Σ ‖target − T(source)‖²` over the given pairs.
pub fn estimate_transform_closed_form(pairs: &[(Point2, Point2)]) -> Result<Pose2> {
    if pairs.len() < 2 {
        return Err(Error::Degenerate(format!(
            "need at least 2 point pairs, got {}",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let source_centroid = pairs.iter().map(|(s, _)| s).sum::<Point2>() / n;
    let target_centroid = pairs.iter().map(|(_, t)| t).sum::<Point2>() / n;

    let mut dot = 0.0;
    let mut cross = 0.0;
    let mut spread = 0.0;
    for (s, t) in pairs {
        let s = s - source_centroid;
        let t = t - target_centroid;
        dot += s.dot(&t);
        cross += s.x * t.y - s.y * t.x;
        spread += s.norm_squared();
    }
    let scale = pairs
        .iter()
        .map(|(s, _)| s.norm_squared())
        .fold(1.0, f64::max);
    if spread <= 1e-20 * scale {
        return Err(Error::Degenerate(
            "all source points coincide; rotation is unobservable".into(),
        ));
    }
    let theta = cross.atan2(dot);
    let t = target_centroid - rotation(theta) * source_centroid;
    Ok(Pose2::new(t.x, t.y, theta))
}
