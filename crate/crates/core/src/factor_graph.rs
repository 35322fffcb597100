//! Sparse nonlinear least squares over typed variables and residual factors.
//!
//! Every graph in the crate (plan graph, online situational graph, merged
//! graph) is a [`FactorGraph`]. Costs are `Σ rᵀ Λ r` over factors, minimized
//! with Levenberg–Marquardt on a sparse Cholesky factorization of the
//! damped normal equations.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix, SparseEntryMut};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation, rotation_derivative, wrap_angle, Pose2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariableKind {
    Keyframe,
    PlaneVar,
    Wall,
    Room,
    TwoWallRoom,
    Doorway,
    Floor,
    Transform,
}

impl VariableKind {
    pub fn dim(self) -> usize {
        match self {
            VariableKind::Keyframe | VariableKind::Transform => 3,
            _ => 2,
        }
    }

    /// Index of the component that holds an angle, if any.
    fn angle_component(self) -> Option<usize> {
        match self {
            VariableKind::Keyframe | VariableKind::Transform => Some(2),
            VariableKind::PlaneVar => Some(0),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VariableId {
    pub kind: VariableKind,
    pub index: usize,
}

impl VariableId {
    pub const fn new(kind: VariableKind, index: usize) -> Self {
        Self { kind, index }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FactorKind {
    Odometry,
    PosePlane,
    RoomToWalls,
    WallCenter,
    DoorwayToRooms,
    RoomToRoom,
    PlaneToPlane,
    FloorToRooms,
    Prior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactorId {
    pub kind: FactorKind,
    pub index: usize,
}

/// Kind-specific measurement payload. The variant determines the residual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Measurement {
    /// Relative pose from the first keyframe to the second.
    Odometry { relative: Pose2 },
    /// Plane `(phi, d)` observed in the keyframe body frame, signed to agree
    /// with the plane variable's orientation.
    PosePlane { phi: f64, dist: f64 },
    /// Room center from its `+x, -x, +y, -y` wall surfaces.
    RoomToWalls,
    /// Wall (or two-wall room) center from two opposed surfaces and an anchor
    /// point along the wall.
    WallCenter { anchor: [f64; 2] },
    /// Room-relative doorway offsets for the two connected rooms.
    DoorwayToRooms {
        first_offset: [f64; 2],
        second_offset: [f64; 2],
    },
    /// Plan room against map room, through the map→plan transform if present.
    RoomToRoom,
    /// Plan surface against map surface; `flip` reverses the transformed
    /// map plane so both share an orientation.
    PlaneToPlane { flip: bool },
    /// Floor node against the centroid of its rooms.
    FloorToRooms,
    Prior { value: Vec<f64> },
}

impl Measurement {
    pub fn kind(&self) -> FactorKind {
        match self {
            Measurement::Odometry { .. } => FactorKind::Odometry,
            Measurement::PosePlane { .. } => FactorKind::PosePlane,
            Measurement::RoomToWalls => FactorKind::RoomToWalls,
            Measurement::WallCenter { .. } => FactorKind::WallCenter,
            Measurement::DoorwayToRooms { .. } => FactorKind::DoorwayToRooms,
            Measurement::RoomToRoom => FactorKind::RoomToRoom,
            Measurement::PlaneToPlane { .. } => FactorKind::PlaneToPlane,
            Measurement::FloorToRooms => FactorKind::FloorToRooms,
            Measurement::Prior { .. } => FactorKind::Prior,
        }
    }
}

/// Default information matrices, inverse variances of the nominal noise.
pub mod information {
    use nalgebra::DMatrix;

    pub fn diagonal(values: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(values))
    }

    pub fn odometry() -> DMatrix<f64> {
        diagonal(&[100.0, 100.0, 400.0])
    }

    pub fn plane() -> DMatrix<f64> {
        diagonal(&[400.0, 2500.0])
    }

    pub fn structure() -> DMatrix<f64> {
        diagonal(&[25.0, 25.0])
    }

    pub fn merge() -> DMatrix<f64> {
        diagonal(&[100.0, 100.0])
    }

    pub fn floor() -> DMatrix<f64> {
        diagonal(&[1.0, 1.0])
    }

    pub fn anchor(dim: usize) -> DMatrix<f64> {
        DMatrix::identity(dim, dim) * 1e6
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variable {
    pub value: DVector<f64>,
    pub fixed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Factor {
    pub measurement: Measurement,
    pub variables: Vec<VariableId>,
    pub information: DMatrix<f64>,
}

impl Factor {
    pub fn kind(&self) -> FactorKind {
        self.measurement.kind()
    }

    pub fn residual_dim(&self) -> usize {
        match &self.measurement {
            Measurement::Odometry { .. } => 3,
            Measurement::Prior { value } => value.len(),
            _ => 2,
        }
    }

    /// Residual components that are angle differences.
    pub fn angular_components(&self) -> Vec<usize> {
        match &self.measurement {
            Measurement::Odometry { .. } => vec![2],
            Measurement::PosePlane { .. } | Measurement::PlaneToPlane { .. } => vec![0],
            Measurement::Prior { .. } => self.variables[0]
                .kind
                .angle_component()
                .into_iter()
                .collect(),
            _ => vec![],
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        use VariableKind::*;
        let kinds: Vec<VariableKind> = self.variables.iter().map(|v| v.kind).collect();
        let ok = match &self.measurement {
            Measurement::Odometry { .. } => kinds == [Keyframe, Keyframe],
            Measurement::PosePlane { .. } => kinds == [Keyframe, PlaneVar],
            Measurement::RoomToWalls => {
                kinds == [Room, PlaneVar, PlaneVar, PlaneVar, PlaneVar]
            }
            Measurement::WallCenter { .. } => {
                kinds.len() == 3
                    && matches!(kinds[0], Wall | TwoWallRoom)
                    && kinds[1..] == [PlaneVar, PlaneVar]
            }
            Measurement::DoorwayToRooms { .. } => kinds == [Doorway, Room, Room],
            Measurement::RoomToRoom => kinds == [Room, Room] || kinds == [Room, Room, Transform],
            Measurement::PlaneToPlane { .. } => {
                kinds == [PlaneVar, PlaneVar] || kinds == [PlaneVar, PlaneVar, Transform]
            }
            Measurement::FloorToRooms => {
                kinds.len() >= 2
                    && kinds[0] == Floor
                    && kinds[1..].iter().all(|k| matches!(k, Room | TwoWallRoom))
            }
            Measurement::Prior { value } => kinds.len() == 1 && kinds[0].dim() == value.len(),
        };
        if !ok {
            return Err(format!(
                "variables {:?} do not fit a {:?} factor",
                kinds,
                self.kind()
            ));
        }
        let m = self.residual_dim();
        if self.information.shape() != (m, m) {
            return Err(format!(
                "information is {:?}, expected {m}x{m}",
                self.information.shape()
            ));
        }
        if (&self.information - self.information.transpose()).amax()
            > 1e-9 * self.information.amax().max(1.0)
        {
            return Err("information matrix is not symmetric".into());
        }
        if self.information.clone().cholesky().is_none() {
            return Err("information matrix is not positive definite".into());
        }
        Ok(())
    }

    /// Residual and per-variable Jacobians at the given variable values.
    pub fn linearize(&self, values: &[&DVector<f64>]) -> (DVector<f64>, Vec<DMatrix<f64>>) {
        let (mut r, jacs) = residuals::linearize(&self.measurement, values);
        if let Measurement::Prior { .. } = self.measurement {
            for a in self.angular_components() {
                r[a] = wrap_angle(r[a]);
            }
        }
        (r, jacs)
    }

    pub fn residual(&self, values: &[&DVector<f64>]) -> DVector<f64> {
        self.linearize(values).0
    }
}

mod residuals {
    use super::*;

    fn v2(v: &DVector<f64>) -> Vector2<f64> {
        Vector2::new(v[0], v[1])
    }

    fn mat2(m: Matrix2<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 2, m.as_slice())
    }

    /// Closest point `d·n(phi)` of a `(phi, d)` plane and its 2x2 Jacobian.
    pub fn closest_point(plane: &DVector<f64>) -> (Vector2<f64>, Matrix2<f64>) {
        let (s, c) = plane[0].sin_cos();
        let d = plane[1];
        let cp = Vector2::new(d * c, d * s);
        let jac = Matrix2::new(-d * s, c, d * c, s);
        (cp, jac)
    }

    /// Wall center from two surfaces and an anchor: the midpoint of the two
    /// closest points, moved along the wall to the anchor's projection.
    pub fn wall_center(
        p1: &DVector<f64>,
        p2: &DVector<f64>,
        anchor: &Vector2<f64>,
    ) -> (Vector2<f64>, Matrix2<f64>, Matrix2<f64>) {
        let (c1, j1) = closest_point(p1);
        let (c2, j2) = closest_point(p2);
        let w = (c1 + c2) * 0.5;
        let norm = w.norm();
        if norm > 1e-9 {
            let u = w / norm;
            let su = anchor.dot(&u);
            let center = w + anchor - u * su;
            let proj = Matrix2::identity() - u * u.transpose();
            let d_center_dw =
                Matrix2::identity() - (u * anchor.transpose() + Matrix2::identity() * su) * proj / norm;
            (center, d_center_dw * j1 * 0.5, d_center_dw * j2 * 0.5)
        } else {
            // Surfaces symmetric about the origin: the wall axis is the first normal.
            let (s, c) = p1[0].sin_cos();
            let n = Vector2::new(c, s);
            let dn = Vector2::new(-s, c);
            let sn = anchor.dot(&n);
            let center = w + anchor - n * sn;
            let mut d1 = j1 * 0.5;
            let extra = -(n * anchor.dot(&dn) + dn * sn);
            d1[(0, 0)] += extra.x;
            d1[(1, 0)] += extra.y;
            (center, d1, j2 * 0.5)
        }
    }

    pub fn room_center(planes: &[&DVector<f64>]) -> (Vector2<f64>, Vec<Matrix2<f64>>) {
        let mut center = Vector2::zeros();
        let mut jacs = Vec::with_capacity(planes.len());
        for p in planes {
            let (cp, j) = closest_point(p);
            center += cp * 0.5;
            jacs.push(j * 0.5);
        }
        (center, jacs)
    }

    pub(super) fn linearize(
        m: &Measurement,
        v: &[&DVector<f64>],
    ) -> (DVector<f64>, Vec<DMatrix<f64>>) {
        match m {
            Measurement::Odometry { relative } => {
                let (ta, tha) = (v2(v[0]), v[0][2]);
                let (tb, thb) = (v2(v[1]), v[1][2]);
                let tz = relative.translation();
                let delta = tb - ta;
                let rb_t = rotation(thb).transpose();
                let t_err = rotation(tha - thb) * tz - rb_t * delta;
                let th_err = wrap_angle(relative.theta - thb + tha);
                let r = DVector::from_row_slice(&[t_err.x, t_err.y, th_err]);

                let d_tha = rotation_derivative(tha - thb) * tz;
                let d_thb = -rotation_derivative(tha - thb) * tz + rotation_derivative(-thb) * delta;
                let mut ja = DMatrix::zeros(3, 3);
                let mut jb = DMatrix::zeros(3, 3);
                ja.view_mut((0, 0), (2, 2)).copy_from(&rb_t);
                jb.view_mut((0, 0), (2, 2)).copy_from(&(-rb_t));
                ja[(0, 2)] = d_tha.x;
                ja[(1, 2)] = d_tha.y;
                jb[(0, 2)] = d_thb.x;
                jb[(1, 2)] = d_thb.y;
                ja[(2, 2)] = 1.0;
                jb[(2, 2)] = -1.0;
                (r, vec![ja, jb])
            }
            Measurement::PosePlane { phi, dist } => {
                let (x, y, th) = (v[0][0], v[0][1], v[0][2]);
                let (pphi, pd) = (v[1][0], v[1][1]);
                let (s, c) = pphi.sin_cos();
                let body_phi = pphi - th;
                let body_d = pd - (c * x + s * y);
                let r = DVector::from_row_slice(&[wrap_angle(body_phi - phi), body_d - dist]);
                let jk = DMatrix::from_row_slice(2, 3, &[0.0, 0.0, -1.0, -c, -s, 0.0]);
                let jp = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, x * s - y * c, 1.0]);
                (r, vec![jk, jp])
            }
            Measurement::RoomToWalls => {
                let (center, jacs) = room_center(&v[1..]);
                let r = v2(v[0]) - center;
                let mut out = vec![DMatrix::identity(2, 2)];
                out.extend(jacs.into_iter().map(|j| mat2(-j)));
                (DVector::from_row_slice(r.as_slice()), out)
            }
            Measurement::WallCenter { anchor } => {
                let anchor = Vector2::new(anchor[0], anchor[1]);
                let (center, j1, j2) = wall_center(v[1], v[2], &anchor);
                let r = v2(v[0]) - center;
                (
                    DVector::from_row_slice(r.as_slice()),
                    vec![DMatrix::identity(2, 2), mat2(-j1), mat2(-j2)],
                )
            }
            Measurement::DoorwayToRooms {
                first_offset,
                second_offset,
            } => {
                let p1 = v2(v[1]) + Vector2::new(first_offset[0], first_offset[1]);
                let p2 = v2(v[2]) + Vector2::new(second_offset[0], second_offset[1]);
                let r = p1 - p2;
                (
                    DVector::from_row_slice(r.as_slice()),
                    vec![
                        DMatrix::zeros(2, 2),
                        DMatrix::identity(2, 2),
                        -DMatrix::identity(2, 2),
                    ],
                )
            }
            Measurement::RoomToRoom => {
                let plan_room = v2(v[0]);
                let map_room = v2(v[1]);
                let mut jacs = vec![-DMatrix::identity(2, 2)];
                let r = if v.len() == 3 {
                    let t = v[2];
                    let rot = rotation(t[2]);
                    let drot = rotation_derivative(t[2]) * map_room;
                    jacs.push(mat2(rot));
                    jacs.push(DMatrix::from_row_slice(
                        2,
                        3,
                        &[1.0, 0.0, drot.x, 0.0, 1.0, drot.y],
                    ));
                    rot * map_room + Vector2::new(t[0], t[1]) - plan_room
                } else {
                    jacs.push(DMatrix::identity(2, 2));
                    map_room - plan_room
                };
                (DVector::from_row_slice(r.as_slice()), jacs)
            }
            Measurement::PlaneToPlane { flip } => {
                let (bphi, bd) = (v[0][0], v[0][1]);
                let (mphi, md) = (v[1][0], v[1][1]);
                let (tx, ty, tth) = if v.len() == 3 {
                    (v[2][0], v[2][1], v[2][2])
                } else {
                    (0.0, 0.0, 0.0)
                };
                let phi = mphi + tth;
                let (s, c) = phi.sin_cos();
                let d = md + c * tx + s * ty;
                let g = -s * tx + c * ty;
                let sign = if *flip { -1.0 } else { 1.0 };
                let phi_out = if *flip { phi + PI } else { phi };
                let r = DVector::from_row_slice(&[wrap_angle(phi_out - bphi), sign * d - bd]);
                let mut jacs = vec![
                    -DMatrix::identity(2, 2),
                    DMatrix::from_row_slice(2, 2, &[1.0, 0.0, sign * g, sign]),
                ];
                if v.len() == 3 {
                    jacs.push(DMatrix::from_row_slice(
                        2,
                        3,
                        &[0.0, 0.0, 1.0, sign * c, sign * s, sign * g],
                    ));
                }
                (r, jacs)
            }
            Measurement::FloorToRooms => {
                let n = (v.len() - 1) as f64;
                let centroid = v[1..].iter().map(|r| v2(r)).sum::<Vector2<f64>>() / n;
                let r = v2(v[0]) - centroid;
                let mut jacs = vec![DMatrix::identity(2, 2)];
                jacs.extend((1..v.len()).map(|_| -DMatrix::identity(2, 2) / n));
                (DVector::from_row_slice(r.as_slice()), jacs)
            }
            Measurement::Prior { value } => {
                // Angular components are wrapped by `Factor::linearize`,
                // which knows the variable kind.
                let r = v[0] - DVector::from_row_slice(value);
                let dim = r.len();
                (r, vec![DMatrix::identity(dim, dim)])
            }
        }
    }
}

pub use residuals::{closest_point as plane_closest_point, room_center, wall_center};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_lambda: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.5,
            rel_tol: 1e-9,
            abs_tol: 1e-10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.max_iterations > 0
            && self.initial_lambda > 0.0
            && self.rel_tol > 0.0
            && self.abs_tol > 0.0;
        if !positive || !(self.lambda_up > 1.0) || !(self.lambda_down > 0.0 && self.lambda_down < 1.0) {
            return Err(Error::InvalidInput(format!("invalid solver config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    #[serde(with = "chi2_list")]
    pub chi2_per_factor: BTreeMap<FactorId, f64>,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub message: String,
}

mod chi2_list {
    use super::FactorId;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        factor: FactorId,
        chi2: f64,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<FactorId, f64>, s: S) -> Result<S::Ok, S::Error> {
        map.iter()
            .map(|(factor, chi2)| Entry {
                factor: *factor,
                chi2: *chi2,
            })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<FactorId, f64>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        Ok(entries.into_iter().map(|e| (e.factor, e.chi2)).collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FactorGraph {
    variables: BTreeMap<VariableId, Variable>,
    factors: BTreeMap<FactorId, Factor>,
    next_variable: BTreeMap<VariableKind, usize>,
    next_factor: usize,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(&mut self, kind: VariableKind, initial: &[f64]) -> Result<VariableId> {
        let next = self.next_variable.entry(kind).or_insert(0);
        let id = VariableId::new(kind, *next);
        if initial.len() != kind.dim() {
            return Err(Error::DimensionMismatch(id, kind.dim(), initial.len()));
        }
        if initial.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite initial value for {id:?}")));
        }
        *next += 1;
        let mut value = DVector::from_row_slice(initial);
        if let Some(a) = kind.angle_component() {
            value[a] = wrap_angle(value[a]);
        }
        self.variables.insert(id, Variable { value, fixed: false });
        Ok(id)
    }

    pub fn add_factor(
        &mut self,
        measurement: Measurement,
        variables: Vec<VariableId>,
        information: DMatrix<f64>,
    ) -> Result<FactorId> {
        let factor = Factor {
            measurement,
            variables,
            information,
        };
        factor
            .validate()
            .map_err(|e| Error::MalformedFactor(None, e))?;
        if let Some(missing) = factor
            .variables
            .iter()
            .find(|v| !self.variables.contains_key(v))
        {
            return Err(Error::MissingVariable(*missing));
        }
        let id = FactorId {
            kind: factor.kind(),
            index: self.next_factor,
        };
        self.next_factor += 1;
        self.factors.insert(id, factor);
        Ok(id)
    }

    pub fn add_prior(&mut self, var: VariableId, information: DMatrix<f64>) -> Result<FactorId> {
        let value = self.value(var)?.as_slice().to_vec();
        self.add_factor(Measurement::Prior { value }, vec![var], information)
    }

    /// Removes a variable together with every factor that touches it.
    pub fn remove_variable(&mut self, id: VariableId) -> Option<Variable> {
        self.factors.retain(|_, f| !f.variables.contains(&id));
        self.variables.remove(&id)
    }

    pub fn remove_factor(&mut self, id: FactorId) -> Option<Factor> {
        self.factors.remove(&id)
    }

    pub fn set_fixed(&mut self, id: VariableId, fixed: bool) -> Result<()> {
        self.variables
            .get_mut(&id)
            .ok_or(Error::MissingVariable(id))?
            .fixed = fixed;
        Ok(())
    }

    pub fn is_fixed(&self, id: VariableId) -> bool {
        self.variables.get(&id).is_some_and(|v| v.fixed)
    }

    pub fn value(&self, id: VariableId) -> Result<&DVector<f64>> {
        self.variables
            .get(&id)
            .map(|v| &v.value)
            .ok_or(Error::MissingVariable(id))
    }

    pub fn set_value(&mut self, id: VariableId, value: &[f64]) -> Result<()> {
        let var = self.variables.get_mut(&id).ok_or(Error::MissingVariable(id))?;
        if value.len() != var.value.len() {
            return Err(Error::DimensionMismatch(id, var.value.len(), value.len()));
        }
        var.value.copy_from_slice(value);
        if let Some(a) = id.kind.angle_component() {
            var.value[a] = wrap_angle(var.value[a]);
        }
        Ok(())
    }

    pub fn variable(&self, id: VariableId) -> Option<&Variable> {
        self.variables.get(&id)
    }

    pub fn variables(&self) -> impl Iterator<Item = (&VariableId, &Variable)> {
        self.variables.iter()
    }

    pub fn variable_ids(&self, kind: VariableKind) -> Vec<VariableId> {
        self.variables
            .keys()
            .filter(|id| id.kind == kind)
            .copied()
            .collect()
    }

    pub fn factor(&self, id: FactorId) -> Option<&Factor> {
        self.factors.get(&id)
    }

    pub fn factors(&self) -> impl Iterator<Item = (&FactorId, &Factor)> {
        self.factors.iter()
    }

    pub fn factors_of(&self, var: VariableId) -> impl Iterator<Item = (&FactorId, &Factor)> {
        self.factors
            .iter()
            .filter(move |(_, f)| f.variables.contains(&var))
    }

    pub fn num_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn count_variables(&self, kind: VariableKind) -> usize {
        self.variables.keys().filter(|id| id.kind == kind).count()
    }

    pub fn count_factors(&self, kind: FactorKind) -> usize {
        self.factors.keys().filter(|id| id.kind == kind).count()
    }

    fn factor_values(&self, factor: &Factor) -> Result<Vec<&DVector<f64>>> {
        factor.variables.iter().map(|v| self.value(*v)).collect()
    }

    pub fn evaluate_residual(&self, id: FactorId) -> Result<DVector<f64>> {
        let factor = self
            .factors
            .get(&id)
            .ok_or_else(|| Error::MalformedFactor(Some(id), "no such factor".into()))?;
        Ok(factor.residual(&self.factor_values(factor)?))
    }

    pub fn factor_cost(&self, id: FactorId) -> Result<f64> {
        let factor = &self.factors[&id];
        let r = self.evaluate_residual(id)?;
        Ok(r.dot(&(&factor.information * &r)))
    }

    pub fn total_cost(&self) -> Result<f64> {
        self.factors.keys().map(|id| self.factor_cost(*id)).sum()
    }

    /// Cost restricted to factors of one kind.
    pub fn cost_of_kind(&self, kind: FactorKind) -> Result<f64> {
        self.factors
            .keys()
            .filter(|id| id.kind == kind)
            .map(|id| self.factor_cost(*id))
            .sum()
    }

    fn check_gauge(&self) -> Result<()> {
        if self.factors.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let anchored = self.factors.keys().any(|f| f.kind == FactorKind::Prior)
            || self.variables.values().any(|v| v.fixed);
        if anchored {
            Ok(())
        } else {
            Err(Error::GaugeFreedom)
        }
    }

    /// Levenberg–Marquardt over every non-fixed variable referenced by a
    /// factor. Values are updated in place.
    pub fn optimize(&mut self, config: &SolverConfig) -> Result<SolveReport> {
        config.validate()?;
        self.check_gauge()?;
        for (id, f) in &self.factors {
            for v in &f.variables {
                if !self.variables.contains_key(v) {
                    return Err(Error::MalformedFactor(
                        Some(*id),
                        format!("missing variable {v:?}"),
                    ));
                }
            }
        }

        let mut offsets: BTreeMap<VariableId, usize> = BTreeMap::new();
        for f in self.factors.values() {
            for v in &f.variables {
                if !self.variables[v].fixed {
                    offsets.insert(*v, 0);
                }
            }
        }
        let mut dim = 0;
        for (id, off) in offsets.iter_mut() {
            *off = dim;
            dim += id.kind.dim();
        }

        let initial_cost = self.total_cost()?;
        let mut cost = initial_cost;
        let mut history = vec![cost];
        let mut lambda = config.initial_lambda;
        let mut iterations = 0;
        let mut converged = false;
        let mut message = String::new();

        if dim == 0 {
            converged = true;
            message = "no free variables".into();
        }

        while !converged && iterations < config.max_iterations {
            let (hessian, gradient) = self.normal_equations(&offsets, dim)?;
            if gradient.amax() <= config.abs_tol {
                converged = true;
                message = "gradient below tolerance".into();
                break;
            }
            let scaling: Vec<f64> = (0..dim)
                .map(|i| diagonal_entry(&hessian, i).clamp(1e-6, 1e32))
                .collect();

            let mut accepted = false;
            while iterations < config.max_iterations {
                iterations += 1;
                let mut damped = hessian.clone();
                for (i, s) in scaling.iter().enumerate() {
                    if let Some(SparseEntryMut::NonZero(v)) = damped.get_entry_mut(i, i) {
                        *v += lambda * s;
                    }
                }
                let step = match CscCholesky::factor(&damped) {
                    Ok(chol) => {
                        let rhs = DMatrix::from_column_slice(dim, 1, (-&gradient).as_slice());
                        DVector::from_column_slice(chol.solve(&rhs).as_slice())
                    }
                    Err(_) => {
                        lambda *= config.lambda_up;
                        if lambda > 1e20 {
                            break;
                        }
                        continue;
                    }
                };

                let backup = self.snapshot_values(&offsets);
                self.apply_step(&offsets, &step);
                let new_cost = self.total_cost()?;
                if new_cost.is_finite() && new_cost < cost {
                    let decrease = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                    cost = new_cost;
                    history.push(cost);
                    lambda = (lambda * config.lambda_down).max(1e-12);
                    accepted = true;
                    if decrease <= config.rel_tol {
                        converged = true;
                        message = "relative cost decrease below tolerance".into();
                    }
                    break;
                }
                self.restore_values(backup);
                let x_norm = offsets
                    .keys()
                    .map(|id| self.variables[id].value.norm_squared())
                    .sum::<f64>()
                    .sqrt();
                if step.norm() <= 1e-14 * (1.0 + x_norm) {
                    converged = true;
                    message = "step below numerical resolution".into();
                    break;
                }
                lambda *= config.lambda_up;
                if lambda > 1e20 {
                    break;
                }
            }
            if converged {
                break;
            }
            if !accepted {
                message = "damping exhausted without an acceptable step".into();
                break;
            }
            if cost <= config.abs_tol * config.abs_tol {
                converged = true;
                message = "cost at zero".into();
            }
        }
        if !converged && message.is_empty() {
            message = "iteration limit reached".into();
        }

        let chi2_per_factor = self
            .factors
            .keys()
            .map(|id| Ok((*id, self.factor_cost(*id)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(SolveReport {
            converged,
            iterations,
            initial_cost,
            final_cost: cost,
            chi2_per_factor,
            cost_history: history,
            message,
        })
    }

    fn normal_equations(
        &self,
        offsets: &BTreeMap<VariableId, usize>,
        dim: usize,
    ) -> Result<(CscMatrix<f64>, DVector<f64>)> {
        let mut coo = CooMatrix::new(dim, dim);
        let mut gradient = DVector::zeros(dim);
        for i in 0..dim {
            coo.push(i, i, 0.0);
        }
        for factor in self.factors.values() {
            let values = self.factor_values(factor)?;
            let (r, jacs) = factor.linearize(&values);
            let info = &factor.information;
            let blocks: Vec<(usize, DMatrix<f64>)> = factor
                .variables
                .iter()
                .zip(jacs)
                .filter_map(|(v, j)| offsets.get(v).map(|off| (*off, j)))
                .collect();
            for (off_a, ja) in &blocks {
                let ja_t_info = ja.transpose() * info;
                let g = &ja_t_info * &r;
                for k in 0..g.len() {
                    gradient[off_a + k] += g[k];
                }
                for (off_b, jb) in &blocks {
                    let h = &ja_t_info * jb;
                    for c in 0..h.ncols() {
                        for rr in 0..h.nrows() {
                            let val = h[(rr, c)];
                            if val != 0.0 {
                                coo.push(off_a + rr, off_b + c, val);
                            }
                        }
                    }
                }
            }
        }
        Ok((CscMatrix::from(&coo), gradient))
    }

    fn snapshot_values(&self, offsets: &BTreeMap<VariableId, usize>) -> Vec<(VariableId, DVector<f64>)> {
        offsets
            .keys()
            .map(|id| (*id, self.variables[id].value.clone()))
            .collect()
    }

    fn restore_values(&mut self, backup: Vec<(VariableId, DVector<f64>)>) {
        for (id, value) in backup {
            self.variables.get_mut(&id).expect("backed up variable").value = value;
        }
    }

    fn apply_step(&mut self, offsets: &BTreeMap<VariableId, usize>, step: &DVector<f64>) {
        for (id, off) in offsets {
            let var = self.variables.get_mut(id).expect("indexed variable");
            for k in 0..var.value.len() {
                var.value[k] += step[off + k];
            }
            if let Some(a) = id.kind.angle_component() {
                var.value[a] = wrap_angle(var.value[a]);
            }
        }
    }

    /// Factors whose analytic Jacobians disagree with central finite
    /// differences by more than `tolerance` (relative, floored at 1).
    pub fn check_jacobians(&self, tolerance: f64) -> Vec<FactorId> {
        self.check_jacobians_with(tolerance, |f, v| f.linearize(v).1)
    }

    pub fn check_jacobians_with<F>(&self, tolerance: f64, analytic: F) -> Vec<FactorId>
    where
        F: Fn(&Factor, &[&DVector<f64>]) -> Vec<DMatrix<f64>>,
    {
        self.factors
            .iter()
            .filter_map(|(id, f)| {
                let values = self.factor_values(f).ok()?;
                let err = jacobian_error(f, &values, &analytic);
                (err > tolerance).then_some(*id)
            })
            .collect()
    }

    pub fn to_document(&self) -> GraphDocument {
        GraphDocument {
            variables: self
                .variables
                .iter()
                .map(|(id, v)| VariableRecord {
                    id: *id,
                    value: v.value.as_slice().to_vec(),
                    fixed: v.fixed,
                })
                .collect(),
            factors: self
                .factors
                .iter()
                .map(|(id, f)| FactorRecord {
                    id: *id,
                    variables: f.variables.clone(),
                    measurement: f.measurement.clone(),
                    information: (0..f.information.nrows())
                        .map(|r| f.information.row(r).iter().copied().collect())
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: GraphDocument) -> Result<Self> {
        let mut g = FactorGraph::new();
        for rec in doc.variables {
            if rec.value.len() != rec.id.kind.dim() {
                return Err(Error::DimensionMismatch(rec.id, rec.id.kind.dim(), rec.value.len()));
            }
            let next = g.next_variable.entry(rec.id.kind).or_insert(0);
            *next = (*next).max(rec.id.index + 1);
            g.variables.insert(
                rec.id,
                Variable {
                    value: DVector::from_vec(rec.value),
                    fixed: rec.fixed,
                },
            );
        }
        for rec in doc.factors {
            let n = rec.information.len();
            if rec.information.iter().any(|row| row.len() != n) {
                return Err(Error::MalformedFactor(Some(rec.id), "information is not square".into()));
            }
            let information =
                DMatrix::from_row_iterator(n, n, rec.information.into_iter().flatten());
            let factor = Factor {
                measurement: rec.measurement,
                variables: rec.variables,
                information,
            };
            factor
                .validate()
                .map_err(|e| Error::MalformedFactor(Some(rec.id), e))?;
            if factor.kind() != rec.id.kind {
                return Err(Error::MalformedFactor(Some(rec.id), "kind mismatch".into()));
            }
            if let Some(missing) = factor.variables.iter().find(|v| !g.variables.contains_key(v)) {
                return Err(Error::MissingVariable(*missing));
            }
            g.next_factor = g.next_factor.max(rec.id.index + 1);
            g.factors.insert(rec.id, factor);
        }
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GraphDocument = serde_json::from_str(text).map_err(|source| Error::Parse {
            context: "graph document".into(),
            source,
        })?;
        Self::from_document(doc)
    }
}

fn diagonal_entry(m: &CscMatrix<f64>, i: usize) -> f64 {
    match m.get_entry(i, i) {
        Some(e) => e.into_value(),
        None => 0.0,
    }
}

/// Largest relative discrepancy between analytic and central-difference
/// Jacobians for one factor.
fn jacobian_error<F>(factor: &Factor, values: &[&DVector<f64>], analytic: &F) -> f64
where
    F: Fn(&Factor, &[&DVector<f64>]) -> Vec<DMatrix<f64>>,
{
    const STEP: f64 = 1e-6;
    let jacs = analytic(factor, values);
    let angular = factor.angular_components();
    let mut worst: f64 = 0.0;
    for (vi, jac) in jacs.iter().enumerate() {
        for k in 0..values[vi].len() {
            let eval = |delta: f64| {
                let mut owned: Vec<DVector<f64>> = values.iter().map(|v| (*v).clone()).collect();
                owned[vi][k] += delta;
                let refs: Vec<&DVector<f64>> = owned.iter().collect();
                factor.residual(&refs)
            };
            let mut diff = eval(STEP) - eval(-STEP);
            for &a in &angular {
                diff[a] = wrap_angle(diff[a]);
            }
            let numeric = diff / (2.0 * STEP);
            if jac.nrows() != numeric.len() || jac.ncols() != values[vi].len() {
                return f64::INFINITY;
            }
            for row in 0..numeric.len() {
                let a = jac[(row, k)];
                let n = numeric[row];
                let err = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
                worst = worst.max(err);
            }
        }
    }
    worst
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableRecord {
    pub id: VariableId,
    pub value: Vec<f64>,
    pub fixed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorRecord {
    pub id: FactorId,
    pub variables: Vec<VariableId>,
    pub measurement: Measurement,
    pub information: Vec<Vec<f64>>,
}

/// JSON interchange form of a [`FactorGraph`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub variables: Vec<VariableRecord>,
    pub factors: Vec<FactorRecord>,
}
