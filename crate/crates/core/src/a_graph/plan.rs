//! Floor-plan description: walls with thickness, rectangular rooms bounded
//! by four wall surfaces, and doorways between pairs of rooms.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_away_from_origin, Axis, Frame, Plane, Point2};

/// Width of the opening a doorway cuts into its wall.
pub const DOOR_WIDTH: f64 = 0.9;
/// Maximum distance between a doorway and the wall its rooms share.
pub const DOOR_WALL_TOLERANCE: f64 = 0.5;

const AXIS_TOL: f64 = 1e-9;
const COVER_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WallSpec {
    pub id: String,
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub thickness: f64,
}

impl WallSpec {
    pub fn start(&self) -> Point2 {
        Point2::new(self.start[0], self.start[1])
    }

    pub fn end(&self) -> Point2 {
        Point2::new(self.end[0], self.end[1])
    }

    pub fn length(&self) -> f64 {
        (self.end() - self.start()).norm()
    }

    pub fn direction(&self) -> Point2 {
        (self.end() - self.start()).normalize()
    }

    /// Unit normal on the left of the start→end direction.
    pub fn left_normal(&self) -> Point2 {
        let u = self.direction();
        Point2::new(-u.y, u.x)
    }

    pub fn face(&self, side: FaceSide) -> WallFace {
        let facing = match side {
            FaceSide::Left => self.left_normal(),
            FaceSide::Right => -self.left_normal(),
        };
        let offset = facing * (self.thickness / 2.0);
        let a = self.start() + offset;
        let b = self.end() + offset;
        WallFace {
            surface: SurfaceRef {
                wall: self.id.clone(),
                side,
            },
            plane: normalize_away_from_origin(facing, facing.dot(&a), Frame::Plan)
                .expect("wall has positive length"),
            facing,
            a,
            b,
        }
    }

    /// Distance from `p` to the wall centerline segment.
    pub fn distance_to(&self, p: &Point2) -> f64 {
        let (a, b) = (self.start(), self.end());
        let ab = b - a;
        let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
        (a + ab * t - p).norm()
    }

    fn is_vertical(&self) -> bool {
        (self.start[0] - self.end[0]).abs() <= AXIS_TOL
    }

    fn is_horizontal(&self) -> bool {
        (self.start[1] - self.end[1]).abs() <= AXIS_TOL
    }

    fn span(&self, axis: Axis) -> (f64, f64) {
        let (a, b) = match axis {
            Axis::X => (self.start[0], self.end[0]),
            Axis::Y => (self.start[1], self.end[1]),
        };
        (a.min(b), a.max(b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FaceSide {
    Left,
    Right,
}

/// One of the two planar surfaces of a wall.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SurfaceRef {
    pub wall: String,
    pub side: FaceSide,
}

impl fmt::Display for SurfaceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{:?}", self.wall, self.side)
    }
}

/// A wall surface with its finite extent and the direction it faces (away
/// from the wall material).
#[derive(Clone, Debug, PartialEq)]
pub struct WallFace {
    pub surface: SurfaceRef,
    pub plane: Plane,
    pub facing: Point2,
    pub a: Point2,
    pub b: Point2,
}

/// The wall referenced on each side of a rectangular room.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomSides {
    pub pos_x: String,
    pub neg_x: String,
    pub pos_y: String,
    pub neg_y: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub id: String,
    pub surfaces: RoomSides,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoorwaySpec {
    pub id: String,
    pub position: [f64; 2],
    pub rooms: [String; 2],
}

impl DoorwaySpec {
    pub fn position(&self) -> Point2 {
        Point2::new(self.position[0], self.position[1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloorPlan {
    pub walls: Vec<WallSpec>,
    pub rooms: Vec<RoomSpec>,
    #[serde(default)]
    pub doorways: Vec<DoorwaySpec>,
}

/// Interior rectangle of a room and the surfaces bounding it, in
/// `+x, -x, +y, -y` order.
#[derive(Clone, Debug, PartialEq)]
pub struct RoomGeometry {
    pub id: String,
    pub min: Point2,
    pub max: Point2,
    pub surfaces: [SurfaceRef; 4],
}

impl RoomGeometry {
    pub fn center(&self) -> Point2 {
        (self.min + self.max) / 2.0
    }

    pub fn size(&self) -> (f64, f64) {
        (self.max.x - self.min.x, self.max.y - self.min.y)
    }

    pub fn contains(&self, p: &Point2) -> bool {
        p.x > self.min.x && p.x < self.max.x && p.y > self.min.y && p.y < self.max.y
    }
}

fn invalid(id: &str, reason: impl Into<String>) -> Error {
    Error::PlanValidation {
        id: id.to_string(),
        reason: reason.into(),
    }
}

impl FloorPlan {
    pub fn from_json(text: &str) -> Result<FloorPlan> {
        let plan: FloorPlan = serde_json::from_str(text).map_err(|source| Error::Parse {
            context: "floor plan".into(),
            source,
        })?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn wall(&self, id: &str) -> Option<&WallSpec> {
        self.walls.iter().find(|w| w.id == id)
    }

    pub fn faces(&self) -> Vec<WallFace> {
        self.walls
            .iter()
            .flat_map(|w| [w.face(FaceSide::Left), w.face(FaceSide::Right)])
            .collect()
    }

    pub fn face(&self, surface: &SurfaceRef) -> Option<WallFace> {
        self.wall(&surface.wall).map(|w| w.face(surface.side))
    }

    /// Interior geometry of one room, checking that its four walls are
    /// axis-aligned and enclose a rectangle of positive area.
    pub fn room_geometry(&self, room: &RoomSpec) -> Result<RoomGeometry> {
        let get = |wid: &str| {
            self.wall(wid)
                .ok_or_else(|| invalid(&room.id, format!("references missing wall `{wid}`")))
        };
        let px = get(&room.surfaces.pos_x)?;
        let nx = get(&room.surfaces.neg_x)?;
        let py = get(&room.surfaces.pos_y)?;
        let ny = get(&room.surfaces.neg_y)?;
        for (w, vertical) in [(px, true), (nx, true), (py, false), (ny, false)] {
            let ok = if vertical {
                w.is_vertical()
            } else {
                w.is_horizontal()
            };
            if !ok {
                return Err(invalid(
                    &room.id,
                    format!("wall `{}` is not aligned with its room side", w.id),
                ));
            }
        }
        let min = Point2::new(nx.start[0] + nx.thickness / 2.0, ny.start[1] + ny.thickness / 2.0);
        let max = Point2::new(px.start[0] - px.thickness / 2.0, py.start[1] - py.thickness / 2.0);
        if !(max.x > min.x && max.y > min.y) {
            return Err(invalid(&room.id, "room sides do not bound a positive area"));
        }
        for w in [px, nx] {
            let (lo, hi) = w.span(Axis::Y);
            if lo > min.y + COVER_TOL || hi < max.y - COVER_TOL {
                return Err(invalid(
                    &room.id,
                    format!("wall `{}` does not enclose the room", w.id),
                ));
            }
        }
        for w in [py, ny] {
            let (lo, hi) = w.span(Axis::X);
            if lo > min.x + COVER_TOL || hi < max.x - COVER_TOL {
                return Err(invalid(
                    &room.id,
                    format!("wall `{}` does not enclose the room", w.id),
                ));
            }
        }
        let side_face = |w: &WallSpec, facing: Point2| -> SurfaceRef {
            let side = if w.left_normal().dot(&facing) > 0.0 {
                FaceSide::Left
            } else {
                FaceSide::Right
            };
            SurfaceRef {
                wall: w.id.clone(),
                side,
            }
        };
        Ok(RoomGeometry {
            id: room.id.clone(),
            min,
            max,
            surfaces: [
                side_face(px, Point2::new(-1.0, 0.0)),
                side_face(nx, Point2::new(1.0, 0.0)),
                side_face(py, Point2::new(0.0, -1.0)),
                side_face(ny, Point2::new(0.0, 1.0)),
            ],
        })
    }

    pub fn room_geometries(&self) -> Result<Vec<RoomGeometry>> {
        self.rooms.iter().map(|r| self.room_geometry(r)).collect()
    }

    pub fn room(&self, id: &str) -> Option<&RoomSpec> {
        self.rooms.iter().find(|r| r.id == id)
    }

    /// Walls referenced by both rooms.
    pub fn shared_walls(&self, a: &RoomSpec, b: &RoomSpec) -> Vec<&WallSpec> {
        let ids = |r: &RoomSpec| -> BTreeSet<String> {
            [
                &r.surfaces.pos_x,
                &r.surfaces.neg_x,
                &r.surfaces.pos_y,
                &r.surfaces.neg_y,
            ]
            .into_iter()
            .cloned()
            .collect()
        };
        let (ia, ib) = (ids(a), ids(b));
        ia.intersection(&ib)
            .filter_map(|id| self.wall(id))
            .collect()
    }

    /// Wall that a doorway opens, if any.
    pub fn doorway_wall(&self, door: &DoorwaySpec) -> Option<&WallSpec> {
        let a = self.room(&door.rooms[0])?;
        let b = self.room(&door.rooms[1])?;
        self.shared_walls(a, b)
            .into_iter()
            .filter(|w| w.distance_to(&door.position()) <= DOOR_WALL_TOLERANCE)
            .min_by(|x, y| {
                x.distance_to(&door.position())
                    .total_cmp(&y.distance_to(&door.position()))
            })
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for w in &self.walls {
            if !seen.insert(w.id.as_str()) {
                return Err(invalid(&w.id, "duplicate wall id"));
            }
            let finite = w.start.iter().chain(&w.end).all(|x| x.is_finite());
            if !finite || !(w.length() > 0.0) {
                return Err(invalid(&w.id, "wall must have positive length"));
            }
            if !(w.thickness > 0.0) || !w.thickness.is_finite() {
                return Err(invalid(&w.id, "wall must have positive thickness"));
            }
        }
        let mut room_ids = BTreeSet::new();
        for r in &self.rooms {
            if !room_ids.insert(r.id.as_str()) {
                return Err(invalid(&r.id, "duplicate room id"));
            }
            self.room_geometry(r)?;
        }
        let mut door_ids = BTreeSet::new();
        for d in &self.doorways {
            if !door_ids.insert(d.id.as_str()) {
                return Err(invalid(&d.id, "duplicate doorway id"));
            }
            if d.rooms[0] == d.rooms[1] {
                return Err(invalid(&d.id, "doorway must connect two distinct rooms"));
            }
            for r in &d.rooms {
                if self.room(r).is_none() {
                    return Err(invalid(&d.id, format!("references missing room `{r}`")));
                }
            }
            if self.doorway_wall(d).is_none() {
                return Err(invalid(
                    &d.id,
                    format!(
                        "doorway is not within {DOOR_WALL_TOLERANCE} m of a wall shared by `{}` and `{}`",
                        d.rooms[0], d.rooms[1]
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Doorway centers keyed by the wall they cut.
    pub fn openings(&self) -> BTreeMap<String, Vec<Point2>> {
        let mut out: BTreeMap<String, Vec<Point2>> = BTreeMap::new();
        for d in &self.doorways {
            if let Some(w) = self.doorway_wall(d) {
                // Project the doorway onto the wall centerline.
                let (a, u) = (w.start(), w.direction());
                let p = a + u * (d.position() - a).dot(&u);
                out.entry(w.id.clone()).or_default().push(p);
            }
        }
        out
    }

    /// Axis-aligned bounding box of all wall centerlines.
    pub fn bounds(&self) -> (Point2, Point2) {
        let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = -lo;
        for w in &self.walls {
            for p in [w.start(), w.end()] {
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
        }
        (lo, hi)
    }

    /// Applies a rigid transform to every coordinate in the plan.
    pub fn transformed(&self, pose: &crate::geometry::Pose2) -> FloorPlan {
        let tp = |p: [f64; 2]| {
            let q = pose.transform_point(&Point2::new(p[0], p[1]));
            [q.x, q.y]
        };
        FloorPlan {
            walls: self
                .walls
                .iter()
                .map(|w| WallSpec {
                    start: tp(w.start),
                    end: tp(w.end),
                    ..w.clone()
                })
                .collect(),
            rooms: self.rooms.clone(),
            doorways: self
                .doorways
                .iter()
                .map(|d| DoorwaySpec {
                    position: tp(d.position),
                    ..d.clone()
                })
                .collect(),
        }
    }
}

pub fn load_plan(path: impl AsRef<Path>) -> Result<FloorPlan> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let plan: FloorPlan = serde_json::from_str(&text).map_err(|source| Error::Parse {
        context: path.display().to_string(),
        source,
    })?;
    plan.validate()?;
    Ok(plan)
}
