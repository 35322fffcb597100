//! Architectural graph: the plan compiled into a two-layer optimizable
//! graph in the plan frame. The lower layer holds wall surfaces and walls,
//! the upper layer rooms and the doorways between them.

mod plan;

use std::collections::BTreeMap;

use nalgebra::DVector;

pub use plan::{
    load_plan, DoorwaySpec, FaceSide, FloorPlan, RoomGeometry, RoomSides, RoomSpec, SurfaceRef,
    WallFace, WallSpec, DOOR_WALL_TOLERANCE, DOOR_WIDTH,
};

use crate::error::{Error, Result};
use crate::factor_graph::{information, FactorGraph, Measurement, VariableId, VariableKind};
use crate::geometry::{classify_axis, Axis, Frame, Plane, Point2};

/// The two surfaces of one plan wall, in `Left, Right` order.
#[derive(Clone, Debug, PartialEq)]
pub struct WallSurfaces {
    pub wall: String,
    pub left: Plane,
    pub right: Plane,
    pub axis: Axis,
}

pub fn extract_wall_surfaces(plan: &FloorPlan) -> Vec<WallSurfaces> {
    plan.walls
        .iter()
        .map(|w| {
            let left = w.face(FaceSide::Left).plane;
            let right = w.face(FaceSide::Right).plane;
            WallSurfaces {
                wall: w.id.clone(),
                axis: classify_axis(&left),
                left,
                right,
            }
        })
        .collect()
}

pub(crate) fn plane_vector(p: &Plane) -> DVector<f64> {
    DVector::from_row_slice(&[p.phi(), p.dist])
}

/// Wall center from two same-axis surfaces and the wall's start point: the
/// midpoint between the surfaces, slid along the wall to the start point.
pub fn compute_wall_center(p1: &Plane, p2: &Plane, start: &Point2) -> Result<Point2> {
    if p1.frame != p2.frame {
        return Err(Error::FrameMismatch("wall surfaces in different frames".into()));
    }
    let (a1, a2) = (classify_axis(p1), classify_axis(p2));
    if a1 != a2 {
        return Err(Error::InvalidInput(format!(
            "wall surfaces have mismatched axes {a1:?} and {a2:?}"
        )));
    }
    let (center, _, _) =
        crate::factor_graph::wall_center(&plane_vector(p1), &plane_vector(p2), start);
    Ok(center)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WallNodes {
    pub wall: VariableId,
    pub left: VariableId,
    pub right: VariableId,
}

#[derive(Clone, Debug)]
pub struct AGraph {
    pub graph: FactorGraph,
    pub walls: BTreeMap<String, WallNodes>,
    pub surfaces: BTreeMap<SurfaceRef, VariableId>,
    pub rooms: BTreeMap<String, VariableId>,
    pub doorways: BTreeMap<String, VariableId>,
}

impl AGraph {
    /// Plan surface behind a plane variable.
    pub fn surface_of(&self, var: VariableId) -> Option<&SurfaceRef> {
        self.surfaces
            .iter()
            .find_map(|(s, v)| (*v == var).then_some(s))
    }

    pub fn room_of(&self, var: VariableId) -> Option<&str> {
        self.rooms
            .iter()
            .find_map(|(r, v)| (*v == var).then_some(r.as_str()))
    }

    pub fn to_json(&self) -> String {
        self.graph.to_json()
    }
}

pub fn build_a_graph(plan: &FloorPlan) -> Result<AGraph> {
    plan.validate()?;
    let mut graph = FactorGraph::new();
    let mut walls = BTreeMap::new();
    let mut surfaces = BTreeMap::new();

    for (ws, spec) in extract_wall_surfaces(plan).iter().zip(&plan.walls) {
        let left = graph.add_variable(VariableKind::PlaneVar, plane_vector(&ws.left).as_slice())?;
        let right =
            graph.add_variable(VariableKind::PlaneVar, plane_vector(&ws.right).as_slice())?;
        let center = compute_wall_center(&ws.left, &ws.right, &spec.start())?;
        let wall = graph.add_variable(VariableKind::Wall, center.as_slice())?;
        graph.add_factor(
            Measurement::WallCenter { anchor: spec.start },
            vec![wall, left, right],
            information::structure(),
        )?;
        for (side, var) in [(FaceSide::Left, left), (FaceSide::Right, right)] {
            surfaces.insert(
                SurfaceRef {
                    wall: spec.id.clone(),
                    side,
                },
                var,
            );
        }
        walls.insert(spec.id.clone(), WallNodes { wall, left, right });
    }

    let mut rooms = BTreeMap::new();
    let mut centers = BTreeMap::new();
    for spec in &plan.rooms {
        let geom = plan.room_geometry(spec)?;
        let planes: Vec<VariableId> = geom.surfaces.iter().map(|s| surfaces[s]).collect();
        let values: Vec<&DVector<f64>> = planes
            .iter()
            .map(|p| graph.value(*p))
            .collect::<Result<_>>()?;
        let (center, _) = crate::factor_graph::room_center(&values);
        let room = graph.add_variable(VariableKind::Room, center.as_slice())?;
        let mut vars = vec![room];
        vars.extend(planes);
        graph.add_factor(Measurement::RoomToWalls, vars, information::structure())?;
        if rooms.is_empty() {
            graph.add_prior(room, information::anchor(2))?;
        }
        rooms.insert(spec.id.clone(), room);
        centers.insert(spec.id.clone(), center);
    }

    let mut doorways = BTreeMap::new();
    for spec in &plan.doorways {
        let pos = spec.position();
        let door = graph.add_variable(VariableKind::Doorway, pos.as_slice())?;
        let (r1, r2) = (&spec.rooms[0], &spec.rooms[1]);
        let o1 = pos - centers[r1];
        let o2 = pos - centers[r2];
        graph.add_factor(
            Measurement::DoorwayToRooms {
                first_offset: [o1.x, o1.y],
                second_offset: [o2.x, o2.y],
            },
            vec![door, rooms[r1], rooms[r2]],
            information::structure(),
        )?;
        doorways.insert(spec.id.clone(), door);
    }

    Ok(AGraph {
        graph,
        walls,
        surfaces,
        rooms,
        doorways,
    })
}

/// Reads the surfaces attached to a plane variable back as a [`Plane`].
pub fn plane_from_vector(v: &DVector<f64>, frame: Frame) -> Plane {
    Plane::from_cp(v[0], v[1], frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor_graph::{FactorKind, SolverConfig};
    use crate::plans;
    use proptest::prelude::*;

    fn x_plane(x: f64) -> Plane {
        crate::geometry::normalize_away_from_origin(Point2::new(1.0, 0.0), x, Frame::Plan).unwrap()
    }

    fn y_plane(y: f64) -> Plane {
        crate::geometry::normalize_away_from_origin(Point2::new(0.0, 1.0), y, Frame::Plan).unwrap()
    }

    /// Midpoint of the two surface offsets along the axis, the anchor's
    /// coordinate along the wall.
    fn wall_center_oracle(axis: Axis, a: f64, b: f64, s: Point2) -> Point2 {
        match axis {
            Axis::X => Point2::new((a + b) / 2.0, s.y),
            Axis::Y => Point2::new(s.x, (a + b) / 2.0),
        }
    }

    #[test]
    fn wall_surfaces_offset_by_half_thickness() {
        let plan = FloorPlan {
            walls: vec![
                WallSpec {
                    id: "h".into(),
                    start: [0.0, 0.0],
                    end: [4.0, 0.0],
                    thickness: 0.2,
                },
                WallSpec {
                    id: "v".into(),
                    start: [2.0, 0.0],
                    end: [2.0, 5.0],
                    thickness: 0.3,
                },
                WallSpec {
                    id: "v_shift".into(),
                    start: [12.0, 0.0],
                    end: [12.0, 5.0],
                    thickness: 0.3,
                },
            ],
            rooms: vec![],
            doorways: vec![],
        };
        let s = extract_wall_surfaces(&plan);
        assert_eq!(s[0].axis, Axis::Y);
        // Both faces sit 0.1 from the wall line, one on each side.
        assert!((s[0].left.dist - 0.1).abs() < 1e-12 && (s[0].right.dist - 0.1).abs() < 1e-12);
        assert!((s[0].left.closest_point() - Point2::new(0.0, 0.1)).norm() < 1e-12);
        assert!((s[0].right.closest_point() - Point2::new(0.0, -0.1)).norm() < 1e-12);

        assert_eq!(s[1].axis, Axis::X);
        let mut xs = [s[1].left.closest_point().x, s[1].right.closest_point().x];
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] - 1.85).abs() < 1e-12 && (xs[1] - 2.15).abs() < 1e-12);

        let mut shifted = [s[2].left.closest_point().x, s[2].right.closest_point().x];
        shifted.sort_by(f64::total_cmp);
        assert!((shifted[0] - xs[0] - 10.0).abs() < 1e-12);
        assert!((shifted[1] - xs[1] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn wall_center_examples() {
        let c = compute_wall_center(&x_plane(2.0), &x_plane(3.0), &Point2::new(0.0, 5.0)).unwrap();
        assert!((c - Point2::new(2.5, 5.0)).norm() < 1e-12);
        assert!((c - wall_center_oracle(Axis::X, 2.0, 3.0, Point2::new(0.0, 5.0))).norm() < 1e-12);

        let c = compute_wall_center(&y_plane(-0.1), &y_plane(0.1), &Point2::zeros()).unwrap();
        assert!(c.norm() < 1e-12);

        let s = Point2::new(7.0, -1.0);
        let c = compute_wall_center(&x_plane(2.0), &x_plane(3.0), &s).unwrap();
        assert!((c - Point2::new(2.5, -1.0)).norm() < 1e-12);

        assert!(compute_wall_center(&x_plane(2.0), &y_plane(3.0), &s).is_err());
    }

    proptest! {
        #[test]
        fn wall_center_matches_oracle(a in -20.0..20.0f64, gap in 0.05..0.5f64,
                                      sx in -20.0..20.0f64, sy in -20.0..20.0f64, vertical: bool) {
            let s = Point2::new(sx, sy);
            let (p1, p2, axis) = if vertical {
                (x_plane(a), x_plane(a + gap), Axis::X)
            } else {
                (y_plane(a), y_plane(a + gap), Axis::Y)
            };
            let c = compute_wall_center(&p1, &p2, &s).unwrap();
            prop_assert!((c - wall_center_oracle(axis, a, a + gap, s)).norm() < 1e-9);
        }

        #[test]
        fn wall_center_is_translation_equivariant(a in -20.0..20.0f64, gap in 0.05..0.5f64,
                                                  sx in -20.0..20.0f64, sy in -20.0..20.0f64,
                                                  tx in -30.0..30.0f64, ty in -30.0..30.0f64) {
            let s = Point2::new(sx, sy);
            let c = compute_wall_center(&x_plane(a), &x_plane(a + gap), &s).unwrap();
            let shifted = compute_wall_center(&x_plane(a + tx), &x_plane(a + gap + tx),
                                              &(s + Point2::new(tx, ty))).unwrap();
            prop_assert!((shifted - c - Point2::new(tx, ty)).norm() < 1e-9);
        }
    }

    #[test]
    fn single_room_counts_and_zero_cost() {
        let plan = plans::bundled_plan("single_room").unwrap();
        assert_eq!((plan.walls.len(), plan.rooms.len(), plan.doorways.len()), (4, 1, 0));
        let a = build_a_graph(&plan).unwrap();
        let g = &a.graph;
        assert_eq!(g.count_variables(VariableKind::PlaneVar), 8);
        assert_eq!(g.count_variables(VariableKind::Wall), 4);
        assert_eq!(g.count_variables(VariableKind::Room), 1);
        assert_eq!(g.count_variables(VariableKind::Doorway), 0);
        assert!(g.total_cost().unwrap() <= 1e-12);
    }

    #[test]
    fn two_room_doorway_residual_is_zero() {
        let plan = plans::bundled_plan("two_room_doorway").unwrap();
        assert_eq!((plan.walls.len(), plan.rooms.len(), plan.doorways.len()), (7, 2, 1));
        let a = build_a_graph(&plan).unwrap();
        let (fid, _) = a
            .graph
            .factors()
            .find(|(id, _)| id.kind == FactorKind::DoorwayToRooms)
            .unwrap();
        assert!(a.graph.evaluate_residual(*fid).unwrap().amax() < 1e-12);
    }

    #[test]
    fn structure_invariants_hold() {
        for name in plans::BUNDLED_PLANS {
            let plan = plans::bundled_plan(name).unwrap();
            let a = build_a_graph(&plan).unwrap();
            let g = &a.graph;
            assert_eq!(g.count_variables(VariableKind::PlaneVar), 2 * plan.walls.len());
            for wall in g.variable_ids(VariableKind::Wall) {
                let fs: Vec<_> = g.factors_of(wall).collect();
                assert_eq!(fs.len(), 1);
                let vars = &fs[0].1.variables;
                assert_eq!(vars.len(), 3);
                let p1 = plane_from_vector(g.value(vars[1]).unwrap(), Frame::Plan);
                let p2 = plane_from_vector(g.value(vars[2]).unwrap(), Frame::Plan);
                assert_eq!(classify_axis(&p1), classify_axis(&p2));
            }
            for plane in g.variable_ids(VariableKind::PlaneVar) {
                let n = g
                    .factors_of(plane)
                    .filter(|(id, _)| id.kind == FactorKind::WallCenter)
                    .count();
                assert_eq!(n, 1);
            }
            for room in g.variable_ids(VariableKind::Room) {
                let n = g
                    .factors_of(room)
                    .filter(|(id, _)| id.kind == FactorKind::RoomToWalls)
                    .count();
                assert_eq!(n, 1);
            }
            for door in g.variable_ids(VariableKind::Doorway) {
                let fs: Vec<_> = g.factors_of(door).collect();
                assert_eq!(fs.len(), 1);
                assert_eq!(fs[0].1.variables.len(), 3);
            }
            for (id, _) in g.factors() {
                assert!(g.evaluate_residual(*id).unwrap().amax() <= 1e-9, "{name} {id:?}");
            }
        }
    }

    #[test]
    fn optimize_leaves_consistent_plan_unchanged() {
        let plan = plans::bundled_plan("asymmetric_five_room").unwrap();
        let mut a = build_a_graph(&plan).unwrap();
        let before = a.graph.clone();
        a.graph.optimize(&SolverConfig::default()).unwrap();
        for (id, v) in before.variables() {
            let after = a.graph.value(*id).unwrap();
            assert!((after - &v.value).amax() <= 1e-9, "{id:?}");
        }
    }

    #[test]
    fn open_room_is_rejected() {
        let mut plan = plans::bundled_plan("single_room").unwrap();
        // Shorten one wall so it no longer spans the room side.
        let w = plan.walls.iter_mut().find(|w| w.id == "w_east").unwrap();
        w.end[1] = 2.0;
        assert!(matches!(
            build_a_graph(&plan),
            Err(Error::PlanValidation { .. })
        ));
    }

    #[test]
    fn missing_wall_reference_names_the_id() {
        let mut plan = plans::bundled_plan("single_room").unwrap();
        plan.rooms[0].surfaces.pos_x = "w_nowhere".into();
        let err = plan.validate().unwrap_err().to_string();
        assert!(err.contains("w_nowhere"), "{err}");
    }

    #[test]
    fn load_plan_reports_parse_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\n  \"walls\": [\n    {\"id\": 3}\n  ]\n}").unwrap();
        let err = load_plan(&path).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }
}
