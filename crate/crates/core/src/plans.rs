//! Bundled floor plans and scenarios, the random plan generator, and tours
//! that visit every room of a plan.
//!
//! Fixture files live under `fixtures/plans` and `fixtures/scenarios` in
//! this crate. Scenario files name their plan by a path relative to the
//! scenario file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::a_graph::{DoorwaySpec, FloorPlan, RoomSides, RoomSpec, WallSpec};
use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::matcher::MatcherConfig;
use crate::s_graph::{SGraphConfig, SimConfig};

pub const BUNDLED_PLANS: [&str; 6] = [
    "single_room",
    "two_room_doorway",
    "asymmetric_five_room",
    "symmetric_grid",
    "symmetric_grid_annex",
    "corridor_rooms",
];

pub const BUNDLED_SCENARIOS: [&str; 6] = [
    "single_room",
    "two_room_doorway",
    "asymmetric_five_room",
    "symmetric_grid_two_rooms",
    "symmetric_grid_annex",
    "corridor_rooms",
];

pub const WALL_THICKNESS: f64 = 0.2;

fn plan_source(name: &str) -> Option<&'static str> {
    Some(match name {
        "single_room" => include_str!("../fixtures/plans/single_room.json"),
        "two_room_doorway" => include_str!("../fixtures/plans/two_room_doorway.json"),
        "asymmetric_five_room" => include_str!("../fixtures/plans/asymmetric_five_room.json"),
        "symmetric_grid" => include_str!("../fixtures/plans/symmetric_grid.json"),
        "symmetric_grid_annex" => include_str!("../fixtures/plans/symmetric_grid_annex.json"),
        "corridor_rooms" => include_str!("../fixtures/plans/corridor_rooms.json"),
        _ => return None,
    })
}

fn scenario_source(name: &str) -> Option<&'static str> {
    Some(match name {
        "single_room" => include_str!("../fixtures/scenarios/single_room.json"),
        "two_room_doorway" => include_str!("../fixtures/scenarios/two_room_doorway.json"),
        "asymmetric_five_room" => include_str!("../fixtures/scenarios/asymmetric_five_room.json"),
        "symmetric_grid_two_rooms" => {
            include_str!("../fixtures/scenarios/symmetric_grid_two_rooms.json")
        }
        "symmetric_grid_annex" => include_str!("../fixtures/scenarios/symmetric_grid_annex.json"),
        "corridor_rooms" => include_str!("../fixtures/scenarios/corridor_rooms.json"),
        _ => return None,
    })
}

pub fn bundled_plan(name: &str) -> Result<FloorPlan> {
    let text = plan_source(name)
        .ok_or_else(|| Error::InvalidInput(format!("no bundled plan named `{name}`")))?;
    FloorPlan::from_json(text)
}

/// Directory holding the bundled fixture files.
pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn bundled_scenario_path(name: &str) -> PathBuf {
    fixtures_dir().join("scenarios").join(format!("{name}.json"))
}

/// Simulation setup plus the plan it runs in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub plan: PathBuf,
    #[serde(flatten)]
    pub sim: SimConfig,
    #[serde(default)]
    pub sgraph: SGraphConfig,
    #[serde(default)]
    pub matcher: MatcherConfig,
}

impl Scenario {
    pub fn from_json(text: &str, context: &str) -> Result<Scenario> {
        let scenario: Scenario = serde_json::from_str(text).map_err(|source| Error::Parse {
            context: context.to_string(),
            source,
        })?;
        scenario.sim.validate()?;
        Ok(scenario)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}

/// Loads a scenario file and the plan it references.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<(Scenario, FloorPlan)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let scenario = Scenario::from_json(&text, &path.display().to_string())?;
    let base = path.parent().unwrap_or(Path::new("."));
    let plan = crate::a_graph::load_plan(base.join(&scenario.plan))?;
    Ok((scenario, plan))
}

pub fn bundled_scenario(name: &str) -> Result<(Scenario, FloorPlan)> {
    let text = scenario_source(name)
        .ok_or_else(|| Error::InvalidInput(format!("no bundled scenario named `{name}`")))?;
    let scenario = Scenario::from_json(text, name)?;
    let stem = scenario
        .plan
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    let plan = bundled_plan(&stem)?;
    Ok((scenario, plan))
}

/// Grid-packed plan of `n_rooms` rectangular rooms joined by a random
/// spanning tree of doorways. Column widths and row heights are whole
/// decimeters in `[2, 8]` m; every grid line is a single wall.
pub fn generate_random_plan(n_rooms: usize, seed: u64) -> Result<FloorPlan> {
    if !(2..=20).contains(&n_rooms) {
        return Err(Error::Generation(format!(
            "room count {n_rooms} outside 2..=20"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols = (n_rooms as f64).sqrt().ceil() as usize;
    let rows = n_rooms.div_ceil(cols);
    let mut lines = |n: usize| {
        let mut v = vec![0.0];
        for _ in 0..n {
            let dm: u32 = rng.random_range(20..=80);
            v.push(v.last().unwrap() + dm as f64 / 10.0);
        }
        v
    };
    let xs = lines(cols);
    let ys = lines(rows);
    let filled = |r: usize, c: usize| r * cols + c < n_rooms;

    let mut walls = Vec::new();
    for (r, y) in ys.iter().enumerate() {
        let reach = (0..cols)
            .filter(|&c| (r > 0 && filled(r - 1, c)) || (r < rows && filled(r, c)))
            .max();
        if let Some(c) = reach {
            walls.push(WallSpec {
                id: format!("h{r}"),
                start: [xs[0], *y],
                end: [xs[c + 1], *y],
                thickness: WALL_THICKNESS,
            });
        }
    }
    for (c, x) in xs.iter().enumerate() {
        let reach = (0..rows)
            .filter(|&r| (c > 0 && filled(r, c - 1)) || (c < cols && filled(r, c)))
            .max();
        if let Some(r) = reach {
            walls.push(WallSpec {
                id: format!("v{c}"),
                start: [*x, ys[0]],
                end: [*x, ys[r + 1]],
                thickness: WALL_THICKNESS,
            });
        }
    }

    let room_id = |r: usize, c: usize| format!("r{}", r * cols + c);
    let rooms: Vec<RoomSpec> = (0..n_rooms)
        .map(|k| {
            let (r, c) = (k / cols, k % cols);
            RoomSpec {
                id: room_id(r, c),
                surfaces: RoomSides {
                    pos_x: format!("v{}", c + 1),
                    neg_x: format!("v{c}"),
                    pos_y: format!("h{}", r + 1),
                    neg_y: format!("h{r}"),
                },
            }
        })
        .collect();

    // Random spanning tree over grid neighbours.
    let mut edges = Vec::new();
    for k in 0..n_rooms {
        let (r, c) = (k / cols, k % cols);
        if c + 1 < cols && filled(r, c + 1) {
            edges.push((k, k + 1, [xs[c + 1], (ys[r] + ys[r + 1]) / 2.0]));
        }
        if filled(r + 1, c) {
            edges.push((k, k + cols, [(xs[c] + xs[c + 1]) / 2.0, ys[r + 1]]));
        }
    }
    edges.shuffle(&mut rng);
    let mut parent: Vec<usize> = (0..n_rooms).collect();
    fn root(parent: &mut [usize], mut k: usize) -> usize {
        while parent[k] != k {
            parent[k] = parent[parent[k]];
            k = parent[k];
        }
        k
    }
    let mut doorways = Vec::new();
    for (a, b, pos) in edges {
        let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
        if ra == rb {
            continue;
        }
        parent[ra] = rb;
        doorways.push((a.min(b), a.max(b), pos));
    }
    doorways.sort_by_key(|d| (d.0, d.1));
    let doorways = doorways
        .into_iter()
        .map(|(a, b, pos)| DoorwaySpec {
            id: format!("d{a}_{b}"),
            position: pos,
            rooms: [format!("r{a}"), format!("r{b}")],
        })
        .collect();

    let plan = FloorPlan {
        walls,
        rooms,
        doorways,
    };
    plan.validate()
        .map_err(|e| Error::Generation(format!("generated plan is invalid: {e}")))?;
    Ok(plan)
}

/// Waypoints visiting every room: a depth-first walk over the doorway
/// graph from the first room, passing through room centers and doorway
/// centers, ending in the last newly visited room.
pub fn tour_waypoints(plan: &FloorPlan) -> Result<Vec<Point2>> {
    let geoms = plan.room_geometries()?;
    let first = geoms
        .first()
        .ok_or_else(|| Error::InvalidInput("plan has no rooms".into()))?;
    let center: BTreeMap<&str, Point2> = geoms.iter().map(|g| (g.id.as_str(), g.center())).collect();
    let mut links: BTreeMap<&str, Vec<(&str, Point2)>> = BTreeMap::new();
    for d in &plan.doorways {
        let (a, b) = (d.rooms[0].as_str(), d.rooms[1].as_str());
        links.entry(a).or_default().push((b, d.position()));
        links.entry(b).or_default().push((a, d.position()));
    }

    fn visit<'a>(
        room: &'a str,
        center: &BTreeMap<&str, Point2>,
        links: &BTreeMap<&'a str, Vec<(&'a str, Point2)>>,
        seen: &mut BTreeSet<&'a str>,
        out: &mut Vec<Point2>,
        last_new: &mut usize,
    ) {
        seen.insert(room);
        out.push(center[room]);
        *last_new = out.len();
        for (next, door) in links.get(room).into_iter().flatten() {
            if seen.contains(next) {
                continue;
            }
            out.push(*door);
            visit(next, center, links, seen, out, last_new);
            out.push(*door);
            out.push(center[room]);
        }
    }

    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let mut last_new = 0;
    visit(&first.id, &center, &links, &mut seen, &mut out, &mut last_new);
    out.truncate(last_new);
    if seen.len() != geoms.len() {
        return Err(Error::InvalidInput(
            "doorways do not connect every room".into(),
        ));
    }
    Ok(out)
}

/// Scenario touring every room of a plan with default noise.
pub fn tour_scenario(plan: &FloorPlan, plan_path: impl Into<PathBuf>, seed: u64) -> Result<Scenario> {
    let waypoints = tour_waypoints(plan)?
        .iter()
        .map(|p| [p.x, p.y])
        .collect();
    let mut sim = SimConfig::new(waypoints);
    sim.seed = seed;
    Ok(Scenario {
        plan: plan_path.into(),
        sim,
        sgraph: SGraphConfig::default(),
        matcher: MatcherConfig::default(),
    })
}
