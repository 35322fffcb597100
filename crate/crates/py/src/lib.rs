//! Python bindings: plans, graphs, simulation, matching, merging and the
//! scenario runner.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use isgraph::a_graph::{self, AGraph, FloorPlan};
use isgraph::eval::{self, Alignment};
use isgraph::geometry::Pose2;
use isgraph::matcher::{self, MatchLevel, MatchResult, MatchStatus, MatcherConfig};
use isgraph::merger::{self, MergedState};
use isgraph::plans::{self, Scenario};
use isgraph::s_graph::{self, SGraph};
use isgraph::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Simulation(_) | Error::Evaluation(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

type PoseTuple = (f64, f64, f64);

fn tuple(p: &Pose2) -> PoseTuple {
    (p.x, p.y, p.theta)
}

fn pose(t: PoseTuple) -> Pose2 {
    Pose2::new(t.0, t.1, t.2)
}

#[pyclass(name = "FloorPlan", module = "isgraph_py")]
struct PyFloorPlan {
    inner: FloorPlan,
}

#[pymethods]
impl PyFloorPlan {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: FloorPlan::from_json(text).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: a_graph::load_plan(path).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn bundled(name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: plans::bundled_plan(name).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn generate(n_rooms: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: plans::generate_random_plan(n_rooms, seed).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn rooms(&self) -> Vec<String> {
        self.inner.rooms.iter().map(|r| r.id.clone()).collect()
    }

    #[getter]
    fn walls(&self) -> Vec<String> {
        self.inner.walls.iter().map(|w| w.id.clone()).collect()
    }

    #[getter]
    fn doorways(&self) -> Vec<String> {
        self.inner.doorways.iter().map(|d| d.id.clone()).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "FloorPlan(walls={}, rooms={}, doorways={})",
            self.inner.walls.len(),
            self.inner.rooms.len(),
            self.inner.doorways.len()
        )
    }
}

#[pyclass(name = "AGraph", module = "isgraph_py")]
struct PyAGraph {
    inner: AGraph,
}

#[pymethods]
impl PyAGraph {
    #[getter]
    fn num_variables(&self) -> usize {
        self.inner.graph.num_variables()
    }

    #[getter]
    fn num_factors(&self) -> usize {
        self.inner.graph.num_factors()
    }

    fn total_cost(&self) -> PyResult<f64> {
        self.inner.graph.total_cost().map_err(py_err)
    }

    /// Room name to room center.
    fn room_centers(&self) -> PyResult<Vec<(String, (f64, f64))>> {
        self.inner
            .rooms
            .iter()
            .map(|(name, id)| {
                let v = self.inner.graph.value(*id).map_err(py_err)?;
                Ok((name.clone(), (v[0], v[1])))
            })
            .collect()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }
}

#[pyclass(name = "Scenario", module = "isgraph_py")]
struct PyScenario {
    inner: Scenario,
    plan: FloorPlan,
}

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (inner, plan) = plans::load_scenario(path).map_err(py_err)?;
        Ok(Self { inner, plan })
    }

    #[staticmethod]
    fn bundled(name: &str) -> PyResult<Self> {
        let (inner, plan) = plans::bundled_scenario(name).map_err(py_err)?;
        Ok(Self { inner, plan })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.sim.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.sim.seed = seed;
    }

    #[getter]
    fn map_offset(&self) -> Option<PoseTuple> {
        self.inner.sim.map_offset.as_ref().map(tuple)
    }

    #[setter]
    fn set_map_offset(&mut self, offset: Option<PoseTuple>) {
        self.inner.sim.map_offset = offset.map(pose);
    }

    /// Drops all sensor and odometry noise.
    fn noiseless(&mut self) {
        self.inner.sim = self.inner.sim.clone().noiseless();
    }

    fn plan(&self) -> PyFloorPlan {
        PyFloorPlan {
            inner: self.plan.clone(),
        }
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }
}

#[pyclass(name = "SGraph", module = "isgraph_py")]
struct PySGraph {
    inner: SGraph,
    map_offset: Pose2,
}

#[pymethods]
impl PySGraph {
    #[getter]
    fn num_keyframes(&self) -> usize {
        self.inner.keyframes().len()
    }

    #[getter]
    fn num_planes(&self) -> usize {
        self.inner.planes().len()
    }

    #[getter]
    fn num_rooms(&self) -> usize {
        self.inner.rooms().len()
    }

    #[getter]
    fn map_offset(&self) -> PoseTuple {
        tuple(&self.map_offset)
    }

    fn trajectory(&self) -> Vec<PoseTuple> {
        self.inner.trajectory().iter().map(tuple).collect()
    }

    fn ground_truth(&self) -> Vec<PoseTuple> {
        self.inner.ground_truth().iter().map(tuple).collect()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }
}

#[pyclass(name = "MatchResult", module = "isgraph_py")]
struct PyMatchResult {
    inner: MatchResult,
}

#[pymethods]
impl PyMatchResult {
    /// `"Matched"`, `"Ambiguous"` or `"NoMatch"`.
    #[getter]
    fn status(&self) -> &'static str {
        match self.inner.status {
            MatchStatus::Matched => "Matched",
            MatchStatus::Ambiguous => "Ambiguous",
            MatchStatus::NoMatch => "NoMatch",
        }
    }

    #[getter]
    fn cluster_size(&self) -> usize {
        self.inner.cluster.len()
    }

    #[getter]
    fn affinity(&self) -> Option<f64> {
        self.inner.best.as_ref().map(|c| c.affinity)
    }

    #[getter]
    fn transform_hint(&self) -> Option<PoseTuple> {
        self.inner.best.as_ref().map(|c| tuple(&c.transform_hint.pose))
    }

    /// `(level, a_index, s_index)` for each pair of the best candidate.
    fn pairs(&self) -> Vec<(&'static str, usize, usize)> {
        self.inner
            .best
            .iter()
            .flat_map(|c| &c.pairs)
            .map(|p| {
                let level = match p.level {
                    MatchLevel::Room => "room",
                    MatchLevel::WallSurface => "wall_surface",
                };
                (level, p.a_node.index, p.s_node.index)
            })
            .collect()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }
}

#[pyclass(name = "MergedState", module = "isgraph_py")]
struct PyMergedState {
    inner: MergedState,
}

#[pymethods]
impl PyMergedState {
    #[getter]
    fn map_to_plan(&self) -> PoseTuple {
        tuple(&self.inner.map_to_plan())
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.report.converged
    }

    fn merge_cost(&self) -> PyResult<f64> {
        self.inner.merge_cost().map_err(py_err)
    }

    fn localized_trajectory(&self) -> Vec<PoseTuple> {
        merger::localized_trajectory(&self.inner).iter().map(tuple).collect()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }
}

#[pyfunction]
fn build_agraph(plan: PyRef<'_, PyFloorPlan>) -> PyResult<PyAGraph> {
    Ok(PyAGraph {
        inner: a_graph::build_a_graph(&plan.inner).map_err(py_err)?,
    })
}

#[pyfunction]
fn simulate(scenario: PyRef<'_, PyScenario>) -> PyResult<PySGraph> {
    let s = &scenario.inner;
    let (inner, map_offset) = s_graph::simulate(&scenario.plan, &s.sim, &s.sgraph).map_err(py_err)?;
    Ok(PySGraph { inner, map_offset })
}

#[pyfunction]
#[pyo3(signature = (agraph, sgraph, config_json = None))]
fn match_graphs(
    agraph: PyRef<'_, PyAGraph>,
    sgraph: PyRef<'_, PySGraph>,
    config_json: Option<&str>,
) -> PyResult<PyMatchResult> {
    let cfg: MatcherConfig = match config_json {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => MatcherConfig::default(),
    };
    let inner = matcher::match_graphs(&agraph.inner.graph, &sgraph.inner.graph, &cfg).map_err(py_err)?;
    Ok(PyMatchResult { inner })
}

/// Merges a copy of the S-Graph; the argument stays usable.
#[pyfunction]
fn merge(
    agraph: PyRef<'_, PyAGraph>,
    sgraph: PyRef<'_, PySGraph>,
    result: PyRef<'_, PyMatchResult>,
) -> PyResult<PyMergedState> {
    let inner = merger::merge(&agraph.inner, sgraph.inner.clone(), &result.inner).map_err(py_err)?;
    Ok(PyMergedState { inner })
}

/// Runs a scenario file end to end, writes the outputs into `out_dir`
/// and returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (path, out_dir, seed = None))]
fn run_scenario(py: Python<'_>, path: &str, out_dir: &str, seed: Option<u64>) -> PyResult<String> {
    let outcome = py
        .detach(|| eval::run_scenario(path, out_dir, seed))
        .map_err(py_err)?;
    Ok(outcome.report.to_json())
}

/// `(rmse, mean, max)` of the translational pose error.
#[pyfunction]
#[pyo3(signature = (estimated, ground_truth, align = false))]
fn compute_ape(estimated: Vec<PoseTuple>, ground_truth: Vec<PoseTuple>, align: bool) -> PyResult<(f64, f64, f64)> {
    let est: Vec<Pose2> = estimated.into_iter().map(pose).collect();
    let gt: Vec<Pose2> = ground_truth.into_iter().map(pose).collect();
    let alignment = if align {
        Alignment::SE2Umeyama
    } else {
        Alignment::None
    };
    let r = eval::compute_ape(&est, &gt, alignment).map_err(py_err)?;
    Ok((r.rmse, r.mean, r.max))
}

#[pyfunction]
fn bundled_scenarios() -> Vec<&'static str> {
    plans::BUNDLED_SCENARIOS.to_vec()
}

#[pymodule]
fn isgraph_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFloorPlan>()?;
    m.add_class::<PyAGraph>()?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PySGraph>()?;
    m.add_class::<PyMatchResult>()?;
    m.add_class::<PyMergedState>()?;
    m.add_function(wrap_pyfunction!(build_agraph, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(match_graphs, m)?)?;
    m.add_function(wrap_pyfunction!(merge, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(compute_ape, m)?)?;
    m.add_function(wrap_pyfunction!(bundled_scenarios, m)?)?;
    Ok(())
}
