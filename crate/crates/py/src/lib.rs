//! Python module `ttc`. Structured values cross the boundary as plain
//! dicts and lists, going through JSON.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use ttc_core::detectors::MissPolicy;
use ttc_core::engine::{self, EngineConfig, EpisodeLog};
use ttc_core::geometry;
use ttc_core::harness::{self, ExperimentSpec, TrainSpec};
use ttc_core::metrics::{self, Subset};
use ttc_core::oa::{load_checkpoint, save_checkpoint, OaConfig, OaParams};
use ttc_core::scenesim::{generate_scenario, ScenarioConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (s,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let s: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&s).map_err(value_err)
}

fn from_opt<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    obj.map(from_py).transpose().map(Option::unwrap_or_default)
}

/// Detection score: (3 mAP + recall * sum of (1 - min(1, error))) / 6.
#[pyfunction]
fn eds(map: f64, recall: f64, mate: f64, mase: f64, maoe: f64) -> PyResult<f64> {
    metrics::eds(map, recall, mate, mase, maoe).map_err(value_err)
}

/// Oriented 3D box; only the ground-plane footprint matters for IoU.
#[pyclass(frozen, from_py_object)]
#[derive(Clone)]
struct Box3D(geometry::Box3D);

#[pymethods]
impl Box3D {
    #[new]
    fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> PyResult<Self> {
        geometry::Box3D::new(center, size, yaw).map(Self).map_err(value_err)
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        self.0.center
    }

    #[getter]
    fn size(&self) -> [f64; 3] {
        self.0.size
    }

    #[getter]
    fn yaw(&self) -> f64 {
        self.0.yaw
    }

    /// Bird's-eye-view IoU.
    fn iou(&self, other: &Box3D) -> PyResult<f64> {
        geometry::bev_iou(&self.0, &other.0).map_err(value_err)
    }

    fn center_distance(&self, other: &Box3D) -> f64 {
        geometry::center_distance(&self.0, &other.0)
    }

    fn __repr__(&self) -> String {
        format!("Box3D(center={:?}, size={:?}, yaw={})", self.0.center, self.0.size, self.0.yaw)
    }
}

/// Online adapter weights.
#[pyclass(frozen)]
struct Adapter(Arc<OaParams>);

#[pymethods]
impl Adapter {
    /// Untrained weights; `config` overrides fields of the default config.
    #[staticmethod]
    #[pyo3(signature = (seed, config=None))]
    fn init(seed: u64, config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let cfg: OaConfig = from_opt(config)?;
        OaParams::init(cfg, seed).map(|p| Self(Arc::new(p))).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_checkpoint(&path, None).map(|p| Self(Arc::new(p))).map_err(runtime_err)
    }

    /// Trains with `spec` (a training spec dict; defaults when absent) and
    /// writes the checkpoint and reports into `out_dir`. Returns the
    /// adapter and its held-out alignment scores.
    #[staticmethod]
    #[pyo3(signature = (out_dir, spec=None, steps=None))]
    fn train<'py>(
        py: Python<'py>,
        out_dir: PathBuf,
        spec: Option<&Bound<'py, PyAny>>,
        steps: Option<usize>,
    ) -> PyResult<(Self, Bound<'py, PyAny>)> {
        let mut spec: TrainSpec = from_opt(spec)?;
        if let Some(s) = steps {
            spec.train.steps = s;
        }
        let (params, out) = py
            .detach(|| harness::train(&spec, &out_dir, |_| {}))
            .map_err(runtime_err)?;
        Ok((Self(Arc::new(params)), to_py(py, &out.heldout)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<String> {
        save_checkpoint(&path, &self.0).map(|m| m.sha256).map_err(runtime_err)
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.0.fingerprint()
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.config)
    }
}

/// A correction episode driven one frame at a time.
#[pyclass(unsendable)]
struct Episode(engine::Episode);

#[pymethods]
impl Episode {
    /// `scenario`, `policy`, and `engine` are dicts in the TOML/JSON config
    /// layout; omitted fields take their defaults.
    #[new]
    #[pyo3(signature = (scenario=None, policy=None, adapter=None, engine=None))]
    fn new(
        scenario: Option<&Bound<'_, PyAny>>,
        policy: Option<&Bound<'_, PyAny>>,
        adapter: Option<&Adapter>,
        engine: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<Self> {
        let scenario: ScenarioConfig = from_opt(scenario)?;
        let policy: MissPolicy = policy.map(from_py).transpose()?.unwrap_or_else(|| MissPolicy::perfect(0));
        let cfg: EngineConfig = match engine {
            Some(e) => from_py(e)?,
            None if adapter.is_some() => EngineConfig::default(),
            None => EngineConfig::baseline(0),
        };
        let s = generate_scenario(&scenario).map_err(value_err)?;
        engine::Episode::new(s, policy, adapter.map(|a| a.0.clone()), cfg)
            .map(Self)
            .map_err(value_err)
    }

    /// Processes the next frame and returns its log entry.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let f = self.0.step().map_err(runtime_err)?.clone();
        to_py(py, &f)
    }

    /// Click in grid cells on the current or previous frame.
    fn click<'py>(&mut self, py: Python<'py>, frame: usize, x: f64, y: f64) -> PyResult<Bound<'py, PyAny>> {
        let ev = self.0.human_click(frame, [x, y]).map_err(runtime_err)?;
        to_py(py, &ev)
    }

    fn run_to_end<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        while !self.0.is_finished() {
            self.0.step().map_err(runtime_err)?;
        }
        to_py(py, self.0.log())
    }

    #[getter]
    fn frames_done(&self) -> usize {
        self.0.frames_done()
    }

    #[getter]
    fn finished(&self) -> bool {
        self.0.is_finished()
    }

    fn buffer<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.buffer_dump())
    }

    fn log<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.0.log())
    }

    /// Current truths, for scripting clicks.
    fn truths<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let t = self.0.current_frame().map(|f| f.truths.clone()).unwrap_or_default();
        to_py(py, &t)
    }
}

/// Scores an episode log (as returned by `Episode.log`) on a subset.
#[pyfunction]
#[pyo3(signature = (log, subset=None))]
fn evaluate<'py>(py: Python<'py>, log: &Bound<'py, PyAny>, subset: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let log: EpisodeLog = from_py(log)?;
    let subset: Subset = subset.map(from_py).transpose()?.unwrap_or(Subset::All);
    to_py(py, &metrics::evaluate_subset(&subset, &log.records(), &log.detections()))
}

/// Runs an experiment spec given as TOML text and returns its report.
#[pyfunction]
#[pyo3(signature = (spec_toml, adapter=None, jobs=1))]
fn run_experiment<'py>(py: Python<'py>, spec_toml: &str, adapter: Option<&Adapter>, jobs: usize) -> PyResult<Bound<'py, PyAny>> {
    let spec = ExperimentSpec::from_toml_str(spec_toml).map_err(value_err)?;
    let params = adapter.map(|a| a.0.clone());
    let run = py
        .detach(|| harness::run_experiment(&spec, params, jobs))
        .map_err(runtime_err)?;
    to_py(py, &run.report)
}

/// Parses a scenario config from TOML text into a dict.
#[pyfunction]
fn scenario_from_toml<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg: ScenarioConfig = toml::from_str(text).map_err(value_err)?;
    to_py(py, &cfg)
}

#[pymodule]
fn ttc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(eds, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(scenario_from_toml, m)?)?;
    m.add_class::<Box3D>()?;
    m.add_class::<Adapter>()?;
    m.add_class::<Episode>()?;
    Ok(())
}
