//! Python bindings. Poses cross the boundary as `Pose` objects or nested
//! lists; structured records (frames, scenarios, reports) as JSON text.

use nalgebra::{Matrix4, Vector3, Vector6};
use posetrack::cli;
use posetrack::eval::{precision_recall, EvalConfig, ObjectModel, PredictionBatch, TruthFrame};
use posetrack::factors::{fit_sigma_model, measurement_covariance, CovModelParams};
use posetrack::io::parse_jsonl;
use posetrack::lie::{self, Tangent6};
use posetrack::sim;
use posetrack::tracker::{self, Frame, TrackerConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(err)
}

fn to_jsonl<T: serde::Serialize>(items: &[T]) -> PyResult<String> {
    let mut out = String::new();
    for i in items {
        out.push_str(&to_json(i)?);
        out.push('\n');
    }
    Ok(out)
}

fn rows<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> Vec<Vec<f64>> {
    (0..R).map(|i| (0..C).map(|j| m[(i, j)]).collect()).collect()
}

/// Rigid transform in SE(3).
#[pyclass(name = "Pose", module = "posetrack_py", frozen)]
#[derive(Clone)]
struct PyPose(lie::Pose);

#[pymethods]
impl PyPose {
    #[new]
    #[pyo3(signature = (translation = [0.0; 3], quaternion_wxyz = [1.0, 0.0, 0.0, 0.0]))]
    fn new(translation: [f64; 3], quaternion_wxyz: [f64; 4]) -> Self {
        Self(lie::Pose::from_parts(translation, quaternion_wxyz))
    }

    /// From a row-major 4x4 homogeneous matrix.
    #[staticmethod]
    fn from_matrix(m: Vec<Vec<f64>>) -> PyResult<Self> {
        if m.len() != 4 || m.iter().any(|r| r.len() != 4) {
            return Err(err("expected a 4x4 matrix"));
        }
        let m = Matrix4::from_fn(|i, j| m[i][j]);
        let r = nalgebra::Rotation3::from_matrix(&m.fixed_view::<3, 3>(0, 0).into_owned());
        Ok(Self(lie::Pose::new(
            nalgebra::UnitQuaternion::from_rotation_matrix(&r),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )))
    }

    /// Exponential of a tangent (rho, theta).
    #[staticmethod]
    fn exp(tangent: [f64; 6]) -> Self {
        Self(lie::exp_se3(&Tangent6::from_vector(&Vector6::from(tangent))))
    }

    fn log(&self) -> [f64; 6] {
        lie::log_se3(&self.0).to_vector().into()
    }

    fn matrix(&self) -> Vec<Vec<f64>> {
        rows(&self.0.to_matrix())
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        self.0.translation.into()
    }

    #[getter]
    fn quaternion_wxyz(&self) -> [f64; 4] {
        self.0.quaternion_wxyz()
    }

    fn compose(&self, other: &PyPose) -> Self {
        Self(self.0.compose(&other.0))
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    fn between(&self, other: &PyPose) -> Self {
        Self(self.0.between(&other.0))
    }

    fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        self.0.transform_point(&Vector3::from(p)).into()
    }

    fn __matmul__(&self, other: &PyPose) -> Self {
        self.compose(other)
    }

    fn __repr__(&self) -> String {
        let t = self.0.translation;
        let q = self.0.quaternion_wxyz();
        format!("Pose(translation=[{}, {}, {}], quaternion_wxyz=[{}, {}, {}, {}])", t.x, t.y, t.z, q[0], q[1], q[2], q[3])
    }
}

/// Online fixed-lag tracker.
#[pyclass(name = "Tracker", module = "posetrack_py")]
struct PyTracker(tracker::Tracker);

#[pymethods]
impl PyTracker {
    /// `config` is a TrackerConfig as JSON; omitted fields keep defaults.
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        let config: TrackerConfig = match config {
            Some(c) => serde_json::from_str(c).map_err(err)?,
            None => TrackerConfig::default(),
        };
        Ok(Self(tracker::Tracker::new(config).map_err(err)?))
    }

    /// Ingests one frame (JSON) and returns the ingest report as JSON.
    fn ingest(&mut self, frame: &str) -> PyResult<String> {
        let frame: Frame = serde_json::from_str(frame).map_err(err)?;
        let r = self.0.ingest(&frame).map_err(err)?;
        to_json(&serde_json::json!({
            "solve": r.solve,
            "associations": r.associations,
            "retired": r.retired,
        }))
    }

    /// Gated predictions at time `t` as a JSON array.
    fn predict(&self, t: f64) -> PyResult<String> {
        to_json(&self.0.predict(t))
    }

    /// Current track estimates as a JSON array.
    fn tracks(&self) -> PyResult<String> {
        to_json(&self.0.snapshot().tracks)
    }

    fn num_tracks(&self) -> usize {
        self.0.tracks().len()
    }

    fn num_variables(&self) -> usize {
        self.0.graph().num_variables()
    }
}

/// Ready-made scenario as JSON; `kind` is "static" or "dynamic".
#[pyfunction]
#[pyo3(signature = (kind, objects = 5, seed = 0))]
fn make_scene(kind: &str, objects: usize, seed: u64) -> PyResult<String> {
    let s = match kind {
        "static" => sim::make_static_scene(objects, seed),
        "dynamic" => sim::make_dynamic_scene(objects, seed),
        _ => return Err(err(format!("unknown scene kind {kind:?}"))),
    };
    to_json(&s)
}

/// Runs the simulator. Returns a dict with `frames`, `truth` and `errors`
/// as JSONL text and `models` as JSON.
#[pyfunction]
fn simulate(scenario: &str) -> PyResult<std::collections::BTreeMap<&'static str, String>> {
    let s: sim::Scenario = serde_json::from_str(scenario).map_err(err)?;
    let out = sim::generate(&s).map_err(err)?;
    Ok([
        ("frames", to_jsonl(&out.frames)?),
        ("truth", to_jsonl(&out.truth)?),
        ("errors", to_jsonl(&out.errors)?),
        ("models", to_json(&out.models)?),
    ]
    .into())
}

/// Tracks a JSONL frame stream, returning prediction batches as JSONL.
#[pyfunction]
#[pyo3(signature = (frames, config = None))]
fn track(frames: &str, config: Option<&str>) -> PyResult<String> {
    let frames: Vec<Frame> = parse_jsonl(frames, "frames").map_err(err)?;
    let config: TrackerConfig = match config {
        Some(c) => serde_json::from_str(c).map_err(err)?,
        None => TrackerConfig::default(),
    };
    to_jsonl(&cli::run_tracker(&config, &frames).map_err(err)?)
}

/// Raw detections as prediction batches (JSONL).
#[pyfunction]
fn baseline(frames: &str) -> PyResult<String> {
    let frames: Vec<Frame> = parse_jsonl(frames, "frames").map_err(err)?;
    to_jsonl(&cli::baseline_predictions(&frames))
}

/// Scores predictions against ground truth; returns the report as JSON.
#[pyfunction]
fn evaluate(predictions: &str, truth: &str, models: &str) -> PyResult<String> {
    let preds: Vec<PredictionBatch> = parse_jsonl(predictions, "predictions").map_err(err)?;
    let truth: Vec<TruthFrame> = parse_jsonl(truth, "truth").map_err(err)?;
    let models: Vec<ObjectModel> = serde_json::from_str(models).map_err(err)?;
    let models = cli::models_by_label(models).map_err(err)?;
    to_json(&precision_recall(&preds, &truth, &models, &EvalConfig::default()).map_err(err)?)
}

/// 6x6 detection covariance for an object pose in the camera frame.
#[pyfunction]
fn detection_covariance(pose_in_camera: &PyPose, n_px: f64) -> PyResult<Vec<Vec<f64>>> {
    let c = measurement_covariance(&pose_in_camera.0, n_px, &CovModelParams::default()).map_err(err)?;
    Ok(rows(&c))
}

/// Fits sigma(n) = a exp(-b n) to (n_px, error) pairs; returns (a, b).
#[pyfunction]
#[pyo3(signature = (samples, bins = 10))]
fn fit_sigma(samples: Vec<(f64, f64)>, bins: usize) -> PyResult<(f64, f64)> {
    let f = fit_sigma_model(&samples, bins).map_err(err)?;
    Ok((f.a, f.b))
}

#[pymodule]
fn posetrack_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPose>()?;
    m.add_class::<PyTracker>()?;
    m.add_function(wrap_pyfunction!(make_scene, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(track, m)?)?;
    m.add_function(wrap_pyfunction!(baseline, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(detection_covariance, m)?)?;
    m.add_function(wrap_pyfunction!(fit_sigma, m)?)?;
    Ok(())
}
