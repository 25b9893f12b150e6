//! Python bindings: dataset generation and I/O, the ViT grader, contribution
//! maps and patch masks, one training step, cross-validation, and metrics.
//!
//! Configurations cross the boundary as dicts with the same keys as the
//! JSON configuration files.

use std::path::PathBuf;

use fof_core::data::{self, GeneratorConfig};
use fof_core::frl;
use fof_core::model::{ModelConfig, Vit};
use fof_core::numerics::Tensor;
use fof_core::train::{self, Batch, TrainConfig};
use fof_core::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyAny, PyDict};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Contract(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Round-trips a Python object through `json` into a config struct.
fn from_dict<C: serde::de::DeserializeOwned + Default>(py: Python<'_>, obj: Option<&Bound<'_, PyDict>>) -> PyResult<C> {
    let Some(obj) = obj else {
        return Ok(C::default());
    };
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(format!("invalid configuration: {e}")))
}

fn to_dict<'py>(py: Python<'py>, value: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (value.to_string(),))
}

fn json_value<S: serde::Serialize>(v: &S) -> PyResult<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// One region-of-interest image with its labels.
#[pyclass(name = "Sample", module = "pyfof", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySample(data::Sample);

#[pymethods]
impl PySample {
    #[getter]
    fn id(&self) -> &str {
        &self.0.id
    }

    #[getter]
    fn patient_id(&self) -> &str {
        &self.0.patient_id
    }

    /// 0, 1, 2 for grades II, III, IV.
    #[getter]
    fn grade(&self) -> usize {
        self.0.grade
    }

    /// `(height, width, 3)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.0.height(), self.0.width(), 3)
    }

    /// Row-major pixel values in `[0, 1]`.
    fn pixels(&self) -> Vec<f32> {
        self.0.image.data().to_vec()
    }

    /// Row-major ground-truth diagnostic region, if known.
    fn focus_mask(&self) -> Option<Vec<bool>> {
        self.0.focus_mask.clone()
    }

    /// Biomarker category codes keyed by name, or `None` without a panel.
    fn biomarkers<'py>(&self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyDict>>> {
        let Some(panel) = self.0.panel else {
            return Ok(None);
        };
        let d = PyDict::new(py);
        for (n, name) in fof_core::mca::BIOMARKERS.iter().enumerate() {
            d.set_item(*name, fof_core::mca::code_name(n, panel.code(n)))?;
        }
        Ok(Some(d))
    }

    /// Copy without biomarker labels.
    fn without_biomarkers(&self) -> Self {
        Self(data::Sample {
            panel: None,
            ..self.0.clone()
        })
    }

    fn __repr__(&self) -> String {
        format!("Sample(id={:?}, grade={})", self.0.id, self.0.grade + 2)
    }
}

fn unwrap_samples(samples: &[PyRef<'_, PySample>]) -> Vec<data::Sample> {
    samples.iter().map(|s| s.0.clone()).collect()
}

/// Synthetic dataset from generator settings (same keys as the config file).
#[pyfunction]
#[pyo3(signature = (config=None))]
fn generate(py: Python<'_>, config: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<PySample>> {
    let config: GeneratorConfig = from_dict(py, config)?;
    Ok(data::generate(&config).map_err(to_py)?.into_iter().map(PySample).collect())
}

#[pyfunction]
fn load_dataset(path: PathBuf) -> PyResult<Vec<PySample>> {
    Ok(data::load_dataset(&path).map_err(to_py)?.into_iter().map(PySample).collect())
}

#[pyfunction]
fn save_dataset(samples: Vec<PyRef<'_, PySample>>, path: PathBuf) -> PyResult<()> {
    data::save_dataset(&unwrap_samples(&samples), &path).map_err(to_py)
}

/// Vision-transformer grader with `K + 1` outputs (the last is background).
#[pyclass(name = "Model", module = "pyfof", skip_from_py_object)]
#[derive(Clone)]
struct PyModel(Vit<f32>);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(py: Python<'_>, config: Option<&Bound<'_, PyDict>>, seed: u64) -> PyResult<Self> {
        let config: ModelConfig = from_dict(py, config)?;
        Ok(Self(Vit::init(config, seed).map_err(to_py)?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(Vit::load(&path).map_err(to_py)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(to_py)
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &json_value(self.0.config())?)
    }

    fn num_parameters(&self) -> usize {
        self.0.params().num_scalars()
    }

    /// Grade probabilities per sample, background dropped and renormalized.
    fn predict_proba(&self, samples: Vec<PyRef<'_, PySample>>) -> PyResult<Vec<Vec<f64>>> {
        let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.0.image).collect();
        let k = self.0.config().num_grades;
        let probs = train::grade_probabilities(&self.0, &images).map_err(to_py)?;
        Ok(probs.chunks(k).map(<[f64]>::to_vec).collect())
    }

    /// Row-major `[H, W]` contribution scores in `[0, 1]` for `target`
    /// (a grade index).
    fn contribution_map(&self, sample: PyRef<'_, PySample>, target: usize) -> PyResult<Vec<f64>> {
        Ok(frl::contribution_map(&self.0, &sample.0.image, target).map_err(to_py)?.scores)
    }

    /// AUC, AP, accuracy and kappa on the given samples, from images alone.
    fn evaluate<'py>(&self, py: Python<'py>, samples: Vec<PyRef<'_, PySample>>) -> PyResult<Bound<'py, PyAny>> {
        let refs: Vec<&data::Sample> = samples.iter().map(|s| &s.0).collect();
        to_dict(py, &json_value(&train::evaluate(&self.0, &refs).map_err(to_py)?)?)
    }
}

/// Row-major patch grid of positive cells for a `[height, width]` map.
#[pyfunction]
fn patch_mask(scores: Vec<f64>, height: usize, width: usize, patch_size: usize, theta: f64) -> PyResult<Vec<bool>> {
    if scores.len() != height * width {
        return Err(PyValueError::new_err(format!("{} scores for a {height}x{width} map", scores.len())));
    }
    let map = frl::ContributionMap {
        height,
        width,
        scores,
        raw: Vec::new(),
        alpha: Vec::new(),
        target_class: 0,
    };
    Ok(frl::patch_mask(&map, patch_size, theta).map_err(to_py)?.cells)
}

/// Model, projection heads, and optimizer state for two-pass training.
#[pyclass(name = "Trainer", module = "pyfof")]
struct PyTrainer(train::Trainer);

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (model, config=None, projector_seed=0))]
    fn new(py: Python<'_>, model: PyRef<'_, PyModel>, config: Option<&Bound<'_, PyDict>>, projector_seed: u64) -> PyResult<Self> {
        let config: TrainConfig = from_dict(py, config)?;
        Ok(Self(train::Trainer::new(model.0.clone(), config, projector_seed).map_err(to_py)?))
    }

    /// Both passes and one update; returns the loss breakdown.
    fn step<'py>(&mut self, py: Python<'py>, samples: Vec<PyRef<'_, PySample>>, lr: f64) -> PyResult<Bound<'py, PyDict>> {
        let owned = unwrap_samples(&samples);
        let refs: Vec<&data::Sample> = owned.iter().collect();
        let batch = Batch::from_samples(&refs, None).map_err(to_py)?;
        let l = self.0.step(&batch, lr).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("total", l.total)?;
        d.set_item("cls", l.cls)?;
        d.set_item("frl", l.frl)?;
        d.set_item("mca", l.mca)?;
        Ok(d)
    }

    /// Copy of the current model.
    fn model(&self) -> PyModel {
        PyModel(self.0.model().clone())
    }
}

/// Patient-level k-fold cross-validation; returns per-fold and aggregate
/// metrics, and writes a run directory when `out` is given.
#[pyfunction]
#[pyo3(signature = (samples, model_config=None, train_config=None, out=None))]
fn cross_validate<'py>(
    py: Python<'py>,
    samples: Vec<PyRef<'_, PySample>>,
    model_config: Option<&Bound<'_, PyDict>>,
    train_config: Option<&Bound<'_, PyDict>>,
    out: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let model: ModelConfig = from_dict(py, model_config)?;
    let config: TrainConfig = from_dict(py, train_config)?;
    let owned = unwrap_samples(&samples);
    let run = py
        .detach(|| train::cross_validate(&owned, &model, &config, out.as_deref()))
        .map_err(to_py)?;
    let mut value = run.metrics_json();
    value["focus_iou"] = json_value(&run.mean_focus_iou())?;
    to_dict(py, &value)
}

#[pyfunction]
fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    train::cosine_lr(step, total_steps, lr0)
}

/// Macro one-vs-rest AUC and AP, accuracy and Cohen's kappa from class
/// probabilities `[n][k]`.
#[pyfunction]
fn compute_metrics<'py>(py: Python<'py>, probs: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Bound<'py, PyAny>> {
    let k = probs.first().map_or(0, Vec::len);
    if probs.len() != labels.len() || probs.iter().any(|r| r.len() != k) || k == 0 {
        return Err(PyValueError::new_err("probabilities must be a non-empty [n][k] matrix matching labels"));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(PyValueError::new_err(format!("label {y} is outside [0, {k})")));
    }
    let flat: Vec<f64> = probs.concat();
    to_dict(py, &json_value(&train::compute_metrics(&flat, &labels, k))?)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, truth: Vec<bool>) -> Option<f64> {
    train::roc_auc(&scores, &truth)
}

#[pyfunction]
fn average_precision(scores: Vec<f64>, truth: Vec<bool>) -> Option<f64> {
    train::average_precision(&scores, &truth)
}

#[pyfunction]
fn cohen_kappa(preds: Vec<usize>, labels: Vec<usize>, k: usize) -> PyResult<f64> {
    if preds.len() != labels.len() || preds.iter().chain(&labels).any(|&c| c >= k) {
        return Err(PyValueError::new_err("predictions and labels must have equal length and lie in [0, k)"));
    }
    Ok(train::cohen_kappa(&preds, &labels, k))
}

#[pymodule]
fn pyfof(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(save_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(patch_mask, m)?)?;
    m.add_function(wrap_pyfunction!(cross_validate, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(cohen_kappa, m)?)?;
    Ok(())
}
