//! Python bindings for the `sepl` crate.
//!
//! Matrices cross the boundary as nested lists of floats; configs as dicts
//! using the same keys as the JSON config files.

use ndarray::{Array2, Array3};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use pythonize::{depythonize, pythonize};

use sepl::{
    AnnotationTensor, DsConfig, FeatureBank, NoiseConfig, PipelineConfig, PipelineState, SeplError, SplitConfig,
    SynthConfig,
};

fn to_py(err: SeplError) -> PyErr {
    match err {
        SeplError::Numerical(_) => PyArithmeticError::new_err(err.to_string()),
        SeplError::Io(_) => PyIOError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

fn matrix<T: Copy>(rows: Vec<Vec<T>>, what: &str) -> PyResult<Array2<T>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err(format!("{what}: ragged rows")));
    }
    Array2::from_shape_vec((n, d), rows.concat()).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn rows<T: Copy>(m: &Array2<T>) -> Vec<Vec<T>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn annotations(values: Vec<Vec<Vec<f64>>>) -> PyResult<AnnotationTensor> {
    let n = values.len();
    let k = values.first().map_or(0, Vec::len);
    let c = values.first().and_then(|s| s.first()).map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(n * k * c);
    for sample in &values {
        if sample.len() != k || sample.iter().any(|a| a.len() != c) {
            return Err(PyValueError::new_err("annotations must be an N x K x C nested list"));
        }
        sample.iter().for_each(|a| flat.extend_from_slice(a));
    }
    let arr = Array3::from_shape_vec((n, k, c), flat).map_err(|e| PyValueError::new_err(e.to_string()))?;
    AnnotationTensor::new(arr).map_err(to_py)
}

fn config<T: Default + for<'de> serde::Deserialize<'de>>(cfg: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    match cfg {
        Some(obj) if !obj.is_none() => Ok(depythonize(obj)?),
        _ => Ok(T::default()),
    }
}

#[pyclass(name = "FeatureBank", module = "sepl_py")]
#[derive(Clone)]
pub struct PyFeatureBank {
    inner: FeatureBank,
}

#[pymethods]
impl PyFeatureBank {
    #[new]
    #[pyo3(signature = (tap_names, features, n_classes, labels=None, original_preds=None, domain_ids=None))]
    fn new(
        tap_names: Vec<String>,
        features: Vec<Vec<Vec<f32>>>,
        n_classes: usize,
        labels: Option<Vec<u16>>,
        original_preds: Option<Vec<Vec<f32>>>,
        domain_ids: Option<Vec<u16>>,
    ) -> PyResult<Self> {
        let features = features
            .into_iter()
            .zip(&tap_names)
            .map(|(f, name)| matrix(f, name))
            .collect::<PyResult<Vec<_>>>()?;
        let original_preds = original_preds.map(|p| matrix(p, "original_preds")).transpose()?;
        let inner = FeatureBank::new(tap_names, features, n_classes, labels, original_preds, domain_ids).map_err(to_py)?;
        Ok(PyFeatureBank { inner })
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        Ok(PyFeatureBank { inner: sepl::read_bank(path).map_err(to_py)? })
    }

    fn write(&self, path: &str) -> PyResult<()> {
        sepl::write_bank(&self.inner, path).map_err(to_py)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(PyFeatureBank { inner: FeatureBank::from_bytes(data).map_err(to_py)? })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &self.inner.to_bytes().map_err(to_py)?))
    }

    #[getter]
    fn n_samples(&self) -> usize {
        self.inner.n_samples()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    #[getter]
    fn tap_names(&self) -> Vec<String> {
        self.inner.manifest.tap_points.iter().map(|t| t.name.clone()).collect()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<u16>> {
        self.inner.labels.clone()
    }

    #[getter]
    fn domain_ids(&self) -> Option<Vec<u16>> {
        self.inner.domain_ids.clone()
    }

    #[getter]
    fn original_preds(&self) -> Option<Vec<Vec<f32>>> {
        self.inner.original_preds.as_ref().map(rows)
    }

    fn tap_features(&self, tap: usize) -> PyResult<Vec<Vec<f32>>> {
        self.inner
            .features
            .get(tap)
            .map(rows)
            .ok_or_else(|| PyValueError::new_err(format!("no tap point {tap}")))
    }

    /// Copy of the bank with its labels replaced.
    fn with_labels(&self, labels: Vec<u16>) -> PyResult<Self> {
        let b = &self.inner;
        let inner = FeatureBank::new(
            self.tap_names(),
            b.features.clone(),
            b.n_classes(),
            Some(labels),
            b.original_preds.clone(),
            b.domain_ids.clone(),
        )
        .map_err(to_py)?;
        Ok(PyFeatureBank { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.n_samples()
    }

    fn __repr__(&self) -> String {
        format!(
            "FeatureBank(n_samples={}, n_classes={}, taps={:?})",
            self.inner.n_samples(),
            self.inner.n_classes(),
            self.tap_names()
        )
    }
}

#[pyclass(name = "PipelineState", module = "sepl_py")]
#[derive(Clone)]
pub struct PyPipelineState {
    inner: PipelineState,
}

#[pymethods]
impl PyPipelineState {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = serde_json::from_str(text).map_err(|e| to_py(e.into()))?;
        Ok(PyPipelineState { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| to_py(e.into()))
    }

    #[getter]
    fn round(&self) -> usize {
        self.inner.round
    }

    #[getter]
    fn tap_names(&self) -> Vec<String> {
        self.inner.tap_names.clone()
    }

    #[getter]
    fn n_annotators(&self) -> usize {
        self.inner.ensemble.n_annotators()
    }

    #[getter]
    fn train_posteriors(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.train_posteriors)
    }

    #[getter]
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        Ok(pythonize(py, &self.inner.history)?)
    }

    /// `(labeled, unlabeled)` indices of the last split, if any round ran.
    #[getter]
    fn split(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        self.inner.split.as_ref().map(|s| (s.labeled_indices.clone(), s.unlabeled_indices.clone()))
    }

    fn write_probes(&self, path: &str) -> PyResult<()> {
        self.inner.ensemble.write(path).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("PipelineState(round={}, n_annotators={})", self.inner.round, self.n_annotators())
    }
}

#[pyfunction]
fn default_config(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    Ok(pythonize(py, &PipelineConfig::default())?)
}

#[pyfunction]
fn avg_aggregate(annotations_: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&sepl::avg_aggregate(&annotations(annotations_)?)))
}

#[pyfunction]
fn majority_vote(annotations_: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<usize>> {
    Ok(sepl::majority_vote(&annotations(annotations_)?))
}

/// Dawid-Skene EM. Returns a dict with posteriors, confusions and the trace.
#[pyfunction]
#[pyo3(signature = (annotations_, config=None))]
fn ds_aggregate<'py>(
    py: Python<'py>,
    annotations_: Vec<Vec<Vec<f64>>>,
    config: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: DsConfig = self::config(config)?;
    let res = sepl::ds_aggregate(&annotations(annotations_)?, &cfg).map_err(to_py)?;
    Ok(pythonize(py, &res.to_json(true))?)
}

#[pyfunction]
fn entropy(posteriors: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(sepl::entropy_of(matrix(posteriors, "posteriors")?.view()).to_vec())
}

#[pyfunction]
#[pyo3(signature = (posteriors, gamma=0.25, seed=0))]
fn split_by_entropy(posteriors: Vec<Vec<f64>>, gamma: f64, seed: u64) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let p = matrix(posteriors, "posteriors")?;
    let s = sepl::split_by_entropy(p.view(), &SplitConfig { gamma, seed }).map_err(to_py)?;
    Ok((s.labeled_indices, s.unlabeled_indices))
}

#[pyfunction]
fn sharpen(p: Vec<f64>, temp: f64) -> PyResult<Vec<f64>> {
    if !(temp > 0.0) {
        return Err(PyValueError::new_err("temp must be > 0"));
    }
    Ok(sepl::sharpen(ndarray::ArrayView1::from(&p), temp).to_vec())
}

/// Returns `(train_bank, test_bank)`; the banks carry the clean labels.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn gen_domains(config: Option<&Bound<'_, PyAny>>) -> PyResult<(PyFeatureBank, PyFeatureBank)> {
    let cfg: SynthConfig = self::config(config)?;
    let data = sepl::gen_domains(&cfg).map_err(to_py)?;
    Ok((PyFeatureBank { inner: data.train }, PyFeatureBank { inner: data.test }))
}

/// Returns `(noisy_labels, flip_mask)`.
#[pyfunction]
#[pyo3(signature = (labels, n_classes, rate=0.25, seed=0))]
fn inject_noise(labels: Vec<u16>, n_classes: usize, rate: f64, seed: u64) -> PyResult<(Vec<u16>, Vec<bool>)> {
    sepl::inject_noise(&labels, n_classes, &NoiseConfig { rate, seed }).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (bank, config=None))]
fn run_pipeline(py: Python<'_>, bank: &PyFeatureBank, config: Option<&Bound<'_, PyAny>>) -> PyResult<PyPipelineState> {
    let cfg: PipelineConfig = self::config(config)?;
    let inner = py.allow_threads(|| sepl::run_pipeline(&bank.inner, &cfg)).map_err(to_py)?;
    Ok(PyPipelineState { inner })
}

/// Returns `(posteriors, labels)`.
#[pyfunction]
#[pyo3(signature = (state, bank, config=None))]
fn infer(
    state: &PyPipelineState,
    bank: &PyFeatureBank,
    config: Option<&Bound<'_, PyAny>>,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let cfg: PipelineConfig = self::config(config)?;
    let (post, labels) = sepl::infer(&state.inner, &bank.inner, &cfg).map_err(to_py)?;
    Ok((rows(&post), labels))
}

#[pyfunction]
#[pyo3(signature = (posteriors, true_labels, noisy_labels=None, flip_mask=None, domain_ids=None))]
fn evaluate<'py>(
    py: Python<'py>,
    posteriors: Vec<Vec<f64>>,
    true_labels: Vec<u16>,
    noisy_labels: Option<Vec<u16>>,
    flip_mask: Option<Vec<bool>>,
    domain_ids: Option<Vec<u16>>,
) -> PyResult<Bound<'py, PyAny>> {
    let p = matrix(posteriors, "posteriors")?;
    let report = sepl::evaluate(
        p.view(),
        &true_labels,
        noisy_labels.as_deref(),
        flip_mask.as_deref(),
        domain_ids.as_deref(),
    )
    .map_err(to_py)?;
    Ok(pythonize(py, &report)?)
}

#[pymodule]
pub fn sepl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFeatureBank>()?;
    m.add_class::<PyPipelineState>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(avg_aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(majority_vote, m)?)?;
    m.add_function(wrap_pyfunction!(ds_aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(split_by_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(sharpen, m)?)?;
    m.add_function(wrap_pyfunction!(gen_domains, m)?)?;
    m.add_function(wrap_pyfunction!(inject_noise, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
