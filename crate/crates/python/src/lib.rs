//! Python bindings for the satformer core crate.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use satformer::metrics::{crps as crps_value, pmf_to_cmf, MetricReport};
use satformer::training::{evaluate, train as train_model};
use satformer::{Error, GeneratorConfig, SampleRecord, SyntheticWorld};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) | Error::Dimension { .. } | Error::Contract(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn from_json<T: serde::de::DeserializeOwned>(text: Option<&str>) -> PyResult<T>
where
    T: Default,
{
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

/// Uniform bins over `[y_min, y_max]`.
#[pyclass(name = "BinSpec", module = "satformer", from_py_object)]
#[derive(Clone)]
struct PyBinSpec(satformer::BinSpec);

#[pymethods]
impl PyBinSpec {
    #[new]
    fn new(y_min: f64, y_max: f64, n: usize) -> PyResult<Self> {
        satformer::BinSpec::new(y_min, y_max, n).map(Self).map_err(err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.0.delta()
    }

    fn to_bin(&self, y: f64) -> usize {
        self.0.to_bin(y)
    }

    fn center(&self, i: usize) -> PyResult<f64> {
        self.0.bin_center(i).map_err(err)
    }

    fn centers(&self) -> Vec<f64> {
        self.0.centers()
    }

    fn __repr__(&self) -> String {
        format!("BinSpec(y_min={}, y_max={}, n={})", self.0.y_min, self.0.y_max, self.0.n)
    }
}

#[pyclass(name = "ModelConfig", module = "satformer", from_py_object)]
#[derive(Clone)]
struct PyModelConfig(satformer::ModelConfig);

#[pymethods]
impl PyModelConfig {
    /// Fields not given in `json` keep their full-size defaults.
    #[new]
    #[pyo3(signature = (json=None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let c: satformer::ModelConfig = from_json(json)?;
        c.validate().map_err(err)?;
        Ok(Self(c))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("model config serializes")
    }

    #[getter]
    fn seq_len(&self) -> usize {
        self.0.seq_len()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.0.parameter_count()
    }

    #[getter]
    fn n_bins(&self) -> usize {
        self.0.n_bins
    }

    #[getter]
    fn attention(&self) -> &'static str {
        self.0.attention.label()
    }
}

#[pyclass(name = "Dataset", module = "satformer", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: satformer::Dataset,
    generator: GeneratorConfig,
}

impl PyDataset {
    fn split(&self, split: &str) -> PyResult<&[SampleRecord]> {
        match split {
            "train" => Ok(&self.inner.train),
            "validation" => Ok(&self.inner.validation),
            other => Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        }
    }
}

#[pymethods]
impl PyDataset {
    /// Generates a dataset from a JSON generator config.
    #[staticmethod]
    #[pyo3(signature = (json=None))]
    fn generate(py: Python<'_>, json: Option<&str>) -> PyResult<Self> {
        let generator: GeneratorConfig = from_json(json)?;
        let inner = py
            .detach(|| satformer::Dataset::build(&SyntheticWorld::generate(&generator)?))
            .map_err(err)?;
        Ok(Self { inner, generator })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (inner, generator) = satformer::Dataset::load(path.as_ref()).map_err(err)?;
        Ok(Self { inner, generator })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref(), &self.generator).map_err(err)
    }

    fn relabel(&mut self, n: usize) -> PyResult<()> {
        self.inner.relabel(n).map(|_| ()).map_err(err)
    }

    #[getter]
    fn bins(&self) -> PyBinSpec {
        PyBinSpec(self.inner.bins.clone())
    }

    /// Training label counts per bin.
    fn histogram(&self) -> Vec<usize> {
        self.inner.histogram()
    }

    #[pyo3(signature = (split="train"))]
    fn targets(&self, split: &str) -> PyResult<Vec<f64>> {
        Ok(self.split(split)?.iter().map(|r| r.y_reg).collect())
    }

    #[pyo3(signature = (split="train"))]
    fn labels(&self, split: &str) -> PyResult<Vec<usize>> {
        Ok(self.split(split)?.iter().map(|r| r.label).collect())
    }

    /// Input shape `[frames, channels, height, width]`.
    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.generator.input_shape().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.train.len()
    }
}

#[pyclass(name = "Checkpoint", module = "satformer", from_py_object)]
#[derive(Clone)]
struct PyCheckpoint(satformer::Checkpoint);

fn report_dict<'py>(py: Python<'py>, r: &MetricReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("samples", r.samples)?;
    d.set_item("wcce", r.wcce)?;
    d.set_item("top3", r.top3)?;
    d.set_item("crps", r.crps_mean)?;
    d.set_item("bw_top3", r.bw_top3)?;
    d.set_item("bw_crps", r.bw_crps)?;
    d.set_item("csv", r.to_csv())?;
    Ok(d)
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        satformer::Checkpoint::load(path.as_ref()).map(Self).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path.as_ref()).map_err(err)
    }

    #[getter]
    fn model(&self) -> PyModelConfig {
        PyModelConfig(self.0.meta.model.clone())
    }

    #[getter]
    fn bins(&self) -> PyBinSpec {
        PyBinSpec(self.0.meta.bins.clone())
    }

    /// Metric report on one split; keys are summary metrics plus `csv`.
    #[pyo3(signature = (dataset, split="validation"))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset, split: &str) -> PyResult<Bound<'py, PyDict>> {
        let records = dataset.split(split)?;
        let report = py.detach(|| evaluate(&self.0, records, &dataset.inner.bins)).map_err(err)?;
        report_dict(py, &report)
    }

    /// Predicted bin probabilities for one record.
    #[pyo3(signature = (dataset, index, split="validation"))]
    fn predict(&self, dataset: &PyDataset, index: usize, split: &str) -> PyResult<Vec<f64>> {
        let record = dataset
            .split(split)?
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))?;
        let x = self.0.meta.norm.normalize(&record.x_raw).map_err(err)?;
        satformer::model::predict(&self.0.params, &self.0.meta.model, &x)
            .map(|t| t.into_data())
            .map_err(err)
    }
}

/// Trains a model; returns a dict with `train_loss`, `val_loss`,
/// `best_step`, `best` and `last`.
#[pyfunction]
#[pyo3(signature = (dataset, model, train=None, out=None))]
fn train<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    model: &PyModelConfig,
    train: Option<&str>,
    out: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg: satformer::TrainConfig = from_json(train)?;
    let outcome = py
        .detach(|| train_model(&cfg, &model.0, &dataset.inner, out.map(std::path::Path::new)))
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("train_loss", outcome.log.train_loss.clone())?;
    let val: Vec<(usize, f64)> = outcome.log.validations.iter().map(|v| (v.step, v.loss)).collect();
    d.set_item("val_loss", val)?;
    d.set_item("best_step", outcome.log.best_step)?;
    d.set_item("best", PyCheckpoint(outcome.best))?;
    d.set_item("last", PyCheckpoint(outcome.last))?;
    Ok(d)
}

/// CRPS of a bin distribution against a label.
#[pyfunction]
fn crps(pmf: Vec<f64>, label: usize) -> PyResult<f64> {
    if label >= pmf.len() {
        return Err(PyValueError::new_err(format!("label {label} out of range for {} bins", pmf.len())));
    }
    Ok(crps_value(&pmf_to_cmf(&pmf), label))
}

/// Inverse-log-frequency class weights.
#[pyfunction]
fn class_weights(labels: Vec<usize>, n: usize) -> PyResult<Vec<f64>> {
    satformer::ClassWeights::from_labels(&labels, n)
        .map(|w| w.weights)
        .map_err(err)
}

#[pymodule]
#[pyo3(name = "satformer")]
fn satformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBinSpec>()?;
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(crps, m)?)?;
    m.add_function(wrap_pyfunction!(class_weights, m)?)?;
    Ok(())
}
