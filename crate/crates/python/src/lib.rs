//! Python bindings for the `cmmoco` crate.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cmmoco::checks::{self, SuiteConfig};
use cmmoco::config::{self, ExperimentConfig};
use cmmoco::io::{self, FeatureStore};
use cmmoco::model::Model;
use cmmoco::retrieval::{self, Gallery, Modality, RerankConfig, RetrievalReport};
use cmmoco::synth_data::{self, Split};
use cmmoco::tensor::Tensor;
use cmmoco::train::{self, Checkpoint, EpochMetrics, Trainer};

fn to_py(e: cmmoco::Error) -> PyErr {
    use cmmoco::Error as E;
    match e {
        E::Io(io) => PyIOError::new_err(io.to_string()),
        e @ (E::NonFinite { .. } | E::Degenerate { .. } | E::Domain { .. }) => PyArithmeticError::new_err(e.to_string()),
        e @ (E::GradCheck(_) | E::Contract(_) | E::Protocol(_)) => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn parse_config(text: Option<&str>) -> PyResult<ExperimentConfig> {
    match text {
        Some(t) => config::from_toml_str(t).map_err(to_py),
        None => Ok(ExperimentConfig::default()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Tensor::matrix(rows.len(), cols, rows.concat()).map_err(to_py)
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn report_dict<'py>(py: Python<'py>, r: &RetrievalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item(
        "direction",
        match r.direction {
            retrieval::Direction::TextToImage => "text_to_image",
            retrieval::Direction::ImageToText => "image_to_text",
        },
    )?;
    d.set_item("reranked", r.reranked)?;
    d.set_item("rank_k", r.rank_k.clone())?;
    d.set_item("map", r.map_score)?;
    Ok(d)
}

fn metrics_dict<'py>(py: Python<'py>, m: &EpochMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", m.epoch)?;
    d.set_item("lcmc", m.lcmc)?;
    d.set_item("lalign", m.lalign)?;
    d.set_item("lid", m.lid)?;
    d.set_item("total", m.total)?;
    d.set_item("val_rank1", m.val_rank1)?;
    d.set_item("lr", m.lr)?;
    Ok(d)
}

/// Canonical configuration text, optionally starting from `text`.
#[pyfunction]
#[pyo3(signature = (text=None))]
fn config_text(text: Option<&str>) -> PyResult<String> {
    Ok(config::to_toml_string(&parse_config(text)?))
}

#[pyfunction]
fn config_keys() -> Vec<&'static str> {
    config::known_keys()
}

#[pyclass(name = "Dataset", module = "cmmoco_py", frozen)]
struct PyDataset {
    inner: synth_data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Generates the synthetic dataset described by a configuration text.
    #[staticmethod]
    #[pyo3(signature = (config=None))]
    fn generate(config: Option<&str>) -> PyResult<Self> {
        let cfg = parse_config(config)?;
        Ok(PyDataset {
            inner: synth_data::generate_dataset(&cfg.data).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: io::load_dataset(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_dataset(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn identities(&self, split: &str) -> PyResult<Vec<u32>> {
        let split: Split = split.parse().map_err(to_py)?;
        Ok(self.inner.ids_in(split))
    }

    fn image_count(&self, split: &str) -> PyResult<usize> {
        Ok(self.inner.images_in(split.parse().map_err(to_py)?).len())
    }

    fn caption_count(&self, split: &str) -> PyResult<usize> {
        Ok(self.inner.captions_in(split.parse().map_err(to_py)?).len())
    }

    fn __len__(&self) -> usize {
        self.inner.captions.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(identities={}, images={}, captions={}, vocab_size={})",
            self.inner.identities.len(),
            self.inner.images.len(),
            self.inner.captions.len(),
            self.inner.vocab_size()
        )
    }
}

/// A trained (or freshly initialised) model with the state needed to resume.
#[pyclass(name = "Model", module = "cmmoco_py", frozen)]
struct PyModel {
    checkpoint: Checkpoint,
    model: Model,
}

impl PyModel {
    fn from_checkpoint(checkpoint: Checkpoint) -> PyResult<Self> {
        let model = checkpoint.model().map_err(to_py)?;
        Ok(PyModel { checkpoint, model })
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        PyModel::from_checkpoint(io::load_checkpoint(&path).map_err(to_py)?)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_checkpoint(&path, &self.checkpoint).map_err(to_py)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.checkpoint.epoch
    }

    /// Per-epoch metrics as a list of dicts.
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.checkpoint.trace.iter().map(|m| metrics_dict(py, m)).collect()
    }

    /// Query-encoder embeddings of one split: `(vectors, identities)`.
    fn encode(&self, dataset: &PyDataset, split: &str, modality: &str) -> PyResult<(Vec<Vec<f64>>, Vec<u32>)> {
        let split: Split = split.parse().map_err(to_py)?;
        let (texts, images) = train::encode_split(&self.model, &dataset.inner, split).map_err(to_py)?;
        let g = match modality.parse().map_err(to_py)? {
            Modality::Text => texts,
            Modality::Image => images,
        };
        Ok((rows_of(g.embeddings()), g.identities().to_vec()))
    }

    /// Test-split reports: plain and re-ranked, in both directions.
    #[pyo3(signature = (dataset, rerank_k=5, rerank_weight=0.05))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        rerank_k: usize,
        rerank_weight: f64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let cfg = RerankConfig {
            k: rerank_k,
            weight: rerank_weight,
            ..RerankConfig::default()
        };
        let reports = train::evaluate_model(&self.model, &dataset.inner, &cfg).map_err(to_py)?;
        reports.iter().map(|r| report_dict(py, r)).collect()
    }
}

/// Trains on `dataset`. With `resume`, continues from that model's state.
#[pyfunction]
#[pyo3(signature = (dataset, config=None, epochs=None, resume=None))]
fn train_model(
    py: Python<'_>,
    dataset: &PyDataset,
    config: Option<&str>,
    epochs: Option<usize>,
    resume: Option<&PyModel>,
) -> PyResult<PyModel> {
    let mut cfg = parse_config(config)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let ds = &dataset.inner;
    let from = resume.map(|m| &m.checkpoint);
    let checkpoint = py
        .detach(|| -> cmmoco::Result<Checkpoint> {
            let mut trainer = match from {
                Some(c) => Trainer::resume(ds, cfg.train, c)?,
                None => Trainer::new(ds, cfg.train)?,
            };
            while !trainer.is_done() {
                trainer.run_epoch()?;
            }
            Ok(trainer.checkpoint())
        })
        .map_err(to_py)?;
    PyModel::from_checkpoint(checkpoint)
}

/// Bidirectional evaluation of text and image embeddings (unit rows).
#[pyfunction]
#[pyo3(signature = (texts, text_ids, images, image_ids, rerank_k=5, rerank_weight=0.05))]
fn evaluate<'py>(
    py: Python<'py>,
    texts: Vec<Vec<f64>>,
    text_ids: Vec<u32>,
    images: Vec<Vec<f64>>,
    image_ids: Vec<u32>,
    rerank_k: usize,
    rerank_weight: f64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let t = Gallery::new(matrix(texts)?, text_ids, Modality::Text).map_err(to_py)?;
    let i = Gallery::new(matrix(images)?, image_ids, Modality::Image).map_err(to_py)?;
    let cfg = RerankConfig {
        k: rerank_k,
        weight: rerank_weight,
        ..RerankConfig::default()
    };
    let reports = retrieval::evaluate(&t, &i, &cfg).map_err(to_py)?;
    reports.iter().map(|r| report_dict(py, r)).collect()
}

/// Writes a feature store file.
#[pyfunction]
fn save_features(path: PathBuf, modality: &str, vectors: Vec<Vec<f64>>, identities: Vec<u32>) -> PyResult<()> {
    let store = FeatureStore::from_embeddings(modality.parse().map_err(to_py)?, &matrix(vectors)?, identities).map_err(to_py)?;
    io::save_features(&path, &store).map_err(to_py)
}

/// Reads a feature store file: `(modality, vectors, identities)`.
#[pyfunction]
fn load_features(path: PathBuf) -> PyResult<(String, Vec<Vec<f64>>, Vec<u32>)> {
    let store = io::load_features(&path).map_err(to_py)?;
    let modality = match store.modality {
        Modality::Image => "image",
        Modality::Text => "text",
    };
    let rows = (0..store.len()).map(|i| store.row(i).iter().map(|&v| f64::from(v)).collect()).collect();
    Ok((modality.into(), rows, store.identities.clone()))
}

/// Finite-difference check of every loss and encoder composition.
#[pyfunction]
#[pyo3(signature = (seed=0, instances=checks::DEFAULT_INSTANCES))]
fn gradcheck<'py>(py: Python<'py>, seed: u64, instances: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let results = py
        .detach(|| checks::run_suite(&SuiteConfig { seed, instances, fault: None }))
        .map_err(to_py)?;
    results
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("name", &r.name)?;
            d.set_item("instances", r.instances)?;
            d.set_item("coordinates", r.coordinates)?;
            d.set_item("max_rel_error", r.max_rel_error)?;
            d.set_item("passed", r.passed)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn cmmoco_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(config_text, m)?)?;
    m.add_function(wrap_pyfunction!(config_keys, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(save_features, m)?)?;
    m.add_function(wrap_pyfunction!(load_features, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
