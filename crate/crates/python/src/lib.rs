//! Python bindings: configs, corpora, models, LAKN sets and the operations
//! that connect them. Reports cross the boundary as plain dicts.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use lakn::corpus::{generate_synthetic, load_jsonl, to_jsonl, CorpusSpec, JsonlOptions, QuerySet};
use lakn::experiment::{self, ExperimentConfig, ManipulationKind};
use lakn::intervention;
use lakn::model::{accuracy, NeuronId, ToyTransformer};
use lakn::uncertainty::LaknSet;
use lakn::LaknError;

/// Planted neurons per fact as `(layer, index)` pairs.
type GroundTruth = BTreeMap<String, Vec<(usize, usize)>>;

fn err(e: LaknError) -> PyErr {
    match e {
        LaknError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(format!("{}: {e}", e.kind())),
    }
}

/// Serializable value as Python objects, through the json module.
fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "Config", module = "lakn_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        PyConfig {
            inner: ExperimentConfig::default(),
        }
    }

    #[staticmethod]
    fn planted_fixture() -> Self {
        PyConfig {
            inner: ExperimentConfig::planted_fixture(),
        }
    }

    #[staticmethod]
    fn trained_fixture() -> Self {
        PyConfig {
            inner: ExperimentConfig::trained_fixture(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: ExperimentConfig::from_json(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: ExperimentConfig::load(path).map_err(err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.uncertainty.tau
    }

    #[setter]
    fn set_tau(&mut self, tau: f64) {
        self.inner.uncertainty.tau = tau;
    }

    #[getter]
    fn n_facts(&self) -> Option<usize> {
        self.inner.n_facts
    }

    #[setter]
    fn set_n_facts(&mut self, n: Option<usize>) {
        self.inner.n_facts = n;
    }

    /// Facts localized by default: the configured targets of `corpus`.
    fn target_facts(&self, corpus: &PyCorpus) -> PyResult<Vec<String>> {
        self.inner.target_facts(&corpus.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, tau={})", self.inner.seed, self.inner.uncertainty.tau)
    }
}

#[pyclass(name = "Corpus", module = "lakn_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyCorpus {
    inner: QuerySet,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    #[pyo3(signature = (n_facts, n_languages, n_paraphrases, seed = 0))]
    fn synthetic(n_facts: usize, n_languages: usize, n_paraphrases: usize, seed: u64) -> PyResult<Self> {
        let spec = CorpusSpec::new(n_facts, n_languages, n_paraphrases).with_seed(seed);
        Ok(PyCorpus {
            inner: generate_synthetic(&spec).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, multi_token = false))]
    fn from_jsonl(path: &str, multi_token: bool) -> PyResult<Self> {
        Ok(PyCorpus {
            inner: load_jsonl(path, JsonlOptions { multi_token }).map_err(err)?,
        })
    }

    /// The corpus a config describes.
    #[staticmethod]
    fn from_config(cfg: &PyConfig) -> PyResult<Self> {
        Ok(PyCorpus {
            inner: cfg.inner.corpus.load().map_err(err)?,
        })
    }

    fn to_jsonl(&self) -> String {
        to_jsonl(&self.inner)
    }

    #[getter]
    fn languages(&self) -> Vec<String> {
        self.inner.languages.clone()
    }

    #[getter]
    fn fact_ids(&self) -> Vec<String> {
        self.inner.fact_ids()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab.len()
    }

    fn __len__(&self) -> usize {
        self.inner.queries.len()
    }

    /// Queries of one fact as dicts with decoded text.
    fn queries<'py>(&self, py: Python<'py>, fact_id: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .queries_of(fact_id)
            .map(|q| {
                let d = PyDict::new(py);
                d.set_item("language", &q.language)?;
                d.set_item("paraphrase_index", q.paraphrase_index)?;
                d.set_item("text", self.inner.vocab.decode(&q.tokens))?;
                d.set_item("answer", self.inner.vocab.token(q.answer))?;
                Ok(d)
            })
            .collect()
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.stats())
    }
}

#[pyclass(name = "Model", module = "lakn_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: ToyTransformer,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: ToyTransformer::load(path).map_err(err)?,
        })
    }

    /// Trains a model as the config describes; returns it with the report.
    #[staticmethod]
    fn train<'py>(py: Python<'py>, cfg: &PyConfig, corpus: &PyCorpus) -> PyResult<(Self, Bound<'py, PyAny>)> {
        let (model, report) = experiment::train_model(&cfg.inner, &corpus.inner).map_err(err)?;
        Ok((PyModel { inner: model }, to_py(py, &report)?))
    }

    /// Builds a model with planted knowledge neurons; returns it with the
    /// planted neurons of every fact as `(layer, index)` pairs.
    #[staticmethod]
    fn plant(cfg: &PyConfig, corpus: &PyCorpus) -> PyResult<(Self, GroundTruth)> {
        let p = experiment::plant_model(&cfg.inner, &corpus.inner).map_err(err)?;
        let truth = p
            .ground_truth
            .into_iter()
            .map(|(f, ns)| (f, ns.iter().map(|n| (n.layer, n.index)).collect()))
            .collect();
        Ok((PyModel { inner: p.model }, truth))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.config.n_layers
    }

    #[getter]
    fn d_ffn(&self) -> usize {
        self.inner.config.d_ffn
    }

    /// Top-1 accuracy over every query of the corpus, in percent.
    fn accuracy(&self, corpus: &PyCorpus) -> PyResult<f64> {
        Ok(100.0 * accuracy(&self.inner, &corpus.inner.queries).map_err(err)?)
    }

    /// Probability of the correct answer for each query of one fact.
    fn answer_probabilities(&self, corpus: &PyCorpus, fact_id: &str) -> PyResult<Vec<f64>> {
        corpus
            .inner
            .queries_of(fact_id)
            .map(|q| self.inner.predict_prob(q, q.answer, &[]).map_err(err))
            .collect()
    }
}

#[pyclass(name = "LaknSet", module = "lakn_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyLaknSet {
    inner: LaknSet,
}

#[pymethods]
impl PyLaknSet {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyLaknSet {
            inner: LaknSet::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn fact_id(&self) -> String {
        self.inner.fact_id.clone()
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.inner.threshold
    }

    /// `(layer, index, score)`, highest score first.
    #[getter]
    fn neurons(&self) -> Vec<(usize, usize, f64)> {
        self.inner.neurons.iter().map(|n| (n.layer, n.index, n.score)).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("LaknSet(fact_id={:?}, size={})", self.inner.fact_id, self.inner.len())
    }
}

fn sets_of(sets: &[PyRef<'_, PyLaknSet>]) -> Vec<LaknSet> {
    sets.iter().map(|s| s.inner.clone()).collect()
}

/// LAKN sets of the given facts, or of the config's targets.
#[pyfunction]
#[pyo3(signature = (cfg, model, corpus, facts = None))]
fn localize(cfg: &PyConfig, model: &PyModel, corpus: &PyCorpus, facts: Option<Vec<String>>) -> PyResult<Vec<PyLaknSet>> {
    let facts = match facts {
        Some(f) => f,
        None => cfg.inner.target_facts(&corpus.inner).map_err(err)?,
    };
    let mut cfg = cfg.inner.clone();
    cfg.lakn_dir = None;
    let sets = experiment::localize(&cfg, &model.inner, &corpus.inner, &facts).map_err(err)?;
    Ok(sets.into_iter().map(|inner| PyLaknSet { inner }).collect())
}

/// Mean recall of planted neurons in the top `k` of each set.
#[pyfunction]
#[pyo3(signature = (sets, ground_truth, k = 5))]
fn recovery(sets: Vec<PyRef<'_, PyLaknSet>>, ground_truth: GroundTruth, k: usize) -> PyResult<f64> {
    let truth: BTreeMap<String, Vec<NeuronId>> = ground_truth
        .into_iter()
        .map(|(f, ns)| (f, ns.into_iter().map(|(l, i)| NeuronId::new(l, i)).collect()))
        .collect();
    Ok(lakn::eval::recovery(&sets_of(&sets), &truth, k).map_err(err)?.mean_recall)
}

/// Random sets matching the sizes of the given sets.
#[pyfunction]
fn random_like(model: &PyModel, sets: Vec<PyRef<'_, PyLaknSet>>, seed: u64) -> Vec<PyLaknSet> {
    experiment::random_like(&model.inner, &sets_of(&sets), seed)
        .into_iter()
        .map(|inner| PyLaknSet { inner })
        .collect()
}

/// Relative probability change per fact when its set is suppressed
/// (`kind="suppress"`) or scaled by `factor` (`kind="enhance"`).
#[pyfunction]
#[pyo3(signature = (model, corpus, sets, kind, factor = 2.0))]
fn manipulate<'py>(
    py: Python<'py>,
    model: &PyModel,
    corpus: &PyCorpus,
    sets: Vec<PyRef<'_, PyLaknSet>>,
    kind: &str,
    factor: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let kind = match kind {
        "suppress" => ManipulationKind::Suppress,
        "enhance" => ManipulationKind::Enhance,
        other => return Err(PyValueError::new_err(format!("unknown manipulation `{other}`"))),
    };
    let deltas = experiment::manipulate_sets(&model.inner, &corpus.inner, &sets_of(&sets), kind, factor).map_err(err)?;
    to_py(py, &deltas)
}

/// Copy of the model with the set's value rows (and keys) zeroed.
#[pyfunction]
#[pyo3(signature = (model, set, keys_too = false))]
fn erase(model: &PyModel, set: &PyLaknSet, keys_too: bool) -> PyResult<PyModel> {
    let mut m = model.inner.clone();
    intervention::erase_weights(&mut m, &set.inner, keys_too).map_err(err)?;
    Ok(PyModel { inner: m })
}

/// Copy of the model with the set's value rows moved from one answer token
/// to another.
#[pyfunction]
fn update(model: &PyModel, set: &PyLaknSet, from_token: usize, to_token: usize, lambda1: f64, lambda2: f64) -> PyResult<PyModel> {
    let mut m = model.inner.clone();
    intervention::update_weights(&mut m, &set.inner, from_token, to_token, lambda1, lambda2).map_err(err)?;
    Ok(PyModel { inner: m })
}

/// Erase or update experiment (as configured) on the given sets.
#[pyfunction]
fn edit_report<'py>(
    py: Python<'py>,
    cfg: &PyConfig,
    model: &PyModel,
    corpus: &PyCorpus,
    sets: Vec<PyRef<'_, PyLaknSet>>,
) -> PyResult<Bound<'py, PyAny>> {
    let r = experiment::edit_sets(&cfg.inner, &model.inner, &corpus.inner, &sets_of(&sets)).map_err(err)?;
    to_py(py, &r)
}

/// LAKN-masked against full fine-tuning on held-out facts.
#[pyfunction]
fn injection_report<'py>(py: Python<'py>, cfg: &PyConfig, model: &PyModel, corpus: &PyCorpus) -> PyResult<Bound<'py, PyAny>> {
    let r = experiment::run_injection(&cfg.inner, &model.inner, &corpus.inner).map_err(err)?;
    to_py(py, &r)
}

#[pymodule]
fn lakn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyLaknSet>()?;
    m.add_function(wrap_pyfunction!(localize, m)?)?;
    m.add_function(wrap_pyfunction!(recovery, m)?)?;
    m.add_function(wrap_pyfunction!(random_like, m)?)?;
    m.add_function(wrap_pyfunction!(manipulate, m)?)?;
    m.add_function(wrap_pyfunction!(erase, m)?)?;
    m.add_function(wrap_pyfunction!(update, m)?)?;
    m.add_function(wrap_pyfunction!(edit_report, m)?)?;
    m.add_function(wrap_pyfunction!(injection_report, m)?)?;
    Ok(())
}
