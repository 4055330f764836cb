//! Python bindings: datasets, Top-K item graphs, evaluation and the
//! cached experiment runner. Matrices cross the boundary as nested lists so
//! any array library can feed them in with `.tolist()`.

use std::path::PathBuf;

use egra_core::dataset::{self, Interaction, InteractionDataset, Split};
use egra_core::evaluator::{self, EvalReport, DEFAULT_KS};
use egra_core::experiment::{run_experiment, ExperimentConfig};
use egra_core::knn_graph;
use egra_core::sparse::SparseAdjacency;
use egra_core::synthetic::{self, SyntheticConfig};
use ndarray::Array2;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(egra, EgraError, PyException);

fn err(e: egra_core::EgraError) -> PyErr {
    EgraError::new_err(format!("{e} (exit code {})", e.exit_code()))
}

fn to_array<T: Copy>(rows: Vec<Vec<T>>) -> PyResult<Array2<T>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn parse_split(name: &str) -> PyResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        _ => Err(PyValueError::new_err(format!("unknown split {name:?}"))),
    }
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (k, v) in &r.recall {
        d.set_item(format!("recall@{k}"), v)?;
    }
    for (k, v) in &r.ndcg {
        d.set_item(format!("ndcg@{k}"), v)?;
    }
    d.set_item("num_users", r.num_users)?;
    Ok(d)
}

/// Users, items and their train/valid/test interactions.
#[pyclass(name = "Dataset", module = "egra", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: InteractionDataset,
}

#[pymethods]
impl PyDataset {
    /// Everything in `pairs` goes to the train split; call `split` next.
    #[staticmethod]
    fn from_interactions(num_users: usize, num_items: usize, pairs: Vec<(usize, usize)>) -> PyResult<Self> {
        let train = pairs.into_iter().map(|(u, i)| Interaction::new(u, i)).collect();
        let inner = InteractionDataset::from_splits(num_users, num_items, train, vec![], vec![]).map_err(err)?;
        Ok(Self { inner })
    }

    /// Reads a whitespace-separated `user item` file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: dataset::load_interactions(&path).map_err(err)? })
    }

    /// Reads a split manifest written by `write_split`.
    #[staticmethod]
    fn read_split(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: InteractionDataset::read_split_manifest(&path).map_err(err)? })
    }

    /// Per-user 8:1:1 split of all interactions.
    fn split(&self, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: dataset::split_8_1_1(&self.inner, seed).map_err(err)? })
    }

    fn write_split(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_split_manifest(&path).map_err(err)
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.inner.num_users
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.inner.num_items
    }

    /// `(user, item)` pairs of one split.
    fn interactions(&self, split: &str) -> PyResult<Vec<(usize, usize)>> {
        Ok(self.inner.split(parse_split(split)?).iter().map(|x| (x.user, x.item)).collect())
    }

    fn item_frequencies(&self) -> Vec<usize> {
        self.inner.item_frequencies()
    }

    /// Popularity group per item, 1 (head) to 5 (tail).
    fn popularity_groups(&self) -> Vec<u8> {
        dataset::assign_longtail_groups(&self.inner).group_of_item
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(users={}, items={}, train={}, valid={}, test={})",
            self.inner.num_users,
            self.inner.num_items,
            self.inner.train.len(),
            self.inner.valid.len(),
            self.inner.test.len()
        )
    }
}

/// Sparse adjacency matrix.
#[pyclass(name = "Graph", module = "egra", skip_from_py_object)]
#[derive(Clone)]
struct PyGraph {
    inner: SparseAdjacency,
}

#[pymethods]
impl PyGraph {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: SparseAdjacency::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.shape()
    }

    #[getter]
    fn nnz(&self) -> usize {
        self.inner.nnz()
    }

    fn get(&self, row: usize, col: usize) -> Option<f32> {
        self.inner.get(row, col)
    }

    fn is_symmetric(&self) -> bool {
        self.inner.is_symmetric()
    }

    /// `D^-1/2 A D^-1/2`.
    fn normalized(&self) -> PyResult<Self> {
        Ok(Self { inner: self.inner.sym_normalize().map_err(err)? })
    }

    fn entries(&self) -> Vec<(usize, usize, f32)> {
        self.inner.entries().collect()
    }

    fn to_dense(&self) -> Vec<Vec<f64>> {
        self.inner.to_dense().outer_iter().map(|r| r.to_vec()).collect()
    }

    fn __repr__(&self) -> String {
        let (r, c) = self.inner.shape();
        format!("Graph(shape=({r}, {c}), nnz={})", self.inner.nnz())
    }
}

/// Symmetric cosine Top-K item graph. Binary unless `weighted`.
#[pyfunction]
#[pyo3(signature = (embeddings, k, weighted = false))]
fn topk_graph(embeddings: Vec<Vec<f32>>, k: usize, weighted: bool) -> PyResult<PyGraph> {
    let e = to_array(embeddings)?;
    let inner = if weighted {
        knn_graph::topk_weighted_graph(e.view(), k)
    } else {
        knn_graph::topk_binary_graph(e.view(), k)
    };
    Ok(PyGraph { inner: inner.map_err(err)? })
}

/// `[[0, R], [R^T, S]]` over users then items, from the train split.
#[pyfunction]
fn enhanced_adjacency(dataset: &PyDataset, item_graph: &PyGraph) -> PyResult<PyGraph> {
    let inner = knn_graph::build_enhanced_adjacency(dataset.inner.r(), &item_graph.inner).map_err(err)?;
    Ok(PyGraph { inner })
}

/// Full-ranking Recall@K / NDCG@K. `embeddings` stacks users then items;
/// train items are excluded from each user's ranking.
#[pyfunction]
#[pyo3(signature = (embeddings, dataset, split = "test", ks = None))]
fn evaluate<'py>(
    py: Python<'py>,
    embeddings: Vec<Vec<f64>>,
    dataset: &PyDataset,
    split: &str,
    ks: Option<Vec<usize>>,
) -> PyResult<Bound<'py, PyDict>> {
    let e = to_array(embeddings)?;
    let ks = ks.unwrap_or_else(|| DEFAULT_KS.to_vec());
    let report = evaluator::evaluate(e.view(), &dataset.inner, parse_split(split)?, &ks).map_err(err)?;
    report_dict(py, &report)
}

/// Test metrics per popularity group, head first; `None` for empty groups.
#[pyfunction]
#[pyo3(signature = (embeddings, dataset, ks = None))]
fn longtail_evaluate<'py>(
    py: Python<'py>,
    embeddings: Vec<Vec<f64>>,
    dataset: &PyDataset,
    ks: Option<Vec<usize>>,
) -> PyResult<Vec<Option<Bound<'py, PyDict>>>> {
    let e = to_array(embeddings)?;
    let ks = ks.unwrap_or_else(|| DEFAULT_KS.to_vec());
    let groups = dataset::assign_longtail_groups(&dataset.inner);
    let reports = evaluator::longtail_evaluate(e.view(), &dataset.inner, &groups, &ks).map_err(err)?;
    reports.iter().map(|r| r.as_ref().map(|r| report_dict(py, r)).transpose()).collect()
}

/// Generates a split synthetic dataset and its item features
/// (`{"visual": rows, "textual": rows}`).
#[pyfunction]
#[pyo3(signature = (seed = 0, num_users = None, num_items = None))]
fn synthetic_data(
    seed: u64,
    num_users: Option<usize>,
    num_items: Option<usize>,
) -> PyResult<(PyDataset, std::collections::BTreeMap<String, Vec<Vec<f32>>>)> {
    let defaults = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        seed,
        num_users: num_users.unwrap_or(defaults.num_users),
        num_items: num_items.unwrap_or(defaults.num_items),
        ..defaults
    };
    let data = synthetic::generate(&cfg).map_err(err)?;
    let features = data
        .features
        .iter()
        .map(|(name, m)| (name.to_string(), m.outer_iter().map(|r| r.to_vec()).collect()))
        .collect();
    Ok((PyDataset { inner: data.dataset }, features))
}

/// An experiment configuration; `run` executes the cached pipeline.
#[pyclass(name = "Experiment", module = "egra", skip_from_py_object)]
#[derive(Clone)]
struct PyExperiment {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyExperiment {
    #[new]
    #[pyo3(signature = (toml = ""))]
    fn new(toml: &str) -> PyResult<Self> {
        Ok(Self { inner: ExperimentConfig::from_toml_str(toml).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ExperimentConfig::load(&path).map_err(err)? })
    }

    /// Sets a dotted key, e.g. `set("train.dim", "32")`. `value` is a TOML literal.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let parsed: toml::Table =
            toml::from_str(&format!("v = {value}")).map_err(|e| PyValueError::new_err(e.to_string()))?;
        self.inner = self.inner.with_override(key, &parsed["v"]).map_err(err)?;
        Ok(())
    }

    #[getter]
    fn label(&self) -> PyResult<String> {
        self.inner.label().map_err(err)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    /// Returns label, test metrics, per-group metrics, best epoch and
    /// validation score, and which stages came from the cache.
    fn run<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let cfg = self.inner.clone();
        let out = py.detach(move || run_experiment(&cfg)).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("label", &out.label)?;
        d.set_item("config_hash", &out.config_hash)?;
        d.set_item("test", report_dict(py, &out.test)?)?;
        let groups: Vec<Option<Bound<'py, PyDict>>> =
            out.longtail.iter().map(|r| r.as_ref().map(|r| report_dict(py, r)).transpose()).collect::<PyResult<_>>()?;
        d.set_item("longtail", groups)?;
        d.set_item("best_epoch", out.best_epoch)?;
        d.set_item("best_valid", out.best_valid)?;
        d.set_item("cache_hits", out.cache_hits)?;
        Ok(d)
    }
}

#[pymodule]
fn egra(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("EgraError", m.py().get_type::<EgraError>())?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(topk_graph, m)?)?;
    m.add_function(wrap_pyfunction!(enhanced_adjacency, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(longtail_evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_data, m)?)?;
    Ok(())
}
