use std::collections::BTreeMap;
use std::path::PathBuf;

use indirec_core::data::{leave_one_out, load_interactions, prefix_segment, ItemId, Split, SplitDataset};
use indirec_core::evaluation::{evaluate, EvalOptions, MetricsReport};
use indirec_core::intent::fit_kmeans;
use indirec_core::numerics::random::seeded;
use indirec_core::orchestrator::{self as orch, EpochLog, SynthKind, SynthParams};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: indirec_core::Error) -> PyErr {
    use indirec_core::Error as E;
    match e {
        E::Io { .. } => PyIOError::new_err(e.to_string()),
        E::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn metrics(r: &MetricsReport) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for (k, v) in &r.hr {
        m.insert(format!("HR@{k}"), *v);
    }
    for (k, v) in &r.ndcg {
        m.insert(format!("ND@{k}"), *v);
    }
    m.insert("num_users".into(), r.num_users as f64);
    m
}

fn epoch_dict(log: &EpochLog) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::from([
        ("epoch".to_string(), log.epoch as f64),
        ("loss".to_string(), log.loss),
        ("rec".to_string(), log.rec),
        ("valid_ndcg".to_string(), log.valid_ndcg),
    ]);
    if let Some(v) = log.cl {
        m.insert("cl".into(), v);
    }
    if let Some(v) = log.diff {
        m.insert("diff".into(), v);
    }
    m
}

fn parse_split(which: &str) -> PyResult<Split> {
    which.parse().map_err(to_py)
}

/// Training configuration; keyword arguments override defaults by key.
#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: orch::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<BTreeMap<String, Bound<'_, PyAny>>>) -> PyResult<Self> {
        let mut inner = orch::TrainConfig::default();
        for (k, v) in overrides.unwrap_or_default() {
            let text = if let Ok(b) = v.extract::<bool>() { b.to_string() } else { v.str()?.to_string() };
            inner.set(&k, &text).map_err(to_py)?;
        }
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: orch::TrainConfig::load(&path).map_err(to_py)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig(dim={}, gamma={}, lambda={}, seed={})", self.inner.dim, self.inner.gamma, self.inner.lambda, self.inner.seed)
    }
}

/// Leave-one-out split of an interaction dataset.
#[pyclass(name = "Dataset")]
struct PyDataset {
    split: SplitDataset,
    intents: Option<Vec<usize>>,
}

#[pymethods]
impl PyDataset {
    /// Reads a `user item item ...` interaction file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ds = load_interactions(&path).map_err(to_py)?;
        Ok(Self {
            split: leave_one_out(&ds),
            intents: None,
        })
    }

    /// `kind` is `"cyclic"` or `"two-intent"`.
    #[staticmethod]
    #[pyo3(signature = (kind, seed, users=None))]
    fn synthetic(kind: &str, seed: u64, users: Option<usize>) -> PyResult<Self> {
        let kind: SynthKind = kind.parse().map_err(to_py)?;
        let mut params = SynthParams::for_kind(kind);
        if let Some(u) = users {
            params.users = u;
        }
        let s = orch::make_synthetic(kind, params, seed).map_err(to_py)?;
        Ok(Self {
            split: leave_one_out(&s.dataset),
            intents: Some(s.intents),
        })
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.split.num_items
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.split.train.len()
    }

    /// Training sequences (all but the last two items).
    #[getter]
    fn train(&self) -> Vec<Vec<ItemId>> {
        self.split.train.clone()
    }

    /// Ground-truth intents of synthetic users.
    #[getter]
    fn intents(&self) -> Option<Vec<usize>> {
        self.intents.clone()
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: orch::Model,
}

#[pymethods]
impl PyModel {
    /// Loads the parameters of a checkpoint directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: orch::load_model(&path).map_err(to_py)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.config.dim
    }

    /// Last-position representation of each sequence.
    fn represent(&self, seqs: Vec<Vec<ItemId>>) -> PyResult<Vec<Vec<f64>>> {
        self.inner.represent(&seqs).map_err(to_py)
    }

    /// Scores of items `1..=num_items` for each sequence.
    fn score(&self, seqs: Vec<Vec<ItemId>>) -> PyResult<Vec<Vec<f64>>> {
        use indirec_core::evaluation::Scorer;
        let refs: Vec<&[ItemId]> = seqs.iter().map(Vec::as_slice).collect();
        self.inner.score(&refs).map_err(to_py)
    }

    #[pyo3(signature = (data, split="test"))]
    fn evaluate(&self, data: &PyDataset, split: &str) -> PyResult<BTreeMap<String, f64>> {
        let cases = data.split.cases(parse_split(split)?);
        let r = evaluate(&self.inner, cases, &EvalOptions::default()).map_err(to_py)?;
        Ok(metrics(&r))
    }

    /// One generated view (`len x dim` rows) per sequence.
    #[pyo3(signature = (seqs, conditions, omega, seed=0))]
    fn sample_views(&self, seqs: Vec<Vec<ItemId>>, conditions: Vec<Vec<f64>>, omega: f64, seed: u64) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let views = self.inner.sample_views(&seqs, &conditions, omega, &mut seeded(seed)).map_err(to_py)?;
        let d = self.inner.config.dim;
        Ok(views.iter().map(|v| v.values().chunks(d).map(<[f64]>::to_vec).collect()).collect())
    }
}

#[pyclass(name = "Trainer")]
struct PyTrainer {
    inner: orch::Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: &PyTrainConfig, data: &PyDataset) -> PyResult<Self> {
        Ok(Self {
            inner: orch::Trainer::new(&config.inner, &data.split).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn resume(path: PathBuf, data: &PyDataset) -> PyResult<Self> {
        Ok(Self {
            inner: orch::Trainer::resume(&path, &data.split).map_err(to_py)?,
        })
    }

    fn run_epoch(&mut self) -> PyResult<BTreeMap<String, f64>> {
        Ok(epoch_dict(&self.inner.run_epoch().map_err(to_py)?))
    }

    /// Trains until the epoch budget or early stopping ends the run.
    fn fit(&mut self) -> PyResult<Vec<BTreeMap<String, f64>>> {
        self.inner.fit().map_err(to_py)?;
        Ok(self.inner.history().iter().map(epoch_dict).collect())
    }

    #[getter]
    fn finished(&self) -> bool {
        self.inner.finished()
    }

    #[getter]
    fn best_epoch(&self) -> usize {
        self.inner.best_epoch()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn save_best(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_best(&path).map_err(to_py)
    }

    fn best_model(&self) -> PyResult<PyModel> {
        Ok(PyModel {
            inner: self.inner.best_model().map_err(to_py)?,
        })
    }
}

/// K-means over `points`; returns `(prototypes, assignments, objective)`.
#[pyfunction]
#[pyo3(signature = (points, k, seed=0, max_iters=20))]
fn kmeans(points: Vec<Vec<f64>>, k: usize, seed: u64, max_iters: usize) -> PyResult<(Vec<Vec<f64>>, Vec<usize>, f64)> {
    let idx = fit_kmeans(&points, k, max_iters, &mut seeded(seed)).map_err(to_py)?;
    let objective = idx.objective();
    Ok((idx.prototypes, idx.assignments, objective))
}

/// Prefix and sliding-window training subsequences of `seq`.
#[pyfunction]
fn segment(seq: Vec<ItemId>, min_len: usize, max_len: usize) -> PyResult<Vec<Vec<ItemId>>> {
    prefix_segment(&seq, min_len, max_len).map_err(to_py)
}

#[pymodule]
fn indirec(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(segment, m)?)?;
    Ok(())
}
