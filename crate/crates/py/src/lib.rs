//! Python bindings for `sentemb`.

use std::collections::HashMap;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use sentemb::bundle::ModelBundle;
use sentemb::eval;
use sentemb::numerics;
use sentemb::optim;
use sentemb::supervised;
use sentemb::synth::{SynthConfig, SynthCorpus};
use sentemb::textdata::{self, PairDataset, ScoredPair, ScoredPairDataset, UnkRule};
use sentemb::{Activation, Architecture, Error, Rng, TrainConfig};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

type Pair = (Vec<String>, Vec<String>);

/// Word vectors with a vocabulary and an unknown-word row.
#[pyclass(name = "EmbeddingTable", module = "sentemb_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTable {
    inner: textdata::EmbeddingTable,
}

#[pymethods]
impl PyTable {
    /// Builds a table from `{token: vector}`; insertion order is kept.
    #[new]
    fn new(rows: Vec<(String, Vec<f64>)>) -> PyResult<Self> {
        Ok(PyTable { inner: textdata::EmbeddingTable::from_rows(rows, UnkRule::Mean).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyTable { inner: textdata::load_embeddings_file(path).map_err(to_py)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        textdata::save_embeddings_file(&self.inner, path, false).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn tokens(&self) -> Vec<String> {
        self.inner.vocab().tokens().to_vec()
    }

    /// Vector for `token`, or the unknown row.
    fn vector(&self, token: &str) -> Vec<f64> {
        self.inner.lookup(token).to_vec()
    }

    fn __repr__(&self) -> String {
        format!("EmbeddingTable(len={}, dim={})", self.inner.len(), self.inner.dim())
    }
}

/// A sentence encoder: average, proj, dan, rnn, irnn or lstm.
#[pyclass(name = "Encoder", module = "sentemb_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyEncoder {
    inner: sentemb::Encoder,
}

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (arch, dim, seed = 1, out_dim = None, layers = 1, activation = "tanh", output_gate = true))]
    fn new(
        arch: &str,
        dim: usize,
        seed: u64,
        out_dim: Option<usize>,
        layers: usize,
        activation: &str,
        output_gate: bool,
    ) -> PyResult<Self> {
        let activation: Activation = activation.parse().map_err(to_py)?;
        let out = out_dim.unwrap_or(dim);
        let arch = match arch {
            "average" => Architecture::Average,
            "proj" => Architecture::Projection { out },
            "dan" => Architecture::Dan { layers, out, activation },
            "rnn" => Architecture::Rnn { activation },
            "irnn" => Architecture::IRnn,
            "lstm" => Architecture::Lstm { output_gate },
            other => return Err(PyValueError::new_err(format!("unknown architecture {other:?}"))),
        };
        let inner = sentemb::Encoder::new(arch, dim, &mut Rng::derive(seed, 0x1f)).map_err(to_py)?;
        Ok(PyEncoder { inner })
    }

    #[getter]
    fn arch(&self) -> &'static str {
        self.inner.architecture().name()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn encode(&self, table: &PyTable, tokens: Vec<String>) -> PyResult<Vec<f64>> {
        self.inner.encode(&table.inner, &tokens).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Encoder({:?})", self.inner.architecture())
    }
}

/// Encoder, embeddings and casing rule, persisted as a directory.
#[pyclass(name = "Model", module = "sentemb_py")]
pub struct PyModel {
    inner: ModelBundle,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (encoder, table, lowercase = false))]
    fn new(encoder: &PyEncoder, table: &PyTable, lowercase: bool) -> Self {
        PyModel { inner: ModelBundle::new(encoder.inner.clone(), table.inner.clone(), lowercase) }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel { inner: ModelBundle::load(path).map_err(to_py)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    /// Tokenizes on whitespace and encodes.
    fn encode(&self, text: &str) -> PyResult<Vec<f64>> {
        self.inner.encode_text(text).map_err(to_py)
    }

    #[getter]
    fn encoder(&self) -> PyEncoder {
        PyEncoder { inner: self.inner.encoder.clone() }
    }

    #[getter]
    fn table(&self) -> PyTable {
        PyTable { inner: self.inner.table.clone() }
    }
}

fn config_from(overrides: Option<HashMap<String, String>>) -> PyResult<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (k, v) in overrides.unwrap_or_default() {
        cfg.set(&k, &v).map_err(to_py)?;
    }
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Trains `encoder` and `table` in place; returns per-epoch mean losses.
/// `config` maps training keys (delta, batch_size, epochs, ...) to strings.
#[pyfunction]
#[pyo3(signature = (encoder, table, pairs, config = None))]
fn train(
    py: Python<'_>,
    encoder: &mut PyEncoder,
    table: &mut PyTable,
    pairs: Vec<Pair>,
    config: Option<HashMap<String, String>>,
) -> PyResult<Vec<f64>> {
    let cfg = config_from(config)?;
    let data = PairDataset { pairs };
    let (enc, tab) = (&mut encoder.inner, &mut table.inner);
    let log = py.detach(|| optim::train(enc, tab, &data, &cfg)).map_err(to_py)?;
    Ok(log.epoch_losses)
}

fn scored(items: Vec<(Vec<String>, Vec<String>, f64)>) -> ScoredPairDataset {
    ScoredPairDataset { items: items.into_iter().map(|(left, right, gold)| ScoredPair { left, right, gold }).collect() }
}

/// Pearson and Spearman of cosine predictions against gold scores.
#[pyfunction]
fn evaluate(encoder: &PyEncoder, table: &PyTable, items: Vec<(Vec<String>, Vec<String>, f64)>) -> PyResult<HashMap<String, f64>> {
    let rep = eval::evaluate(&encoder.inner, &table.inner, &scored(items)).map_err(to_py)?;
    Ok(HashMap::from([
        ("pearson".to_string(), rep.pearson),
        ("spearman".to_string(), rep.spearman),
        ("n".to_string(), rep.n as f64),
    ]))
}

#[pyfunction]
fn cosine(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    numerics::cosine(&u, &v).map_err(to_py)
}

#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    numerics::pearson(&x, &y).map_err(to_py)
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    numerics::spearman(&x, &y).map_err(to_py)
}

#[pyfunction]
fn target_distribution(y: f64, k: usize) -> PyResult<Vec<f64>> {
    supervised::target_distribution(y, k).map_err(to_py)
}

/// L1 norm of every row, in vocabulary order.
#[pyfunction]
fn word_importance(table: &PyTable) -> Vec<(String, f64)> {
    eval::word_importance(&table.inner)
}

/// Nearest tokens by cosine among the `restrict` most frequent ones.
/// Without `counts`, table order stands in for frequency order.
#[pyfunction]
#[pyo3(signature = (table, token, k = 10, restrict = None, counts = None))]
fn nearest_neighbors(
    table: &PyTable,
    token: &str,
    k: usize,
    restrict: Option<usize>,
    counts: Option<HashMap<String, u64>>,
) -> PyResult<Vec<(String, f64)>> {
    let t = &table.inner;
    let counts = counts.unwrap_or_else(|| {
        let n = t.len() as u64;
        t.vocab().tokens().iter().enumerate().map(|(i, s)| (s.clone(), n - i as u64)).collect()
    });
    eval::nearest_neighbors(t, token, k, restrict.unwrap_or(t.len()).min(t.len()), &counts).map_err(to_py)
}

/// A generated topic corpus: `(table, train_pairs, scored_eval)`.
#[pyfunction]
#[pyo3(signature = (seed = 2016, pairs = 200, filler = None))]
fn synthetic_corpus(
    seed: u64,
    pairs: usize,
    filler: Option<String>,
) -> (PyTable, Vec<Pair>, Vec<(Vec<String>, Vec<String>, f64)>) {
    let c = SynthCorpus::generate(&SynthConfig { seed, pairs, filler, ..SynthConfig::default() });
    let eval = c.eval.items.into_iter().map(|s| (s.left, s.right, s.gold)).collect();
    (PyTable { inner: c.table }, c.train.pairs, eval)
}

#[pymodule]
pub fn sentemb_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTable>()?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(target_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(word_importance, m)?)?;
    m.add_function(wrap_pyfunction!(nearest_neighbors, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    Ok(())
}
