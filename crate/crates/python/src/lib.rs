//! Python bindings for the readapt toolkit: checkpoints, adapter arithmetic,
//! the toy encoder and its trainers, synthetic domains, and retrieval
//! evaluation. The module mirrors the Rust API with plain Python types
//! (lists, dicts, tuples) at the boundary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use readapt_core::arith;
use readapt_core::checkpoint;
use readapt_core::error::Error;
use readapt_core::eval;
use readapt_core::harness;
use readapt_core::model;
use readapt_core::model::tokenizer;
use readapt_core::synth;
use readapt_core::train;
use readapt_core::Tensor;

fn to_py_err(e: Error) -> PyErr {
    let msg = format!("[{}] {e}", e.kind());
    match e {
        Error::Io { .. } | Error::MissingFile(_) => PyIOError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

trait OrPyErr<T> {
    fn or_py(self) -> PyResult<T>;
}

impl<T> OrPyErr<T> for readapt_core::Result<T> {
    fn or_py(self) -> PyResult<T> {
        self.map_err(to_py_err)
    }
}

/// Named-tensor checkpoint bound to the on-disk container format.
#[pyclass(name = "Checkpoint", skip_from_py_object)]
#[derive(Clone)]
struct PyCheckpoint {
    inner: checkpoint::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[new]
    fn new() -> Self {
        PyCheckpoint {
            inner: checkpoint::Checkpoint::new(),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCheckpoint {
            inner: checkpoint::load_checkpoint(&path).or_py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_checkpoint(&self.inner, &path).or_py()
    }

    fn names(&self) -> Vec<String> {
        self.inner.names().map(str::to_string).collect()
    }

    fn tensor(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let t = self
            .inner
            .get(name)
            .ok_or_else(|| PyValueError::new_err(format!("no tensor named {name:?}")))?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    fn set_tensor(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> PyResult<()> {
        let tensor = Tensor::new(shape, data).or_py()?;
        self.inner.insert(name, tensor).or_py()
    }

    fn metadata(&self) -> BTreeMap<String, String> {
        self.inner.metadata().clone()
    }

    fn set_metadata(&mut self, key: String, value: String) {
        self.inner.set_metadata(key, value);
    }

    fn canonical_hash(&self) -> PyResult<String> {
        self.inner.canonical_hash().or_py()
    }

    fn bit_eq(&self, other: &PyCheckpoint) -> bool {
        self.inner.bit_eq(&other.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Checkpoint({} tensors)", self.inner.len())
    }
}

impl PyCheckpoint {
    fn params(&self) -> PyResult<model::ModelParams> {
        model::ModelParams::from_checkpoint(self.inner.clone()).or_py()
    }
}

/// Dense per-tensor delta set.
#[pyclass(name = "ReAdapter", skip_from_py_object)]
#[derive(Clone)]
struct PyReAdapter {
    inner: arith::ReAdapter,
}

#[pymethods]
impl PyReAdapter {
    fn names(&self) -> Vec<String> {
        self.inner.names().map(str::to_string).collect()
    }

    fn delta(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let t = self
            .inner
            .get(name)
            .ok_or_else(|| PyValueError::new_err(format!("no delta named {name:?}")))?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    fn source(&self) -> &'static str {
        match self.inner.source() {
            arith::AdapterSource::ReverseEngineered => "reverse_engineered",
            arith::AdapterSource::Knowledge => "knowledge",
        }
    }

    fn metadata(&self) -> BTreeMap<String, String> {
        self.inner.metadata().clone()
    }

    fn to_checkpoint(&self) -> PyResult<PyCheckpoint> {
        Ok(PyCheckpoint {
            inner: self.inner.to_checkpoint().or_py()?,
        })
    }

    #[staticmethod]
    fn from_checkpoint(ckpt: &PyCheckpoint) -> PyResult<Self> {
        Ok(PyReAdapter {
            inner: arith::ReAdapter::from_checkpoint(&ckpt.inner).or_py()?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Trained DoRA factors per target tensor.
#[pyclass(name = "LowRankAdapter", skip_from_py_object)]
#[derive(Clone)]
struct PyLowRankAdapter {
    inner: arith::LowRankAdapter,
}

#[pymethods]
impl PyLowRankAdapter {
    fn rank(&self) -> usize {
        self.inner.rank()
    }

    fn alpha_dora(&self) -> f32 {
        self.inner.alpha_dora()
    }

    fn targets(&self) -> Vec<String> {
        self.inner.targets().map(|(n, _)| n.to_string()).collect()
    }

    fn to_checkpoint(&self) -> PyResult<PyCheckpoint> {
        Ok(PyCheckpoint {
            inner: self.inner.to_checkpoint().or_py()?,
        })
    }

    #[staticmethod]
    fn from_checkpoint(ckpt: &PyCheckpoint) -> PyResult<Self> {
        Ok(PyLowRankAdapter {
            inner: arith::LowRankAdapter::from_checkpoint(&ckpt.inner).or_py()?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "EncoderConfig", skip_from_py_object)]
#[derive(Clone)]
struct PyEncoderConfig {
    inner: model::EncoderConfig,
}

#[pymethods]
impl PyEncoderConfig {
    #[new]
    #[pyo3(signature = (vocab_size=256, d_model=16, n_layers=1, n_heads=2, d_ff=32, max_len=32, pooling="mean", seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        d_ff: usize,
        max_len: usize,
        pooling: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let pooling = match pooling {
            "mean" => model::Pooling::Mean,
            "last_token" => model::Pooling::LastToken,
            other => {
                return Err(PyValueError::new_err(format!(
                    "pooling must be \"mean\" or \"last_token\", got {other:?}"
                )))
            }
        };
        let inner = model::EncoderConfig {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            d_ff,
            max_len,
            pooling,
            seed,
        };
        inner.validate().or_py()?;
        Ok(PyEncoderConfig { inner })
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(name = "TrainConfig", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: train::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (batch_size=8, lr=2e-3, epochs=1, max_len=64, schedule="linear_decay", seed=0, infonce_temperature=0.05, max_steps=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        batch_size: usize,
        lr: f32,
        epochs: usize,
        max_len: usize,
        schedule: &str,
        seed: u64,
        infonce_temperature: f32,
        max_steps: Option<usize>,
    ) -> PyResult<Self> {
        let schedule = match schedule {
            "linear_decay" => train::Schedule::LinearDecay,
            "constant" => train::Schedule::Constant,
            other => {
                return Err(PyValueError::new_err(format!(
                    "schedule must be \"linear_decay\" or \"constant\", got {other:?}"
                )))
            }
        };
        let inner = train::TrainConfig {
            batch_size,
            lr,
            epochs,
            max_len,
            schedule,
            optimizer: train::AdamWConfig::default(),
            seed,
            infonce_temperature,
            max_steps,
        };
        inner.validate().or_py()?;
        Ok(PyTrainConfig { inner })
    }

    /// Large-model profile: batch 4, lr 2e-4, one epoch, max length 1024.
    #[staticmethod]
    fn paper_profile() -> Self {
        PyTrainConfig {
            inner: train::TrainConfig::paper_profile(),
        }
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(name = "DoraTrainConfig", skip_from_py_object)]
#[derive(Clone)]
struct PyDoraTrainConfig {
    inner: train::DoraTrainConfig,
}

#[pymethods]
impl PyDoraTrainConfig {
    #[new]
    #[pyo3(signature = (rank=4, alpha_dora=8.0, dropout_p=0.0, target_patterns=None))]
    fn new(
        rank: usize,
        alpha_dora: f32,
        dropout_p: f32,
        target_patterns: Option<Vec<String>>,
    ) -> Self {
        let mut inner = train::DoraTrainConfig {
            rank,
            alpha_dora,
            dropout_p,
            ..train::DoraTrainConfig::default()
        };
        if let Some(patterns) = target_patterns {
            inner.target_patterns = patterns;
        }
        PyDoraTrainConfig { inner }
    }

    /// Large-model profile: rank 32, alpha 64, dropout 0.05.
    #[staticmethod]
    fn paper_profile() -> Self {
        PyDoraTrainConfig {
            inner: train::DoraTrainConfig::paper_profile(),
        }
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// Corpus, queries, and graded relevance judgments.
#[pyclass(name = "RetrievalDataset", skip_from_py_object)]
#[derive(Clone)]
struct PyRetrievalDataset {
    inner: eval::RetrievalDataset,
}

#[pymethods]
impl PyRetrievalDataset {
    fn corpus(&self) -> BTreeMap<String, String> {
        self.inner.corpus.clone()
    }

    fn queries(&self) -> BTreeMap<String, String> {
        self.inner.queries.clone()
    }

    fn qrels(&self) -> BTreeMap<String, BTreeMap<String, u32>> {
        self.inner.qrels.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "RetrievalDataset({} docs, {} queries, {} judged)",
            self.inner.corpus.len(),
            self.inner.queries.len(),
            self.inner.qrels.len()
        )
    }
}

/// Unit-norm document embeddings over a fixed doc-id order.
#[pyclass(name = "DenseIndex")]
struct PyDenseIndex {
    inner: eval::DenseIndex,
}

#[pymethods]
impl PyDenseIndex {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint().to_string()
    }
}

#[pyfunction]
fn init_params(config: &PyEncoderConfig) -> PyResult<PyCheckpoint> {
    Ok(PyCheckpoint {
        inner: model::init_params(&config.inner).or_py()?.into_checkpoint(),
    })
}

#[pyfunction]
#[pyo3(signature = (text, vocab_size, max_len, lm=false))]
fn encode(text: &str, vocab_size: usize, max_len: usize, lm: bool) -> Vec<usize> {
    if lm {
        tokenizer::encode_lm(text, vocab_size, max_len)
    } else {
        tokenizer::encode(text, vocab_size, max_len)
    }
}

#[pyfunction]
fn forward_lm(ckpt: &PyCheckpoint, tokens: Vec<usize>) -> PyResult<Vec<Vec<f32>>> {
    let params = ckpt.params()?;
    let logits = model::forward_lm(&params, &tokens).or_py()?;
    let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
    Ok((0..rows)
        .map(|i| logits.data()[i * cols..(i + 1) * cols].to_vec())
        .collect())
}

#[pyfunction]
fn embed(ckpt: &PyCheckpoint, tokens: Vec<usize>) -> PyResult<Vec<f32>> {
    model::embed(&ckpt.params()?, &tokens).or_py()
}

fn log_to_py(log: &[train::StepRecord]) -> Vec<BTreeMap<String, f64>> {
    log.iter()
        .map(|r| {
            BTreeMap::from([
                ("step".to_string(), r.step as f64),
                ("loss".to_string(), r.loss),
                ("lr".to_string(), r.lr),
            ])
        })
        .collect()
}

#[pyfunction]
fn pretrain_lm(
    config: &PyEncoderConfig,
    corpus: Vec<String>,
    train_config: &PyTrainConfig,
) -> PyResult<(PyCheckpoint, Vec<BTreeMap<String, f64>>)> {
    let outcome = train::pretrain_lm(&config.inner, &corpus, &train_config.inner).or_py()?;
    Ok((
        PyCheckpoint {
            inner: outcome.params.into_checkpoint(),
        },
        log_to_py(&outcome.log),
    ))
}

#[pyfunction]
fn train_retriever(
    pretrained: &PyCheckpoint,
    pairs: Vec<(String, String)>,
    train_config: &PyTrainConfig,
) -> PyResult<(PyCheckpoint, Vec<BTreeMap<String, f64>>)> {
    let outcome =
        train::train_retriever(&pretrained.params()?, &pairs, &train_config.inner).or_py()?;
    Ok((
        PyCheckpoint {
            inner: outcome.params.into_checkpoint(),
        },
        log_to_py(&outcome.log),
    ))
}

#[pyfunction]
fn train_knowledge_adapter(
    pretrained: &PyCheckpoint,
    corpus: Vec<String>,
    dora: &PyDoraTrainConfig,
    train_config: &PyTrainConfig,
) -> PyResult<(PyLowRankAdapter, Vec<BTreeMap<String, f64>>)> {
    let outcome = train::train_knowledge_adapter(
        &pretrained.params()?,
        &corpus,
        &dora.inner,
        &train_config.inner,
    )
    .or_py()?;
    Ok((
        PyLowRankAdapter {
            inner: outcome.adapter,
        },
        log_to_py(&outcome.log),
    ))
}

#[pyfunction]
fn extract_readapter(fine_tuned: &PyCheckpoint, pretrained: &PyCheckpoint) -> PyResult<PyReAdapter> {
    Ok(PyReAdapter {
        inner: arith::extract_readapter(&fine_tuned.inner, &pretrained.inner).or_py()?,
    })
}

#[pyfunction]
fn merge_dora(base: &PyCheckpoint, adapter: &PyLowRankAdapter) -> PyResult<PyCheckpoint> {
    Ok(PyCheckpoint {
        inner: arith::merge_dora(&base.inner, &adapter.inner).or_py()?,
    })
}

#[pyfunction]
fn to_dense_delta(base: &PyCheckpoint, adapter: &PyLowRankAdapter) -> PyResult<PyReAdapter> {
    Ok(PyReAdapter {
        inner: arith::to_dense_delta(&base.inner, &adapter.inner).or_py()?,
    })
}

#[pyfunction]
#[pyo3(signature = (pretrained, knowledge, readapter, alpha=0.5, beta=1.0))]
fn readapt(
    pretrained: &PyCheckpoint,
    knowledge: &PyReAdapter,
    readapter: &PyReAdapter,
    alpha: f32,
    beta: f32,
) -> PyResult<PyCheckpoint> {
    let scalars = arith::PartialAdaptation::new(alpha, beta).or_py()?;
    Ok(PyCheckpoint {
        inner: arith::readapt(&pretrained.inner, &knowledge.inner, &readapter.inner, scalars)
            .or_py()?,
    })
}

#[pyfunction]
fn drop_head(adapter: &PyReAdapter, patterns: Vec<String>) -> PyResult<PyReAdapter> {
    Ok(PyReAdapter {
        inner: arith::drop_head(&adapter.inner, &patterns).or_py()?,
    })
}

#[pyfunction]
fn filter_keys(ckpt: &PyCheckpoint, patterns: Vec<String>, mode: &str) -> PyResult<PyCheckpoint> {
    let mode = match mode {
        "keep" => checkpoint::FilterMode::Keep,
        "drop" => checkpoint::FilterMode::Drop,
        other => {
            return Err(PyValueError::new_err(format!(
                "mode must be \"keep\" or \"drop\", got {other:?}"
            )))
        }
    };
    Ok(PyCheckpoint {
        inner: checkpoint::filter_keys(&ckpt.inner, &patterns, mode).or_py()?,
    })
}

#[pyfunction]
fn align_keys(py: Python<'_>, a: &PyCheckpoint, b: &PyCheckpoint) -> PyResult<Py<PyDict>> {
    let alignment = checkpoint::align_keys(&a.inner, &b.inner);
    let dict = PyDict::new(py);
    dict.set_item("shared", alignment.shared)?;
    dict.set_item("only_a", alignment.only_a)?;
    dict.set_item("only_b", alignment.only_b)?;
    dict.set_item("shape_mismatch", alignment.shape_mismatch)?;
    Ok(dict.into())
}

#[pyfunction]
#[pyo3(signature = (out_dir, seed=0, domain="alpha", n_topics=6, lexicon_size=10, n_docs=90,
                    doc_len=(8, 14), n_queries=45, query_len=(3, 5), noise_rate=0.1,
                    shared_vocab_size=80))]
#[allow(clippy::too_many_arguments)]
fn gen_synthetic(
    out_dir: PathBuf,
    seed: u64,
    domain: &str,
    n_topics: usize,
    lexicon_size: usize,
    n_docs: usize,
    doc_len: (usize, usize),
    n_queries: usize,
    query_len: (usize, usize),
    noise_rate: f32,
    shared_vocab_size: usize,
) -> PyResult<PyRetrievalDataset> {
    let spec = synth::SyntheticDomainSpec {
        seed,
        domain: domain.to_string(),
        n_topics,
        lexicon_size,
        n_docs,
        doc_len,
        n_queries,
        query_len,
        noise_rate,
        shared_vocab_size,
    };
    Ok(PyRetrievalDataset {
        inner: synth::gen_synthetic(&spec, &out_dir).or_py()?,
    })
}

#[pyfunction]
fn load_beir_dataset(dir: PathBuf) -> PyResult<PyRetrievalDataset> {
    Ok(PyRetrievalDataset {
        inner: eval::load_beir_dataset(&dir).or_py()?,
    })
}

#[pyfunction]
fn build_index(ckpt: &PyCheckpoint, corpus: BTreeMap<String, String>) -> PyResult<PyDenseIndex> {
    Ok(PyDenseIndex {
        inner: eval::build_index(&ckpt.params()?, &corpus).or_py()?,
    })
}

#[pyfunction]
fn search(index: &PyDenseIndex, query: Vec<f32>, k: usize) -> PyResult<Vec<(String, f32)>> {
    Ok(eval::search(&index.inner, &query, k)
        .or_py()?
        .into_iter()
        .map(|h| (h.doc_id, h.score))
        .collect())
}

#[pyfunction]
fn ndcg_at_k(ranked: Vec<String>, judgments: BTreeMap<String, u32>, k: usize) -> f64 {
    eval::ndcg_at_k(&ranked, &judgments, k)
}

#[pyfunction]
fn recall_at_k(ranked: Vec<String>, judgments: BTreeMap<String, u32>, k: usize) -> f64 {
    eval::recall_at_k(&ranked, &judgments, k)
}

#[pyfunction]
fn mrr_at_k(ranked: Vec<String>, judgments: BTreeMap<String, u32>, k: usize) -> f64 {
    eval::mrr_at_k(&ranked, &judgments, k)
}

#[pyfunction]
#[pyo3(signature = (ckpt, dataset, k_list=vec![10]))]
fn evaluate(
    py: Python<'_>,
    ckpt: &PyCheckpoint,
    dataset: &PyRetrievalDataset,
    k_list: Vec<usize>,
) -> PyResult<Py<PyDict>> {
    let report = eval::evaluate(&ckpt.params()?, &dataset.inner, &k_list).or_py()?;
    let out = PyDict::new(py);
    out.set_item("metrics", report.metrics.clone())?;
    let per_query = PyDict::new(py);
    for (qid, result) in &report.per_query {
        let entry = PyDict::new(py);
        let ranking = PyList::new(
            py,
            result
                .ranking
                .iter()
                .map(|h| (h.doc_id.clone(), h.score))
                .collect::<Vec<_>>(),
        )?;
        entry.set_item("ranking", ranking)?;
        entry.set_item("metrics", result.metrics.clone())?;
        per_query.set_item(qid, entry)?;
    }
    out.set_item("per_query", per_query)?;
    Ok(out.into())
}

/// The full recomposition flow used by the CLI `readapt` subcommand:
/// extract the retriever delta, densify the adapter, drop head weights from
/// both, recompose at the given scalars.
#[pyfunction]
#[pyo3(signature = (pretrained, retriever, adapter, alpha=0.5, beta=1.0, head_patterns=None))]
fn readapt_retriever(
    pretrained: &PyCheckpoint,
    retriever: &PyCheckpoint,
    adapter: &PyLowRankAdapter,
    alpha: f32,
    beta: f32,
    head_patterns: Option<Vec<String>>,
) -> PyResult<PyCheckpoint> {
    let patterns =
        head_patterns.unwrap_or_else(|| vec![harness::HEAD_PATTERN.to_string()]);
    let knowledge = arith::to_dense_delta(&pretrained.inner, &adapter.inner).or_py()?;
    let scalars = arith::PartialAdaptation::new(alpha, beta).or_py()?;
    let composed = harness::readapt_params(
        &pretrained.params()?,
        &retriever.params()?,
        &knowledge,
        scalars,
        &patterns,
    )
    .or_py()?;
    Ok(PyCheckpoint {
        inner: composed.into_checkpoint(),
    })
}

#[pyfunction]
fn fit_size_correlation(points: Vec<(f64, f64)>) -> PyResult<(f64, f64)> {
    let fit = harness::fit_size_correlation(&points).or_py()?;
    Ok((fit.slope, fit.intercept))
}

#[pyfunction]
fn run_manifest(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyDict>> {
    let manifest = harness::ExperimentManifest::load(Path::new(&path)).or_py()?;
    let summary = harness::run_manifest(&manifest).or_py()?;
    let out = PyDict::new(py);
    out.set_item(
        "outputs",
        summary
            .outputs
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>(),
    )?;
    out.set_item("metrics", summary.metrics)?;
    Ok(out.into())
}

#[pymodule]
fn readapt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyReAdapter>()?;
    m.add_class::<PyLowRankAdapter>()?;
    m.add_class::<PyEncoderConfig>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyDoraTrainConfig>()?;
    m.add_class::<PyRetrievalDataset>()?;
    m.add_class::<PyDenseIndex>()?;
    m.add_function(wrap_pyfunction!(init_params, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(forward_lm, m)?)?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain_lm, m)?)?;
    m.add_function(wrap_pyfunction!(train_retriever, m)?)?;
    m.add_function(wrap_pyfunction!(train_knowledge_adapter, m)?)?;
    m.add_function(wrap_pyfunction!(extract_readapter, m)?)?;
    m.add_function(wrap_pyfunction!(merge_dora, m)?)?;
    m.add_function(wrap_pyfunction!(to_dense_delta, m)?)?;
    m.add_function(wrap_pyfunction!(readapt, m)?)?;
    m.add_function(wrap_pyfunction!(readapt_retriever, m)?)?;
    m.add_function(wrap_pyfunction!(drop_head, m)?)?;
    m.add_function(wrap_pyfunction!(filter_keys, m)?)?;
    m.add_function(wrap_pyfunction!(align_keys, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(load_beir_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(build_index, m)?)?;
    m.add_function(wrap_pyfunction!(search, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(mrr_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(fit_size_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(run_manifest, m)?)?;
    Ok(())
}
