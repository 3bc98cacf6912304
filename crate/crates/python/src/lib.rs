//! Python bindings: schedules, tokenisation, checkpoints and the three
//! training stages.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use ulmfit::engine::{self, EngineError, ModelKind, RunMetrics, Stage, StageConfig};
use ulmfit::finetune::{self, LayerGroups, DISCR_DECAY};
use ulmfit::synth;
use ulmfit::tensor::ParamId;
use ulmfit::text::{self, LabeledDoc, TokenizeMode};

fn py_err(e: EngineError) -> PyErr {
    match e {
        EngineError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn stage_config(stage: Stage, config: Option<&str>) -> PyResult<StageConfig> {
    let overrides: serde_json::Value = match config {
        Some(s) => serde_json::from_str(s).map_err(value_err)?,
        None => serde_json::json!({}),
    };
    StageConfig::from_json(stage, &overrides).map_err(py_err)
}

fn docs(pairs: Vec<(String, String)>) -> Vec<LabeledDoc> {
    pairs.into_iter().map(|(label, text)| LabeledDoc { label, text }).collect()
}

/// Slanted triangular learning rates over `total` iterations.
#[pyclass(name = "StlrSchedule", frozen)]
struct PyStlr(finetune::StlrSchedule);

#[pymethods]
impl PyStlr {
    #[new]
    #[pyo3(signature = (total, cut_frac=0.1, ratio=32.0, eta_max=0.01))]
    fn new(total: usize, cut_frac: f64, ratio: f64, eta_max: f64) -> PyResult<Self> {
        finetune::StlrSchedule::new(total, cut_frac, ratio, eta_max).map(Self).map_err(value_err)
    }

    fn lr(&self, t: usize) -> PyResult<f64> {
        self.0.lr(t).map_err(value_err)
    }

    /// Learning rates for `t = 0..=total`.
    fn curve(&self) -> PyResult<Vec<f64>> {
        (0..=self.0.total).map(|t| self.lr(t)).collect()
    }

    #[getter]
    fn cut(&self) -> usize {
        self.0.cut()
    }

    fn __repr__(&self) -> String {
        let s = &self.0;
        format!(
            "StlrSchedule(total={}, cut_frac={}, ratio={}, eta_max={})",
            s.total, s.cut_frac, s.ratio, s.eta_max
        )
    }
}

/// Learning rate of each layer group, bottom first, with the top group at `eta_last`.
#[pyfunction]
#[pyo3(signature = (eta_last, n_groups, decay=DISCR_DECAY))]
fn discriminative_lrs(eta_last: f64, n_groups: usize, decay: f64) -> PyResult<Vec<f64>> {
    let groups = LayerGroups::new((0..n_groups).map(|i| vec![ParamId(i)]).collect(), eta_last).map_err(value_err)?;
    Ok(finetune::assign_discriminative_lrs(groups, eta_last, decay)
        .map_err(value_err)?
        .lrs()
        .to_vec())
}

#[pyfunction]
#[pyo3(signature = (text, mode="word"))]
fn tokenize(text: &str, mode: &str) -> PyResult<Vec<String>> {
    let mode = match mode {
        "word" => TokenizeMode::Word,
        "char" => TokenizeMode::Char,
        other => return Err(PyValueError::new_err(format!("unknown mode {other:?} (expected word or char)"))),
    };
    Ok(text::tokenize(text, mode))
}

#[pyfunction]
fn synth_reviews(n: usize, seed: u64) -> Vec<(String, String)> {
    synth::reviews(n, seed).into_iter().map(|d| (d.label, d.text)).collect()
}

#[pyfunction]
fn general_corpus(chars: usize, seed: u64) -> String {
    synth::general_corpus(chars, seed)
}

#[pyclass(name = "Checkpoint", frozen)]
struct PyCheckpoint(engine::Checkpoint);

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        engine::Checkpoint::load(&path).map(Self).map_err(py_err)
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(py_err)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        engine::Checkpoint::from_bytes(data).map(Self).map_err(py_err)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.0.to_bytes()
    }

    /// "lm" or "classifier".
    #[getter]
    fn kind(&self) -> &'static str {
        match self.0.meta.kind {
            ModelKind::Lm => "lm",
            ModelKind::Classifier => "classifier",
        }
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.0.meta.labels.clone()
    }

    #[getter]
    fn vocab(&self) -> Vec<String> {
        self.0.meta.vocab.clone()
    }

    fn tensor_names(&self) -> Vec<String> {
        self.0.tensors.iter().map(|(n, _)| n.clone()).collect()
    }

    /// `(shape, flat values)` of one tensor.
    fn tensor(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        self.0
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| (t.shape().to_vec(), t.data().to_vec()))
            .ok_or_else(|| PyValueError::new_err(format!("no tensor {name:?}")))
    }

    fn num_params(&self) -> usize {
        self.0.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    fn __repr__(&self) -> String {
        format!(
            "Checkpoint(kind={:?}, vocab={}, labels={:?}, params={})",
            self.kind(),
            self.0.meta.vocab.len(),
            self.0.meta.labels,
            self.num_params()
        )
    }
}

type Trained = (PyCheckpoint, String);

fn trained(r: Result<(engine::Checkpoint, RunMetrics), EngineError>) -> PyResult<Trained> {
    let (ckpt, metrics) = r.map_err(py_err)?;
    Ok((PyCheckpoint(ckpt), metrics.to_csv()))
}

/// Returns the checkpoint and the metrics CSV. `config` is a JSON object of
/// stage-config fields.
#[pyfunction]
#[pyo3(signature = (corpus, config=None))]
fn pretrain(py: Python<'_>, corpus: &str, config: Option<&str>) -> PyResult<Trained> {
    let cfg = stage_config(Stage::Pretrain, config)?;
    trained(py.detach(|| engine::run_pretrain(&cfg, corpus)))
}

#[pyfunction]
#[pyo3(signature = (lm, text, config=None))]
fn finetune_lm(py: Python<'_>, lm: &PyCheckpoint, text: &str, config: Option<&str>) -> PyResult<Trained> {
    let cfg = stage_config(Stage::LmFinetune, config)?;
    trained(py.detach(|| engine::run_lm_finetune(&cfg, &lm.0, text)))
}

/// `train` and `val` are lists of `(label, text)` pairs.
#[pyfunction]
#[pyo3(signature = (lm, train, val, config=None))]
fn finetune_clf(
    py: Python<'_>,
    lm: &PyCheckpoint,
    train: Vec<(String, String)>,
    val: Vec<(String, String)>,
    config: Option<&str>,
) -> PyResult<Trained> {
    let cfg = stage_config(Stage::ClfFinetune, config)?;
    let (train, val) = (docs(train), docs(val));
    trained(py.detach(|| engine::run_clf_finetune(&cfg, &lm.0, &train, &val)))
}

/// Error rate and mean negative log-likelihood, optionally ensembling
/// with a second classifier.
#[pyfunction]
#[pyo3(signature = (model, data, ensemble_with=None, batch_size=32, chunk_len=50))]
fn evaluate<'py>(
    py: Python<'py>,
    model: &PyCheckpoint,
    data: Vec<(String, String)>,
    ensemble_with: Option<&PyCheckpoint>,
    batch_size: usize,
    chunk_len: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let data = docs(data);
    let row = py
        .detach(|| engine::evaluate(&model.0, &data, ensemble_with.map(|c| &c.0), batch_size, chunk_len))
        .map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("error", row.val_error)?;
    out.set_item("loss", row.val_loss)?;
    Ok(out)
}

#[pymodule]
fn ulmfit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyStlr>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(discriminative_lrs, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(synth_reviews, m)?)?;
    m.add_function(wrap_pyfunction!(general_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune_lm, m)?)?;
    m.add_function(wrap_pyfunction!(finetune_clf, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
