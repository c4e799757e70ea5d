//! Python bindings: datasets, the encoder model, attribution, masks,
//! training and metrics. Tensors cross the boundary as nested lists.

use std::collections::BTreeMap;

use addrop::attribution::{attribute as run_attribution, AttributionConfig, LabelMode, Method, PathScaling};
use addrop::autodiff::IGNORE_INDEX;
use addrop::data::{
    gen_classification, gen_regression, gen_tagging, Dataset, Example, Label, Splits, SyntheticSpec, TaskKind,
};
use addrop::masking::{build_masks, DiscardPolicy, DropMode};
use addrop::metrics::{self, MetricKind};
use addrop::model::{Batch, ForwardOptions, Model, ModelConfig};
use addrop::tensor::Tensor;
use addrop::trainer::{cross_tune, evaluate, fine_tune, TrainConfig};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn py_err(e: addrop::Error) -> PyErr {
    match e {
        addrop::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        addrop::Error::Contract(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = addrop::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

fn nested<'py>(py: Python<'py>, shape: &[usize], data: &[f64]) -> PyResult<Bound<'py, PyAny>> {
    if shape.len() <= 1 {
        return Ok(PyList::new(py, data)?.into_any());
    }
    let stride = data.len() / shape[0].max(1);
    let items = data
        .chunks(stride.max(1))
        .map(|c| nested(py, &shape[1..], c))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(PyList::new(py, items)?.into_any())
}

fn tensor_to_py<'py>(py: Python<'py>, t: &Tensor) -> PyResult<Bound<'py, PyAny>> {
    nested(py, t.shape(), t.data())
}

/// An immutable labelled dataset.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn task(&self) -> String {
        self.inner.task.to_string()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Token ids of example `i`; position 0 is the cls token.
    fn tokens(&self, i: usize) -> PyResult<Vec<usize>> {
        self.example(i).map(|e| e.tokens.clone())
    }

    /// Label of example `i`: an int, a float, or a list of tags where -1
    /// marks ignored positions.
    fn label<'py>(&self, py: Python<'py>, i: usize) -> PyResult<Bound<'py, PyAny>> {
        Ok(match &self.example(i)?.label {
            Label::Class(c) => c.into_pyobject(py)?.into_any(),
            Label::Value(v) => v.into_pyobject(py)?.into_any(),
            Label::Tags(t) => {
                let tags: Vec<i64> = t.iter().map(|&x| if x == IGNORE_INDEX { -1 } else { x as i64 }).collect();
                PyList::new(py, tags)?.into_any()
            }
        })
    }

    fn checksum(&self) -> u64 {
        self.inner.checksum()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(task='{}', len={})", self.inner.task, self.inner.len())
    }
}

impl PyDataset {
    fn example(&self, i: usize) -> PyResult<&Example> {
        self.inner
            .examples
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("index {i} outside dataset of {}", self.inner.len())))
    }

    fn batch(&self, indices: &[usize]) -> PyResult<Batch> {
        let refs = indices.iter().map(|&i| self.example(i)).collect::<PyResult<Vec<_>>>()?;
        Batch::from_examples(&refs).map_err(py_err)
    }

    fn all(&self) -> PyResult<Batch> {
        let idx: Vec<usize> = (0..self.inner.len()).collect();
        self.batch(&idx)
    }
}

/// Generated train/dev/test splits.
#[pyclass(name = "Splits", frozen)]
struct PySplits {
    #[pyo3(get)]
    train: Py<PyDataset>,
    #[pyo3(get)]
    dev: Py<PyDataset>,
    #[pyo3(get)]
    test: Py<PyDataset>,
    #[pyo3(get)]
    vocab_size: usize,
    #[pyo3(get)]
    num_classes: usize,
}

/// Synthetic overfit-prone task; keyword arguments override the defaults.
#[pyfunction]
#[pyo3(signature = (task="classify", seed=0, num_train=256, num_dev=512, num_test=512, noise=0.1))]
fn synthetic(
    py: Python<'_>,
    task: &str,
    seed: u64,
    num_train: usize,
    num_dev: usize,
    num_test: usize,
    noise: f64,
) -> PyResult<PySplits> {
    let task: TaskKind = parse(task)?;
    let spec = SyntheticSpec {
        num_train,
        num_dev,
        num_test,
        noise,
        ..SyntheticSpec::overfit_prone(task, seed)
    };
    let splits: Splits = match task {
        TaskKind::Classify => gen_classification(&spec),
        TaskKind::Tag => gen_tagging(&spec),
        TaskKind::Regress => gen_regression(&spec),
    }
    .map_err(py_err)?;
    let wrap = |d: Dataset| Py::new(py, PyDataset { inner: d });
    Ok(PySplits {
        train: wrap(splits.train)?,
        dev: wrap(splits.dev)?,
        test: wrap(splits.test)?,
        vocab_size: splits.vocab_size,
        num_classes: splits.num_classes,
    })
}

/// Post-LN transformer encoder with a classification, regression or
/// tagging head.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (task, vocab_size, num_classes, seed=0, num_layers=2, num_heads=4, hidden_size=64, head_size=16, ffn_size=128, max_len=32, hidden_dropout=0.1))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        task: &str,
        vocab_size: usize,
        num_classes: usize,
        seed: u64,
        num_layers: usize,
        num_heads: usize,
        hidden_size: usize,
        head_size: usize,
        ffn_size: usize,
        max_len: usize,
        hidden_dropout: f64,
    ) -> PyResult<Self> {
        let cfg = ModelConfig {
            num_layers,
            num_heads,
            hidden_size,
            head_size,
            ffn_size,
            vocab_size,
            max_len,
            num_classes,
            task: parse(task)?,
            hidden_dropout,
        };
        Ok(Self {
            inner: Model::new(cfg, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Model::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn checksum(&self) -> u64 {
        self.inner.checksum()
    }

    /// Deterministic logits for the selected examples (all when omitted).
    #[pyo3(signature = (data, indices=None))]
    fn logits<'py>(&self, py: Python<'py>, data: &PyDataset, indices: Option<Vec<usize>>) -> PyResult<Bound<'py, PyAny>> {
        let batch = match indices {
            Some(i) => data.batch(&i)?,
            None => data.all()?,
        };
        let out = self.inner.forward(&batch, None, None).map_err(py_err)?;
        tensor_to_py(py, out.logits())
    }

    /// Attention maps `[batch, heads, n, n]` of one layer.
    fn attention<'py>(&self, py: Python<'py>, data: &PyDataset, indices: Vec<usize>, layer: usize) -> PyResult<Bound<'py, PyAny>> {
        let batch = data.batch(&indices)?;
        let out = self.inner.forward(&batch, None, None).map_err(py_err)?;
        tensor_to_py(py, out.attention_map(layer).map_err(py_err)?)
    }

    /// Attribution scores per layer, `{layer: [batch, heads, n, n]}`.
    #[pyo3(signature = (data, indices, layers=vec![0], method="ga", label_mode="pseudo", steps=20, scaling="layer", seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn attribute<'py>(
        &self,
        py: Python<'py>,
        data: &PyDataset,
        indices: Vec<usize>,
        layers: Vec<usize>,
        method: &str,
        label_mode: &str,
        steps: usize,
        scaling: &str,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let batch = data.batch(&indices)?;
        let cfg = AttributionConfig {
            method: parse::<Method>(method)?,
            label_mode: parse::<LabelMode>(label_mode)?,
            steps,
            scaling: parse::<PathScaling>(scaling)?,
        };
        let opts = ForwardOptions::frozen();
        let mut out = self.inner.forward_with(&batch, &opts, None).map_err(py_err)?;
        let mut rng = addrop::rng::stream(seed, &[addrop::rng::RANDOM_ATTRIBUTION]);
        let scores = run_attribution(&self.inner, &batch, &mut out, &cfg, &layers, &mut rng).map_err(py_err)?;
        let dict = PyDict::new(py);
        for (l, t) in &scores {
            dict.set_item(l, tensor_to_py(py, t)?)?;
        }
        Ok(dict)
    }

    /// Mask-free evaluation: `{"loss", "metric", "kind", "undefined"}`.
    #[pyo3(signature = (data, metric=None))]
    fn evaluate<'py>(&self, py: Python<'py>, data: &PyDataset, metric: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
        let kind = match metric {
            Some(m) => parse::<MetricKind>(m)?,
            None => MetricKind::default_for(data.inner.task),
        };
        let e = evaluate(&self.inner, &data.inner, kind).map_err(py_err)?;
        let dict = PyDict::new(py);
        dict.set_item("loss", e.loss)?;
        dict.set_item("metric", e.metric)?;
        dict.set_item("kind", e.kind.to_string())?;
        dict.set_item("undefined", e.undefined)?;
        Ok(dict)
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(task='{}', layers={}, heads={}, hidden={}, params={})",
            c.task,
            c.num_layers,
            c.num_heads,
            c.hidden_size,
            self.inner.num_params()
        )
    }
}

/// Result of [`train`]: the best-dev model and per-epoch reports.
#[pyclass(name = "TrainResult", frozen)]
struct PyTrainResult {
    #[pyo3(get)]
    model: Py<PyModel>,
    #[pyo3(get)]
    best_epoch: usize,
    #[pyo3(get)]
    best_metric: f64,
    reports: Vec<addrop::trainer::EpochReport>,
}

#[pymethods]
impl PyTrainResult {
    /// One dict per epoch.
    #[getter]
    fn reports<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        let rows = self
            .reports
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("epoch", r.epoch)?;
                d.set_item("phase", r.phase.to_string())?;
                d.set_item("train_loss", r.train_loss)?;
                d.set_item("dev_loss", r.dev_loss)?;
                d.set_item("dev_metric", r.dev_metric)?;
                Ok(d)
            })
            .collect::<PyResult<Vec<_>>>()?;
        PyList::new(py, rows)
    }
}

/// Trains a copy of `model`. `procedure` is "addrop" (cross-tuning unless
/// `cross_tuning=False`) or "finetune". The GIL is released meanwhile.
#[pyfunction]
#[pyo3(signature = (model, train, dev, procedure="addrop", learning_rate=1e-3, batch_size=32, max_epochs=30, p=0.3, q=0.3, mode="high", layers=vec![0], method="ga", label_mode="pseudo", cross_tuning=true, early_stop_patience=0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    model: &PyModel,
    train: &PyDataset,
    dev: &PyDataset,
    procedure: &str,
    learning_rate: f64,
    batch_size: usize,
    max_epochs: usize,
    p: f64,
    q: f64,
    mode: &str,
    layers: Vec<usize>,
    method: &str,
    label_mode: &str,
    cross_tuning: bool,
    early_stop_patience: usize,
    seed: u64,
) -> PyResult<PyTrainResult> {
    let cfg = TrainConfig {
        learning_rate,
        batch_size,
        max_epochs,
        early_stop_patience,
        policy: DiscardPolicy {
            p,
            q,
            mode: parse::<DropMode>(mode)?,
            layers,
        },
        attribution: AttributionConfig {
            method: parse(method)?,
            label_mode: parse(label_mode)?,
            ..AttributionConfig::default()
        },
        cross_tuning,
        seed,
        ..TrainConfig::default()
    };
    let masked = match procedure {
        "addrop" => true,
        "finetune" => false,
        other => return Err(PyValueError::new_err(format!("unknown procedure '{other}'"))),
    };
    let start = model.inner.clone();
    let (tr, dv) = (&train.inner, &dev.inner);
    let outcome = py
        .detach(|| {
            if masked {
                cross_tune(start, tr, dv, &cfg)
            } else {
                fine_tune(start, tr, dv, &cfg)
            }
        })
        .map_err(py_err)?;
    Ok(PyTrainResult {
        model: Py::new(py, PyModel { inner: outcome.model })?,
        best_epoch: outcome.best_epoch,
        best_metric: outcome.best_metric,
        reports: outcome.reports,
    })
}

/// Additive mask for one head's `n x n` score matrix: 0 where kept, a
/// large negative value where dropped.
#[pyfunction]
#[pyo3(signature = (scores, p=0.3, q=0.3, mode="high", seed=0))]
fn mask_from_scores(scores: Vec<Vec<f64>>, p: f64, q: f64, mode: &str, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let n = scores.len();
    if scores.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("scores must be square"));
    }
    let t = Tensor::new(vec![1, 1, n, n], scores.concat()).map_err(py_err)?;
    let policy = DiscardPolicy {
        p,
        q,
        mode: parse(mode)?,
        layers: vec![0],
    };
    let set = build_masks(&BTreeMap::from([(0, t)]), &policy, &[vec![true; n]], 1, seed, 0).map_err(py_err)?;
    let mask = set.get(0).expect("policy layer 0");
    Ok(mask.data().chunks(n.max(1)).map(<[f64]>::to_vec).collect())
}

#[pyfunction]
fn accuracy(pred: Vec<usize>, gold: Vec<usize>) -> f64 {
    metrics::accuracy(&pred, &gold)
}

#[pyfunction]
fn mcc(pred: Vec<usize>, gold: Vec<usize>) -> f64 {
    metrics::mcc(&pred, &gold)
}

/// Pearson correlation and whether it was undefined.
#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> (f64, bool) {
    metrics::pearson(&x, &y)
}

#[pymodule]
fn addrop_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PySplits>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_function(wrap_pyfunction!(synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(mask_from_scores, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(mcc, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
