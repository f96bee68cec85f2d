//! Python bindings: experiment configs and runs, the self-check suite,
//! synthetic-gradient models, BP(λ) mixing and the Copy task generators.

use std::path::PathBuf;

use dni::bp_lambda::{geometric_weights as geo_weights, mix_step as mix};
use dni::harness::{self, ExperimentConfig, Fault, RunOptions, SweepSpec};
use dni::layers::BnMode;
use dni::numerics::{AdamConfig, RngState, Tensor};
use dni::synthetic::{Conditioning, SgConfig, SgModel};
use dni::tasks::{gen_copy, gen_repeat_copy};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Rows = Vec<Vec<f64>>;

fn err(e: dni::Error) -> PyErr {
    match e {
        dni::Error::Io(_) | dni::Error::State(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(rows: &Rows) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(err)
}

fn rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// A parsed, validated experiment config.
#[pyclass(name = "ExperimentConfig", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::from_toml(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::load(&path).map_err(err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.experiment.kind()
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
    fn budget(&self) -> u64 {
        self.inner.budget
    }

    #[setter]
    fn set_budget(&mut self, budget: u64) {
        self.inner.budget = budget;
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out_dir.clone()
    }

    #[setter]
    fn set_out_dir(&mut self, dir: PathBuf) {
        self.inner.out_dir = dir;
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("ExperimentConfig(kind={:?}, seed={}, budget={})", self.kind(), self.seed(), self.budget())
    }
}

/// Runs one experiment; returns a summary dict.
#[pyfunction]
#[pyo3(signature = (config, resume=None, max_steps=None))]
fn run<'py>(
    py: Python<'py>,
    config: &PyConfig,
    resume: Option<PathBuf>,
    max_steps: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let s = harness::run(&config.inner, &RunOptions { resume, max_steps }).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("steps", s.steps)?;
    d.set_item("samples", s.samples)?;
    d.set_item("finished", s.finished)?;
    d.set_item("metrics", s.metrics)?;
    d.set_item("checkpoint", s.checkpoint)?;
    Ok(d)
}

/// Runs a sweep file; returns the metrics path of every run.
#[pyfunction]
fn sweep(path: PathBuf) -> PyResult<Vec<PathBuf>> {
    let spec = SweepSpec::load(&path).map_err(err)?;
    let m = harness::sweep(&spec).map_err(err)?;
    Ok(m.runs.into_iter().map(|r| r.metrics).collect())
}

/// The invariant suite as `(name, passed, detail)` tuples.
#[pyfunction]
#[pyo3(signature = (inject_fault=None))]
fn verify(inject_fault: Option<&str>) -> PyResult<Vec<(String, bool, String)>> {
    let fault = match inject_fault {
        None => None,
        Some("linear-backward") => Some(Fault::LinearBackward),
        Some(f) => return Err(PyValueError::new_err(format!("unknown fault {f:?}"))),
    };
    Ok(harness::verify(fault)
        .checks
        .into_iter()
        .map(|c| (c.name.to_string(), c.passed, c.detail))
        .collect())
}

/// `(format version, experiment kind, steps)` of a checkpoint file.
#[pyfunction]
fn inspect_checkpoint(path: PathBuf) -> PyResult<(u32, String, u64)> {
    let bytes = std::fs::read(&path)?;
    let info = harness::container_info(&bytes).map_err(err)?;
    let ck = harness::decode(&bytes).map_err(err)?;
    Ok((info.version, ck.config.experiment.kind().to_string(), ck.state.steps()))
}

/// Synthetic-gradient model: activation (and optional label) to predicted
/// gradient, trained by L2 regression.
#[pyclass(name = "SgModel")]
struct PySgModel {
    inner: SgModel,
}

#[pymethods]
impl PySgModel {
    #[new]
    #[pyo3(signature = (input_dim, output_dim, hidden_layers=2, hidden_width=256, batchnorm=true, label_classes=None, lr=1e-3, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        input_dim: usize,
        output_dim: usize,
        hidden_layers: usize,
        hidden_width: usize,
        batchnorm: bool,
        label_classes: Option<usize>,
        lr: f64,
        seed: u64,
    ) -> Self {
        let config = SgConfig {
            hidden_layers,
            hidden_width,
            batchnorm,
            conditioning: label_classes.map_or(Conditioning::None, Conditioning::Label),
        };
        let mut rng = RngState::new(seed);
        Self {
            inner: SgModel::new(input_dim, output_dim, config, &mut rng, AdamConfig::with_lr(lr)),
        }
    }

    #[pyo3(signature = (h, labels=None, train=true))]
    fn predict(&mut self, h: Rows, labels: Option<Vec<usize>>, train: bool) -> PyResult<Rows> {
        let mode = if train { BnMode::Train } else { BnMode::Eval };
        let out = self.inner.predict(&tensor(&h)?, labels.as_deref(), mode).map_err(err)?;
        Ok(rows(&out))
    }

    /// One regression step toward `target`; returns the loss before it.
    #[pyo3(signature = (h, target, labels=None))]
    fn update(&mut self, h: Rows, target: Rows, labels: Option<Vec<usize>>) -> PyResult<f64> {
        let step = self
            .inner
            .update(&tensor(&h)?, labels.as_deref(), &tensor(&target)?)
            .map_err(err)?;
        Ok(step.loss)
    }
}

/// Weights `(c^k, …, c^K)` of the geometric mixture for the given λs.
#[pyfunction]
fn geometric_weights(lambdas: Vec<f64>) -> PyResult<Vec<f64>> {
    geo_weights(&lambdas).map_err(err)
}

/// `λ·(g_next J) + (1 − λ)·g_synth` with `J` given as a matrix.
#[pyfunction]
fn mix_step(g_next: Rows, jacobian: Rows, g_synth: Rows, lam: f64) -> PyResult<Rows> {
    let j = tensor(&jacobian)?;
    let out = mix(&tensor(&g_next)?, |g| g.matmul(&j.transpose()), Some(&tensor(&g_synth)?), lam).map_err(err)?;
    Ok(rows(&out))
}

/// One Copy (or, with `r`, Repeat Copy) episode as `(inputs, targets, mask)`.
#[pyfunction]
#[pyo3(signature = (n, seed, r=None))]
fn copy_episode(n: usize, seed: u64, r: Option<usize>) -> PyResult<(Rows, Rows, Vec<bool>)> {
    let mut rng = RngState::new(seed);
    let ep = match r {
        None => gen_copy(n, &mut rng),
        Some(r) => gen_repeat_copy(n, r, &mut rng),
    }
    .map_err(err)?;
    Ok((rows(&ep.inputs), rows(&ep.targets), ep.mask))
}

#[pymodule]
fn dni_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PySgModel>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(inspect_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(geometric_weights, m)?)?;
    m.add_function(wrap_pyfunction!(mix_step, m)?)?;
    m.add_function(wrap_pyfunction!(copy_episode, m)?)?;
    Ok(())
}
