//! Python bindings: configs, step-by-step training, evaluation, the gradient
//! self-test and a polynomial derivative helper for exercising the tape.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

use maltml_core::autodiff::{grad, Tape};
use maltml_core::experiment::{self, variants_for, Algorithm, Checkpoint, EvalSettings};
use maltml_core::model::ParamVector;
use maltml_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_numerical() => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

/// Training configuration. Keyword arguments override the defaults.
#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: experiment::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (algorithm = "maltml", seed = 0, desk = false, **settings))]
    fn new(
        algorithm: &str,
        seed: u64,
        desk: bool,
        settings: Option<&Bound<'_, pyo3::types::PyDict>>,
    ) -> PyResult<Self> {
        let algorithm: Algorithm = algorithm.parse().map_err(to_py)?;
        let mut inner = if desk {
            experiment::TrainConfig::desk(algorithm, seed)
        } else {
            experiment::TrainConfig {
                algorithm,
                seed,
                ..Default::default()
            }
        };
        if let Some(kw) = settings {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                let value = v.str()?.to_string();
                inner.set(&key, &value).map_err(to_py)?;
            }
        }
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        let inner = experiment::TrainConfig::from_text(text).map_err(to_py)?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn algorithm(&self) -> &'static str {
        self.inner.algorithm.as_str()
    }

    #[getter]
    fn outer_steps(&self) -> u64 {
        self.inner.outer_steps
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainConfig(algorithm={:?}, seed={}, outer_steps={}, hash={:?})",
            self.inner.algorithm.as_str(),
            self.inner.seed,
            self.inner.outer_steps,
            self.inner.hash()
        )
    }
}

/// Flat parameter vector with its tensor layout.
#[pyclass(name = "Params", skip_from_py_object)]
struct PyParams {
    inner: ParamVector,
}

#[pymethods]
impl PyParams {
    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ParamVector::from_text(text).map_err(to_py)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn entries(&self) -> Vec<f64> {
        self.inner.entries().to_vec()
    }

    /// `(name, rows, cols)` for each tensor.
    fn layout(&self) -> Vec<(String, usize, usize)> {
        self.inner
            .layout()
            .specs()
            .iter()
            .map(|s| (s.name.clone(), s.shape.rows, s.shape.cols))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Outer-loop training driven one step at a time.
#[pyclass(name = "Trainer", skip_from_py_object)]
struct PyTrainer {
    inner: experiment::Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: &PyTrainConfig) -> PyResult<Self> {
        Ok(Self {
            inner: experiment::Trainer::new(config.inner.clone()).map_err(to_py)?,
        })
    }

    /// Runs one outer step; returns the mean loss, or None if the step was
    /// skipped as non-finite.
    fn step(&mut self, py: Python<'_>) -> PyResult<Option<f64>> {
        let inner = &mut self.inner;
        py.detach(|| inner.step()).map_err(to_py)
    }

    /// Runs `n` steps and returns their losses.
    fn run(&mut self, py: Python<'_>, n: u64) -> PyResult<Vec<Option<f64>>> {
        let inner = &mut self.inner;
        py.detach(|| (0..n).map(|_| inner.step()).collect::<Result<Vec<_>, _>>())
            .map_err(to_py)
    }

    #[getter]
    fn steps_done(&self) -> u64 {
        self.inner.steps_done()
    }

    #[getter]
    fn skipped(&self) -> u64 {
        self.inner.skipped()
    }

    fn params(&self) -> PyParams {
        PyParams {
            inner: self.inner.params().clone(),
        }
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.checkpoint().save(&path).map_err(to_py)
    }

    /// Predictions of the current (unadapted) model at `xs`.
    fn predict(&self, xs: Vec<f64>) -> PyResult<Vec<f64>> {
        let spec = self.inner.spec();
        if spec.input_dim != 1 {
            return Err(PyValueError::new_err("predict needs a one-input model"));
        }
        spec.predict(
            self.inner.params(),
            &maltml_core::autodiff::Tensor::column(xs),
        )
        .map_err(to_py)
    }
}

/// Per-episode evaluation results for one series.
#[pyclass(name = "EvalReport", skip_from_py_object)]
struct PyEvalReport {
    inner: experiment::EvalReport,
}

#[pymethods]
impl PyEvalReport {
    #[getter]
    fn label(&self) -> String {
        self.inner.label.clone()
    }

    #[getter]
    fn r_eval(&self) -> usize {
        self.inner.r_eval
    }

    #[getter]
    fn episodes(&self) -> usize {
        self.inner.records.len()
    }

    fn pre_meta_mean(&self) -> f64 {
        self.inner.pre_meta().mean
    }

    /// Mean grid MSE after k fine-tuning steps, k = 0..=r_eval.
    fn curve_means(&self) -> Vec<f64> {
        (0..=self.inner.r_eval)
            .map(|k| self.inner.at_step(k).mean)
            .collect()
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }
}

/// Trains according to `config` and writes its outputs; returns the
/// checkpoint path.
#[pyfunction]
fn train(py: Python<'_>, config: &PyTrainConfig) -> PyResult<String> {
    let cfg = config.inner.clone();
    let out = py
        .detach(|| experiment::run_training(&cfg))
        .map_err(to_py)?;
    Ok(out.checkpoint.display().to_string())
}

/// Evaluates a checkpoint file; one report per series.
#[pyfunction]
#[pyo3(signature = (checkpoint, episodes = 100, seed = 0, r_eval = None))]
fn evaluate(
    py: Python<'_>,
    checkpoint: PathBuf,
    episodes: usize,
    seed: u64,
    r_eval: Option<usize>,
) -> PyResult<Vec<PyEvalReport>> {
    let ckpt = Checkpoint::load(&checkpoint).map_err(to_py)?;
    let cfg = ckpt.config;
    let mut loops = cfg.loops;
    if let Some(r) = r_eval {
        loops.r_eval = r;
    }
    let settings = EvalSettings {
        steps: cfg.steps,
        loops,
        shots: cfg.shots,
        episodes,
        seed,
    };
    let spec = cfg.model_spec();
    py.detach(|| {
        variants_for(cfg.algorithm)
            .iter()
            .map(|v| {
                experiment::run_eval(&spec, &ckpt.params, v, &settings)
                    .map(|inner| PyEvalReport { inner })
            })
            .collect::<Result<Vec<_>, _>>()
    })
    .map_err(to_py)
}

/// Long-format plot data for the given reports.
#[pyfunction]
fn plotdata(reports: Vec<PyRef<'_, PyEvalReport>>) -> PyResult<String> {
    let reports: Vec<_> = reports.iter().map(|r| r.inner.clone()).collect();
    experiment::emit_plotdata(&reports).map_err(to_py)
}

/// Finite-difference check of the outer gradients: `(name, error, tolerance, passed)`.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(seed: u64) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let report = experiment::run_gradcheck(&experiment::GradcheckSettings {
        seed,
        ..Default::default()
    })
    .map_err(to_py)?;
    Ok(report
        .checks
        .iter()
        .map(|c| (c.name.to_string(), c.error, c.tolerance, c.passed()))
        .collect())
}

/// The `order`-th derivative at `x` of `Σ_k coeffs[k] xᵏ`, by repeated
/// differentiation on the tape.
#[pyfunction]
fn poly_derivative(coeffs: Vec<f64>, x: f64, order: usize) -> PyResult<f64> {
    let tape = Tape::new();
    let xv = tape.scalar(x);
    let mut y = tape.scalar(0.0);
    for (k, &c) in coeffs.iter().enumerate() {
        let term = if k == 0 {
            tape.scalar(c)
        } else {
            xv.powi(k as i32).scale(c)
        };
        y = y + term;
    }
    let mut d = y;
    for _ in 0..order {
        d = grad(d, &[xv], true).map_err(|e| to_py(e.into()))?[0];
    }
    Ok(d.item())
}

#[pymodule]
fn maltml(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyParams>()?;
    m.add_class::<PyTrainer>()?;
    m.add_class::<PyEvalReport>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(plotdata, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(poly_derivative, m)?)?;
    Ok(())
}
