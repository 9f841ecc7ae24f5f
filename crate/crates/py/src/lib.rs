//! Python bindings. Structured results cross the boundary as JSON and are
//! decoded into dicts on the Python side.

use nalgebra::DMatrix;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use sbc::cli::{marg_check_from_config, sbc_from_config};
use sbc::config::{parse_config, parse_training_csv, ExperimentConfig, ModelConfig};
use sbc::kernel::InputPoints;
use sbc::marg::{fit_type2, OptimizerConfig};
use sbc::model::{log_marginal_likelihood, GpModel};
use sbc::output::tally_csv;
use serde::Serialize;

type Rows = Vec<Vec<f64>>;

fn err(e: sbc::Error) -> PyErr {
    match e {
        sbc::Error::Config { .. }
        | sbc::Error::ConfigSyntax { .. }
        | sbc::Error::Data { .. }
        | sbc::Error::DimensionMismatch(_)
        | sbc::Error::InvalidArgument(_)
        | sbc::Error::InvalidKernel(_)
        | sbc::Error::InvalidModel(_)
        | sbc::Error::InvalidFault(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn points(rows: Vec<Vec<f64>>) -> PyResult<InputPoints> {
    InputPoints::from_rows(&rows).map_err(err)
}

fn outputs(rows: Vec<Vec<f64>>, n: usize) -> PyResult<DMatrix<f64>> {
    if rows.len() != n {
        return Err(PyValueError::new_err(format!(
            "y has {} rows, expected {n}",
            rows.len()
        )));
    }
    let p = rows.first().map(Vec::len).unwrap_or(1);
    if rows.iter().any(|r| r.len() != p) {
        return Err(PyValueError::new_err("y rows have differing lengths"));
    }
    Ok(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
}

fn experiment(config: &str) -> PyResult<ExperimentConfig> {
    parse_config(config).map_err(err)
}

/// A GP model built from the `model` section of an experiment config.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: GpModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config = "{}"))]
    fn new(config: &str) -> PyResult<Self> {
        let model: ModelConfig =
            serde_json::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let cfg = ExperimentConfig {
            model,
            ..Default::default()
        };
        Ok(PyModel {
            inner: cfg.model().map_err(err)?,
        })
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    fn log_hyperparameters(&self) -> PyResult<Vec<f64>> {
        self.inner.log_hyperparameters().map_err(err)
    }

    fn with_log_hyperparameters(&self, theta: Vec<f64>) -> PyResult<PyModel> {
        Ok(PyModel {
            inner: self.inner.with_log_hyperparameters(&theta).map_err(err)?,
        })
    }

    /// Posterior mean and covariance at `test`, output-major.
    fn posterior(
        &self,
        train: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
        test: Vec<Vec<f64>>,
    ) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let train = points(train)?;
        let y = outputs(y, train.len())?;
        let post = self
            .inner
            .predictor(&train, &points(test)?)
            .and_then(|p| p.posterior(&y))
            .map_err(err)?;
        let cov = post.cov().values();
        let rows = (0..cov.nrows())
            .map(|i| cov.row(i).iter().copied().collect())
            .collect();
        Ok((post.mean().iter().copied().collect(), rows))
    }

    /// Log marginal likelihood and its gradient in log-hyperparameters.
    fn log_marginal_likelihood(
        &self,
        train: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
    ) -> PyResult<(f64, Vec<f64>)> {
        let train = points(train)?;
        let y = outputs(y, train.len())?;
        let ev = log_marginal_likelihood(&self.inner, &train, &y).map_err(err)?;
        Ok((ev.value, ev.gradient))
    }

    /// Type-II fit from the given log-space starting points.
    #[pyo3(signature = (train, y, inits, optimizer = "{}"))]
    fn fit_type2<'py>(
        &self,
        py: Python<'py>,
        train: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
        inits: Vec<Vec<f64>>,
        optimizer: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let train = points(train)?;
        let y = outputs(y, train.len())?;
        let cfg: OptimizerConfig =
            serde_json::from_str(optimizer).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let fit = py
            .detach(|| fit_type2(&self.inner, &train, &y, &inits, &cfg))
            .map_err(err)?;
        to_py(py, &fit)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(inputs={}, outputs={})",
            self.inner.input_dim(),
            self.inner.output_dim()
        )
    }
}

/// Runs SBC for a JSON experiment config. Returns the report and the tally
/// as CSV text.
#[pyfunction]
#[pyo3(signature = (config, threads = None))]
fn run_sbc<'py>(
    py: Python<'py>,
    config: &str,
    threads: Option<usize>,
) -> PyResult<(Bound<'py, PyAny>, String)> {
    let cfg = experiment(config)?;
    let (tally, report) = py.detach(|| sbc_from_config(&cfg, threads)).map_err(err)?;
    Ok((to_py(py, &report)?, tally_csv(&tally)))
}

/// Runs the marginalisation check for a JSON experiment config with inline
/// data.
#[pyfunction]
#[pyo3(signature = (config, threads = None))]
fn marg_check<'py>(
    py: Python<'py>,
    config: &str,
    threads: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = experiment(config)?;
    let report = py
        .detach(|| marg_check_from_config(&cfg, threads))
        .map_err(err)?;
    to_py(py, &report)
}

/// Parses training data in the CLI's CSV layout into `(x, y)` rows.
#[pyfunction]
fn parse_training_data(text: &str) -> PyResult<(Rows, Rows)> {
    let data = parse_training_csv(text, "<string>").map_err(err)?;
    let y = (0..data.y.nrows())
        .map(|i| data.y.row(i).iter().copied().collect())
        .collect();
    Ok((data.x.to_rows(), y))
}

#[pymodule(name = "gp_sbc")]
fn gp_sbc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(run_sbc, m)?)?;
    m.add_function(wrap_pyfunction!(marg_check, m)?)?;
    m.add_function(wrap_pyfunction!(parse_training_data, m)?)?;
    m.add("__version__", sbc::output::TOOL_VERSION)?;
    Ok(())
}
