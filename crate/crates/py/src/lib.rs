//! Python bindings: the closed-form pieces and a synthetic-rater training run.

use mlrl_core::gaussian::{self, GaussianDist};
use mlrl_core::reward::{self, RatingLossConfig};
use mlrl_core::tensor::Matrix;
use mlrl_core::trainer::{run_training, RunHooks};
use mlrl_core::{config, Error};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::Dimension(_) | Error::NotPositiveDefinite { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn gaussian(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> PyResult<GaussianDist> {
    let cov = Matrix::from_rows(&cov).map_err(to_py)?;
    GaussianDist::new(mean, cov).map_err(to_py)
}

/// KL(p || q) between two multivariate Gaussians.
#[pyfunction]
#[pyo3(signature = (mean_p, cov_p, mean_q, cov_q, include_dim_constant = true))]
fn kl_divergence(
    mean_p: Vec<f64>,
    cov_p: Vec<Vec<f64>>,
    mean_q: Vec<f64>,
    cov_q: Vec<Vec<f64>>,
    include_dim_constant: bool,
) -> PyResult<f64> {
    let p = gaussian(mean_p, cov_p)?;
    let q = gaussian(mean_q, cov_q)?;
    gaussian::kl_divergence(&p, &q, include_dim_constant).map_err(to_py)
}

/// Rating-class probabilities for a normalized return.
#[pyfunction]
#[pyo3(signature = (r_tilde, n, k_steepness = 20.0))]
fn class_probabilities(r_tilde: f64, n: usize, k_steepness: f64) -> PyResult<Vec<f64>> {
    let cfg = RatingLossConfig::new(n, k_steepness, 0.99).map_err(to_py)?;
    Ok(reward::class_probabilities(r_tilde, &cfg))
}

#[pyfunction]
fn normalize_batch(returns: Vec<f64>) -> Vec<f64> {
    reward::normalize_batch(&returns)
}

#[pyfunction]
fn default_weights(n: usize) -> PyResult<Vec<f64>> {
    Ok(gaussian::default_weights(n).map_err(to_py)?.as_slice().to_vec())
}

/// Canonical `key = value` text of a config after overrides.
#[pyfunction]
#[pyo3(signature = (text = "", overrides = Vec::new()))]
fn parse_config(text: &str, overrides: Vec<String>) -> PyResult<String> {
    let cfg = config::apply_overrides(&config::parse(text).map_err(to_py)?, &overrides).map_err(to_py)?;
    cfg.validate().map_err(to_py)?;
    Ok(config::to_text(&cfg))
}

/// Runs training with the synthetic rater. Returns the learning curve as
/// a list of dicts plus the final per-class buffer sizes.
#[pyfunction]
#[pyo3(signature = (text = "", overrides = Vec::new()))]
fn train<'py>(py: Python<'py>, text: &str, overrides: Vec<String>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config::apply_overrides(&config::parse(text).map_err(to_py)?, &overrides).map_err(to_py)?;
    let out = py.detach(|| run_training(&cfg, &RunHooks::default())).map_err(to_py)?;
    let curve = out
        .curve
        .records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("cycle", r.cycle)?;
            d.set_item("env_steps", r.env_steps)?;
            d.set_item("mean_return", r.mean_return)?;
            d.set_item("stderr", r.stderr)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let result = PyDict::new(py);
    result.set_item("curve", curve)?;
    result.set_item("curve_csv", out.curve.to_csv())?;
    result.set_item("buffer_sizes", out.dataset.buffer_sizes())?;
    Ok(result)
}

#[pymodule]
fn mlrl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(class_probabilities, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_batch, m)?)?;
    m.add_function(wrap_pyfunction!(default_weights, m)?)?;
    m.add_function(wrap_pyfunction!(parse_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
