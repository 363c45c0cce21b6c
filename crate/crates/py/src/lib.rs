//! Python bindings. Matrices cross the boundary as lists of rows.

use gmm_ddpm::objective::{batch_grad, batch_loss};
use gmm_ddpm::{Matrix, MixtureParams, RngSeed, SampleBatch};
use gmm_ddpm_cli::config::{parse_config, Mode};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    Matrix::from_rows(rows).map_err(err)
}

/// With `symmetric`, `centers` holds the single row `μ` of the pair
/// `(μ, −μ)`.
fn params(centers: &[Vec<f64>], symmetric: bool) -> PyResult<MixtureParams> {
    if symmetric {
        match centers {
            [mu] => MixtureParams::symmetric(mu.clone()).map_err(err),
            _ => Err(PyValueError::new_err(
                "a symmetric pair takes exactly one center row",
            )),
        }
    } else {
        MixtureParams::from_rows(centers).map_err(err)
    }
}

/// `(alpha, beta) = (exp(-t), sqrt(1 - exp(-2t)))`.
#[pyfunction]
fn noise_scale(t: f64) -> PyResult<(f64, f64)> {
    let s = gmm_ddpm::make_noise_scale(t).map_err(err)?;
    Ok((s.alpha, s.beta))
}

/// `n` draws from the equal-weight mixture with unit covariance.
#[pyfunction]
#[pyo3(signature = (centers, n, seed, stream = 0, symmetric = false))]
fn sample_mixture(
    centers: Vec<Vec<f64>>,
    n: usize,
    seed: u64,
    stream: u64,
    symmetric: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let p = params(&centers, symmetric)?;
    Ok(gmm_ddpm::sample_mixture(&p, n, RngSeed::new(seed, stream))
        .map_err(err)?
        .to_rows())
}

#[pyfunction]
#[pyo3(signature = (centers, x, symmetric = false))]
fn posterior_weights(centers: Vec<Vec<f64>>, x: Vec<f64>, symmetric: bool) -> PyResult<Vec<f64>> {
    gmm_ddpm::posterior_weights(&params(&centers, symmetric)?, &x).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (centers, x, symmetric = false))]
fn student_score(centers: Vec<Vec<f64>>, x: Vec<f64>, symmetric: bool) -> PyResult<Vec<f64>> {
    gmm_ddpm::student_score(&params(&centers, symmetric)?, &x).map_err(err)
}

#[pyfunction]
fn estimate_center_norm(x: Vec<Vec<f64>>) -> PyResult<f64> {
    gmm_ddpm::estimate_center_norm(&matrix(&x)?).map_err(err)
}

/// Mean loss and mean gradient (without the factor 2, one row per stored
/// center) over the batch `x_t = alpha x0 + beta z`. `centers` are at
/// scale `t`.
#[pyfunction]
#[pyo3(signature = (centers, x0, z, t, symmetric = false))]
fn loss_and_grad(
    centers: Vec<Vec<f64>>,
    x0: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    t: f64,
    symmetric: bool,
) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let p = params(&centers, symmetric)?;
    let scale = gmm_ddpm::make_noise_scale(t).map_err(err)?;
    let batch = SampleBatch::from_parts(matrix(&x0)?, matrix(&z)?, scale).map_err(err)?;
    let loss = batch_loss(&p, &batch).map_err(err)?;
    let g = batch_grad(&p, &batch).map_err(err)?;
    let rows = Matrix::from_vec(p.stored_centers().nrows(), p.d(), g.mean).map_err(err)?;
    Ok((loss, rows.to_rows()))
}

/// Runs the `fit` of a JSON experiment config and returns the summary as
/// JSON. Nothing is written to disk.
#[pyfunction]
#[pyo3(signature = (config_json, seeds = None))]
fn fit(py: Python<'_>, config_json: &str, seeds: Option<Vec<u64>>) -> PyResult<String> {
    let mut cfg = parse_config(config_json, "<config>").map_err(err)?;
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    let cfg = cfg.resolve(Mode::Fit).map_err(err)?;
    py.detach(|| -> Result<String, String> {
        let truth = cfg.mixture.build().map_err(|e| e.to_string())?;
        let runs = cfg
            .seeds
            .iter()
            .map(|&s| gmm_ddpm_cli::fit::run_seed(&cfg, &truth, s).map_err(|e| format!("{e:#}")))
            .collect::<Result<Vec<_>, _>>()?;
        let summary =
            gmm_ddpm_cli::fit::summarize(&cfg, &truth, &runs).map_err(|e| format!("{e:#}"))?;
        serde_json::to_string(&summary).map_err(|e| e.to_string())
    })
    .map_err(err)
}

/// Runs one diagnostics check; returns its cases as a JSON array.
#[pyfunction]
#[pyo3(signature = (check, n_mc = 200_000, seed = 0))]
fn verify(py: Python<'_>, check: &str, n_mc: usize, seed: u64) -> PyResult<String> {
    let lines = py
        .detach(|| gmm_ddpm_cli::verify::run_check(check, n_mc, seed).map_err(|e| format!("{e:#}")))
        .map_err(err)?;
    serde_json::to_string(&lines).map_err(err)
}

#[pymodule]
fn gmm_ddpm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(noise_scale, m)?)?;
    m.add_function(wrap_pyfunction!(sample_mixture, m)?)?;
    m.add_function(wrap_pyfunction!(posterior_weights, m)?)?;
    m.add_function(wrap_pyfunction!(student_score, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_center_norm, m)?)?;
    m.add_function(wrap_pyfunction!(loss_and_grad, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add("CHECKS", gmm_ddpm_cli::verify::CHECKS.to_vec())?;
    Ok(())
}
