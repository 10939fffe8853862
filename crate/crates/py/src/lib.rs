//! Python bindings. Configs travel as TOML text and results as plain
//! dicts and lists decoded from the same JSON the CLI writes.

use std::path::{Path, PathBuf};

use cortis::baselines::Method;
use cortis::config::ExperimentConfig;
use cortis::error::CortisError;
use cortis::experiment::{
    build_pretrained, calibrate as calibrate_world, cost_csv, load_pretrained, plot_series, reports_csv, run_sequence,
    save_pretrained, RunRecord,
};
use cortis::fisher::{FisherDiagonal, FisherSource};
use cortis::localize::{saliency, top_k_mask};
use cortis::rundir::RunDir;
use cortis::toytts::make_world;
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

create_exception!(cortis_py, C2ViolationError, PyRuntimeError, "Forget data was retained or read after destruction.");

fn to_py(e: CortisError) -> PyErr {
    match e.exit_code() {
        3 => C2ViolationError::new_err(e.to_string()),
        1 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_config(config: Option<&str>) -> PyResult<ExperimentConfig> {
    match config {
        Some(text) => ExperimentConfig::from_toml(text).map_err(to_py),
        None => Ok(ExperimentConfig::default()),
    }
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).expect("serializable");
    py.import("json")?.call_method1("loads", (text,))
}

/// The built-in default config as TOML text.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_toml()
}

/// Builds the world, pretrains θ₀ and writes both to `out`.
#[pyfunction]
#[pyo3(signature = (out, config=None, force=false))]
fn pretrain(py: Python<'_>, out: PathBuf, config: Option<&str>, force: bool) -> PyResult<usize> {
    let config = parse_config(config)?;
    py.detach(|| {
        let pre = build_pretrained(&config)?;
        save_pretrained(&pre, &out, force)?;
        Ok(pre.theta0.num_params())
    })
    .map_err(to_py)
}

/// Retain and forget similarity thresholds for the config's world.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn calibrate<'py>(py: Python<'py>, config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let config = parse_config(config)?;
    let t = py
        .detach(|| make_world(&config.world).and_then(|w| calibrate_world(&config, &w)))
        .map_err(to_py)?;
    json_to_py(py, &t)
}

/// Runs one request sequence from the checkpoint in `pretrained` into the
/// run directory `out` and returns the per-request reports. Raises
/// `C2ViolationError` when the run fails the non-retention audit.
#[pyfunction]
#[pyo3(signature = (pretrained, out, method="cortis", seed=0, config=None, requests=None, violate_c2=false, force=false))]
#[allow(clippy::too_many_arguments)]
fn unlearn<'py>(
    py: Python<'py>,
    pretrained: PathBuf,
    out: PathBuf,
    method: &str,
    seed: u64,
    config: Option<&str>,
    requests: Option<usize>,
    violate_c2: bool,
    force: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let config = parse_config(config)?;
    let method: Method = method.parse().map_err(to_py)?;
    let outcome = py
        .detach(|| {
            let pre = load_pretrained(&pretrained)?;
            let rd = RunDir::create(&out, force)?;
            let n = requests.unwrap_or(config.requests.len());
            let outcome = run_sequence(&config, &pre, method, seed, n, Some(&rd), violate_c2)?;
            if outcome.audit.passed {
                Ok(outcome)
            } else {
                Err(CortisError::C2Violation(outcome.audit.violations.join("; ")))
            }
        })
        .map_err(to_py)?;
    json_to_py(py, &outcome.reports)
}

/// Aggregates run directories into `(results_csv, cost_csv, plot_series)`.
#[pyfunction]
fn report<'py>(py: Python<'py>, runs: Vec<PathBuf>) -> PyResult<(String, String, Bound<'py, PyAny>)> {
    let records: Vec<RunRecord> = runs.iter().map(|d| RunRecord::load(Path::new(d))).collect::<Result<_, _>>().map_err(to_py)?;
    let csv = reports_csv(&records).map_err(to_py)?;
    Ok((csv, cost_csv(&records), json_to_py(py, &plot_series(&records))?))
}

/// Indices of the top-k% contrastive saliency coordinates for the given
/// forget, remain and prior forget Fisher diagonals.
#[pyfunction]
#[pyo3(signature = (forget, remain, priors, k_percent, epsilon=1e-8))]
fn saliency_mask(forget: Vec<f64>, remain: Vec<f64>, priors: Vec<Vec<f64>>, k_percent: f64, epsilon: f64) -> PyResult<Vec<usize>> {
    let fisher = |v: Vec<f64>, src| FisherDiagonal::new(v, src, 1).map_err(to_py);
    let f = fisher(forget, FisherSource::Forget(1))?;
    let r = fisher(remain, FisherSource::Remain)?;
    let p: Vec<FisherDiagonal> = priors.into_iter().map(|v| fisher(v, FisherSource::Forget(1))).collect::<PyResult<_>>()?;
    let s = saliency(&f, &r, &p, epsilon).map_err(to_py)?;
    Ok(top_k_mask(&s, k_percent, 1, epsilon).map_err(to_py)?.indices().to_vec())
}

#[pymodule]
fn cortis_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("C2ViolationError", m.py().get_type::<C2ViolationError>())?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(unlearn, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(saliency_mask, m)?)?;
    Ok(())
}
