//! Python module `mf_fbsde`. Structured results cross the boundary as JSON
//! strings; `json.loads` on the Python side gives plain dicts.

use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mf_fbsde_core::error::Error;
use mf_fbsde_core::families::registry;
use mf_fbsde_core::pde::{growth_critical_time, GrowthSpec, DEFAULT_TRUNCATIONS};
use mf_fbsde_core::runner::{convergence_study, parse_ladder, run};
use mf_fbsde_core::scenario::parse_scenario_str;

fn to_py(e: Error) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Registered coefficient families as JSON.
#[pyfunction]
fn list_families() -> PyResult<String> {
    json(&registry())
}

/// Resolve scenario text; returns the canonical JSON with every default.
#[pyfunction]
#[pyo3(signature = (text, name = "scenario"))]
fn resolve_scenario(text: &str, name: &str) -> PyResult<String> {
    let sc = parse_scenario_str(text, name).map_err(to_py)?;
    Ok(sc.canonical_json())
}

/// SHA-256 of the resolved scenario.
#[pyfunction]
#[pyo3(signature = (text, name = "scenario"))]
fn scenario_hash(text: &str, name: &str) -> PyResult<String> {
    Ok(parse_scenario_str(text, name).map_err(to_py)?.hash())
}

/// Run scenario text, writing artifacts under `out`. Returns the report JSON.
#[pyfunction]
#[pyo3(signature = (text, out, name = "scenario"))]
fn run_scenario(py: Python<'_>, text: &str, out: &str, name: &str) -> PyResult<String> {
    let sc = parse_scenario_str(text, name).map_err(to_py)?;
    let rep = py.detach(|| run(&sc, Path::new(out))).map_err(to_py)?;
    json(&rep)
}

/// Convergence study along `ladder` (e.g. "N=8,16,32,64"). Returns JSON.
#[pyfunction]
#[pyo3(signature = (text, ladder, name = "scenario"))]
fn study(py: Python<'_>, text: &str, ladder: &str, name: &str) -> PyResult<String> {
    let sc = parse_scenario_str(text, name).map_err(to_py)?;
    let spec = parse_ladder(ladder).map_err(to_py)?;
    let rep = py.detach(|| convergence_study(&sc, &spec)).map_err(to_py)?;
    json(&rep)
}

/// `t* = 1/(2 A sigma^2)` with the truncation ladder at `times`. Returns JSON.
#[pyfunction]
fn critical_time(a_tilde: f64, sigma: f64, horizon: f64, times: Vec<f64>) -> PyResult<String> {
    let spec = GrowthSpec {
        a_tilde,
        sigma,
        horizon,
        p: 2.0,
    };
    json(&growth_critical_time(&spec, &times, &DEFAULT_TRUNCATIONS).map_err(to_py)?)
}

#[pymodule]
fn mf_fbsde(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(list_families, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(scenario_hash, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(study, m)?)?;
    m.add_function(wrap_pyfunction!(critical_time, m)?)?;
    Ok(())
}
