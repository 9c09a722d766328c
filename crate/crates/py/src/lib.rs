//! Python bindings for `webster_flow`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use webster_flow::cli::checks::{run_checks, CheckOptions};
use webster_flow::cli::commands::diagnostics_csv;
use webster_flow::cli::config::RunConfig;
use webster_flow::flow;
use webster_flow::inversion::{self, HeisenbergPoint};
use webster_flow::manifold::{build_geometry, GeometrySpec, ScalarField};
use webster_flow::operators;
use webster_flow::FlowError;

fn err(e: FlowError) -> PyErr {
    match e {
        FlowError::Io { .. } | FlowError::SolverDiverged { .. } | FlowError::NotConstant { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn field(geometry_json: &str, values: Vec<f64>) -> PyResult<ScalarField> {
    let spec: GeometrySpec =
        serde_json::from_str(geometry_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let g = build_geometry(&spec).map_err(err)?;
    ScalarField::new(g, values).map_err(err)
}

/// `I(t, x + iy)` as `(t', x', y')`.
#[pyfunction]
fn invert(t: f64, x: f64, y: f64) -> PyResult<(f64, f64, f64)> {
    let q = inversion::invert(&HeisenbergPoint::new(t, x, y)).map_err(err)?;
    Ok((q.t, q.x, q.y))
}

/// JSON record with the image, `|w|` before and after, pullback residual and
/// jacobian determinant.
#[pyfunction]
fn inversion_record(t: f64, x: f64, y: f64) -> PyResult<String> {
    let rec = inversion::inversion_record(&HeisenbergPoint::new(t, x, y)).map_err(err)?;
    serde_json::to_string(&rec).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pyfunction]
fn sphere_background_curvature() -> PyResult<f64> {
    operators::sphere_background_curvature().map_err(err)
}

/// Energy of `λ` given as a flat list on the geometry described by JSON.
#[pyfunction]
fn energy(geometry_json: &str, lam: Vec<f64>) -> PyResult<f64> {
    flow::energy(&field(geometry_json, lam)?).map_err(err)
}

#[pyfunction]
fn volume(geometry_json: &str, lam: Vec<f64>) -> PyResult<f64> {
    flow::volume(&field(geometry_json, lam)?).map_err(err)
}

#[pyfunction]
fn webster_curvature(geometry_json: &str, lam: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(operators::webster_curvature(&field(geometry_json, lam)?)
        .map_err(err)?
        .into_values())
}

/// Runs a config given as JSON; returns `(outcome, diagnostics_csv, final λ)`.
/// Nothing is written to disk.
#[pyfunction]
fn run(py: Python<'_>, config_json: &str) -> PyResult<(String, String, Vec<f64>)> {
    let cfg = RunConfig::from_json(config_json).map_err(err)?;
    let resolved = cfg.resolve().map_err(err)?;
    let traj = py
        .detach(|| flow::run(resolved.initial, &resolved.params))
        .map_err(err)?;
    Ok((
        traj.outcome.label().to_string(),
        diagnostics_csv(&traj.diagnostics),
        traj.final_state.lambda.into_values(),
    ))
}

/// The invariant suite as `(suite, property, passed, detail)` rows.
#[pyfunction]
#[pyo3(signature = (only=None))]
fn check(only: Option<Vec<String>>) -> Vec<(String, String, bool, String)> {
    run_checks(&only.unwrap_or_default(), CheckOptions::default())
        .into_iter()
        .map(|r| (r.suite.to_string(), r.property.to_string(), r.passed, r.detail))
        .collect()
}

#[pymodule]
fn webster_flow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(invert, m)?)?;
    m.add_function(wrap_pyfunction!(inversion_record, m)?)?;
    m.add_function(wrap_pyfunction!(sphere_background_curvature, m)?)?;
    m.add_function(wrap_pyfunction!(energy, m)?)?;
    m.add_function(wrap_pyfunction!(volume, m)?)?;
    m.add_function(wrap_pyfunction!(webster_curvature, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    Ok(())
}
