//! Python bindings for the CVaR, Riccati, QP and Monte-Carlo entry points.

use drmpc::config::RunConfig;
use drmpc::disturbance::generate_dataset;
use drmpc::dr_cvar::{cvar_and_var, evaluate_dr_cvar_margin, AmbiguityConfig, HalfspaceChanceConstraint, QNorm};
use drmpc::harness::monte_carlo;
use drmpc::qp::{solve_qp, QpSettings, QpStandardForm};
use drmpc::tube::solve_dare;
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: drmpc::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>], cols: usize) -> PyResult<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!("every row must have {cols} entries")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn square(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    matrix(rows, rows.len())
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn q_norm(name: &str) -> PyResult<QNorm> {
    match name {
        "1" => Ok(QNorm::One),
        "2" => Ok(QNorm::Two),
        "inf" => Ok(QNorm::Inf),
        _ => Err(PyValueError::new_err(format!("q_norm must be \"1\", \"2\" or \"inf\", got {name:?}"))),
    }
}

/// Empirical CVaR and VaR at tail mass `alpha`.
#[pyfunction]
fn cvar(losses: Vec<f64>, alpha: f64) -> PyResult<(f64, f64)> {
    if losses.is_empty() || !(alpha > 0.0 && alpha <= 1.0) {
        return Err(PyValueError::new_err("need at least one loss and alpha in (0, 1]"));
    }
    Ok(cvar_and_var(&losses, alpha))
}

/// Worst-case CVaR margin of `h'x <= b` at nominal state `z`; `<= 0` means satisfied.
#[pyfunction]
#[pyo3(signature = (h, b, alpha, errors, z, epsilon, q_norm_name = "1"))]
fn dr_cvar_margin(h: Vec<f64>, b: f64, alpha: f64, errors: Vec<Vec<f64>>, z: Vec<f64>, epsilon: f64, q_norm_name: &str) -> PyResult<f64> {
    let n = h.len();
    let c = HalfspaceChanceConstraint::with_alpha(DVector::from_vec(h), b, 1.0 - alpha, alpha).map_err(err)?;
    let amb = AmbiguityConfig::new(epsilon, q_norm(q_norm_name)?).map_err(err)?;
    if z.len() != n {
        return Err(PyValueError::new_err(format!("z has {} entries, h has {n}", z.len())));
    }
    Ok(evaluate_dr_cvar_margin(&c, &amb, &matrix(&errors, n)?, &DVector::from_vec(z)))
}

/// Riccati solution `(P, K)` with `u = K x`.
#[pyfunction]
fn dare(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, q: Vec<Vec<f64>>, r: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let a = square(&a)?;
    let m = b.first().map_or(0, |row| row.len());
    let b = matrix(&b, m)?;
    let (p, k) = solve_dare(&a, &b, &square(&q)?, &square(&r)?, 1e-12, 100_000).map_err(err)?;
    Ok((to_rows(&p), to_rows(&k)))
}

/// `min 1/2 x'Px + q'x  s.t.  G x <= h`; returns `(x, status, objective)`.
#[pyfunction]
fn solve_ineq_qp(p: Vec<Vec<f64>>, q: Vec<f64>, g: Vec<Vec<f64>>, h: Vec<f64>) -> PyResult<(Vec<f64>, String, f64)> {
    let d = q.len();
    let prob = QpStandardForm::dense(
        &matrix(&p, d)?,
        &DVector::from_vec(q),
        &DMatrix::zeros(0, d),
        &DVector::zeros(0),
        &matrix(&g, d)?,
        &DVector::from_vec(h),
    )
    .map_err(err)?;
    let sol = solve_qp(&prob, &QpSettings::default());
    Ok((sol.x, format!("{:?}", sol.status), sol.objective))
}

/// Default run configuration as JSON.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_json()
}

/// Generates the dataset and runs the Monte-Carlo loop; returns the summary as JSON.
#[pyfunction]
#[pyo3(signature = (config_json, runs = None))]
fn run_monte_carlo(py: Python<'_>, config_json: &str, runs: Option<usize>) -> PyResult<String> {
    let mut cfg = RunConfig::from_json(config_json).map_err(err)?;
    if let Some(r) = runs {
        cfg.sim.runs = r;
    }
    cfg.validate().map_err(err)?;
    let summary = py
        .detach(|| {
            let d = &cfg.disturbance;
            let ds = generate_dataset(&d.kernel, d.n_dims, d.trajectories, cfg.dataset_horizon(), d.seed)?;
            let exp = cfg.build_experiment()?;
            monte_carlo(&exp, &ds, cfg.sim.runs, cfg.sim.seed, cfg.threads()).map(|(_, s)| s)
        })
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    serde_json::to_string(&summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn drmpc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(cvar, m)?)?;
    m.add_function(wrap_pyfunction!(dr_cvar_margin, m)?)?;
    m.add_function(wrap_pyfunction!(dare, m)?)?;
    m.add_function(wrap_pyfunction!(solve_ineq_qp, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_monte_carlo, m)?)?;
    Ok(())
}
