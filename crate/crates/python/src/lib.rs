//! Python bindings for the `buot` crate.
//!
//! Matrices cross the boundary as lists of rows (`list[list[float]]`).

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use buot::bilevel::{self, BilevelConfig, Contraction, CostKind, PredictionMatrix};
use buot::config;
use buot::ot::{self, CostMatrix, Histogram, TransportPlan};
use buot::recovery::{self, IndicatorMatrix};
use buot::sim;

type Rows = Vec<Vec<f64>>;

fn to_py(err: buot::Error) -> PyErr {
    match err {
        buot::Error::Numerical(_) | buot::Error::Infeasible(_) | buot::Error::Io(_) => PyRuntimeError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

fn matrix(rows: Rows) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("matrix rows must all have the same length"));
    }
    Array2::from_shape_vec((n, m), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(a: &Array2<f64>) -> Rows {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn cost_kind(name: &str) -> PyResult<CostKind> {
    match name {
        "label_aware" => Ok(CostKind::LabelAware),
        "squared_euclidean" => Ok(CostKind::SquaredEuclidean),
        _ => Err(PyValueError::new_err(format!("unknown cost {name:?}"))),
    }
}

fn contraction(name: &str) -> PyResult<Contraction> {
    match name {
        "samples" => Ok(Contraction::Samples),
        "classes" => Ok(Contraction::Classes),
        _ => Err(PyValueError::new_err(format!("contraction must be 'samples' or 'classes', got {name:?}"))),
    }
}

/// Balanced entropic transport; returns `(plan, converged)`.
#[pyfunction]
#[pyo3(signature = (mu, nu, cost, epsilon, max_iter=1000, tol=1e-9))]
fn sinkhorn_balanced(mu: Vec<f64>, nu: Vec<f64>, cost: Rows, epsilon: f64, max_iter: usize, tol: f64) -> PyResult<(Rows, bool)> {
    let out = ot::sinkhorn_balanced(
        &Histogram::new(mu).map_err(to_py)?,
        &Histogram::new(nu).map_err(to_py)?,
        &CostMatrix::new(matrix(cost)?).map_err(to_py)?,
        epsilon,
        max_iter,
        tol,
    )
    .map_err(to_py)?;
    Ok((rows(out.plan.values()), out.converged))
}

/// Unbalanced entropic transport with KL marginal penalty `beta`; returns `(plan, converged)`.
#[pyfunction]
#[pyo3(signature = (mu, nu, cost, epsilon, beta, max_iter=1000, tol=1e-9))]
fn scaling_uot(mu: Vec<f64>, nu: Vec<f64>, cost: Rows, epsilon: f64, beta: f64, max_iter: usize, tol: f64) -> PyResult<(Rows, bool)> {
    let out = ot::scaling_uot(
        &Histogram::new(mu).map_err(to_py)?,
        &Histogram::new(nu).map_err(to_py)?,
        &CostMatrix::new(matrix(cost)?).map_err(to_py)?,
        epsilon,
        beta,
        max_iter,
        tol,
    )
    .map_err(to_py)?;
    Ok((rows(out.plan.values()), out.converged))
}

#[pyfunction]
fn label_aware_cost(a: f64, b: f64, same_class: bool) -> PyResult<f64> {
    bilevel::label_aware_cost(a, b, same_class).map_err(to_py)
}

/// Contracts the prediction cost tensor against `plan` over `"samples"` or `"classes"`.
#[pyfunction]
#[pyo3(signature = (ps, pt, plan, over, cost="label_aware", oracle=false))]
fn contract(ps: Rows, pt: Rows, plan: Rows, over: &str, cost: &str, oracle: bool) -> PyResult<Rows> {
    let ps = PredictionMatrix::source(matrix(ps)?).map_err(to_py)?;
    let pt = PredictionMatrix::target(matrix(pt)?).map_err(to_py)?;
    let plan = TransportPlan::new(matrix(plan)?).map_err(to_py)?;
    let (kind, over) = (cost_kind(cost)?, contraction(over)?);
    let out = if oracle {
        bilevel::contract_oracle_with(kind, &ps, &pt, &plan, over)
    } else {
        bilevel::contract_fast_with(kind, &ps, &pt, &plan, over)
    }
    .map_err(to_py)?;
    Ok(rows(out.values()))
}

/// Result of the alternating bi-level solve.
#[pyclass(name = "BilevelSolution", frozen, get_all)]
struct PyBilevelSolution {
    gamma1: Rows,
    gamma2: Rows,
    objective_trace: Vec<f64>,
    converged: bool,
}

#[pyfunction]
#[pyo3(signature = (ps, pt, lambda1=0.05, lambda2=0.05, beta1=1.0, beta2=1.0, t_uot=5, cost="label_aware"))]
#[allow(clippy::too_many_arguments)]
fn solve_bilevel(
    ps: Rows,
    pt: Rows,
    lambda1: f64,
    lambda2: f64,
    beta1: f64,
    beta2: f64,
    t_uot: usize,
    cost: &str,
) -> PyResult<PyBilevelSolution> {
    let cfg = BilevelConfig {
        lambda1,
        lambda2,
        beta1,
        beta2,
        t_uot,
        cost: cost_kind(cost)?,
        ..Default::default()
    };
    let ps = PredictionMatrix::source(matrix(ps)?).map_err(to_py)?;
    let pt = PredictionMatrix::target(matrix(pt)?).map_err(to_py)?;
    let sol = bilevel::solve_bilevel(&ps, &pt, &cfg).map_err(to_py)?;
    Ok(PyBilevelSolution {
        gamma1: rows(sol.gamma1.values()),
        gamma2: rows(sol.gamma2.values()),
        objective_trace: sol.objective_trace,
        converged: sol.converged,
    })
}

/// Recovered plans and class weights from a solved pair of plans and label assignments.
///
/// Returns `(gamma1_recovered, gamma2_recovered, omega)`.
#[pyfunction]
fn recover(gamma1: Rows, gamma2: Rows, source_labels: Vec<usize>, target_labels: Vec<usize>) -> PyResult<(Rows, Rows, Vec<f64>)> {
    let g1 = TransportPlan::new(matrix(gamma1)?).map_err(to_py)?;
    let g2 = TransportPlan::new(matrix(gamma2)?).map_err(to_py)?;
    let k = g2.shape().0;
    let s = IndicatorMatrix::from_labels(&source_labels, k).map_err(to_py)?;
    let t = IndicatorMatrix::from_labels(&target_labels, k).map_err(to_py)?;
    let g1r = recovery::recover_sample_plan(&g1, &g2, &s, &t).map_err(to_py)?;
    let g2r = recovery::recover_class_plan(&g1, &g2, &s, &t).map_err(to_py)?;
    let omega = recovery::bilevel_weights(&g2r).omega().to_vec();
    Ok((rows(g1r.values()), rows(g2r.values()), omega))
}

/// Experiment configuration in its text form.
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: config::BuotConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text=""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: config::BuotConfig::parse(text).map_err(to_py)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(k_source={}, k_target={}, lambda={}, t_max={})",
            self.inner.task.k_source, self.inner.task.k_target, self.inner.training.lambda, self.inner.training.t_max
        )
    }
}

/// Synthetic task as plain lists.
#[pyfunction]
#[pyo3(signature = (k_source=6, k_target=3, n_s=300, n_t=150, d=8, shift_scale=1.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn generate_task<'py>(
    py: Python<'py>,
    k_source: usize,
    k_target: usize,
    n_s: usize,
    n_t: usize,
    d: usize,
    shift_scale: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let params = sim::TaskParams {
        k_source,
        k_target,
        n_s,
        n_t,
        d,
        shift_scale,
        seed,
    };
    let task = sim::generate_task(&params).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("source_x", rows(&task.source_x))?;
    out.set_item("source_y", task.source_y)?;
    out.set_item("target_x", rows(&task.target_x))?;
    out.set_item("target_y", task.target_y)?;
    out.set_item("shift", task.shift.to_vec())?;
    Ok(out)
}

/// Summary of one training run.
#[pyclass(name = "TrainResult", frozen, get_all)]
struct PyTrainResult {
    final_acc_s: f64,
    final_acc_t: f64,
    omega: Vec<f64>,
    outlier_weight: f64,
    /// `(iter, acc_s, acc_t, total_loss)` per logged iteration.
    records: Vec<(usize, f64, f64, f64)>,
    buot_trace: Vec<(usize, f64)>,
}

/// Generates the configured task and trains on it.
#[pyfunction]
#[pyo3(signature = (config, source_only=false))]
fn train(py: Python<'_>, config: &PyConfig, source_only: bool) -> PyResult<PyTrainResult> {
    let mut experiment = config.inner.experiment_template();
    if source_only {
        experiment = experiment.source_only();
    }
    let outcome = py.detach(|| experiment.run()).map_err(to_py)?;
    let report = &outcome.report;
    Ok(PyTrainResult {
        final_acc_s: report.final_acc_s,
        final_acc_t: report.final_acc_t,
        omega: report.final_weights.omega().to_vec(),
        outlier_weight: sim::outlier_weight(&outcome.task, &report.final_weights),
        records: report
            .records
            .iter()
            .map(|r| (r.iter, r.acc_s, r.acc_t, r.losses.total))
            .collect(),
        buot_trace: report.buot_trace.clone(),
    })
}

#[pyfunction]
fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

#[pymodule]
fn buot_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(sinkhorn_balanced, m)?)?;
    m.add_function(wrap_pyfunction!(scaling_uot, m)?)?;
    m.add_function(wrap_pyfunction!(label_aware_cost, m)?)?;
    m.add_function(wrap_pyfunction!(contract, m)?)?;
    m.add_function(wrap_pyfunction!(solve_bilevel, m)?)?;
    m.add_function(wrap_pyfunction!(recover, m)?)?;
    m.add_function(wrap_pyfunction!(generate_task, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(version, m)?)?;
    m.add_class::<PyBilevelSolution>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTrainResult>()?;
    Ok(())
}
