//! Python bindings. Structured results (sweep rows, simulation output,
//! validity reports) cross the boundary as plain dicts and lists.

use fedldp::accountants::{self, CalibrationRequest, Method, DEFAULT_DELTA_TILDE};
use fedldp::fedsgd_sim::SimConfig;
use fedldp::privacy_core::{self, MechanismParams, PrivacyBudget};
use fedldp::tradeoff::{self, LossRegularity, SweepConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;

fn to_py_err(e: fedldp::Error) -> PyErr {
    PyValueError::new_err(format!("{}: {e}", e.kind()))
}

fn to_python<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_method(method: &str) -> PyResult<Method> {
    method.parse().map_err(PyValueError::new_err)
}

fn regularity(dim: u64, mu: f64, lambda: f64, grad_bound: f64, clip: f64) -> PyResult<LossRegularity> {
    LossRegularity::new(mu, lambda, grad_bound, clip, dim).map_err(to_py_err)
}

/// Calibrated noise for one accountant.
#[pyclass(frozen, get_all, skip_from_py_object, module = "fedldp")]
#[derive(Clone)]
pub struct Calibration {
    pub method: String,
    pub sigma_sq: f64,
    pub sigma: f64,
    pub q_ok: bool,
    pub sigma_ok: bool,
    pub epsilon_ok: bool,
    pub valid: bool,
    /// Per-round ε₀ (AC1 only).
    pub epsilon0: Option<f64>,
    /// Per-round δ₀ (AC1 only).
    pub delta0: Option<f64>,
}

#[pymethods]
impl Calibration {
    fn __repr__(&self) -> String {
        format!(
            "Calibration(method='{}', sigma_sq={}, valid={})",
            self.method,
            self.sigma_sq,
            if self.valid { "True" } else { "False" }
        )
    }
}

/// Per-user noise variance for `method` in {"proposed", "ma", "ac1", "ac2"}.
#[pyfunction]
#[pyo3(signature = (method, epsilon, delta, q, rounds, delta_tilde = DEFAULT_DELTA_TILDE))]
fn calibrate(method: &str, epsilon: f64, delta: f64, q: f64, rounds: u64, delta_tilde: f64) -> PyResult<Calibration> {
    let budget = PrivacyBudget::new(epsilon, delta).map_err(to_py_err)?;
    let req = CalibrationRequest::new(parse_method(method)?, budget, q, rounds)
        .map_err(to_py_err)?
        .with_delta_tilde(delta_tilde);
    let res = accountants::calibrate(&req).map_err(to_py_err)?;
    Ok(Calibration {
        method: res.method.to_string(),
        sigma_sq: res.sigma_sq,
        sigma: res.sigma(),
        q_ok: res.validity.q_ok,
        sigma_ok: res.validity.sigma_ok,
        epsilon_ok: res.validity.epsilon_ok,
        valid: res.validity.overall,
        epsilon0: res.per_round.map(|p| p.epsilon0),
        delta0: res.per_round.map(|p| p.delta0),
    })
}

/// Per-round RDP cost `γ(α)` of the subsampled Gaussian.
#[pyfunction]
fn rdp_cost(q: f64, sigma: f64, alpha: f64) -> PyResult<f64> {
    privacy_core::rdp_cost_subsampled_gaussian(q, sigma, alpha)
        .map(|c| c.gamma)
        .map_err(to_py_err)
}

/// `(ε, δ)` conversion of a total RDP cost `gamma` at order `alpha`.
#[pyfunction]
fn rdp_to_dp(alpha: f64, gamma: f64, delta: f64) -> PyResult<f64> {
    let cost = privacy_core::RdpCost::new(alpha, gamma).map_err(to_py_err)?;
    privacy_core::rdp_to_dp(cost, delta).map_err(to_py_err)
}

/// ε spent after `rounds` rounds at noise multiplier `sigma`.
#[pyfunction]
fn epsilon_from_noise(q: f64, sigma: f64, rounds: u64, delta: f64) -> PyResult<f64> {
    let params = MechanismParams::new(q, sigma, 1.0, rounds).map_err(to_py_err)?;
    accountants::epsilon_from_noise(&params, delta).map_err(to_py_err)
}

/// Validity flags as a dict with keys q_ok, sigma_ok, epsilon_ok, overall.
#[pyfunction]
fn check_validity<'py>(py: Python<'py>, q: f64, sigma: f64, epsilon: f64, delta: f64) -> PyResult<Bound<'py, PyAny>> {
    let params = MechanismParams::new(q, sigma, 1.0, 1).map_err(to_py_err)?;
    let budget = PrivacyBudget::new(epsilon, delta).map_err(to_py_err)?;
    to_python(py, &privacy_core::check_validity(&params, &budget))
}

/// Aggregated `σ²` for users with the given dataset sizes, sampling rates and
/// noise multipliers.
#[pyfunction]
fn aggregate_sigma(dataset_sizes: Vec<f64>, q: Vec<f64>, sigma: Vec<f64>) -> PyResult<f64> {
    if dataset_sizes.len() != q.len() || q.len() != sigma.len() {
        return Err(PyValueError::new_err("dataset_sizes, q and sigma must have equal length"));
    }
    if dataset_sizes.is_empty() {
        return Err(PyValueError::new_err("empty_input: user list"));
    }
    Ok(tradeoff::aggregate_noise(
        dataset_sizes.into_iter().zip(q).zip(sigma).map(|((n, q), s)| (n, q, s)),
    ))
}

#[pyfunction]
#[pyo3(signature = (rounds, sigma_agg_sq, dim = 10_000, mu = 1.0, lambda_ = 1.0, grad_bound = 5.0, clip = 1.0))]
fn utility_lower_bound(
    rounds: u64,
    sigma_agg_sq: f64,
    dim: u64,
    mu: f64,
    lambda_: f64,
    grad_bound: f64,
    clip: f64,
) -> PyResult<f64> {
    let reg = regularity(dim, mu, lambda_, grad_bound, clip)?;
    Ok(tradeoff::utility_lower_bound(rounds, &reg, sigma_agg_sq))
}

/// Rate bound in bits per gradient vector.
#[pyfunction]
#[pyo3(signature = (sigma_k, dim = 10_000, clip = 1.0))]
fn rate_upper_bound(sigma_k: f64, dim: u64, clip: f64) -> PyResult<f64> {
    let reg = regularity(dim, 1.0, 1.0, clip, clip)?;
    Ok(tradeoff::rate_upper_bound(&reg, sigma_k))
}

#[pyfunction]
#[pyo3(signature = (q, rounds, users, dim = 10_000, mu = 1.0, lambda_ = 1.0, grad_bound = 5.0, clip = 1.0))]
#[allow(clippy::too_many_arguments)]
fn validity_caps<'py>(
    py: Python<'py>,
    q: f64,
    rounds: u64,
    users: usize,
    dim: u64,
    mu: f64,
    lambda_: f64,
    grad_bound: f64,
    clip: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let reg = regularity(dim, mu, lambda_, grad_bound, clip)?;
    to_python(py, &tradeoff::validity_caps(q, rounds, &reg, users))
}

/// Sweep rows as dicts. Defaults reproduce the reference study.
#[pyfunction]
#[pyo3(signature = (epsilons = None, rounds = None, methods = None, delta = 1e-4, q = 1e-3, users = 100))]
fn sweep<'py>(
    py: Python<'py>,
    epsilons: Option<Vec<f64>>,
    rounds: Option<Vec<u64>>,
    methods: Option<Vec<String>>,
    delta: f64,
    q: f64,
    users: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = SweepConfig::reference();
    if let Some(e) = epsilons {
        cfg.epsilons = e;
    }
    if let Some(t) = rounds {
        cfg.rounds = t;
    }
    if let Some(m) = methods {
        cfg.methods = m.iter().map(|s| parse_method(s)).collect::<PyResult<_>>()?;
    }
    cfg.delta = delta;
    cfg.q = q;
    cfg.users = users;
    let rows = py.detach(|| tradeoff::sweep(&cfg)).map_err(to_py_err)?;
    to_python(py, &rows)
}

/// Runs the simulator from a config dict (same schema as the CLI's JSON
/// config) and returns the result as a dict.
#[pyfunction]
fn simulate<'py>(py: Python<'py>, config: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let text: String = py.import("json")?.call_method1("dumps", (config,))?.extract()?;
    let cfg: SimConfig =
        serde_json::from_str(&text).map_err(|e| PyValueError::new_err(format!("invalid_config: {e}")))?;
    let result = py.detach(|| fedldp::run_simulation(&cfg)).map_err(to_py_err)?;
    to_python(py, &result)
}

#[pymodule]
#[pyo3(name = "fedldp")]
fn fedldp_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Calibration>()?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(rdp_cost, m)?)?;
    m.add_function(wrap_pyfunction!(rdp_to_dp, m)?)?;
    m.add_function(wrap_pyfunction!(epsilon_from_noise, m)?)?;
    m.add_function(wrap_pyfunction!(check_validity, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(utility_lower_bound, m)?)?;
    m.add_function(wrap_pyfunction!(rate_upper_bound, m)?)?;
    m.add_function(wrap_pyfunction!(validity_caps, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
