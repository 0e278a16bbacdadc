//! Python bindings for `tightci`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tightci::design::{self, Assignment, MbcrDetail, MbcrLayout, Scheme};
use tightci::estimator::{self, ObservedData};
use tightci::harness::{self, ExperimentConfig};
use tightci::interval::{self, IntervalOptions, LambdaRule, Method, ScaleRule};
use tightci::rng::seeded;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_lambda_rule(text: &str) -> PyResult<LambdaRule> {
    match text {
        "appendix" => Ok(LambdaRule::Appendix),
        "main-text" => Ok(LambdaRule::MainText),
        other => Err(PyValueError::new_err(format!(
            "unknown lambda rule '{other}' (appendix, main-text)"
        ))),
    }
}

fn parse_scale_rule(text: &str) -> PyResult<ScaleRule> {
    match text {
        "corrected" => Ok(ScaleRule::Corrected),
        "literal" => Ok(ScaleRule::Literal),
        other => Err(PyValueError::new_err(format!(
            "unknown scale rule '{other}' (corrected, literal)"
        ))),
    }
}

/// Batching arithmetic of mini-batch complete randomization.
#[pyclass(name = "Layout", frozen, skip_from_py_object)]
struct PyLayout {
    inner: MbcrLayout,
}

#[pymethods]
impl PyLayout {
    #[new]
    fn new(n: usize, n1: usize) -> PyResult<Self> {
        design::compute_layout(n, n1)
            .map(|inner| PyLayout { inner })
            .map_err(value_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn n1(&self) -> usize {
        self.inner.n1()
    }

    #[getter]
    fn group_size(&self) -> usize {
        self.inner.group_size()
    }

    #[getter]
    fn full_groups(&self) -> usize {
        self.inner.full_groups()
    }

    #[getter]
    fn final_size(&self) -> usize {
        self.inner.final_size()
    }

    #[getter]
    fn final_treated(&self) -> usize {
        self.inner.final_treated()
    }

    #[getter]
    fn is_exact(&self) -> bool {
        self.inner.is_exact()
    }

    /// Draws one assignment; returns `(z, beta, eta)` with 0-based permutations.
    fn draw(&self, seed: u64) -> (Vec<bool>, Vec<usize>, Vec<usize>) {
        let a = design::draw_mbcr(&self.inner, &mut seeded(seed));
        let d = a.mbcr_detail().expect("mini-batch draw");
        (a.z().to_vec(), d.beta().to_vec(), d.eta().to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "Layout(n={}, n1={}, G={}, T={}, final_size={}, final_treated={})",
            self.inner.n(),
            self.inner.n1(),
            self.inner.group_size(),
            self.inner.full_groups(),
            self.inner.final_size(),
            self.inner.final_treated()
        )
    }
}

/// A confidence interval together with the constants that produced it.
#[pyclass(name = "Interval", frozen, skip_from_py_object)]
struct PyInterval {
    inner: interval::Interval,
}

#[pymethods]
impl PyInterval {
    #[getter]
    fn lower(&self) -> f64 {
        self.inner.lower
    }

    #[getter]
    fn upper(&self) -> f64 {
        self.inner.upper
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.inner.method.as_str()
    }

    #[getter]
    fn half_width(&self) -> f64 {
        self.inner.half_width()
    }

    #[getter]
    fn center(&self) -> f64 {
        self.inner.center()
    }

    fn contains(&self, value: f64) -> bool {
        self.inner.contains(value)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// Rebuilds an interval from `to_json` output, recomputing the endpoints
    /// from the stored tuning constants.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let parsed: interval::Interval = serde_json::from_str(text).map_err(value_err)?;
        Ok(PyInterval {
            inner: parsed.reevaluate(),
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Interval({}, [{}, {}], alpha={})",
            self.inner.method, self.inner.lower, self.inner.upper, self.inner.alpha
        )
    }
}

fn build_assignment(
    z: Vec<bool>,
    scheme: Scheme,
    pi: Option<f64>,
    beta: Option<Vec<usize>>,
    eta: Option<Vec<usize>>,
    seed: Option<u64>,
) -> PyResult<Assignment> {
    match scheme {
        Scheme::Bernoulli => {
            let pi = pi.ok_or_else(|| PyValueError::new_err("bernoulli data needs pi"))?;
            Assignment::bernoulli(z, pi).map_err(value_err)
        }
        Scheme::Complete => Assignment::complete(z).map_err(value_err),
        Scheme::Mbcr => {
            let n1 = z.iter().filter(|&&b| b).count();
            let layout = design::compute_layout(z.len(), n1).map_err(value_err)?;
            let detail = match (beta, eta, seed) {
                (Some(b), Some(e), None) => MbcrDetail::new(layout, b, e).map_err(value_err)?,
                (None, None, Some(s)) => design::draw_mbcr(&layout, &mut seeded(s))
                    .mbcr_detail()
                    .expect("mini-batch draw")
                    .clone(),
                _ => {
                    return Err(PyValueError::new_err(
                        "mbcr data needs either both beta and eta, or a seed, but not both",
                    ))
                }
            };
            Assignment::mbcr_with_observed(detail, &z).map_err(value_err)
        }
    }
}

/// Confidence interval for the average treatment effect from observed data.
///
/// `alpha` is the total miscoverage. The Studentized interval spends
/// `alpha / 2` on each side.
#[pyfunction]
#[pyo3(signature = (y, z, scheme, method, alpha=0.05, pi=None, beta=None, eta=None, seed=None, clip=false, lambda_rule="appendix", scale_rule="corrected"))]
#[allow(clippy::too_many_arguments)]
fn ci(
    y: Vec<f64>,
    z: Vec<bool>,
    scheme: &str,
    method: &str,
    alpha: f64,
    pi: Option<f64>,
    beta: Option<Vec<usize>>,
    eta: Option<Vec<usize>>,
    seed: Option<u64>,
    clip: bool,
    lambda_rule: &str,
    scale_rule: &str,
) -> PyResult<PyInterval> {
    let scheme: Scheme = scheme.parse().map_err(value_err)?;
    let method: Method = method.parse().map_err(value_err)?;
    let options = IntervalOptions {
        lambda_rule: parse_lambda_rule(lambda_rule)?,
        scale_rule: parse_scale_rule(scale_rule)?,
        clip,
    };
    let assignment = build_assignment(z, scheme, pi, beta, eta, seed)?;
    let data = ObservedData::new(y, assignment).map_err(value_err)?;
    let level = if method == Method::Studentized {
        alpha / 2.0
    } else {
        alpha
    };
    interval::interval_for(method, &data, level, options)
        .map(|inner| PyInterval { inner })
        .map_err(value_err)
}

/// Closed-form Hoeffding interval for mini-batch data with `n1 | n`.
#[pyfunction]
#[pyo3(signature = (psi_hat, n, n1, alpha=0.05))]
fn hoeff_mbcr_ci(psi_hat: f64, n: usize, n1: usize, alpha: f64) -> PyResult<PyInterval> {
    let layout = design::compute_layout(n, n1).map_err(value_err)?;
    interval::hoeff_mbcr_ci(psi_hat, &layout, alpha)
        .map(|inner| PyInterval { inner })
        .map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (psi_hat, n, pi, alpha=0.05))]
fn sub_bernoulli_bern_ci(psi_hat: f64, n: usize, pi: f64, alpha: f64) -> PyResult<PyInterval> {
    interval::sub_bernoulli_bern_ci(psi_hat, n, pi, alpha)
        .map(|inner| PyInterval { inner })
        .map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (psi_hat, n, n1, alpha=0.05, lambda_rule="appendix"))]
fn sub_bernoulli_mbcr_ci(
    psi_hat: f64,
    n: usize,
    n1: usize,
    alpha: f64,
    lambda_rule: &str,
) -> PyResult<PyInterval> {
    let layout = design::compute_layout(n, n1).map_err(value_err)?;
    interval::sub_bernoulli_mbcr_ci(psi_hat, &layout, alpha, parse_lambda_rule(lambda_rule)?)
        .map(|inner| PyInterval { inner })
        .map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (psi_hat, n, pi, alpha=0.05))]
fn naive_hoeffding_ci(psi_hat: f64, n: usize, pi: f64, alpha: f64) -> PyResult<PyInterval> {
    interval::naive_hoeffding_ci(psi_hat, n, pi, alpha)
        .map(|inner| PyInterval { inner })
        .map_err(value_err)
}

/// Sub-Bernoulli cumulant generating function on `[a, b]`.
#[pyfunction]
fn gamma_b(lam: f64, a: f64, b: f64) -> PyResult<f64> {
    interval::gamma_b(lam, a, b).map_err(value_err)
}

/// Sub-exponential cumulant generating function with scale `c`.
#[pyfunction]
fn gamma_e(lam: f64, c: f64) -> PyResult<f64> {
    interval::gamma_e(lam, c).map_err(value_err)
}

/// Horvitz-Thompson estimate. Mini-batch data uses group propensities.
#[pyfunction]
#[pyo3(signature = (y, z, scheme, pi=None, beta=None, eta=None, seed=None))]
fn estimate(
    y: Vec<f64>,
    z: Vec<bool>,
    scheme: &str,
    pi: Option<f64>,
    beta: Option<Vec<usize>>,
    eta: Option<Vec<usize>>,
    seed: Option<u64>,
) -> PyResult<f64> {
    let scheme: Scheme = scheme.parse().map_err(value_err)?;
    let assignment = build_assignment(z, scheme, pi, beta, eta, seed)?;
    let prop = assignment.pi();
    let data = ObservedData::new(y, assignment).map_err(value_err)?;
    match scheme {
        Scheme::Mbcr => estimator::ht_mbcr(&data),
        _ => estimator::ht_standard(&data, prop),
    }
    .map_err(value_err)
}

/// Exact law of the mini-batch assignment: `[(bits, count, total), ...]`.
#[pyfunction]
#[pyo3(signature = (n, n1, budget=design::DEFAULT_ENUMERATION_BUDGET))]
fn enumerate_assignments(
    py: Python<'_>,
    n: usize,
    n1: usize,
    budget: u128,
) -> PyResult<Vec<(String, u64, u64)>> {
    let layout = design::compute_layout(n, n1).map_err(value_err)?;
    let dist = py
        .detach(|| design::enumerate_mbcr_distribution(&layout, budget))
        .map_err(value_err)?;
    Ok(dist
        .rows()
        .map(|(z, c)| {
            (
                z.iter().map(|&b| if b { '1' } else { '0' }).collect(),
                c,
                dist.total(),
            )
        })
        .collect())
}

/// Runs an experiment from its JSON configuration and returns the CSV text.
#[pyfunction]
#[pyo3(signature = (config_json, workers=1))]
fn run_experiment(py: Python<'_>, config_json: &str, workers: usize) -> PyResult<String> {
    let config = ExperimentConfig::from_json(config_json).map_err(value_err)?;
    let report = py
        .detach(|| harness::run(&config, workers.max(1)))
        .map_err(|e| match e {
            harness::HarnessError::Config(_) => value_err(e),
            harness::HarnessError::Runtime(_) => PyRuntimeError::new_err(e.to_string()),
        })?;
    let bytes = report
        .to_csv()
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
#[pyo3(name = "tightci")]
fn tightci_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("SCHEMA_VERSION", tightci::SCHEMA_VERSION)?;
    m.add_class::<PyLayout>()?;
    m.add_class::<PyInterval>()?;
    m.add_function(wrap_pyfunction!(ci, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(hoeff_mbcr_ci, m)?)?;
    m.add_function(wrap_pyfunction!(sub_bernoulli_bern_ci, m)?)?;
    m.add_function(wrap_pyfunction!(sub_bernoulli_mbcr_ci, m)?)?;
    m.add_function(wrap_pyfunction!(naive_hoeffding_ci, m)?)?;
    m.add_function(wrap_pyfunction!(gamma_b, m)?)?;
    m.add_function(wrap_pyfunction!(gamma_e, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate_assignments, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
