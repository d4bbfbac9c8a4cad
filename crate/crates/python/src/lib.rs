//! Python bindings for `cnoise`. Structured results come back as plain
//! dicts and lists built from the JSON forms of the Rust reports.

use cnoise::cli::{run_experiment, ExperimentSpec};
use cnoise::densities::{CosSqDensity, Interval, NoiseDensity, NoiseSpec};
use cnoise::fisher::{fisher_scalar_quadrature, DEFAULT_GRID};
use cnoise::mechanisms::{mechanism_report, MechanismConfig};
use cnoise::pde_verify::{helmholtz_residual, Grid1D};
use cnoise::{dynamic, privacy_analysis, Matrix};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

fn err(e: cnoise::Error) -> PyErr {
    PyValueError::new_err(format!("{}: {e}", e.code()))
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn interval(lo: f64, hi: f64) -> PyResult<Interval> {
    Interval::new(lo, hi).map_err(err)
}

fn row(c: Vec<f64>) -> PyResult<Matrix> {
    Matrix::row_vector(&c).map_err(err)
}

/// A configured mechanism with its own seeded generator.
#[pyclass(module = "cnoise_py")]
struct Mechanism {
    inner: cnoise::Mechanism,
    rng: ChaCha8Rng,
}

#[pymethods]
impl Mechanism {
    /// `config` uses the shared `{"query", "noise"?, "budget"}` schema.
    #[new]
    #[pyo3(signature = (config, n, seed = 0, id = "mechanism"))]
    fn new(config: &str, n: usize, seed: u64, id: &str) -> PyResult<Self> {
        let cfg: MechanismConfig =
            serde_json::from_str(config).map_err(|e| PyValueError::new_err(format!("config_error: {e}")))?;
        Ok(Self {
            inner: cfg.build(id, n).map_err(err)?,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    /// `f(x) + w` for the configured query.
    fn respond(&mut self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.respond(&x, &mut self.rng).map_err(err)?.value)
    }

    fn report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &mechanism_report(&self.inner).map_err(err)?)
    }
}

/// Noise draws from a density given in its JSON form.
#[pyfunction]
#[pyo3(signature = (spec, count, seed = 0))]
fn sample_noise(spec: &str, count: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let spec: NoiseSpec = serde_json::from_str(spec).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let d = NoiseDensity::try_from(spec).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(d.sample(&mut rng, count))
}

/// Fisher information of the cos² density on `[lo, hi]`, by quadrature.
#[pyfunction]
fn cos_sq_fisher(lo: f64, hi: f64) -> PyResult<f64> {
    fisher_scalar_quadrature(&CosSqDensity::new(interval(lo, hi)?), DEFAULT_GRID).map_err(err)
}

#[pyfunction]
fn cos_sq_quality(lo: f64, hi: f64) -> PyResult<f64> {
    NoiseDensity::cos_sq(lo, hi).map_err(err)?.quality().map_err(err)
}

#[pyfunction]
fn helmholtz<'py>(py: Python<'py>, lo: f64, hi: f64, points: usize) -> PyResult<Bound<'py, PyAny>> {
    let s = interval(lo, hi)?;
    let grid = Grid1D::over(s, points).map_err(err)?;
    to_py(py, &helmholtz_residual(&CosSqDensity::new(s), grid))
}

#[pyfunction]
fn traffic_report<'py>(py: Python<'py>, horizon: usize, rho: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &dynamic::traffic_report(horizon, rho).map_err(err)?)
}

#[pyfunction]
fn check_eps_delta<'py>(
    py: Python<'py>,
    theta: f64,
    lo: f64,
    hi: f64,
    c: Vec<f64>,
    epsilon: f64,
    delta: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let cert = privacy_analysis::check_eps_delta(theta, interval(lo, hi)?, &row(c)?, epsilon, delta).map_err(err)?;
    to_py(py, &cert)
}

#[pyfunction]
fn entropy_compare<'py>(py: Python<'py>, theta: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &privacy_analysis::entropy_compare(theta).map_err(err)?)
}

#[pyfunction]
fn fisher_compare(c: Vec<f64>, theta: f64) -> PyResult<(f64, f64)> {
    let f = privacy_analysis::fisher_compare(&row(c)?, theta).map_err(err)?;
    Ok((f.laplace, f.gaussian))
}

#[pyfunction]
fn strength_factor(c: Vec<f64>, lo: f64, hi: f64, theta: f64) -> PyResult<f64> {
    Ok(privacy_analysis::strength_factor(&row(c)?, interval(lo, hi)?, theta)
        .map_err(err)?
        .factor)
}

/// Audits the Laplace mechanism calibrated to `epsilon` for `c` on `[lo, hi]`ⁿ.
#[pyfunction]
fn laplace_audit<'py>(py: Python<'py>, c: Vec<f64>, lo: f64, hi: f64, epsilon: f64) -> PyResult<Bound<'py, PyAny>> {
    let domain = interval(lo, hi)?;
    let m = cnoise::mechanisms::laplace_dp(&row(c)?, domain, epsilon).map_err(err)?;
    let a = privacy_analysis::epsilon_dp_audit(&m, domain, epsilon, privacy_analysis::AUDIT_PROBES).map_err(err)?;
    to_py(py, &a)
}

/// Runs a named experiment in memory; returns `{"passed", "checks", "files"}`.
#[pyfunction]
#[pyo3(signature = (name, parameters = None, seed = 0))]
fn experiment<'py>(py: Python<'py>, name: &str, parameters: Option<&str>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let spec = serde_json::json!({
        "name": name,
        "parameters": match parameters {
            Some(p) => serde_json::from_str(p).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => serde_json::Value::Null,
        },
    });
    let spec: ExperimentSpec =
        serde_json::from_value(spec).map_err(|e| PyValueError::new_err(format!("config_error: {e}")))?;
    let o = run_experiment(&spec, seed).map_err(err)?;
    let files: serde_json::Map<String, serde_json::Value> =
        o.files.iter().map(|(k, v)| (k.clone(), v.clone().into())).collect();
    to_py(
        py,
        &serde_json::json!({"passed": o.passed(), "checks": o.checks, "files": files}),
    )
}

#[pymodule]
fn cnoise_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Mechanism>()?;
    m.add_function(wrap_pyfunction!(sample_noise, m)?)?;
    m.add_function(wrap_pyfunction!(cos_sq_fisher, m)?)?;
    m.add_function(wrap_pyfunction!(cos_sq_quality, m)?)?;
    m.add_function(wrap_pyfunction!(helmholtz, m)?)?;
    m.add_function(wrap_pyfunction!(traffic_report, m)?)?;
    m.add_function(wrap_pyfunction!(check_eps_delta, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_compare, m)?)?;
    m.add_function(wrap_pyfunction!(fisher_compare, m)?)?;
    m.add_function(wrap_pyfunction!(strength_factor, m)?)?;
    m.add_function(wrap_pyfunction!(laplace_audit, m)?)?;
    m.add_function(wrap_pyfunction!(experiment, m)?)?;
    Ok(())
}
