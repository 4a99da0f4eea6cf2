//! Python bindings: return panels, run configs, the regime HMM, the CVaR
//! allocator, the scenario generator, the walk-forward backtest and the
//! calibration statistics. Matrices cross the boundary as lists of rows.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use regime_cvar::backtest::{load_generator, run_walk_forward, save_generator, train_generator, Generator};
use regime_cvar::config::RunConfig;
use regime_cvar::cvar_allocator::{self, AllocationProblem};
use regime_cvar::data_io::{load_price_csv, to_returns};
use regime_cvar::regime_hmm::{bic, context_features, filter_posteriors, fit_em, RegimeContext, RegimeModel};
use regime_cvar::scenario_gen::{self, ParamsSidecar};
use regime_cvar::{diagnostics, Error};

fn err(e: Error) -> PyErr {
    if e.is_input_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n == 0 || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err(format!("{what} must be a non-empty list of equal-length rows")));
    }
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// nalgebra serializes vectors as `[data, n, null]` and matrices as
/// `[column-major data, rows, cols]`; rewrite both as plain (nested) lists.
fn plain(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Array(a) => {
            if let [Value::Array(data), Value::Number(r), c] = a.as_slice() {
                let r = r.as_u64().map(|r| r as usize);
                match (r, c) {
                    (Some(n), Value::Null) if data.len() == n => {
                        return Value::Array(data.iter().cloned().map(plain).collect());
                    }
                    (Some(r), Value::Number(c)) if c.as_u64().is_some_and(|c| data.len() == r * c as usize) => {
                        let c = data.len() / r.max(1);
                        return Value::Array(
                            (0..r).map(|i| Value::Array((0..c).map(|j| data[i + j * r].clone()).collect())).collect(),
                        );
                    }
                    _ => {}
                }
            }
            Value::Array(a.into_iter().map(plain).collect())
        }
        Value::Object(m) => Value::Object(m.into_iter().map(|(k, x)| (k, plain(x))).collect()),
        x => x,
    }
}

/// Serde value to the matching Python object via the json module.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let value = serde_json::to_value(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let text = plain(value).to_string();
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "ReturnPanel", module = "regime_cvar_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyReturnPanel {
    inner: regime_cvar::data_io::ReturnPanel,
}

#[pymethods]
impl PyReturnPanel {
    #[new]
    fn new(dates: Vec<String>, assets: Vec<String>, returns: Vec<Vec<f64>>) -> PyResult<Self> {
        let m = matrix(&returns, "returns")?;
        let inner = regime_cvar::data_io::ReturnPanel::new(dates, assets, m).map_err(err)?;
        Ok(Self { inner })
    }

    /// Return CSV: `date,asset_1,..`.
    #[staticmethod]
    fn from_csv(path: &str) -> PyResult<Self> {
        let inner = regime_cvar::data_io::ReturnPanel::load_csv(path).map_err(err)?;
        Ok(Self { inner })
    }

    /// Price CSV, cleaned and converted to simple returns.
    #[staticmethod]
    fn from_prices_csv(path: &str) -> PyResult<Self> {
        let prices = load_price_csv(path).map_err(err)?;
        Ok(Self {
            inner: to_returns(&prices).map_err(err)?,
        })
    }

    fn to_csv(&self, path: &str) -> PyResult<()> {
        let f = std::fs::File::create(path).map_err(|e| PyValueError::new_err(format!("{path}: {e}")))?;
        self.inner.write_csv(f).map_err(err)
    }

    #[getter]
    fn dates(&self) -> Vec<String> {
        self.inner.dates.clone()
    }

    #[getter]
    fn assets(&self) -> Vec<String> {
        self.inner.assets.clone()
    }

    #[getter]
    fn returns(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.returns)
    }

    fn __len__(&self) -> usize {
        self.inner.n_dates()
    }

    fn __repr__(&self) -> String {
        format!("ReturnPanel({} dates x {} assets)", self.inner.n_dates(), self.inner.n_assets())
    }
}

#[pyclass(name = "RunConfig", module = "regime_cvar_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Defaults for every section.
    #[new]
    fn new() -> Self {
        Self {
            inner: RunConfig::default(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::from_toml(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(path).map_err(err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }
}

#[pyclass(name = "RegimeModel", module = "regime_cvar_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyRegimeModel {
    inner: RegimeModel,
}

#[pymethods]
impl PyRegimeModel {
    /// Baum-Welch fit; states come back sorted by covariance trace.
    #[staticmethod]
    #[pyo3(signature = (panel, k, seed = 2020, max_iter = 500, tol = 1e-6))]
    fn fit(py: Python<'_>, panel: &PyReturnPanel, k: usize, seed: u64, max_iter: usize, tol: f64) -> PyResult<Self> {
        let data = &panel.inner;
        let inner = py.detach(|| fit_em(data, k, seed, max_iter, tol)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RegimeModel::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn transition(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.transition)
    }

    #[getter]
    fn means(&self) -> Vec<Vec<f64>> {
        self.inner.means.iter().map(|m| m.iter().copied().collect()).collect()
    }

    /// Filtered posteriors P(S_t | r_1..r_t), one row per date.
    fn filter(&self, panel: &PyReturnPanel) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&filter_posteriors(&self.inner, &panel.inner).map_err(err)?.gamma))
    }

    fn loglik(&self, panel: &PyReturnPanel) -> PyResult<f64> {
        Ok(filter_posteriors(&self.inner, &panel.inner).map_err(err)?.loglik)
    }

    fn bic(&self, panel: &PyReturnPanel) -> PyResult<f64> {
        bic(&self.inner, &panel.inner).map_err(err)
    }
}

/// Trained denoiser with its noise schedule and reference HMM.
#[pyclass(name = "Generator", module = "regime_cvar_py")]
pub struct PyGenerator {
    inner: Generator,
    sidecar: ParamsSidecar,
}

#[pymethods]
impl PyGenerator {
    /// Fit the reference HMM and train the denoiser on the train split.
    #[staticmethod]
    fn train(py: Python<'_>, config: &PyRunConfig, panel: &PyReturnPanel) -> PyResult<Self> {
        let (cfg, data) = (&config.inner, &panel.inner);
        let t = py.detach(|| train_generator(cfg, data)).map_err(err)?;
        Ok(Self {
            inner: t.generator,
            sidecar: t.sidecar,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (inner, sidecar) = load_generator(path).map_err(err)?;
        Ok(Self { inner, sidecar })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_generator(path, &self.inner, &self.sidecar).map_err(err)
    }

    /// "tail-weighted" or "unweighted".
    #[getter]
    fn tag(&self) -> String {
        self.sidecar.tag.clone()
    }

    #[getter]
    fn context_dim(&self) -> usize {
        self.inner.params.arch.z_dim
    }

    /// Conditioning vector at row `index`, filtered with the reference HMM.
    fn context(&self, config: &PyRunConfig, panel: &PyReturnPanel, index: usize) -> PyResult<Vec<f64>> {
        let post = filter_posteriors(&self.inner.reference, &panel.inner).map_err(err)?;
        if index >= panel.inner.n_dates() {
            return Err(PyValueError::new_err(format!("row {index} is past the end of the panel")));
        }
        let z = context_features(&post.row(index), &panel.inner, index, &config.inner.context).map_err(err)?;
        Ok(z.z)
    }

    /// N×d scenario matrix for a context vector.
    #[pyo3(signature = (context, n, seed = 0))]
    fn sample(&self, py: Python<'_>, context: Vec<f64>, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let z = RegimeContext { z: context };
        let g = &self.inner;
        let set = py.detach(|| scenario_gen::sample(&g.params, &g.schedule, &z, n, seed)).map_err(err)?;
        Ok(rows(&set.scenarios))
    }
}

/// Solve the mean-variance-CVaR program. Returns a dict with weights, ζ,
/// objective terms, status, KKT residuals and duals.
#[pyfunction]
#[pyo3(signature = (
    mu, sigma, scenarios, prev_weights, alpha = 0.95, lambda_mu = 1.0, gamma = 1.0,
    tau = 0.2, kappa = 0.0, lower = None, upper = None, cvar_term = true
))]
#[allow(clippy::too_many_arguments)]
fn solve_allocation<'py>(
    py: Python<'py>,
    mu: Vec<f64>,
    sigma: Vec<Vec<f64>>,
    scenarios: Vec<Vec<f64>>,
    prev_weights: Vec<f64>,
    alpha: f64,
    lambda_mu: f64,
    gamma: f64,
    tau: f64,
    kappa: f64,
    lower: Option<Vec<f64>>,
    upper: Option<Vec<f64>>,
    cvar_term: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let d = mu.len();
    let mut p = AllocationProblem::new(
        DVector::from_vec(mu),
        matrix(&sigma, "sigma")?,
        matrix(&scenarios, "scenarios")?,
        DVector::from_vec(prev_weights),
    );
    p.alpha = alpha;
    p.lambda_mu = lambda_mu;
    p.gamma = gamma;
    p.tau = tau;
    p.kappa = kappa;
    p.cvar_term = cvar_term;
    if let Some(l) = lower {
        p.lower = DVector::from_vec(l);
    }
    p.upper = DVector::from_vec(upper.unwrap_or_else(|| vec![1.0; d]));
    let r = cvar_allocator::solve(&p).map_err(err)?;
    to_py(py, &r)
}

/// (VaR, CVaR) of an empirical loss sample.
#[pyfunction]
fn cvar_empirical(losses: Vec<f64>, alpha: f64) -> PyResult<(f64, f64)> {
    if losses.is_empty() || !(alpha > 0.0 && alpha < 1.0) {
        return Err(PyValueError::new_err("need a non-empty sample and alpha in (0, 1)"));
    }
    Ok(cvar_allocator::cvar_empirical(&losses, alpha))
}

/// Walk-forward backtest; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (config, panel, generator = None))]
fn backtest<'py>(
    py: Python<'py>,
    config: &PyRunConfig,
    panel: &PyReturnPanel,
    generator: Option<&PyGenerator>,
) -> PyResult<Bound<'py, PyAny>> {
    let (cfg, data, gen) = (&config.inner, &panel.inner, generator.map(|g| &g.inner));
    let out = py.detach(|| run_walk_forward(cfg, data, gen)).map_err(err)?;
    to_py(py, &out.report)
}

#[pyfunction]
fn energy_score(scenarios: Vec<Vec<f64>>, observed: Vec<f64>) -> PyResult<f64> {
    diagnostics::energy_score(&matrix(&scenarios, "scenarios")?, &DVector::from_vec(observed)).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (scenarios, observed, p = 0.5))]
fn variogram_score(scenarios: Vec<Vec<f64>>, observed: Vec<f64>, p: f64) -> PyResult<f64> {
    diagnostics::variogram_score(&matrix(&scenarios, "scenarios")?, &DVector::from_vec(observed), p).map_err(err)
}

/// (LR statistic, p-value).
#[pyfunction]
#[pyo3(signature = (violations, trials, alpha = 0.95))]
fn kupiec_uc(violations: usize, trials: usize, alpha: f64) -> PyResult<(f64, f64)> {
    let k = diagnostics::kupiec_uc(violations, trials, alpha).map_err(err)?;
    Ok((k.lr, k.p_value))
}

/// (Q statistic, p-value).
#[pyfunction]
#[pyo3(signature = (series, lags = 10))]
fn ljung_box(series: Vec<f64>, lags: usize) -> PyResult<(f64, f64)> {
    let lb = diagnostics::ljung_box(&series, lags).map_err(err)?;
    Ok((lb.q, lb.p_value))
}

/// Effective sample size of the tail-weighted loss.
#[pyfunction]
fn ess(q: f64, eta: f64, n: usize) -> f64 {
    scenario_gen::ess(q, eta, n)
}

#[pymodule]
fn regime_cvar_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyReturnPanel>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyRegimeModel>()?;
    m.add_class::<PyGenerator>()?;
    m.add_function(wrap_pyfunction!(solve_allocation, m)?)?;
    m.add_function(wrap_pyfunction!(cvar_empirical, m)?)?;
    m.add_function(wrap_pyfunction!(backtest, m)?)?;
    m.add_function(wrap_pyfunction!(energy_score, m)?)?;
    m.add_function(wrap_pyfunction!(variogram_score, m)?)?;
    m.add_function(wrap_pyfunction!(kupiec_uc, m)?)?;
    m.add_function(wrap_pyfunction!(ljung_box, m)?)?;
    m.add_function(wrap_pyfunction!(ess, m)?)?;
    Ok(())
}
