//! Python bindings: measures, the quadratic toy event, the tsunami model, the
//! LDT optimizer and the probability estimators.

use ldtail::adjoint::{directional_check, ObjectiveKind};
use ldtail::estimators::{self, LowRankOptions};
use ldtail::ldt::{self, EventMap, OptimumRecord, Problem, Tolerances};
use ldtail::measures::GaussianMeasure;
use ldtail::tsunami::TsunamiModel;
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: ldtail::Error) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn vec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("matrix rows must have equal length"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

#[pyclass(name = "GaussianMeasure", module = "ldtail", frozen)]
#[derive(Clone)]
struct PyGaussian {
    inner: GaussianMeasure,
}

#[pymethods]
impl PyGaussian {
    #[new]
    fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self { inner: GaussianMeasure::new(vec(&mean), matrix(&cov)?).map_err(err)? })
    }

    #[staticmethod]
    fn standard(n: usize) -> PyResult<Self> {
        Ok(Self { inner: GaussianMeasure::standard(n).map_err(err)? })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.inner.mean().as_slice().to_vec()
    }

    fn rate(&self, theta: Vec<f64>) -> PyResult<f64> {
        self.inner.rate(&vec(&theta)).map_err(err)
    }

    fn rate_grad(&self, theta: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.rate_grad(&vec(&theta)).map_err(err)?.as_slice().to_vec())
    }

    fn sample(&self, seed: u64, count: usize) -> Vec<Vec<f64>> {
        self.inner.sample(seed, count).into_iter().map(|s| s.as_slice().to_vec()).collect()
    }
}

/// F(θ) = ⟨linear, θ⟩ + ½ θᵀ Q θ
#[pyclass(name = "QuadraticEvent", module = "ldtail", frozen)]
struct PyQuadratic {
    inner: ldt::QuadraticEvent,
}

#[pymethods]
impl PyQuadratic {
    #[new]
    #[pyo3(signature = (linear, quadratic=None))]
    fn new(linear: Vec<f64>, quadratic: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        let inner = match quadratic {
            Some(q) => ldt::QuadraticEvent::new(vec(&linear), matrix(&q)?).map_err(err)?,
            None => ldt::QuadraticEvent::linear(vec(&linear)),
        };
        Ok(Self { inner })
    }

    fn value(&self, theta: Vec<f64>) -> PyResult<f64> {
        self.inner.value(&vec(&theta)).map_err(err)
    }

    fn gradient(&self, theta: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.value_grad(&vec(&theta)).map_err(err)?.1.as_slice().to_vec())
    }
}

#[pyclass(name = "TsunamiModel", module = "ldtail", frozen)]
struct PyTsunami {
    inner: TsunamiModel,
}

#[pymethods]
impl PyTsunami {
    #[new]
    #[pyo3(signature = (elements=200, t_final=4000.0, objective="regularized", gamma=0.003))]
    fn new(elements: usize, t_final: f64, objective: &str, gamma: f64) -> PyResult<Self> {
        let kind = match objective {
            "regularized" => ObjectiveKind::Regularized { gamma },
            "time-optimal" => ObjectiveKind::TimeOptimal,
            other => return Err(PyValueError::new_err(format!("unknown objective `{other}`"))),
        };
        Ok(Self { inner: TsunamiModel::default_setup(elements, t_final, kind).map_err(err)? })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn prior(&self) -> PyGaussian {
        PyGaussian { inner: self.inner.prior.measure().clone() }
    }

    #[getter]
    fn vertices(&self) -> Vec<f64> {
        self.inner.mesh.vertices()
    }

    /// (times, window-averaged wave height)
    fn observable(&self, py: Python<'_>, slips: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let m = &self.inner;
        let (grid, series) = py.allow_threads(|| m.observable(&vec(&slips))).map_err(err)?;
        Ok(((0..series.len()).map(|i| grid.time(i)).collect(), series))
    }

    fn event_value(&self, py: Python<'_>, slips: Vec<f64>) -> PyResult<f64> {
        let m = &self.inner;
        py.allow_threads(|| m.event_value(&vec(&slips))).map_err(err)
    }

    fn objective_j(&self, py: Python<'_>, slips: Vec<f64>, lam: f64) -> PyResult<f64> {
        let m = &self.inner;
        py.allow_threads(|| m.objective_j(&vec(&slips), lam)).map_err(err)
    }

    fn gradient_j(&self, py: Python<'_>, slips: Vec<f64>, lam: f64) -> PyResult<Vec<f64>> {
        let m = &self.inner;
        Ok(py.allow_threads(|| m.gradient_j(&vec(&slips), lam)).map_err(err)?.as_slice().to_vec())
    }

    fn bathymetry_perturbation(&self, slips: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.bathymetry(&vec(&slips)).map_err(err)?.perturbation())
    }
}

#[pyclass(name = "OptimumRecord", module = "ldtail", frozen)]
#[derive(Clone)]
struct PyRecord {
    #[pyo3(get)]
    lam: f64,
    #[pyo3(get)]
    theta: Vec<f64>,
    #[pyo3(get)]
    z: f64,
    #[pyo3(get)]
    rate: f64,
    #[pyo3(get)]
    hamiltonian: f64,
    #[pyo3(get)]
    kkt_residual: f64,
    #[pyo3(get)]
    iterations: usize,
    #[pyo3(get)]
    converged: bool,
    #[pyo3(get)]
    message: Option<String>,
    record: OptimumRecord,
}

impl From<OptimumRecord> for PyRecord {
    fn from(r: OptimumRecord) -> Self {
        Self {
            lam: r.lambda,
            theta: r.theta.clone(),
            z: r.z,
            rate: r.rate,
            hamiltonian: r.hamiltonian,
            kkt_residual: r.kkt_residual,
            iterations: r.iterations,
            converged: r.converged,
            message: r.message.clone(),
            record: r,
        }
    }
}

#[pymethods]
impl PyRecord {
    fn __repr__(&self) -> String {
        format!(
            "OptimumRecord(lam={}, z={:.6}, rate={:.6}, iterations={}, converged={})",
            self.lam, self.z, self.rate, self.iterations, self.converged
        )
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.record).expect("record serializes")
    }
}

#[pyclass(name = "ProbabilityEstimate", module = "ldtail", frozen, get_all)]
#[derive(Clone)]
struct PyEstimate {
    z: f64,
    p: f64,
    log10_p: f64,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
    method: String,
    n_samples: Option<usize>,
}

impl From<estimators::ProbabilityEstimate> for PyEstimate {
    fn from(e: estimators::ProbabilityEstimate) -> Self {
        Self {
            z: e.z,
            p: e.p_hat,
            log10_p: e.log10_p,
            ci_low: e.ci_low,
            ci_high: e.ci_high,
            method: e.method.name().to_string(),
            n_samples: e.n_samples,
        }
    }
}

#[pymethods]
impl PyEstimate {
    fn __repr__(&self) -> String {
        format!("ProbabilityEstimate(method={}, z={}, p={:e})", self.method, self.z, self.p)
    }

    fn covers(&self, p: f64) -> bool {
        matches!((self.ci_low, self.ci_high), (Some(lo), Some(hi)) if lo <= p && p <= hi)
    }
}

#[derive(FromPyObject)]
enum Event<'py> {
    Quadratic(PyRef<'py, PyQuadratic>),
    Tsunami(PyRef<'py, PyTsunami>),
}

impl Event<'_> {
    fn map(&self) -> &dyn EventMap {
        match self {
            Event::Quadratic(q) => &q.inner,
            Event::Tsunami(t) => &t.inner,
        }
    }

    /// The given measure, or the tsunami model's prior.
    fn measure(&self, measure: Option<&PyGaussian>) -> PyResult<GaussianMeasure> {
        match (measure, self) {
            (Some(m), _) => Ok(m.inner.clone()),
            (None, Event::Tsunami(t)) => Ok(t.inner.prior.measure().clone()),
            (None, Event::Quadratic(_)) => Err(PyValueError::new_err("a measure is required for this event")),
        }
    }
}

fn tolerances(gradient_tol: f64, max_iter: usize) -> Tolerances {
    Tolerances { gradient: gradient_tol, max_iter, ..Default::default() }
}

/// Minimizes I(θ) − λF(θ) from `start` (default: the measure's mean).
#[pyfunction]
#[pyo3(signature = (event, lam, measure=None, start=None, gradient_tol=1e-5, max_iter=500))]
fn minimize(
    py: Python<'_>,
    event: Event<'_>,
    lam: f64,
    measure: Option<PyRef<'_, PyGaussian>>,
    start: Option<Vec<f64>>,
    gradient_tol: f64,
    max_iter: usize,
) -> PyResult<PyRecord> {
    let m = event.measure(measure.as_deref())?;
    let ev = event.map();
    let start = start.map_or_else(|| m.mean().clone(), |s| vec(&s));
    let tol = tolerances(gradient_tol, max_iter);
    let r = py
        .allow_threads(|| {
            let p = Problem::new(&m, ev)?;
            ldt::minimize_hamiltonian(&p, lam, &start, &tol)
        })
        .map_err(err)?;
    Ok(r.into())
}

/// One record per λ; failed entries are None.
#[pyfunction]
#[pyo3(signature = (event, lambdas, measure=None, warm=true, gradient_tol=1e-5, max_iter=500))]
fn sweep(
    py: Python<'_>,
    event: Event<'_>,
    lambdas: Vec<f64>,
    measure: Option<PyRef<'_, PyGaussian>>,
    warm: bool,
    gradient_tol: f64,
    max_iter: usize,
) -> PyResult<Vec<Option<PyRecord>>> {
    let m = event.measure(measure.as_deref())?;
    let ev = event.map();
    let tol = tolerances(gradient_tol, max_iter);
    let s = py
        .allow_threads(|| {
            let p = Problem::new(&m, ev)?;
            ldt::sweep_lambda(&p, &lambdas, warm, &tol)
        })
        .map_err(err)?;
    Ok(s.entries.into_iter().map(|e| e.record.map(PyRecord::from)).collect())
}

#[pyfunction]
fn normal_tail(x: f64) -> f64 {
    estimators::normal_tail(x)
}

/// Φ(−√(2I*)) for the rate at the optimizer of level z.
#[pyfunction]
fn form(z: f64, rate: f64) -> PyEstimate {
    estimators::form_from_rate(z, rate).into()
}

#[pyfunction]
#[pyo3(signature = (event, z, n, seed=0, measure=None))]
fn mc_estimate(py: Python<'_>, event: Event<'_>, z: f64, n: usize, seed: u64, measure: Option<PyRef<'_, PyGaussian>>) -> PyResult<PyEstimate> {
    let m = event.measure(measure.as_deref())?;
    let ev = event.map();
    Ok(py.allow_threads(|| estimators::mc_estimate(ev, &m, z, n, seed)).map_err(err)?.into())
}

/// Mean-shift importance sampling around the optimizer in `record`.
#[pyfunction]
#[pyo3(signature = (event, record, z, n, seed=0, measure=None))]
fn is_estimate(
    py: Python<'_>,
    event: Event<'_>,
    record: PyRef<'_, PyRecord>,
    z: f64,
    n: usize,
    seed: u64,
    measure: Option<PyRef<'_, PyGaussian>>,
) -> PyResult<PyEstimate> {
    let m = event.measure(measure.as_deref())?;
    let ev = event.map();
    let rec = record.record.clone();
    Ok(py.allow_threads(|| estimators::is_estimate(ev, &m, &rec, z, n, seed)).map_err(err)?.into())
}

/// SORM with an explicit Hessian of F; returns (estimate, eigenvalues).
#[pyfunction]
fn sorm_dense(measure: PyRef<'_, PyGaussian>, record: PyRef<'_, PyRecord>, hessian: Vec<Vec<f64>>) -> PyResult<(PyEstimate, Vec<f64>)> {
    let (e, s) = estimators::sorm_estimate_dense(&record.record, &measure.inner, &matrix(&hessian)?).map_err(err)?;
    Ok((e.into(), s.eigenvalues))
}

/// Matrix-free SORM from Hessian-vector products of F; returns (estimate, eigenvalues).
#[pyfunction]
#[pyo3(signature = (event, record, rank=10, tol=1e-3, seed=0, measure=None))]
fn sorm_lowrank(
    py: Python<'_>,
    event: Event<'_>,
    record: PyRef<'_, PyRecord>,
    rank: usize,
    tol: f64,
    seed: u64,
    measure: Option<PyRef<'_, PyGaussian>>,
) -> PyResult<(PyEstimate, Vec<f64>)> {
    let m = event.measure(measure.as_deref())?;
    let ev = event.map();
    let rec = record.record.clone();
    let opts = LowRankOptions { rank, tol, seed, ..Default::default() };
    let theta = rec.theta_vec();
    let (e, s) = py
        .allow_threads(|| estimators::sorm_estimate_lowrank(&rec, &m, |v| ev.hess_vec(&theta, v), &opts))
        .map_err(err)?;
    Ok((e.into(), s.eigenvalues))
}

/// Smallest relative error between the adjoint directional derivative of
/// J = I − λF and central differences over the step sweep.
#[pyfunction]
#[pyo3(signature = (model, slips, direction, lam=1.0, steps=None))]
fn gradient_check(
    py: Python<'_>,
    model: PyRef<'_, PyTsunami>,
    slips: Vec<f64>,
    direction: Vec<f64>,
    lam: f64,
    steps: Option<Vec<f64>>,
) -> PyResult<f64> {
    let m = &model.inner;
    let s = vec(&slips);
    let d = vec(&direction);
    let steps = steps.unwrap_or_else(|| {
        let scale = if s.norm() > 0.0 { s.norm() } else { 1.0 };
        [1e-3, 1e-4, 1e-5, 1e-6, 1e-7].iter().map(|h| h * scale).collect()
    });
    let c = py
        .allow_threads(|| {
            let g = m.gradient_j(&s, lam)?;
            directional_check(|x| m.objective_j(x, lam), &g, &s, &d, &steps)
        })
        .map_err(err)?;
    Ok(c.min_rel_error)
}

#[pymodule]
#[pyo3(name = "ldtail")]
pub fn ldtail_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGaussian>()?;
    m.add_class::<PyQuadratic>()?;
    m.add_class::<PyTsunami>()?;
    m.add_class::<PyRecord>()?;
    m.add_class::<PyEstimate>()?;
    m.add_function(wrap_pyfunction!(minimize, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(normal_tail, m)?)?;
    m.add_function(wrap_pyfunction!(form, m)?)?;
    m.add_function(wrap_pyfunction!(mc_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(is_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(sorm_dense, m)?)?;
    m.add_function(wrap_pyfunction!(sorm_lowrank, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
