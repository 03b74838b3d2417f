//! Python bindings for the refraction-threshold toolkit.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use levy_refract::cli::{run_experiment as run_task, ExperimentConfig, RunOptions, Task};
use levy_refract::{
    CostSpec, Error, FixedPointConfig, JumpSpec, JumpTerm, LevyModel, MonteCarloConfig, ProblemSpec, QuadratureConfig,
    ResolventKernel, Side, SnModel, Strategy, TimeGrid,
};

create_exception!(levy_refract_py, LevyRefractError, PyException);

fn to_py(e: Error) -> PyErr {
    LevyRefractError::new_err(e.to_string())
}

fn parse_side(side: &str) -> PyResult<Side> {
    match side {
        "up" => Ok(Side::Up),
        "down" => Ok(Side::Down),
        other => Err(PyValueError::new_err(format!("side must be 'up' or 'down', got {other:?}"))),
    }
}

#[pyclass(name = "JumpTerm", frozen, from_py_object)]
#[derive(Clone)]
struct PyJumpTerm {
    inner: JumpTerm,
}

#[pymethods]
impl PyJumpTerm {
    /// Exponentially distributed jump sizes with the given decay.
    #[staticmethod]
    fn exponential(side: &str, rate: f64, decay: f64) -> PyResult<Self> {
        Ok(Self {
            inner: JumpTerm::exponential(parse_side(side)?, rate, decay),
        })
    }

    #[staticmethod]
    fn point_mass(side: &str, rate: f64, size: f64) -> PyResult<Self> {
        Ok(Self {
            inner: JumpTerm::point_mass(parse_side(side)?, rate, size),
        })
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(name = "LevyModel", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyLevyModel {
    inner: LevyModel,
}

impl PyLevyModel {
    fn spectrally_negative(&self) -> PyResult<SnModel> {
        let (sn, up) = SnModel::split(&self.inner).map_err(to_py)?;
        if up.total_rate() > 0.0 {
            return Err(PyValueError::new_err("model has upward jumps"));
        }
        Ok(sn)
    }
}

#[pymethods]
impl PyLevyModel {
    #[new]
    #[pyo3(signature = (gamma = 0.0, sigma = 0.0, jumps = Vec::new()))]
    fn new(gamma: f64, sigma: f64, jumps: Vec<PyJumpTerm>) -> PyResult<Self> {
        let terms = jumps.into_iter().map(|j| j.inner).collect();
        let inner = LevyModel::new(gamma, sigma, JumpSpec::new(terms)).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma
    }

    /// Laplace exponent `log E exp(theta X_1)`.
    fn cumulant(&self, theta: f64) -> f64 {
        self.inner.cumulant(theta)
    }

    fn is_spectrally_negative(&self) -> bool {
        self.inner.is_spectrally_negative()
    }

    fn path_class(&self) -> String {
        format!("{:?}", self.inner.path_class())
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(name = "Cost", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyCost {
    inner: CostSpec,
}

#[pymethods]
impl PyCost {
    #[staticmethod]
    fn linear(slope: f64) -> Self {
        Self {
            inner: CostSpec::linear(slope),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (a = 1.0, center = 0.0))]
    fn quadratic(a: f64, center: f64) -> Self {
        Self {
            inner: CostSpec::quadratic(a, center),
        }
    }

    #[staticmethod]
    fn softplus(height: f64, width: f64, center: f64) -> Self {
        Self {
            inner: CostSpec::softplus(height, width, center),
        }
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    fn f(&self, x: f64) -> f64 {
        self.inner.f(x)
    }

    fn f_prime(&self, x: f64) -> f64 {
        self.inner.f_prime(x)
    }
}

#[pyclass(name = "Problem", frozen)]
struct PyProblem {
    inner: ProblemSpec,
}

#[pymethods]
impl PyProblem {
    #[new]
    fn new(model: &PyLevyModel, cost: &PyCost, q: f64, beta: f64, alpha: f64) -> PyResult<Self> {
        let inner = ProblemSpec::new(model.inner.clone(), cost.inner.clone(), q, beta, alpha).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn q(&self) -> f64 {
        self.inner.q
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    /// `(path class, case)` labels.
    fn classify(&self) -> (String, String) {
        let (class, case) = self.inner.classify();
        (format!("{class:?}"), format!("{case:?}"))
    }
}

#[pyclass(name = "MonteCarlo", frozen)]
struct PyMonteCarlo {
    inner: MonteCarloConfig,
}

#[pymethods]
impl PyMonteCarlo {
    #[new]
    #[pyo3(signature = (n_paths = 10_000, dt = 1e-3, horizon = 20.0, seed = 0))]
    fn new(n_paths: usize, dt: f64, horizon: f64, seed: u64) -> PyResult<Self> {
        let grid = TimeGrid::new(dt, horizon).map_err(to_py)?;
        Ok(Self {
            inner: MonteCarloConfig::new(n_paths, grid, seed),
        })
    }

    #[getter]
    fn n_paths(&self) -> usize {
        self.inner.n_paths
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
}

#[pyclass(name = "Threshold", frozen, get_all)]
struct PyThreshold {
    b_star: f64,
    se: f64,
    bracket: Option<(f64, f64)>,
    iterations: usize,
    residual: f64,
    rho_se: f64,
    slope: f64,
    tail_bound: f64,
    n_paths: usize,
}

#[pymethods]
impl PyThreshold {
    fn __repr__(&self) -> String {
        format!("Threshold(b_star={}, se={})", self.b_star, self.se)
    }
}

#[pyclass(name = "Estimate", frozen, get_all)]
struct PyEstimate {
    mean: f64,
    se: f64,
    tail_bound: f64,
    n_paths: usize,
}

#[pymethods]
impl PyEstimate {
    fn __repr__(&self) -> String {
        format!("Estimate(mean={}, se={})", self.mean, self.se)
    }
}

impl From<levy_refract::ValueEstimate> for PyEstimate {
    fn from(v: levy_refract::ValueEstimate) -> Self {
        Self {
            mean: v.mean,
            se: v.se,
            tail_bound: v.tail_bound,
            n_paths: v.n_paths,
        }
    }
}

#[pyfunction]
#[pyo3(signature = (problem, mc, tol = 1e-3))]
fn solve_threshold(py: Python<'_>, problem: &PyProblem, mc: &PyMonteCarlo, tol: f64) -> PyResult<PyThreshold> {
    let r = py
        .detach(|| levy_refract::solve_threshold(&problem.inner, &mc.inner, tol))
        .map_err(to_py)?;
    Ok(PyThreshold {
        b_star: r.b_star,
        se: r.se,
        bracket: r.bracket,
        iterations: r.iterations,
        residual: r.residual,
        rho_se: r.rho_se,
        slope: r.slope,
        tail_bound: r.tail_bound,
        n_paths: r.n_paths,
    })
}

/// Returns `(rho_hat, se)` lists aligned with `b_values`.
#[pyfunction]
fn rho_curve(
    py: Python<'_>,
    problem: &PyProblem,
    b_values: Vec<f64>,
    mc: &PyMonteCarlo,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let c = py
        .detach(|| levy_refract::estimate_rho_curve(&problem.inner, &b_values, &mc.inner))
        .map_err(to_py)?;
    Ok((c.rho_hat, c.se))
}

/// Value of a refraction strategy at level `b`, or of the constant rate
/// `rate`. Exactly one of the two must be given.
#[pyfunction]
#[pyo3(signature = (problem, x0, mc, b = None, rate = None))]
fn estimate_value(
    py: Python<'_>,
    problem: &PyProblem,
    x0: f64,
    mc: &PyMonteCarlo,
    b: Option<f64>,
    rate: Option<f64>,
) -> PyResult<PyEstimate> {
    let strategy = match (b, rate) {
        (Some(b), None) => Strategy::Refraction { b },
        (None, Some(rate)) => Strategy::Constant { rate },
        _ => return Err(PyValueError::new_err("pass exactly one of b or rate")),
    };
    let v = py
        .detach(|| levy_refract::estimate_value(&problem.inner, &strategy, x0, &mc.inner))
        .map_err(to_py)?;
    Ok(v.into())
}

#[pyfunction]
fn estimate_value_derivative(
    py: Python<'_>,
    problem: &PyProblem,
    b: f64,
    x0: f64,
    mc: &PyMonteCarlo,
) -> PyResult<PyEstimate> {
    let v = py
        .detach(|| levy_refract::estimate_value_derivative(&problem.inner, b, x0, &mc.inner))
        .map_err(to_py)?;
    Ok(v.into())
}

#[pyfunction]
fn laplace_exponent(model: &PyLevyModel, theta: f64) -> PyResult<f64> {
    Ok(levy_refract::laplace_exponent(&model.spectrally_negative()?, theta))
}

#[pyfunction]
#[pyo3(signature = (model, q, alpha_shift = 0.0))]
fn right_inverse(model: &PyLevyModel, q: f64, alpha_shift: f64) -> PyResult<f64> {
    levy_refract::right_inverse(&model.spectrally_negative()?, q, alpha_shift).map_err(to_py)
}

/// `(W(x), W'(x))` of the process drifted down by `alpha_shift`.
#[pyfunction]
#[pyo3(signature = (model, q, x, alpha_shift = 0.0))]
fn scale_w(model: &PyLevyModel, q: f64, x: f64, alpha_shift: f64) -> PyResult<(f64, f64)> {
    levy_refract::scale_w(&model.spectrally_negative()?, q, alpha_shift, x).map_err(to_py)
}

/// Threshold from the scale-function route; spectrally negative models only.
#[pyfunction]
#[pyo3(signature = (problem, tol = 1e-8))]
fn semi_analytic_threshold(problem: &PyProblem, tol: f64) -> PyResult<f64> {
    let p = &problem.inner;
    let sn = PyLevyModel { inner: p.model.clone() }.spectrally_negative()?;
    levy_refract::semi_analytic_threshold(&sn, &p.cost, p.q, p.beta, p.alpha, tol, &QuadratureConfig::default())
        .map_err(to_py)
}

/// Resolvent density of the process refracted at `b`.
#[pyclass(name = "Resolvent", frozen)]
struct PyResolvent {
    inner: ResolventKernel,
}

#[pymethods]
impl PyResolvent {
    #[new]
    fn new(model: &PyLevyModel, q: f64, b: f64, alpha: f64) -> PyResult<Self> {
        let inner = ResolventKernel::new(&model.spectrally_negative()?, q, b, alpha).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn density(&self, x: f64, y: f64) -> f64 {
        self.inner.density(x, y)
    }

    fn density_dx(&self, x: f64, y: f64) -> f64 {
        self.inner.density_dx(x, y)
    }
}

/// `v'(x)` for refraction at `b`. Upward jumps are handled by the
/// two-sided fixed point.
#[pyfunction]
fn semi_analytic_v_prime(py: Python<'_>, problem: &PyProblem, b: f64, x: f64) -> PyResult<f64> {
    let p = &problem.inner;
    let (sn, up) = SnModel::split(&p.model).map_err(to_py)?;
    let kernel = ResolventKernel::new(&sn, p.q, b, p.alpha).map_err(to_py)?;
    py.detach(|| levy_refract::semi_analytic_v_prime(&kernel, &p.cost, x, &FixedPointConfig::default(), Some(&up)))
        .map_err(to_py)
}

/// Runs one task of an experiment file and returns the manifest as JSON.
#[pyfunction]
#[pyo3(signature = (config, task, out_dir = None, seed = None))]
fn run_experiment(
    py: Python<'_>,
    config: PathBuf,
    task: &str,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
) -> PyResult<String> {
    let task: Task = task.parse().map_err(to_py)?;
    let cfg = ExperimentConfig::load(&config).map_err(to_py)?;
    let opts = RunOptions {
        out_dir,
        seed,
        threads: None,
    };
    let out = py.detach(|| run_task(&cfg, task, &opts)).map_err(to_py)?;
    serde_json::to_string_pretty(&out.manifest).map_err(|e| LevyRefractError::new_err(e.to_string()))
}

#[pymodule]
pub fn levy_refract_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LevyRefractError", m.py().get_type::<LevyRefractError>())?;
    m.add_class::<PyJumpTerm>()?;
    m.add_class::<PyLevyModel>()?;
    m.add_class::<PyCost>()?;
    m.add_class::<PyProblem>()?;
    m.add_class::<PyMonteCarlo>()?;
    m.add_class::<PyThreshold>()?;
    m.add_class::<PyEstimate>()?;
    m.add_class::<PyResolvent>()?;
    m.add_function(wrap_pyfunction!(solve_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(rho_curve, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_value, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_value_derivative, m)?)?;
    m.add_function(wrap_pyfunction!(laplace_exponent, m)?)?;
    m.add_function(wrap_pyfunction!(right_inverse, m)?)?;
    m.add_function(wrap_pyfunction!(scale_w, m)?)?;
    m.add_function(wrap_pyfunction!(semi_analytic_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(semi_analytic_v_prime, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
