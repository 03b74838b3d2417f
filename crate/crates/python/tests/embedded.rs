use pyo3::prelude::*;
use pyo3::types::PyDict;
use pyo3::wrap_pymodule;

fn run(script: &str) {
    Python::attach(|py| {
        let m = wrap_pymodule!(levy_refract_py::levy_refract_py)(py);
        let locals = PyDict::new(py);
        locals.set_item("lr", m).unwrap();
        let code = std::ffi::CString::new(script).unwrap();
        if let Err(e) = py.run(&code, None, Some(&locals)) {
            e.print(py);
            panic!("script failed");
        }
    });
}

#[test]
fn brownian_scale_function_and_threshold() {
    run(r#"
import math
model = lr.LevyModel(sigma=math.sqrt(2.0))
assert abs(lr.laplace_exponent(model, 1.5) - 2.25) < 1e-12
assert abs(lr.right_inverse(model, 1.0) - 1.0) < 1e-10
w, w1 = lr.scale_w(model, 1.0, 1.0)
assert abs(w - math.sinh(1.0)) < 1e-10 and abs(w1 - math.cosh(1.0)) < 1e-10
problem = lr.Problem(model, lr.Cost.quadratic(), 1.0, 1.0, 1.0)
b = lr.semi_analytic_threshold(problem)
assert abs(b - 0.881966) < 1e-5, b
assert abs(lr.semi_analytic_v_prime(problem, b, b) - 1.0) < 1e-6
k = lr.Resolvent(model, 1.0, b, 1.0)
assert k.density(0.0, 0.5) > 0.0
"#);
}

#[test]
fn deterministic_drift_estimates() {
    run(r#"
model = lr.LevyModel(gamma=1.0)
problem = lr.Problem(model, lr.Cost.quadratic(), 1.0, 4.0, 2.0)
mc = lr.MonteCarlo(n_paths=2, dt=1e-3, horizon=20.0)
t = lr.solve_threshold(problem, mc)
assert abs(t.b_star - 2.0) <= 1e-3, t
v = lr.estimate_value(problem, 2.0, mc, b=2.0)
assert abs(v.mean - 8.0) < 1e-3, v
"#);
}

#[test]
fn errors_surface_as_python_exceptions() {
    run(r#"
try:
    lr.LevyModel(sigma=-1.0)
except lr.LevyRefractError:
    pass
else:
    raise AssertionError("negative sigma accepted")
try:
    lr.JumpTerm.exponential("sideways", 1.0, 1.0)
except ValueError:
    pass
else:
    raise AssertionError("bad side accepted")
model = lr.LevyModel(sigma=1.0)
problem = lr.Problem(model, lr.Cost.linear(3.0), 1.0, 1.0, 1.0)
try:
    lr.estimate_value(problem, 0.0, lr.MonteCarlo(n_paths=1), b=0.0, rate=1.0)
except ValueError:
    pass
else:
    raise AssertionError("both strategies accepted")
"#);
}
