use std::ffi::CString;
use std::sync::Once;

use ldtail_py::ldtail_module;
use pyo3::prelude::*;
use pyo3::types::PyDict;

static INIT: Once = Once::new();

fn run(code: &str) {
    INIT.call_once(|| {
        pyo3::append_to_inittab!(ldtail_module);
        pyo3::prepare_freethreaded_python();
    });
    Python::with_gil(|py| {
        let globals = PyDict::new_bound(py);
        let code = CString::new(code).unwrap();
        if let Err(e) = py.run_bound(code.to_str().unwrap(), Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed: {e}");
        }
    });
}

const PRELUDE: &str = "
import math
import ldtail
def phi_tail(x):
    return 0.5 * math.erfc(x / math.sqrt(2.0))
";

#[test]
fn linear_event_matches_closed_form() {
    run(&format!(
        "{PRELUDE}
m = ldtail.GaussianMeasure.standard(3)
ev = ldtail.QuadraticEvent([0.6, 0.0, 0.8])
r = ldtail.minimize(ev, 2.5, measure=m)
assert r.converged
assert abs(r.z - 2.5) < 1e-9, r.z
assert abs(r.rate - 2.5**2 / 2) < 1e-9, r.rate
for got, want in zip(r.theta, [1.5, 0.0, 2.0]):
    assert abs(got - want) < 1e-9
f = ldtail.form(r.z, r.rate)
assert abs(f.p / phi_tail(2.5) - 1) < 1e-12
assert abs(ldtail.normal_tail(7.0) / phi_tail(7.0) - 1) < 1e-12
assert '\"lambda\"' in r.to_json()
"
    ));
}

#[test]
fn correlated_measure_rate() {
    run(&format!(
        "{PRELUDE}
m = ldtail.GaussianMeasure([1.0, -1.0], [[2.0, 0.5], [0.5, 1.0]])
x = [0.3, 0.4]
d = [x[0] - 1.0, x[1] + 1.0]
det = 2.0 * 1.0 - 0.25
q = (1.0 * d[0]**2 - 2 * 0.5 * d[0] * d[1] + 2.0 * d[1]**2) / det
assert abs(m.rate(x) - 0.5 * q) < 1e-12
assert m.dim == 2
s = m.sample(5, 4)
assert len(s) == 4 and all(len(v) == 2 for v in s)
assert s == m.sample(5, 4)
"
    ));
}

#[test]
fn invalid_input_raises_value_error() {
    run(&format!(
        "{PRELUDE}
try:
    ldtail.GaussianMeasure([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
    raise SystemExit('indefinite covariance accepted')
except ValueError:
    pass
m = ldtail.GaussianMeasure.standard(2)
try:
    m.rate([1.0, 2.0, 3.0])
    raise SystemExit('dimension mismatch accepted')
except ValueError:
    pass
try:
    ldtail.minimize(ldtail.QuadraticEvent([1.0, 0.0]), 1.0)
    raise SystemExit('missing measure accepted')
except ValueError:
    pass
try:
    ldtail.TsunamiModel(elements=16, objective='softmax')
    raise SystemExit('unknown objective accepted')
except ValueError:
    pass
"
    ));
}

#[test]
fn sorm_and_sampling_on_curved_event() {
    // F = θ₁ + 0.1 θ₂²: optimizer θ* = (λ, 0), and the exact tail is
    // E[Φ̄(z − 0.1 θ₂²)] which we integrate by the midpoint rule.
    run(&format!(
        "{PRELUDE}
m = ldtail.GaussianMeasure.standard(2)
ev = ldtail.QuadraticEvent([1.0, 0.0], [[0.0, 0.0], [0.0, 0.2]])
z = 3.0
r = ldtail.minimize(ev, z, measure=m)
assert abs(r.z - z) < 1e-8
n = 40000
h = 16.0 / n
truth = sum(math.exp(-t * t / 2) / math.sqrt(2 * math.pi) * phi_tail(z - 0.1 * t * t) * h
            for t in (-8.0 + (i + 0.5) * h for i in range(n)))
dense, eig = ldtail.sorm_dense(m, r, [[0.0, 0.0], [0.0, 0.2]])
assert abs(eig[0] - 0.2) < 1e-12
bound = math.exp(-z * z / 2) / (math.sqrt(2 * math.pi) * z)
assert abs(dense.p / (bound / math.sqrt(1 - 0.2 * z)) - 1) < 1e-12
low, eig = ldtail.sorm_lowrank(ev, r, rank=1, measure=m)
assert abs(low.p / dense.p - 1) < 1e-6, (low.p, dense.p)
assert abs(dense.p / truth - 1) < 0.2, (dense.p, truth)
est = ldtail.is_estimate(ev, r, z, 20000, seed=3, measure=m)
assert est.covers(truth), (est.ci_low, truth, est.ci_high)
mc = ldtail.mc_estimate(ev, 1.0, 20000, seed=4, measure=m)
p1 = sum(math.exp(-t * t / 2) / math.sqrt(2 * math.pi) * phi_tail(1.0 - 0.1 * t * t) * h
         for t in (-8.0 + (i + 0.5) * h for i in range(n)))
assert mc.covers(p1), (mc.ci_low, p1, mc.ci_high)
assert mc.method == 'mc' and est.method == 'is'
"
    ));
}

#[test]
fn sweep_records_follow_lambda() {
    run(&format!(
        "{PRELUDE}
m = ldtail.GaussianMeasure.standard(2)
ev = ldtail.QuadraticEvent([1.0, 1.0])
recs = ldtail.sweep(ev, [0.5, 1.0, 2.0], measure=m, warm=True)
assert [r.lam for r in recs] == [0.5, 1.0, 2.0]
for r in recs:
    assert abs(r.z - 2 * r.lam) < 1e-9
"
    ));
}

#[test]
fn tsunami_model_round_trip() {
    run(&format!(
        "{PRELUDE}
model = ldtail.TsunamiModel(elements=32, t_final=800.0)
n = model.dim
zero = [0.0] * n
t, f = model.observable(zero)
assert len(t) == len(f) and max(abs(v) for v in f) < 1e-10
assert model.prior.dim == n
slips = model.prior.sample(1, 1)[0]
assert len(model.bathymetry_perturbation(slips)) == len(model.vertices)
direction = model.prior.sample(2, 1)[0]
err = ldtail.gradient_check(model, slips, direction, lam=1.0)
assert err < 1e-5, err
g = model.gradient_j(zero, 0.0)
assert max(abs(v) for v in g) == 0.0
r = ldtail.minimize(model, 2.0, max_iter=5)
assert r.iterations <= 5 and len(r.theta) == n
"
    ));
}
