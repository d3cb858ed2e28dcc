use approx::assert_relative_eq;
use ldtail::estimators::*;
use ldtail::ldt::*;
use ldtail::measures::GaussianMeasure;
use ldtail::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Simpson with one Richardson step.
fn tail(x: f64) -> f64 {
    (16.0 * simpson_tail(x, 40_000) - simpson_tail(x, 20_000)) / 15.0
}

/// ∫_x^∞ φ by composite Simpson on [x, x + 40].
fn simpson_tail(x: f64, n: usize) -> f64 {
    let h = 40.0 / n as f64;
    let phi = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = phi(x) + phi(x + 40.0);
    for i in 1..n {
        s += phi(x + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Standard normal mass of {ξ₁ ≥ β − h/2 ξ₂²}.
fn paraboloid_mass(beta: f64, h: f64) -> f64 {
    let n = 2400;
    let (a, b) = (-12.0, 12.0);
    let dx = (b - a) / n as f64;
    let f = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt() * simpson_tail(beta - 0.5 * h * x * x, 4000);
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * dx) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * dx / 3.0
}

fn identity_1d() -> ClosureEvent<impl Fn(&DVector<f64>) -> f64 + Sync, impl Fn(&DVector<f64>) -> DVector<f64> + Sync> {
    ClosureEvent { dim: 1, value: |t: &DVector<f64>| t[0], grad: |t: &DVector<f64>| DVector::from_element(1, 1.0 + 0.0 * t[0]) }
}

fn paraboloid(h: f64) -> QuadraticEvent {
    QuadraticEvent::new(DVector::from_vec(vec![1.0, 0.0]), DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, h]))).unwrap()
}

fn optimum(event: &dyn EventMap, m: &GaussianMeasure, lambda: f64) -> OptimumRecord {
    let p = Problem::new(m, event).unwrap();
    let tol = Tolerances { gradient: 1e-8, ..Default::default() };
    let r = minimize_hamiltonian(&p, lambda, m.mean(), &tol).unwrap();
    assert!(r.converged, "{:?} after {} iterations", r.message, r.iterations);
    r
}

#[test]
fn mc_covers_normal_tail_and_handles_extremes() {
    let m = GaussianMeasure::standard(1).unwrap();
    let ev = identity_1d();
    let batch = McBatch::draw(&ev, &m, 1_000_000, 5).unwrap();
    let e = batch.estimate(1.0);
    let exact = tail(1.0);
    let width = e.ci_high.unwrap() - e.ci_low.unwrap();
    assert!((e.p_hat - exact).abs() <= 3.0 * width, "{} vs {exact}", e.p_hat);
    assert!(e.covers(exact) || (e.p_hat - exact).abs() <= width);
    assert_eq!(batch.estimate(-1e10).p_hat, 1.0);
    assert_eq!(batch.estimate(1e10).p_hat, 0.0);
    assert!(mc_estimate(&ev, &m, 0.0, 0, 1).is_err());
    let curve = batch.curve(&[-1.0, 0.0, 0.5, 1.0, 2.0, 3.0]);
    assert!(curve.windows(2).all(|w| w[1].p_hat <= w[0].p_hat));
    for c in &curve {
        assert!(c.ci_low.unwrap() <= c.p_hat && c.p_hat <= c.ci_high.unwrap());
    }
}

#[test]
fn mc_is_unbiased_and_rmse_scales() {
    let m = GaussianMeasure::standard(1).unwrap();
    let ev = identity_1d();
    let n = 2000;
    let reps = 200;
    for z in [0.0, 1.0, 2.0] {
        let p = tail(z);
        let ests: Vec<f64> = (0..reps).map(|s| mc_estimate(&ev, &m, z, n, 1000 + s).unwrap().p_hat).collect();
        let mean = ests.iter().sum::<f64>() / reps as f64;
        let se = (p * (1.0 - p) / (n * reps as usize) as f64).sqrt();
        assert!((mean - p).abs() <= 3.0 * se, "z={z}: {mean} vs {p}");
        let rel_rmse = (ests.iter().map(|e| (e - p).powi(2)).sum::<f64>() / reps as f64).sqrt() / p;
        let predicted = ((1.0 - p) / (n as f64 * p)).sqrt();
        assert!((rel_rmse / predicted - 1.0).abs() <= 0.2, "z={z}: {rel_rmse} vs {predicted}");
    }
}

#[test]
fn is_with_zero_shift_reproduces_mc() {
    let m = GaussianMeasure::new(DVector::from_vec(vec![0.5, -1.0]), DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0])).unwrap();
    let ev = paraboloid(0.3);
    let mc = McBatch::draw(&ev, &m, 5000, 17).unwrap();
    let is = IsBatch::draw(&ev, &m, m.mean(), 5000, 17).unwrap();
    assert!(is.log_weights.iter().all(|w| *w == 0.0));
    for z in [-1.0, 0.5, 1.5, 3.0] {
        let a = mc.estimate(z);
        let b = is.estimate(z);
        assert_eq!(a.p_hat.to_bits(), b.p_hat.to_bits());
        assert_relative_eq!(a.ci_high.unwrap(), b.ci_high.unwrap(), max_relative = 1e-10);
    }
}

#[test]
fn is_covers_tail_and_beats_mc() {
    let m = GaussianMeasure::standard(1).unwrap();
    let ev = identity_1d();
    let rec = optimum(&ev, &m, 3.0);
    assert_relative_eq!(rec.theta[0], 3.0, epsilon = 1e-9);
    let exact = tail(3.0);
    let e = is_estimate(&ev, &m, &rec, 3.0, 10_000, 2).unwrap();
    assert!(e.covers(exact), "{:?} vs {exact}", e);
    assert_eq!(e.method, Method::Is);
    assert!(e.ci_low.unwrap() <= e.p_hat && e.p_hat <= e.ci_high.unwrap());

    let reps = 40;
    let n = 10_000;
    let rmse = |f: &dyn Fn(u64) -> f64| {
        ((0..reps).map(|s| (f(s) - exact).powi(2)).sum::<f64>() / reps as f64).sqrt() / exact
    };
    let is_err = rmse(&|s| is_estimate(&ev, &m, &rec, 3.0, n, 500 + s).unwrap().p_hat);
    let mc_err = rmse(&|s| mc_estimate(&ev, &m, 3.0, n, 500 + s).unwrap().p_hat);
    assert!(is_err * 10.0 <= mc_err, "IS {is_err} vs MC {mc_err}");
}

#[test]
fn is_curve_matches_quadrature_on_2d_toy() {
    let m = GaussianMeasure::standard(2).unwrap();
    let h = 0.2;
    let ev = paraboloid(h);
    let p = Problem::new(&m, &ev).unwrap();
    let lambdas: Vec<f64> = (1..=9).map(|k| 0.5 * k as f64).collect();
    let sweep = sweep_lambda(&p, &lambdas, true, &Tolerances { gradient: 1e-10, ..Default::default() }).unwrap();
    // zs covering p from ~1e-1 to ~1e-6
    let zs = [1.2, 2.0, 2.8, 3.5, 4.2];
    let curve = is_curve(&ev, &m, &sweep, &zs, 20_000, 9).unwrap();
    for (e, &z) in curve.iter().zip(&zs) {
        let exact = paraboloid_mass(z, h);
        let half = e.ci_high.unwrap() - e.p_hat;
        assert!((e.p_hat - exact).abs() <= 2.0 * half, "z={z}: {} ± {half} vs {exact}", e.p_hat);
    }
    assert!(paraboloid_mass(zs[0], h) > 1e-1 && paraboloid_mass(zs[4], h) < 1e-4);
    // batches are reused inside a Voronoi cell and each cell's curve is monotone
    let batch = IsBatch::draw(&ev, &m, &sweep.records().nth(4).unwrap().theta_vec(), 2000, 1).unwrap();
    let ps: Vec<f64> = [2.0, 2.2, 2.4, 2.6].iter().map(|&z| batch.estimate(z).p_hat).collect();
    assert!(ps.windows(2).all(|w| w[1] <= w[0]));
    assert_ne!(partition_seed(9, 0), partition_seed(9, 1));
}

#[test]
fn form_is_exact_for_half_spaces() {
    for beta in [0.0f64, 0.5, 1.0, 2.0, 3.0, 5.0, 8.0] {
        let e = form_from_rate(beta, 0.5 * beta * beta);
        let q = tail(beta);
        assert!((e.p_hat - q).abs() <= 1e-12 * q, "beta={beta}: {} vs {q}", e.p_hat);
        assert_relative_eq!(e.log10_p, q.log10(), epsilon = 1e-10);
    }
    // closed half-space through an optimizer of a correlated Gaussian
    let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let m = GaussianMeasure::new(DVector::from_vec(vec![1.0, 0.0]), c.clone()).unwrap();
    let g = DVector::from_vec(vec![1.0, 2.0]);
    let ev = QuadraticEvent::linear(g.clone());
    let rec = optimum(&ev, &m, 0.8);
    let sd = g.dot(&(&c * &g)).sqrt();
    let exact = tail((rec.z - g.dot(m.mean())) / sd);
    assert_relative_eq!(form_estimate(&rec, &m).unwrap().p_hat, exact, max_relative = 1e-10);
}

#[test]
fn form_asymptotic_bound() {
    let mut prev = 0.0;
    for i in 1..=50 {
        let rate = i as f64;
        let e = form_from_rate(0.0, rate);
        let bound = e.aux.unwrap();
        let oracle = (-rate).exp() / (2.0 * std::f64::consts::PI).sqrt() / (2.0 * rate).sqrt();
        assert_relative_eq!(bound, oracle, max_relative = 1e-12);
        assert!(e.p_hat <= bound);
        let ratio = e.p_hat / bound;
        assert!(ratio > prev);
        prev = ratio;
    }
    assert!(prev > 0.99);
}

#[test]
fn sorm_with_flat_event_is_the_form_bound() {
    let c = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 2.0, 0.1, 0.0, 0.1, 0.5]);
    let m = GaussianMeasure::new(DVector::zeros(3), c).unwrap();
    let ev = QuadraticEvent::linear(DVector::from_vec(vec![1.0, -1.0, 2.0]));
    let rec = optimum(&ev, &m, 1.3);
    let (e, spec) = sorm_estimate_dense(&rec, &m, &DMatrix::zeros(3, 3)).unwrap();
    let form = form_estimate(&rec, &m).unwrap();
    assert_relative_eq!(e.p_hat, form.aux.unwrap(), max_relative = 1e-14);
    assert_eq!(spec.eigenvalues.len(), 2);
    assert_eq!(e.n_eigs, Some(2));
    // prefactor extractions coincide as well
    let sweep = SweepResult {
        entries: vec![SweepEntry { lambda: rec.lambda, record: Some(rec.clone()), error: None, warm_started: false }],
        warm: false,
    };
    let a = prefactor_extract(&[(rec.z, e.p_hat)], &sweep);
    let b = prefactor_extract(&[(rec.z, form.aux.unwrap())], &sweep);
    assert_relative_eq!(a[0].1, b[0].1, max_relative = 1e-14);
}

#[test]
fn sorm_matches_paraboloid_quadrature() {
    let m = GaussianMeasure::standard(2).unwrap();
    let h = 0.1;
    let rec = optimum(&paraboloid(h), &m, 4.0);
    assert_relative_eq!(rec.z, 4.0, epsilon = 1e-9);
    let hess = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, h]));
    let (e, spec) = sorm_estimate_dense(&rec, &m, &hess).unwrap();
    assert_relative_eq!(spec.eigenvalues[0], h, epsilon = 1e-12);
    let q = paraboloid_mass(4.0, h);
    assert!((e.p_hat / q - 1.0).abs() <= 0.05, "{} vs {q}", e.p_hat);
    let form = form_estimate(&rec, &m).unwrap();
    assert!(e.p_hat > form.aux.unwrap() && e.p_hat > form.p_hat);

    // p_SORM / p_quadrature decreases monotonically to 1 along β
    let h = 0.05;
    let hess = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, h]));
    let mut prev = f64::INFINITY;
    for beta in [2.0, 3.0, 4.0, 6.0, 8.0] {
        let rec = optimum(&paraboloid(h), &m, beta);
        let (e, _) = sorm_estimate_dense(&rec, &m, &hess).unwrap();
        let ratio = e.p_hat / paraboloid_mass(beta, h);
        assert!(ratio >= 1.0 && ratio < prev, "beta={beta}: {ratio}");
        prev = ratio;
    }
    assert!(prev < 1.02);
}

#[test]
fn sorm_rejects_asymmetric_and_wrong_size_hessians() {
    let m = GaussianMeasure::standard(2).unwrap();
    let rec = optimum(&paraboloid(0.1), &m, 2.0);
    assert!(sorm_estimate_dense(&rec, &m, &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])).is_err());
    assert!(sorm_estimate_dense(&rec, &m, &DMatrix::zeros(3, 3)).is_err());
}

/// F = ⟨g, θ⟩ + ½θᵀQθ with Q = Σ c_k u_k u_kᵀ and u_k ⟂ g, so θ* = λg and
/// the projected spectrum is {c_k}.
fn rank_three_problem(n: usize, c: [f64; 3]) -> (GaussianMeasure, QuadraticEvent, DMatrix<f64>) {
    let m = GaussianMeasure::standard(n).unwrap();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for k in 0..3 {
        let mut u = DVector::from_fn(n, |i, _| if i == 0 { 0.0 } else { ((i + 1) as f64 * (k as f64 + 0.7)).sin() });
        for b in &basis {
            u -= b * b.dot(&u);
        }
        basis.push(u.normalize());
    }
    let mut q = DMatrix::zeros(n, n);
    for (u, ck) in basis.iter().zip(c) {
        q += u * u.transpose() * ck;
    }
    let mut g = DVector::zeros(n);
    g[0] = 1.0;
    (m, QuadraticEvent::new(g, q.clone()).unwrap(), q)
}

#[test]
fn lowrank_recovers_rank_three_spectrum() {
    let c = [0.09, -0.05, 0.02];
    let (m, ev, q) = rank_three_problem(12, c);
    let rec = optimum(&ev, &m, 2.0);
    let hvp = |v: &DVector<f64>| -> Result<DVector<f64>> { Ok(&q * v) };
    let opts = LowRankOptions { rank: 5, tol: 0.0, ..Default::default() };
    let (low, spec) = sorm_estimate_lowrank(&rec, &m, hvp, &opts).unwrap();
    for (got, want) in spec.eigenvalues.iter().take(3).zip(c) {
        assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
    }
    assert!(spec.eigenvalues[3..].iter().all(|e| e.abs() <= 1e-6));
    let (dense, _) = sorm_estimate_dense(&rec, &m, &q).unwrap();
    assert_relative_eq!(low.p_hat, dense.p_hat, max_relative = 1e-6);
    assert_eq!(low.method, Method::SormLowrank);
    assert!(spec.to_csv().starts_with("i,lambda_i,lambda_times_lambda_i\n1,"));
    assert_eq!(spec.scaled()[0], spec.eigenvalues[0] * 2.0);

    // tolerance truncation keeps only the factors that matter
    let opts = LowRankOptions { rank: 5, tol: 0.06, ..Default::default() };
    let (_, spec) = sorm_estimate_lowrank(&rec, &m, |v| Ok(&q * v), &opts).unwrap();
    assert_eq!(spec.retained, 2);
}

#[test]
fn lowrank_at_full_rank_matches_dense() {
    let n = 6;
    let c = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 + 0.2 * i as f64 } else { 0.1 / (1.0 + (i + j) as f64) });
    let m = GaussianMeasure::new(DVector::from_fn(n, |i, _| 0.1 * i as f64), c).unwrap();
    let q = DMatrix::from_fn(n, n, |i, j| 0.03 * ((i * j) as f64 + 1.0).cos() + 0.03 * (((i + j) as f64) * 0.5).sin());
    let q = (&q + q.transpose()) * 0.5;
    let ev = QuadraticEvent::new(DVector::from_fn(n, |i, _| 1.0 - 0.3 * i as f64), q.clone()).unwrap();
    let rec = optimum(&ev, &m, 1.5);
    let (dense, ds) = sorm_estimate_dense(&rec, &m, &q).unwrap();
    let opts = LowRankOptions { rank: n - 1, tol: 0.0, ..Default::default() };
    let (low, ls) = sorm_estimate_lowrank(&rec, &m, |v| Ok(&q * v), &opts).unwrap();
    assert_relative_eq!(low.p_hat, dense.p_hat, max_relative = 1e-6);
    for (a, b) in ls.eigenvalues.iter().zip(&ds.eigenvalues) {
        assert!((a - b).abs() <= 1e-6);
    }
    // requests beyond n − 1 are clamped
    let opts = LowRankOptions { rank: 50, tol: 0.0, ..Default::default() };
    let (clamped, _) = sorm_estimate_lowrank(&rec, &m, |v| Ok(&q * v), &opts).unwrap();
    assert_relative_eq!(clamped.p_hat, dense.p_hat, max_relative = 1e-6);
}

#[test]
fn lowrank_with_no_eigenvalues_is_the_form_bound() {
    let (m, ev, q) = rank_three_problem(8, [0.1, 0.05, 0.01]);
    let rec = optimum(&ev, &m, 2.0);
    let opts = LowRankOptions { rank: 0, ..Default::default() };
    let (e, spec) = sorm_estimate_lowrank(&rec, &m, |v| Ok(&q * v), &opts).unwrap();
    assert!(spec.eigenvalues.is_empty());
    assert_relative_eq!(e.p_hat, form_estimate(&rec, &m).unwrap().aux.unwrap(), max_relative = 1e-14);
}

#[test]
fn positivity_violation_is_a_hard_error() {
    let (m, ev, q) = rank_three_problem(6, [0.7, 0.1, 0.05]);
    let rec = optimum(&ev, &m, 2.0);
    match sorm_estimate_dense(&rec, &m, &q) {
        Err(Error::SormPositivity { index, eigenvalue, factor }) => {
            assert_eq!(index, 1);
            assert_relative_eq!(eigenvalue, 0.7, epsilon = 1e-10);
            assert_relative_eq!(factor, 1.0 - 1.4, epsilon = 1e-10);
        }
        other => panic!("expected positivity error, got {other:?}"),
    }
    let err = sorm_estimate_lowrank(&rec, &m, |v| Ok(&q * v), &LowRankOptions::default()).unwrap_err();
    assert!(err.to_string().contains("eigenvalue #1"), "{err}");
}

#[test]
fn too_many_failed_samples_abort() {
    struct Flaky;
    impl EventMap for Flaky {
        fn dim(&self) -> usize {
            1
        }
        fn value(&self, t: &DVector<f64>) -> Result<f64> {
            if t[0] > 2.0 {
                Err(Error::Positivity { element: 0, time: 0.0, value: -1.0 })
            } else {
                Ok(t[0])
            }
        }
        fn value_grad(&self, t: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
            Ok((self.value(t)?, DVector::from_element(1, 1.0)))
        }
    }
    let m = GaussianMeasure::standard(1).unwrap();
    // ~2.3% of draws fail
    assert!(matches!(McBatch::draw(&Flaky, &m, 10_000, 1), Err(Error::TooManyFailures { .. })));
    // a narrower prior stays under 1%
    let narrow = GaussianMeasure::isotropic(DVector::zeros(1), 0.5).unwrap();
    let b = McBatch::draw(&Flaky, &narrow, 10_000, 1).unwrap();
    assert!(b.failed > 0 && b.failed * 100 <= 10_000);
    assert_eq!(b.estimate(-10.0).n_samples, Some(10_000 - b.failed));
    assert_eq!(b.estimate(-10.0).p_hat, 1.0);
}

#[test]
fn fitted_prefactor_overestimates_linear_tail() {
    let m = GaussianMeasure::standard(1).unwrap();
    let ev = identity_1d();
    let p = Problem::new(&m, &ev).unwrap();
    let lambdas: Vec<f64> = (1..=12).map(|k| 0.5 * k as f64).collect();
    let sweep = sweep_lambda(&p, &lambdas, true, &Tolerances::default()).unwrap();
    let mc: Vec<(f64, f64)> = (0..=10).map(|k| 0.5 + 0.1 * k as f64).map(|z| (z, tail(z))).collect();
    let (c0, curve) = fit_constant_prefactor(&mc, &sweep, (0.5, 1.5)).unwrap();
    assert!(c0 > 0.0 && c0 < 0.5);
    for &(z, p) in curve.iter().filter(|(z, _)| *z >= 2.0) {
        assert!(p > tail(z), "z={z}");
    }
    assert!(fit_constant_prefactor(&mc, &sweep, (7.0, 8.0)).is_err());
}

#[test]
fn form_prefactor_tends_to_gaussian_asymptote() {
    let m = GaussianMeasure::standard(1).unwrap();
    let ev = identity_1d();
    let p = Problem::new(&m, &ev).unwrap();
    let lambdas: Vec<f64> = (1..=30).map(|k| k as f64).collect();
    let sweep = sweep_lambda(&p, &lambdas, true, &Tolerances::default()).unwrap();
    let form: Vec<(f64, f64)> = sweep.records().map(|r| (r.z, form_from_rate(r.z, r.rate).p_hat)).collect();
    let c0 = prefactor_extract(&form, &sweep);
    assert_eq!(c0.len(), 30);
    let mut prev = 0.0;
    for (&(z, c), r) in c0.iter().zip(sweep.records()) {
        let ratio = c * (4.0 * std::f64::consts::PI * r.rate).sqrt();
        assert!(ratio > prev && ratio < 1.0, "z={z}");
        prev = ratio;
    }
    assert!(prev > 0.998);
    // FORM curve along the sweep is nonincreasing
    assert!(form.windows(2).all(|w| w[1].1 <= w[0].1));
}

#[test]
fn is_and_sorm_prefactors_converge_on_2d_toy() {
    let m = GaussianMeasure::standard(2).unwrap();
    let h = 0.1;
    let ev = paraboloid(h);
    let hess = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, h]));
    let mut gaps = Vec::new();
    for beta in [1.5, 2.5, (20.0f64).sqrt()] {
        let rec = optimum(&ev, &m, beta);
        let (s, _) = sorm_estimate_dense(&rec, &m, &hess).unwrap();
        let i = is_estimate(&ev, &m, &rec, rec.z, 20_000, 4).unwrap();
        gaps.push((s.p_hat / i.p_hat - 1.0).abs());
    }
    assert!(gaps[2] <= 0.1, "{gaps:?}");
    assert!(gaps[0] > gaps[2]);
}

#[test]
fn curve_csv_layout() {
    let b = McBatch::from_values(vec![0.0, 1.0, 2.0, 3.0]);
    let mut curve = b.curve(&[0.5, 2.5]);
    curve.push(form_from_rate(1.0, 0.5));
    let text = curve_to_csv(&curve);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "z,p,ci_low,ci_high,method");
    assert!(lines[1].starts_with("0.5,0.75,") && lines[1].ends_with(",mc"));
    assert!(lines[3].ends_with(",,,form"));
    assert_eq!(Method::SormLowrank.name(), "sorm-lowrank");
    assert_relative_eq!(normal_tail(1.0), tail(1.0), max_relative = 1e-12);
}
