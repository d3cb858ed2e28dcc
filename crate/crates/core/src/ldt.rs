//! Large-deviation optimization: minimize H(θ) = I(θ) − λF(θ) by
//! covariance-preconditioned steepest descent with Armijo backtracking.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::measures::{is_infinite_rate, standard_normal_vector, RateFunction};

/// Parameter-to-event map with gradient.
pub trait EventMap: Sync {
    fn dim(&self) -> usize;
    fn value(&self, theta: &DVector<f64>) -> Result<f64>;
    fn value_grad(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)>;

    /// Value at a line-search trial point; implementations may cache work
    /// for a following `value_grad` at the same point.
    fn trial(&self, theta: &DVector<f64>) -> Result<f64> {
        self.value(theta)
    }

    /// ∇²F·v by central differences of gradients.
    fn hess_vec(&self, theta: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        let vn = v.norm();
        if vn == 0.0 {
            return Ok(DVector::zeros(v.len()));
        }
        let step = 1e-4 * theta.norm().max(1.0) / vn;
        crate::adjoint::hessian_vector_product(|t| Ok(self.value_grad(t)?.1), theta, v, step)
    }

    fn name(&self) -> String {
        "event".into()
    }
}

/// Event maps that live on a time grid and report the optimality of the
/// selected time level.
pub trait TimedEventMap: EventMap {
    /// Level maximizing the time series at θ (earliest on ties).
    fn select_level(&self, theta: &DVector<f64>) -> Result<usize>;
    /// The time series at a fixed level.
    fn level_value(&self, theta: &DVector<f64>, level: usize) -> Result<f64>;
    fn time_check(&self, theta: &DVector<f64>, lambda: f64) -> Result<TimeCheck>;
}

/// Line-search trials see the level chosen at the last accepted iterate;
/// gradients re-select it.
struct LevelPinned<'a> {
    timed: &'a dyn TimedEventMap,
    level: std::sync::Mutex<Option<usize>>,
}

impl EventMap for LevelPinned<'_> {
    fn dim(&self) -> usize {
        self.timed.dim()
    }
    fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        self.timed.value(theta)
    }
    fn trial(&self, theta: &DVector<f64>) -> Result<f64> {
        match *self.level.lock().unwrap() {
            Some(m) => self.timed.level_value(theta, m),
            None => self.timed.trial(theta),
        }
    }
    fn value_grad(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let m = self.timed.select_level(theta)?;
        *self.level.lock().unwrap() = Some(m);
        self.timed.value_grad(theta)
    }
    fn name(&self) -> String {
        self.timed.name()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeCheck {
    pub t_star: f64,
    pub level: usize,
    /// ∂J/∂t at the selected level.
    pub dj_dt: f64,
    /// Largest |∂J/∂t| that level resolution can explain.
    pub bound: f64,
}

/// F(θ) = c + ⟨g, θ⟩ + ½ θᵀQθ with exact derivatives.
#[derive(Debug, Clone)]
pub struct QuadraticEvent {
    pub constant: f64,
    pub linear: DVector<f64>,
    pub quadratic: nalgebra::DMatrix<f64>,
}

impl QuadraticEvent {
    pub fn new(linear: DVector<f64>, quadratic: nalgebra::DMatrix<f64>) -> Result<Self> {
        let n = linear.len();
        if quadratic.nrows() != n || quadratic.ncols() != n {
            return Err(Error::Dimension { expected: n, got: quadratic.nrows() });
        }
        Ok(Self { constant: 0.0, linear, quadratic })
    }

    pub fn linear(g: DVector<f64>) -> Self {
        let n = g.len();
        Self { constant: 0.0, linear: g, quadratic: nalgebra::DMatrix::zeros(n, n) }
    }
}

impl EventMap for QuadraticEvent {
    fn dim(&self) -> usize {
        self.linear.len()
    }
    fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim(), theta.len())?;
        Ok(self.constant + self.linear.dot(theta) + 0.5 * theta.dot(&(&self.quadratic * theta)))
    }
    fn value_grad(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let v = self.value(theta)?;
        Ok((v, &self.linear + &self.quadratic * theta))
    }
    fn hess_vec(&self, _theta: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.quadratic * v)
    }
    fn name(&self) -> String {
        "quadratic".into()
    }
}

/// Event map from user closures.
pub struct ClosureEvent<V, G> {
    pub dim: usize,
    pub value: V,
    pub grad: G,
}

impl<V, G> EventMap for ClosureEvent<V, G>
where
    V: Fn(&DVector<f64>) -> f64 + Sync,
    G: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim, theta.len())?;
        Ok((self.value)(theta))
    }
    fn value_grad(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        check_dim(self.dim, theta.len())?;
        Ok(((self.value)(theta), (self.grad)(theta)))
    }
}

pub struct Problem<'a> {
    pub rate: &'a dyn RateFunction,
    pub event: &'a dyn EventMap,
}

impl<'a> Problem<'a> {
    pub fn new(rate: &'a dyn RateFunction, event: &'a dyn EventMap) -> Result<Self> {
        check_dim(rate.dim(), event.dim())?;
        Ok(Self { rate, event })
    }

    pub fn dim(&self) -> usize {
        self.rate.dim()
    }

    fn c_norm(&self, theta: &DVector<f64>, g: &DVector<f64>) -> f64 {
        g.dot(&self.rate.precondition(theta, g)).max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Relative reduction of the C-weighted gradient norm from its largest value.
    pub gradient: f64,
    pub max_iter: usize,
    pub c1: f64,
    pub backtrack: f64,
    pub alpha0: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { gradient: 1e-5, max_iter: 500, c1: 1e-4, backtrack: 0.5, alpha0: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub hamiltonian: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimumRecord {
    pub lambda: f64,
    pub theta: Vec<f64>,
    pub z: f64,
    pub rate: f64,
    pub hamiltonian: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<IterationRecord>,
    pub objective: String,
    pub t_star: Option<f64>,
    pub level: Option<usize>,
    pub time_derivative: Option<f64>,
    pub message: Option<String>,
}

impl OptimumRecord {
    pub fn theta_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta)
    }
}

/// ‖∇I − λ∇F‖_C / max(‖∇I‖_C, ‖λ∇F‖_C)
pub fn kkt_residual(problem: &Problem, theta: &DVector<f64>, lambda: f64) -> Result<f64> {
    let gi = problem.rate.rate_grad(theta);
    let (_, gf) = problem.event.value_grad(theta)?;
    Ok(kkt_from_parts(problem, theta, &gi, &(gf * lambda)))
}

fn kkt_from_parts(problem: &Problem, theta: &DVector<f64>, gi: &DVector<f64>, lgf: &DVector<f64>) -> f64 {
    let num = problem.c_norm(theta, &(gi - lgf));
    let den = problem.c_norm(theta, gi).max(problem.c_norm(theta, lgf));
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

struct DescentOutcome {
    theta: DVector<f64>,
    f: f64,
    grad_f: DVector<f64>,
    rate: f64,
    iterations: usize,
    converged: bool,
    history: Vec<IterationRecord>,
    message: Option<String>,
}

fn descend(
    problem: &Problem,
    lambda: f64,
    start: &DVector<f64>,
    tol: &Tolerances,
    extra_stop: &mut dyn FnMut(&DVector<f64>) -> Result<bool>,
) -> Result<DescentOutcome> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    check_dim(problem.dim(), start.len())?;
    let mut theta = start.clone();
    let mut rate = problem.rate.rate(&theta);
    if is_infinite_rate(rate) {
        return Err(Error::InvalidArgument("start point lies outside the support of the measure".into()));
    }
    let (mut f, mut gf) = problem.event.value_grad(&theta)?;
    let mut h = rate - lambda * f;
    let mut g = problem.rate.rate_grad(&theta) - &gf * lambda;
    let mut d = problem.rate.precondition(&theta, &g);
    let mut gn = g.dot(&d).max(0.0).sqrt();
    let mut gn_ref = gn;
    let mut history = vec![IterationRecord { hamiltonian: h, grad_norm: gn, step: 0.0 }];
    let mut alpha = tol.alpha0;
    let mut iterations = 0;
    loop {
        if gn == 0.0 || gn <= tol.gradient * gn_ref {
            if extra_stop(&theta)? {
                return Ok(DescentOutcome {
                    theta,
                    f,
                    grad_f: gf,
                    rate,
                    iterations,
                    converged: true,
                    history,
                    message: None,
                });
            }
        }
        if iterations >= tol.max_iter {
            return Ok(DescentOutcome {
                theta,
                f,
                grad_f: gf,
                rate,
                iterations,
                converged: false,
                history,
                message: Some(format!("iteration cap {} reached", tol.max_iter)),
            });
        }
        let decrease = gn * gn;
        let mut first_try = true;
        let accepted = loop {
            let trial = &theta - &d * alpha;
            let r = problem.rate.rate(&trial);
            if !is_infinite_rate(r) {
                let ft = problem.event.trial(&trial).map_err(|e| annotate(e, &trial))?;
                let ht = r - lambda * ft;
                if ht <= h - tol.c1 * alpha * decrease {
                    break Some((trial, r, ht));
                }
            }
            first_try = false;
            alpha *= tol.backtrack;
            if alpha * gn < 1e-14 * theta.norm().max(1.0) || alpha < 1e-30 {
                break None;
            }
        };
        let Some((trial, r, ht)) = accepted else {
            let msg = "line search stalled".to_string();
            return Ok(DescentOutcome {
                converged: false,
                message: Some(msg),
                theta,
                f,
                grad_f: gf,
                rate,
                iterations,
                history,
            });
        };
        let step = alpha;
        if first_try {
            alpha = (alpha * 2.0).min(tol.alpha0);
        }
        theta = trial;
        rate = r;
        let (fv, gfv) = problem.event.value_grad(&theta).map_err(|e| annotate(e, &theta))?;
        f = fv;
        gf = gfv;
        h = rate - lambda * f;
        debug_assert!(h <= ht + 1e-12 * ht.abs().max(1.0));
        g = problem.rate.rate_grad(&theta) - &gf * lambda;
        d = problem.rate.precondition(&theta, &g);
        gn = g.dot(&d).max(0.0).sqrt();
        gn_ref = gn_ref.max(gn);
        iterations += 1;
        history.push(IterationRecord { hamiltonian: h, grad_norm: gn, step });
    }
}

fn annotate(e: Error, theta: &DVector<f64>) -> Error {
    match e {
        Error::Positivity { .. } | Error::WaveSpeed { .. } => {
            log::warn!("forward solve failed at iterate {:?}", theta.as_slice());
            e
        }
        e => e,
    }
}

fn record(problem: &Problem, lambda: f64, out: DescentOutcome) -> OptimumRecord {
    let gi = problem.rate.rate_grad(&out.theta);
    let kkt = kkt_from_parts(problem, &out.theta, &gi, &(&out.grad_f * lambda));
    OptimumRecord {
        lambda,
        theta: out.theta.iter().copied().collect(),
        z: out.f,
        rate: out.rate,
        hamiltonian: out.rate - lambda * out.f,
        kkt_residual: kkt,
        iterations: out.iterations,
        converged: out.converged,
        history: out.history,
        objective: problem.event.name(),
        t_star: None,
        level: None,
        time_derivative: None,
        message: out.message,
    }
}

pub fn minimize_hamiltonian(problem: &Problem, lambda: f64, start: &DVector<f64>, tol: &Tolerances) -> Result<OptimumRecord> {
    let out = descend(problem, lambda, start, tol, &mut |_| Ok(true))?;
    Ok(record(problem, lambda, out))
}

/// Alternating descent: each iteration picks the argmax level at the current
/// iterate and takes one preconditioned step on θ with that level held fixed
/// through the line search. Converged once the θ-gradient criterion holds and
/// |∂J/∂t| at the selected level is within the level-resolution bound.
pub fn minimize_timeopt(
    problem: &Problem,
    timed: &dyn TimedEventMap,
    lambda: f64,
    start: &DVector<f64>,
    tol: &Tolerances,
) -> Result<OptimumRecord> {
    check_dim(problem.dim(), timed.dim())?;
    let pinned = LevelPinned { timed, level: std::sync::Mutex::new(None) };
    let inner = Problem { rate: problem.rate, event: &pinned };
    let mut last: Option<TimeCheck> = None;
    let out = descend(&inner, lambda, start, tol, &mut |theta| {
        let tc = timed.time_check(theta, lambda)?;
        last = Some(tc);
        Ok(tc.dj_dt.abs() <= tc.bound)
    })?;
    let tc = match last {
        Some(tc) => tc,
        None => timed.time_check(&out.theta, lambda)?,
    };
    let mut rec = record(problem, lambda, out);
    if rec.converged && tc.dj_dt.abs() > tc.bound {
        rec.converged = false;
    }
    rec.t_star = Some(tc.t_star);
    rec.level = Some(tc.level);
    rec.time_derivative = Some(tc.dj_dt);
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub lambda: f64,
    pub record: Option<OptimumRecord>,
    pub error: Option<String>,
    pub warm_started: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
    pub warm: bool,
}

impl SweepResult {
    pub fn records(&self) -> impl Iterator<Item = &OptimumRecord> {
        self.entries.iter().filter_map(|e| e.record.as_ref())
    }

    /// (z, I*) pairs of the successful entries, sorted by z.
    pub fn rate_curve(&self) -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> = self.records().map(|r| (r.z, r.rate)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }

    /// I*(z) by cubic Hermite interpolation with slopes dI*/dz = λ, limited
    /// to keep it nondecreasing; `None` outside the sweep's z-range.
    pub fn rate_at(&self, z: f64) -> Option<f64> {
        let mut pts: Vec<(f64, f64, f64)> = self.records().map(|r| (r.z, r.rate, r.lambda)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pts.is_empty() || z < pts[0].0 || z > pts[pts.len() - 1].0 {
            return None;
        }
        let j = pts.partition_point(|p| p.0 < z);
        if j == 0 {
            return Some(pts[0].1);
        }
        let (x0, y0, d0) = pts[j - 1];
        let (x1, y1, d1) = pts[j];
        let h = x1 - x0;
        if !(h > 0.0 && y1 >= y0) {
            return interpolate_monotone(&self.rate_curve(), z);
        }
        let s = (y1 - y0) / h;
        let (d0, d1) = (d0.clamp(0.0, 3.0 * s), d1.clamp(0.0, 3.0 * s));
        let t = (z - x0) / h;
        let (t2, t3) = (t * t, t * t * t);
        Some(
            (2.0 * t3 - 3.0 * t2 + 1.0) * y0
                + (t3 - 2.0 * t2 + t) * h * d0
                + (-2.0 * t3 + 3.0 * t2) * y1
                + (t3 - t2) * h * d1,
        )
    }
}

pub(crate) fn interpolate_monotone(curve: &[(f64, f64)], z: f64) -> Option<f64> {
    if curve.is_empty() || z < curve[0].0 || z > curve[curve.len() - 1].0 {
        return None;
    }
    // running max keeps the interpolant nondecreasing
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(curve.len());
    for &(x, y) in curve {
        let y = pts.last().map_or(y, |p: &(f64, f64)| y.max(p.1));
        pts.push((x, y));
    }
    let j = pts.partition_point(|p| p.0 < z);
    if j == 0 {
        return Some(pts[0].1);
    }
    if j == pts.len() {
        return Some(pts[pts.len() - 1].1);
    }
    let (x0, y0) = pts[j - 1];
    let (x1, y1) = pts[j];
    if x1 == x0 {
        return Some(y1);
    }
    Some(y0 + (y1 - y0) * (z - x0) / (x1 - x0))
}

/// Runs the optimizer over an ascending λ grid. Warm mode starts each solve at
/// the previous optimizer; cold mode starts every solve at the measure's
/// center and may run entries in parallel.
pub fn sweep_lambda(problem: &Problem, lambdas: &[f64], warm: bool, tol: &Tolerances) -> Result<SweepResult> {
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l > 0.0)) || lambdas.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("lambda grid must be positive and strictly ascending".into()));
    }
    let center = problem.rate.center();
    let run = |lambda: f64, start: &DVector<f64>, warm_started: bool| match minimize_hamiltonian(problem, lambda, start, tol) {
        Ok(r) => SweepEntry { lambda, record: Some(r), error: None, warm_started },
        Err(e) => SweepEntry { lambda, record: None, error: Some(e.to_string()), warm_started },
    };
    let entries: Vec<SweepEntry> = if warm {
        let mut out = Vec::with_capacity(lambdas.len());
        let mut start = center.clone();
        let mut warm_started = false;
        for &l in lambdas {
            let e = run(l, &start, warm_started);
            if let Some(r) = &e.record {
                start = r.theta_vec();
                warm_started = true;
            }
            out.push(e);
        }
        out
    } else {
        lambdas.par_iter().map(|&l| run(l, &center, false)).collect()
    };
    let result = SweepResult { entries, warm };
    if warm {
        let zs: Vec<f64> = result.records().map(|r| r.z).collect();
        if zs.windows(2).any(|w| w[1] < w[0]) {
            log::warn!("z(lambda) is not monotone along the warm sweep: {zs:?}");
        }
    }
    Ok(result)
}

/// Best of `starts` optimizations from θ0 and random prior-like draws
/// θ0 + ζ (ζ standard normal, scaled by `spread`).
pub fn multistart(
    problem: &Problem,
    lambda: f64,
    starts: usize,
    spread: f64,
    seed: u64,
    tol: &Tolerances,
) -> Result<(OptimumRecord, Vec<OptimumRecord>)> {
    let center = problem.rate.center();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![center.clone()];
    for _ in 1..starts.max(1) {
        points.push(&center + standard_normal_vector(&mut rng, center.len()) * spread);
    }
    let all: Vec<OptimumRecord> = points
        .par_iter()
        .map(|p| minimize_hamiltonian(problem, lambda, p, tol))
        .collect::<Result<_>>()?;
    let best = all
        .iter()
        .min_by(|a, b| a.hamiltonian.total_cmp(&b.hamiltonian))
        .cloned()
        .expect("at least one start");
    Ok((best, all))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderReport {
    /// min over probes of ⟨v, (∇²I − λ∇²F) v⟩ / ‖v‖²
    pub min_curvature: f64,
    pub probes: usize,
    pub positive: bool,
}

/// Probes the second-order condition in the tangent space {v : ⟨∇I(θ*), v⟩ = 0}.
pub fn second_order_check(problem: &Problem, rec: &OptimumRecord, probes: usize, seed: u64) -> Result<SecondOrderReport> {
    let theta = rec.theta_vec();
    let n = theta.len();
    let gi = problem.rate.rate_grad(&theta);
    let gn = gi.norm();
    let normal = if gn > 0.0 { Some(gi / gn) } else { None };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min = f64::INFINITY;
    let mut scale: f64 = 0.0;
    for _ in 0..probes.max(1) {
        let mut v = standard_normal_vector(&mut rng, n);
        if let Some(nrm) = &normal {
            v -= nrm * nrm.dot(&v);
        }
        let vn2 = v.norm_squared();
        if vn2 == 0.0 {
            continue;
        }
        let hi = problem.rate.rate_hess_vec(&theta, &v);
        let hf = problem.event.hess_vec(&theta, &v)? * rec.lambda;
        let q = v.dot(&(&hi - &hf)) / vn2;
        scale = scale.max(v.dot(&hi).abs() / vn2).max(v.dot(&hf).abs() / vn2);
        min = min.min(q);
    }
    Ok(SecondOrderReport { min_curvature: min, probes, positive: min >= -1e-6 * scale.max(1.0) })
}
