//! Objectives on the observable time series and the discrete adjoint of the
//! DG / SSP-RK2 forward solver.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::source_model::{SlipBasis, SlipPrior};
use crate::swe::{Mesh, ObservationWindow, Observer, StateTrajectory, TimeGrid, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObjectiveKind {
    /// Soft maximum γ·log((1/T_F)∫ exp(f/γ) dt).
    Regularized { gamma: f64 },
    /// Maximum over the stored time levels.
    TimeOptimal,
}

impl ObjectiveKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ObjectiveKind::Regularized { gamma } if !(gamma > 0.0) => {
                Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveKind::Regularized { .. } => "regularized",
            ObjectiveKind::TimeOptimal => "time-optimal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub lambda: f64,
    pub window: ObservationWindow,
}

/// Value of the objective and ∂F/∂f_m for every level.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub level_weights: Vec<f64>,
    /// Maximizing level (earliest on ties).
    pub argmax: usize,
}

/// Earliest level attaining the maximum.
pub fn argmax_earliest(series: &[f64]) -> usize {
    let mut best = 0;
    for (m, &f) in series.iter().enumerate() {
        if f > series[best] {
            best = m;
        }
    }
    best
}

pub fn eval_objective(series: &[f64], grid: &TimeGrid, kind: ObjectiveKind) -> Result<ObjectiveValue> {
    kind.validate()?;
    check_dim(grid.steps + 1, series.len())?;
    let argmax = argmax_earliest(series);
    let fmax = series[argmax];
    match kind {
        ObjectiveKind::TimeOptimal => {
            let mut w = vec![0.0; series.len()];
            w[argmax] = 1.0;
            Ok(ObjectiveValue { value: fmax, level_weights: w, argmax })
        }
        ObjectiveKind::Regularized { gamma } => {
            let tf = grid.t_final();
            let q = grid.quadrature_weights();
            let e: Vec<f64> = series.iter().zip(&q).map(|(f, w)| w / tf * ((f - fmax) / gamma).exp()).collect();
            let sum: f64 = e.iter().sum();
            let value = fmax + gamma * sum.ln();
            let w = e.into_iter().map(|x| x / sum).collect();
            Ok(ObjectiveValue { value, level_weights: w, argmax })
        }
    }
}

pub fn eval_f_gamma(series: &[f64], grid: &TimeGrid, gamma: f64) -> Result<f64> {
    Ok(eval_objective(series, grid, ObjectiveKind::Regularized { gamma })?.value)
}

/// (max f, t*, level) with ties going to the earliest level.
pub fn eval_f_timeopt(series: &[f64], grid: &TimeGrid) -> (f64, f64, usize) {
    let m = argmax_earliest(series);
    (series[m], grid.time(m), m)
}

/// Adjoint fields on the same time grid as the forward run, scaled by λ.
#[derive(Debug, Clone)]
pub struct AdjointTrajectory {
    pub lambda: f64,
    /// adjoint of h at each level
    pub p: Vec<Vec<f64>>,
    /// adjoint of v at each level
    pub w: Vec<Vec<f64>>,
    /// adjoint of the first-stage φ at each level
    pub psi: Vec<Vec<f64>>,
    /// λ·∂F/∂B at the mesh vertices
    pub bathymetry_sensitivity: Vec<f64>,
    pub objective: ObjectiveValue,
}

/// Backward sweep with per-level seeds on h: seeds[m] multiplies the
/// observer weights. Returns the vertex sensitivity and, if requested, the
/// adjoint levels.
pub(crate) fn backward_sweep(
    traj: &StateTrajectory,
    observer: &Observer,
    seeds: &[f64],
    store: bool,
) -> Result<(Vec<f64>, Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>)> {
    let mesh = traj.mesh;
    let n = mesh.n_nodes();
    let steps = traj.grid.steps;
    check_dim(steps + 1, seeds.len())?;
    check_dim(steps + 1, traj.levels.len())?;
    let op = traj.operator();
    let dt = traj.grid.dt;
    let mut ws = Workspace::new(&mesh);
    let mut bx_bar = vec![0.0; mesh.elements];
    let mut ubar = vec![0.0; 2 * n];
    let inject = |ubar: &mut [f64], s: f64| {
        if s != 0.0 {
            for &(i, w) in &observer.weights {
                ubar[i] += s * w;
            }
        }
    };
    inject(&mut ubar, seeds[steps]);
    let mut levels = Vec::new();
    let mut psis = Vec::new();
    if store {
        levels.push(ubar.clone());
        psis.push(vec![0.0; n]);
    }
    let mut k = vec![0.0; 2 * n];
    let mut u1 = vec![0.0; 2 * n];
    let mut seed = vec![0.0; 2 * n];
    let mut u1bar = vec![0.0; 2 * n];
    let mut next = vec![0.0; 2 * n];
    for m in (0..steps).rev() {
        let t = traj.grid.time(m);
        let un = &traj.levels[m].q;
        op.apply(un, t, &mut ws, &mut k)?;
        for i in 0..2 * n {
            u1[i] = un[i] + dt * k[i];
        }
        for i in 0..2 * n {
            seed[i] = 0.5 * dt * ubar[i];
            u1bar[i] = 0.5 * ubar[i];
        }
        op.vjp(&u1, t + dt, &seed, &mut ws, &mut u1bar, &mut bx_bar)?;
        for i in 0..2 * n {
            seed[i] = dt * u1bar[i];
            next[i] = 0.5 * ubar[i] + u1bar[i];
        }
        op.vjp(un, t, &seed, &mut ws, &mut next, &mut bx_bar)?;
        inject(&mut next, seeds[m]);
        std::mem::swap(&mut ubar, &mut next);
        if store {
            levels.push(ubar.clone());
            psis.push(ws.phi_bar.clone());
        }
    }
    let dx = mesh.dx();
    let mut vertex = vec![0.0; mesh.n_vertices()];
    for (kk, &b) in bx_bar.iter().enumerate() {
        vertex[kk + 1] += b / dx;
        vertex[kk] -= b / dx;
    }
    if store {
        levels.reverse();
        psis.reverse();
        Ok((vertex, Some((levels, psis))))
    } else {
        Ok((vertex, None))
    }
}

/// Adjoint of the discrete solver for λ·F, keeping every level.
pub fn solve_adjoint(traj: &StateTrajectory, spec: &ObjectiveSpec) -> Result<AdjointTrajectory> {
    adjoint_impl(traj, spec, true)
}

pub(crate) fn adjoint_impl(traj: &StateTrajectory, spec: &ObjectiveSpec, store: bool) -> Result<AdjointTrajectory> {
    if !(spec.lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be nonnegative, got {}", spec.lambda)));
    }
    let observer = Observer::new(&traj.mesh, &spec.window, &traj.bathymetry.b0);
    let series: Vec<f64> = traj.levels.iter().map(|s| observer.observe(s.h())).collect();
    let objective = eval_objective(&series, &traj.grid, spec.kind)?;
    let seeds: Vec<f64> = objective.level_weights.iter().map(|w| spec.lambda * w).collect();
    let (sens, levels) = backward_sweep(traj, &observer, &seeds, store)?;
    let n = traj.mesh.n_nodes();
    let (p, w, psi) = match levels {
        Some((l, psi)) => {
            let (p, w) = l.into_iter().map(|u| (u[..n].to_vec(), u[n..].to_vec())).unzip();
            (p, w, psi)
        }
        None => (Vec::new(), Vec::new(), Vec::new()),
    };
    Ok(AdjointTrajectory { lambda: spec.lambda, p, w, psi, bathymetry_sensitivity: sens, objective })
}

/// ∇J = C_s⁻¹S − Oᵀ(λ ∂F/∂B).
pub fn assemble_gradient(
    adjoint: &AdjointTrajectory,
    basis: &SlipBasis,
    prior: &SlipPrior,
    slips: &DVector<f64>,
) -> Result<DVector<f64>> {
    let rate_grad = prior.measure().rate_grad(slips)?;
    Ok(rate_grad - basis.transpose_apply(&adjoint.bathymetry_sensitivity))
}

/// DG value of a nodal field at x, taken from the element on `side` (−1 left,
/// +1 right) when x sits on a vertex.
fn trace(mesh: &Mesh, q: &[f64], x: f64, side: i32) -> f64 {
    let dx = mesh.dx();
    let r = (x - mesh.a) / dx;
    let mut k = r.floor() as isize;
    let on_vertex = (r - r.round()).abs() < 1e-9;
    if on_vertex {
        k = r.round() as isize;
        if side < 0 {
            k -= 1;
        }
    }
    let k = k.clamp(0, mesh.elements as isize - 1) as usize;
    let t = ((x - mesh.vertex(k)) / dx).clamp(0.0, 1.0);
    q[2 * k] * (1.0 - t) + q[2 * k + 1] * t
}

/// λ·(v̂(d) − v̂(c))/(d − c) at level m, i.e. −λ times the rate of change of
/// the window-averaged h. At a vertex v̂ is the solver's mass flux; inside an
/// element it is the DG trace of v.
pub fn time_derivative(traj: &StateTrajectory, window: &ObservationWindow, lambda: f64, m: usize) -> f64 {
    let mesh = traj.mesh;
    let state = &traj.levels[m];
    let v = state.v();
    let fluxes = {
        let op = traj.operator();
        let mut ws = Workspace::new(&mesh);
        op.prepare(&state.q, traj.time(m), &mut ws).ok().map(|_| ws.fh)
    };
    let flux_at = |x: f64, side: i32| {
        let r = (x - mesh.a) / mesh.dx();
        match &fluxes {
            Some(fh) if (r - r.round()).abs() < 1e-9 => fh[r.round() as usize],
            _ => trace(&mesh, v, x, side),
        }
    };
    lambda * (flux_at(window.d, -1) - flux_at(window.c, 1)) / (window.d - window.c)
}

/// Central differences of a gradient oracle along `dir`.
pub fn hessian_vector_product<G>(grad: G, s: &DVector<f64>, dir: &DVector<f64>, step: f64) -> Result<DVector<f64>>
where
    G: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("HVP step must be positive, got {step}")));
    }
    check_dim(s.len(), dir.len())?;
    let gp = grad(&(s + dir * step))?;
    let gm = grad(&(s - dir * step))?;
    Ok((gp - gm) / (2.0 * step))
}

/// One row of a directional finite-difference check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub step: f64,
    pub fd: f64,
    pub adjoint: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub rows: Vec<GradCheckRow>,
    pub min_rel_error: f64,
}

pub const DEFAULT_FD_STEPS: [f64; 7] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7];

/// Central differences of `value` along `dir` against ⟨grad, dir⟩ for each step.
pub fn directional_check<V>(value: V, grad: &DVector<f64>, s: &DVector<f64>, dir: &DVector<f64>, steps: &[f64]) -> Result<GradCheck>
where
    V: Fn(&DVector<f64>) -> Result<f64>,
{
    check_dim(s.len(), dir.len())?;
    check_dim(s.len(), grad.len())?;
    if steps.is_empty() {
        return Err(Error::InvalidArgument("no finite-difference steps given".into()));
    }
    let adjoint = grad.dot(dir);
    let mut rows = Vec::with_capacity(steps.len());
    for &step in steps {
        let fp = value(&(s + dir * step))?;
        let fm = value(&(s - dir * step))?;
        let fd = (fp - fm) / (2.0 * step);
        let rel_error = (fd - adjoint).abs() / adjoint.abs().max(f64::MIN_POSITIVE);
        rows.push(GradCheckRow { step, fd, adjoint, rel_error });
    }
    let min_rel_error = rows.iter().map(|r| r.rel_error).fold(f64::INFINITY, f64::min);
    Ok(GradCheck { rows, min_rel_error })
}
