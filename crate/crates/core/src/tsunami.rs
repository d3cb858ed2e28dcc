//! The built-in tsunami problem: slips → bathymetry → shallow water run →
//! near-shore wave height, with adjoint gradients.

use std::sync::Mutex;

use nalgebra::DVector;

use crate::adjoint::{adjoint_impl, eval_objective, time_derivative, ObjectiveKind, ObjectiveSpec};
use crate::error::{check_dim, Result};
use crate::ldt::{EventMap, TimeCheck, TimedEventMap};
use crate::source_model::{bathymetry_from_slips, SlipBasis, SlipPrior, SurrogateParams, DEFAULT_SLIP_STD};
use crate::swe::{
    solve_forward, solve_observable, Bathymetry, BathymetryProfile, Mesh, ObservationWindow, SolverConfig,
    StateTrajectory, TimeGrid,
};

pub const DEFAULT_WINDOW: (f64, f64) = (40e3, 44e3);
pub const DEFAULT_GAMMA: f64 = 0.003;

#[derive(Debug)]
pub struct TsunamiModel {
    pub mesh: Mesh,
    pub b0: Vec<f64>,
    pub basis: SlipBasis,
    pub prior: SlipPrior,
    pub solver: SolverConfig,
    pub window: ObservationWindow,
    pub kind: ObjectiveKind,
    cache: Mutex<Option<(DVector<f64>, StateTrajectory)>>,
}

impl Clone for TsunamiModel {
    fn clone(&self) -> Self {
        Self {
            mesh: self.mesh,
            b0: self.b0.clone(),
            basis: self.basis.clone(),
            prior: self.prior.clone(),
            solver: self.solver,
            window: self.window,
            kind: self.kind,
            cache: Mutex::new(None),
        }
    }
}

impl TsunamiModel {
    pub fn new(
        mesh: Mesh,
        b0: Vec<f64>,
        basis: SlipBasis,
        prior: SlipPrior,
        solver: SolverConfig,
        window: ObservationWindow,
        kind: ObjectiveKind,
    ) -> Result<Self> {
        check_dim(mesh.n_vertices(), b0.len())?;
        check_dim(basis.patches(), prior.measure().dim())?;
        basis.validate(&mesh)?;
        kind.validate()?;
        Bathymetry::at_rest(&mesh, b0.clone())?;
        crate::swe::time_grid(&mesh, &b0, &solver)?;
        Ok(Self { mesh, b0, basis, prior, solver, window, kind, cache: Mutex::new(None) })
    }

    /// Default geometry on [0, 400 km] with `elements` elements.
    pub fn default_setup(elements: usize, t_final: f64, kind: ObjectiveKind) -> Result<Self> {
        let mesh = Mesh::new(0.0, 400e3, elements)?;
        let b0 = BathymetryProfile::tohoku().sample(&mesh);
        let basis = SlipBasis::analytic_surrogate(&mesh, SurrogateParams::default())?;
        let prior = SlipPrior::isotropic(basis.patches(), DEFAULT_SLIP_STD)?;
        let solver = SolverConfig { t_final, ..Default::default() };
        let window = ObservationWindow::new(&mesh, DEFAULT_WINDOW.0, DEFAULT_WINDOW.1)?;
        Self::new(mesh, b0, basis, prior, solver, window, kind)
    }

    pub fn with_kind(&self, kind: ObjectiveKind) -> Result<Self> {
        kind.validate()?;
        let mut m = self.clone();
        m.kind = kind;
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.basis.patches()
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        crate::swe::time_grid(&self.mesh, &self.b0, &self.solver)
    }

    pub fn bathymetry(&self, slips: &DVector<f64>) -> Result<Bathymetry> {
        bathymetry_from_slips(&self.mesh, &self.basis, slips, &self.b0)
    }

    pub fn forward(&self, slips: &DVector<f64>) -> Result<StateTrajectory> {
        solve_forward(&self.mesh, &self.bathymetry(slips)?, &self.solver)
    }

    pub fn observable(&self, slips: &DVector<f64>) -> Result<(TimeGrid, Vec<f64>)> {
        solve_observable(&self.mesh, &self.bathymetry(slips)?, &self.solver, &self.window)
    }

    pub fn event_value(&self, slips: &DVector<f64>) -> Result<f64> {
        let (grid, series) = self.observable(slips)?;
        Ok(eval_objective(&series, &grid, self.kind)?.value)
    }

    /// F and ∇F from a stored trajectory.
    pub fn event_grad_from(&self, traj: &StateTrajectory) -> Result<(f64, DVector<f64>)> {
        let spec = ObjectiveSpec { kind: self.kind, lambda: 1.0, window: self.window };
        let adj = adjoint_impl(traj, &spec, false)?;
        Ok((adj.objective.value, self.basis.transpose_apply(&adj.bathymetry_sensitivity)))
    }

    /// J = I − λF
    pub fn objective_j(&self, slips: &DVector<f64>, lambda: f64) -> Result<f64> {
        Ok(self.prior.rate(slips)? - lambda * self.event_value(slips)?)
    }

    pub fn gradient_j(&self, slips: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
        let traj = self.forward(slips)?;
        let (_, gf) = self.event_grad_from(&traj)?;
        Ok(self.prior.measure().rate_grad(slips)? - gf * lambda)
    }
}

impl TsunamiModel {
    /// Runs `f` on the trajectory at θ, reusing and then keeping the cached run.
    fn with_trajectory<R>(&self, theta: &DVector<f64>, f: impl FnOnce(&StateTrajectory) -> Result<R>) -> Result<R> {
        let cached = {
            let mut c = self.cache.lock().unwrap();
            match c.take() {
                Some((t, traj)) if t == *theta => Some(traj),
                other => {
                    *c = other;
                    None
                }
            }
        };
        let traj = match cached {
            Some(t) => t,
            None => self.forward(theta)?,
        };
        let r = f(&traj);
        *self.cache.lock().unwrap() = Some((theta.clone(), traj));
        r
    }
}

impl EventMap for TsunamiModel {
    fn dim(&self) -> usize {
        self.basis.patches()
    }

    fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        self.event_value(theta)
    }

    fn trial(&self, theta: &DVector<f64>) -> Result<f64> {
        self.with_trajectory(theta, |traj| {
            let series = traj.observable_series(&self.window);
            Ok(eval_objective(&series, &traj.grid, self.kind)?.value)
        })
    }

    fn value_grad(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self.with_trajectory(theta, |traj| self.event_grad_from(traj))
    }

    fn name(&self) -> String {
        self.kind.name().into()
    }
}

impl TimedEventMap for TsunamiModel {
    fn select_level(&self, theta: &DVector<f64>) -> Result<usize> {
        self.with_trajectory(theta, |traj| Ok(crate::adjoint::argmax_earliest(&traj.observable_series(&self.window))))
    }

    fn level_value(&self, theta: &DVector<f64>, level: usize) -> Result<f64> {
        self.with_trajectory(theta, |traj| {
            if level >= traj.levels.len() {
                return Err(crate::Error::InvalidArgument(format!("time level {level} out of range")));
            }
            Ok(traj.observe(&self.window, level))
        })
    }

    fn time_check(&self, theta: &DVector<f64>, lambda: f64) -> Result<TimeCheck> {
        self.with_trajectory(theta, |traj| {
            let series = traj.observable_series(&self.window);
            let level = crate::adjoint::argmax_earliest(&series);
            let rates: Vec<f64> = (0..series.len())
                .map(|m| time_derivative(traj, &self.window, 1.0, m))
                .collect();
            let max_jump = rates.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
            Ok(TimeCheck {
                t_star: traj.time(level),
                level,
                dj_dt: lambda * rates[level],
                bound: 2.0 * lambda * max_jump,
            })
        })
    }
}
