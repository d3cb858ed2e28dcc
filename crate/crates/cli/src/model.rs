use ldtail::adjoint::ObjectiveKind;
use ldtail::ldt::{EventMap, QuadraticEvent};
use ldtail::measures::GaussianMeasure;
use ldtail::source_model::{SlipBasis, SlipPrior, SurrogateParams};
use ldtail::swe::{BathymetryProfile, Mesh, ObservationWindow, SolverConfig};
use ldtail::tsunami::TsunamiModel;
use nalgebra::{DMatrix, DVector};

use crate::config::*;
use crate::error::CliError;

pub enum Model {
    Tsunami(TsunamiModel),
    Toy(QuadraticEvent, GaussianMeasure),
}

impl Model {
    pub fn build(cfg: &RunConfig) -> Result<Self, CliError> {
        match cfg.model {
            ModelKind::Toy => {
                let t = require(&cfg.toy, "toy")?;
                let n = t.linear.len();
                let ev = QuadraticEvent::new(
                    DVector::from_vec(t.linear.clone()),
                    DMatrix::from_diagonal(&DVector::from_vec(t.curvature.clone())),
                )?;
                Ok(Model::Toy(ev, GaussianMeasure::standard(n)?))
            }
            ModelKind::Tsunami => Ok(Model::Tsunami(build_tsunami(cfg)?)),
        }
    }

    pub fn event(&self) -> &dyn EventMap {
        match self {
            Model::Tsunami(m) => m,
            Model::Toy(e, _) => e,
        }
    }

    pub fn measure(&self) -> &GaussianMeasure {
        match self {
            Model::Tsunami(m) => m.prior.measure(),
            Model::Toy(_, g) => g,
        }
    }

    pub fn tsunami(&self) -> Option<&TsunamiModel> {
        match self {
            Model::Tsunami(m) => Some(m),
            Model::Toy(..) => None,
        }
    }
}

fn build_tsunami(cfg: &RunConfig) -> Result<TsunamiModel, CliError> {
    let mc = require(&cfg.mesh, "mesh")?;
    let mesh = Mesh::new(mc.a, mc.b, mc.elements)?;
    let bc = require(&cfg.bathymetry, "bathymetry")?;
    let profile = match (&bc.profile, &bc.file) {
        (Some(name), None) => BathymetryProfile::builtin(name)?,
        (None, Some(path)) => BathymetryProfile::from_csv(path)?,
        _ => return Err(CliError::Config("bathymetry needs exactly one of `profile` and `file`".into())),
    };
    let b0 = profile.sample(&mesh);
    let basis = match require(&cfg.slip_basis, "slip_basis")? {
        SlipBasisConfig::Surrogate { segment, patches, width, peak } => SlipBasis::analytic_surrogate(
            &mesh,
            SurrogateParams { segment: (segment[0], segment[1]), patches: *patches, width: *width, peak: *peak },
        )?,
        SlipBasisConfig::File { path } => SlipBasis::from_csv(path, &mesh)?,
    };
    let pc = require(&cfg.prior, "prior")?;
    if pc.patches != basis.patches() {
        return Err(CliError::Config(format!(
            "prior.patches = {} but the slip basis has {} columns",
            pc.patches,
            basis.patches()
        )));
    }
    let prior = SlipPrior::isotropic(pc.patches, pc.std)?;
    let tc = require(&cfg.time, "time")?;
    let vc = require(&cfg.viscosity, "viscosity")?;
    let solver = SolverConfig { t_final: tc.t_final, cfl: tc.cfl, dt: tc.dt, c_visc: vc.c_visc };
    let oc = require(&cfg.objective, "objective")?;
    let window = ObservationWindow::new(&mesh, oc.window[0], oc.window[1])?;
    let kind = match oc.kind {
        ObjectiveName::Regularized => ObjectiveKind::Regularized { gamma: *require(&oc.gamma, "objective.gamma")? },
        ObjectiveName::TimeOptimal => ObjectiveKind::TimeOptimal,
    };
    Ok(TsunamiModel::new(mesh, b0, basis, prior, solver, window, kind)?)
}
