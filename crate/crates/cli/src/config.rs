use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Tsunami,
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh: Option<MeshConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<TimeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub viscosity: Option<ViscosityConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bathymetry: Option<BathymetryConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slip_basis: Option<SlipBasisConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<ObjectiveConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToyConfig>,
    pub sweep: SweepConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<EstimatorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve: Option<SolveConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradcheck: Option<GradcheckConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub a: f64,
    pub b: f64,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub t_final: f64,
    pub cfl: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViscosityConfig {
    pub c_visc: f64,
}

/// Exactly one of `profile` (built-in name) and `file` (two-column CSV).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BathymetryConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SlipBasisConfig {
    Surrogate { segment: [f64; 2], patches: usize, width: f64, peak: f64 },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub std: f64,
    pub patches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveName {
    Regularized,
    TimeOptimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub window: [f64; 2],
}

/// F(θ) = ⟨linear, θ⟩ + ½ Σ curvature_i θ_i², θ standard normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub linear: Vec<f64>,
    pub curvature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub warm: bool,
    #[serde(default = "default_gradient_tol")]
    pub gradient_tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_eig_tol")]
    pub eig_tol: f64,
}

fn default_gradient_tol() -> f64 {
    1e-5
}
fn default_max_iter() -> usize {
    500
}
fn default_rank() -> usize {
    10
}
fn default_eig_tol() -> f64 {
    1e-3
}
fn default_fit_window() -> [f64; 2] {
    [0.2, 0.4]
}
fn default_is_samples() -> usize {
    100
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorMethod {
    Mc,
    Is,
    Form,
    Sorm,
    Fit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZGrid {
    pub start: f64,
    pub stop: f64,
    pub count: usize,
}

impl ZGrid {
    pub fn points(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.start];
        }
        (0..self.count).map(|i| self.start + (self.stop - self.start) * i as f64 / (self.count - 1) as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub methods: Vec<EstimatorMethod>,
    pub samples: usize,
    #[serde(default = "default_is_samples")]
    pub is_samples: usize,
    pub seed: u64,
    pub z_grid: ZGrid,
    #[serde(default = "default_fit_window")]
    pub fit_window: [f64; 2],
    /// Sweep artifact; defaults to `sweep.json` in the output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SlipSpec {
    /// "zero" or "sample" (a prior draw with the run seed)
    Named(String),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    pub slips: SlipSpec,
    /// Write every n-th time level to trajectory.csv.
    #[serde(default = "default_stride")]
    pub trajectory_stride: usize,
}

fn default_stride() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub directions: usize,
    pub lambda: f64,
    #[serde(default = "default_gradcheck_tol")]
    pub tolerance: f64,
}

fn default_gradcheck_tol() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

fn missing(key: &str) -> CliError {
    CliError::Config(format!("missing config key `{key}`"))
}

pub fn require<'a, T>(v: &'a Option<T>, key: &str) -> Result<&'a T, CliError> {
    v.as_ref().ok_or_else(|| missing(key))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Ok((Self::parse(&text)?, text))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match self.model {
            ModelKind::Tsunami => {
                require(&self.mesh, "mesh")?;
                require(&self.time, "time")?;
                require(&self.viscosity, "viscosity")?;
                let b = require(&self.bathymetry, "bathymetry")?;
                if b.profile.is_some() == b.file.is_some() {
                    return Err(CliError::Config("bathymetry needs exactly one of `profile` and `file`".into()));
                }
                require(&self.slip_basis, "slip_basis")?;
                require(&self.prior, "prior")?;
                let o = require(&self.objective, "objective")?;
                if o.kind == ObjectiveName::Regularized && o.gamma.is_none() {
                    return Err(missing("objective.gamma"));
                }
            }
            ModelKind::Toy => {
                let t = require(&self.toy, "toy")?;
                if t.linear.len() != t.curvature.len() || t.linear.is_empty() {
                    return Err(CliError::Config("toy.linear and toy.curvature must have the same nonzero length".into()));
                }
            }
        }
        if self.sweep.lambdas.is_empty() {
            return Err(CliError::Config("sweep.lambdas must not be empty".into()));
        }
        if let Some(e) = &self.estimator {
            if e.z_grid.count == 0 {
                return Err(CliError::Config("estimator.z_grid.count must be at least 1".into()));
            }
            if !(e.fit_window[0] < e.fit_window[1]) {
                return Err(CliError::Config("estimator.fit_window must be increasing".into()));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
