//! Random source model: slip patches mapped linearly onto a bathymetry change,
//! with a centered Gaussian prior on the slips.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::measures::GaussianMeasure;
use crate::swe::{Bathymetry, Mesh};

pub const DEFAULT_PATCHES: usize = 20;
pub const DEFAULT_SEGMENT: (f64, f64) = (178e3, 187e3);
pub const DEFAULT_WIDTH: f64 = 5e3;
pub const DEFAULT_PEAK: f64 = 0.028;
pub const DEFAULT_SLIP_STD: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    File,
    AnalyticSurrogate,
}

/// Shape parameters of the analytic dipole basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateParams {
    pub segment: (f64, f64),
    pub patches: usize,
    pub width: f64,
    /// max |O_i| in meters of uplift per meter of slip.
    pub peak: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self { segment: DEFAULT_SEGMENT, patches: DEFAULT_PATCHES, width: DEFAULT_WIDTH, peak: DEFAULT_PEAK }
    }
}

impl SurrogateParams {
    pub fn centers(&self) -> Vec<f64> {
        let (s0, s1) = self.segment;
        if self.patches == 1 {
            return vec![0.5 * (s0 + s1)];
        }
        let step = (s1 - s0) / (self.patches - 1) as f64;
        (0..self.patches).map(|i| s0 + i as f64 * step).collect()
    }

    /// Dipole of patch `i` at `x`: uplift on the shore side (x < x_i) for
    /// positive slip.
    pub fn dipole(&self, center: f64, x: f64) -> f64 {
        let amp = self.peak / (-0.5f64).exp();
        let tau = (x - center) / self.width;
        -amp * tau * (-0.5 * tau * tau).exp()
    }

    fn envelope(&self, center: f64, x: f64) -> f64 {
        let tau = (x - center) / self.width;
        (-0.5 * tau * tau).exp()
    }
}

/// Columns O_i sampled on mesh vertices (continuous P1).
#[derive(Debug, Clone, PartialEq)]
pub struct SlipBasis {
    pub columns: Vec<Vec<f64>>,
    pub provenance: Provenance,
    pub surrogate: Option<SurrogateParams>,
}

impl SlipBasis {
    pub fn patches(&self) -> usize {
        self.columns.len()
    }

    /// Σ s_i O_i at the vertices.
    pub fn perturbation(&self, slips: &DVector<f64>) -> Result<Vec<f64>> {
        check_dim(self.patches(), slips.len())?;
        let n = self.columns.first().map_or(0, Vec::len);
        let mut out = vec![0.0; n];
        for (col, &s) in self.columns.iter().zip(slips.iter()) {
            for (o, c) in out.iter_mut().zip(col) {
                *o += s * c;
            }
        }
        Ok(out)
    }

    /// Oᵀ b̄ for a vertex-space sensitivity b̄.
    pub fn transpose_apply(&self, vertex_sens: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.patches(),
            self.columns.iter().map(|c| c.iter().zip(vertex_sens).map(|(a, b)| a * b).sum()),
        )
    }

    pub fn validate(&self, mesh: &Mesh) -> Result<()> {
        if self.columns.is_empty() {
            return Err(Error::InvalidArgument("slip basis has no columns".into()));
        }
        for (i, col) in self.columns.iter().enumerate() {
            check_dim(mesh.n_vertices(), col.len())?;
            if col.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!("basis column O_{} is not finite", i + 1)));
            }
            let total = mesh.integrate_vertices(col);
            let abs: Vec<f64> = col.iter().map(|x| x.abs()).collect();
            let mass = mesh.integrate_vertices(&abs);
            if total.abs() > 0.05 * mass {
                let msg = format!("basis column O_{} is not zero-mean (|∫O| = {:.3e}, ∫|O| = {:.3e})", i + 1, total.abs(), mass);
                match self.provenance {
                    Provenance::File => log::warn!("{msg}"),
                    Provenance::AnalyticSurrogate => return Err(Error::InvalidArgument(msg)),
                }
            }
        }
        Ok(())
    }

    /// Equispaced dipoles along the segment, with the Gaussian envelope
    /// removing any discrete net volume.
    pub fn analytic_surrogate(mesh: &Mesh, params: SurrogateParams) -> Result<Self> {
        let (s0, s1) = params.segment;
        if !(mesh.a < s0 && s0 <= s1 && s1 < mesh.b) {
            return Err(Error::InvalidArgument(format!(
                "slip segment [{s0}, {s1}] must lie inside the domain [{}, {}]",
                mesh.a, mesh.b
            )));
        }
        if params.patches == 0 {
            return Err(Error::InvalidArgument("need at least one slip patch".into()));
        }
        if !(params.width > 0.0 && params.peak > 0.0) {
            return Err(Error::InvalidArgument("surrogate width and peak must be positive".into()));
        }
        let xs = mesh.vertices();
        let columns = params
            .centers()
            .into_iter()
            .map(|c| {
                let mut col: Vec<f64> = xs.iter().map(|&x| params.dipole(c, x)).collect();
                let env: Vec<f64> = xs.iter().map(|&x| params.envelope(c, x)).collect();
                let shift = mesh.integrate_vertices(&col) / mesh.integrate_vertices(&env);
                for (o, e) in col.iter_mut().zip(&env) {
                    *o -= shift * e;
                }
                col
            })
            .collect();
        let basis = Self { columns, provenance: Provenance::AnalyticSurrogate, surrogate: Some(params) };
        basis.validate(mesh)?;
        Ok(basis)
    }

    /// CSV with header `x,O_1,…,O_n`; interpolated linearly onto the mesh.
    pub fn from_csv(path: &Path, mesh: &Mesh) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_csv(&text, mesh).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn parse_csv(text: &str, mesh: &Mesh) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Parse("empty basis file".into()))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        if header.first().map(String::as_str) != Some("x") {
            return Err(Error::Parse("missing column `x`".into()));
        }
        let n = header.len() - 1;
        if n == 0 {
            return Err(Error::Parse("missing column `O_1`".into()));
        }
        for (i, name) in header[1..].iter().enumerate() {
            let want = format!("O_{}", i + 1);
            if *name != want {
                return Err(Error::Parse(format!("missing column `{want}` (found `{name}`)")));
            }
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (ln, line) in lines.enumerate() {
            let vals: std::result::Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| Error::Parse(format!("data row {}: {e}", ln + 1)))?;
            if vals.len() != n + 1 {
                return Err(Error::Parse(format!(
                    "data row {} has {} columns, expected {}",
                    ln + 1,
                    vals.len(),
                    n + 1
                )));
            }
            rows.push(vals);
        }
        if rows.len() < 2 {
            return Err(Error::Parse("basis file needs at least two rows".into()));
        }
        if rows.windows(2).any(|w| !(w[1][0] > w[0][0])) {
            return Err(Error::Parse("x column is not strictly increasing".into()));
        }
        let (x0, x1) = (rows[0][0], rows[rows.len() - 1][0]);
        let tol = 1e-9 * (mesh.b - mesh.a);
        if x0 > mesh.a + tol || x1 < mesh.b - tol {
            return Err(Error::Parse(format!(
                "x range [{x0}, {x1}] does not cover the domain [{}, {}]",
                mesh.a, mesh.b
            )));
        }
        let xs = mesh.vertices();
        let mut columns = vec![Vec::with_capacity(xs.len()); n];
        for &x in &xs {
            let j = rows.partition_point(|r| r[0] <= x).clamp(1, rows.len() - 1);
            let (r0, r1) = (&rows[j - 1], &rows[j]);
            let t = ((x - r0[0]) / (r1[0] - r0[0])).clamp(0.0, 1.0);
            for (i, col) in columns.iter_mut().enumerate() {
                col.push(r0[i + 1] + t * (r1[i + 1] - r0[i + 1]));
            }
        }
        let basis = Self { columns, provenance: Provenance::File, surrogate: None };
        basis.validate(mesh)?;
        Ok(basis)
    }

    pub fn to_csv(&self, mesh: &Mesh) -> String {
        let mut s = String::from("x");
        for i in 0..self.patches() {
            let _ = write!(s, ",O_{}", i + 1);
        }
        s.push('\n');
        for (j, x) in mesh.vertices().into_iter().enumerate() {
            let _ = write!(s, "{x}");
            for col in &self.columns {
                let _ = write!(s, ",{}", col[j]);
            }
            s.push('\n');
        }
        s
    }
}

/// Centered Gaussian prior on the slips.
#[derive(Debug, Clone)]
pub struct SlipPrior {
    measure: GaussianMeasure,
}

impl SlipPrior {
    pub fn isotropic(patches: usize, std: f64) -> Result<Self> {
        if !(std > 0.0) {
            return Err(Error::InvalidArgument(format!("slip std must be positive, got {std}")));
        }
        Ok(Self { measure: GaussianMeasure::isotropic(DVector::zeros(patches), std * std)? })
    }

    pub fn with_covariance(cov: DMatrix<f64>) -> Result<Self> {
        Ok(Self { measure: GaussianMeasure::new(DVector::zeros(cov.nrows()), cov)? })
    }

    pub fn measure(&self) -> &GaussianMeasure {
        &self.measure
    }

    /// ½ SᵀC_s⁻¹S
    pub fn rate(&self, slips: &DVector<f64>) -> Result<f64> {
        self.measure.rate(slips)
    }
}

pub fn bathymetry_from_slips(mesh: &Mesh, basis: &SlipBasis, slips: &DVector<f64>, b0: &[f64]) -> Result<Bathymetry> {
    let pert = basis.perturbation(slips)?;
    check_dim(b0.len(), pert.len())?;
    let b = b0.iter().zip(&pert).map(|(a, p)| a + p).collect();
    Bathymetry::new(mesh, b, b0.to_vec())
}

/// CSV `sample_id,s_1..s_n`.
pub fn slips_to_csv(samples: &[DVector<f64>]) -> String {
    let n = samples.first().map_or(0, |s| s.len());
    let mut out = String::from("sample_id");
    for i in 0..n {
        let _ = write!(out, ",s_{}", i + 1);
    }
    out.push('\n');
    for (k, s) in samples.iter().enumerate() {
        let _ = write!(out, "{k}");
        for v in s.iter() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}
