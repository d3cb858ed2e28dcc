//! 1D shallow water equations with artificial viscosity: linear nodal DG in
//! space, global Lax-Friedrichs flux, reflective walls, SSP-RK2 in time.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRAVITY: f64 = 9.81;
pub const H_MIN: f64 = 1e-3;
/// Velocity scale that turns c_visc·h̄ into a viscosity in m²/s.
pub const U_REF: f64 = 1.0;

const GA: f64 = 0.788_675_134_594_812_9; // (1 + 1/√3)/2
const GB: f64 = 0.211_324_865_405_187_1; // (1 − 1/√3)/2

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub a: f64,
    pub b: f64,
    pub elements: usize,
}

impl Mesh {
    pub fn new(a: f64, b: f64, elements: usize) -> Result<Self> {
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(Error::InvalidArgument(format!("mesh needs a < b, got [{a}, {b}]")));
        }
        if elements < 2 {
            return Err(Error::InvalidArgument("mesh needs at least 2 elements".into()));
        }
        Ok(Self { a, b, elements })
    }

    pub fn dx(&self) -> f64 {
        (self.b - self.a) / self.elements as f64
    }

    /// DG nodes: element k owns nodes 2k (left) and 2k+1 (right).
    pub fn n_nodes(&self) -> usize {
        2 * self.elements
    }

    pub fn n_vertices(&self) -> usize {
        self.elements + 1
    }

    pub fn vertex(&self, j: usize) -> f64 {
        if j == self.elements {
            self.b
        } else {
            self.a + j as f64 * self.dx()
        }
    }

    pub fn node_x(&self, i: usize) -> f64 {
        self.vertex(i / 2 + i % 2)
    }

    pub fn vertices(&self) -> Vec<f64> {
        (0..self.n_vertices()).map(|j| self.vertex(j)).collect()
    }

    /// Spreads continuous vertex values onto DG nodes.
    pub fn vertex_to_nodes(&self, vals: &[f64]) -> Vec<f64> {
        (0..self.n_nodes()).map(|i| vals[i / 2 + i % 2]).collect()
    }

    /// ∫ of a DG field over the domain.
    pub fn integrate_nodes(&self, q: &[f64]) -> f64 {
        let dx = self.dx();
        q.chunks_exact(2).map(|e| 0.5 * dx * (e[0] + e[1])).sum()
    }

    /// ∫ of a continuous vertex field over the domain.
    pub fn integrate_vertices(&self, q: &[f64]) -> f64 {
        let dx = self.dx();
        q.windows(2).map(|e| 0.5 * dx * (e[0] + e[1])).sum()
    }
}

/// Piecewise-linear depth profile, constant beyond its end points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BathymetryProfile {
    pub points: Vec<(f64, f64)>,
}

impl BathymetryProfile {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("empty bathymetry profile".into()));
        }
        if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::InvalidArgument("bathymetry profile x must be increasing".into()));
        }
        Ok(Self { points })
    }

    /// Shelf at −50 m, slope to −4 km, trench at −8 km, rise back to −4 km.
    pub fn tohoku() -> Self {
        Self {
            points: vec![
                (0.0, -50.0),
                (45e3, -50.0),
                (155e3, -4000.0),
                (200e3, -8000.0),
                (300e3, -4000.0),
                (400e3, -4000.0),
            ],
        }
    }

    pub fn flat(depth: f64) -> Self {
        Self { points: vec![(0.0, -depth)] }
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "tohoku" => Ok(Self::tohoku()),
            _ => Err(Error::InvalidArgument(format!("unknown bathymetry profile `{name}`"))),
        }
    }

    /// Two-column CSV (x, B) in meters; a header line is allowed.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut points = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed: Option<Vec<f64>> = cols.iter().map(|c| c.parse().ok()).collect();
            match parsed {
                Some(v) if v.len() == 2 => points.push((v[0], v[1])),
                _ if ln == 0 => continue,
                _ => {
                    return Err(Error::Parse(format!(
                        "{}: line {} is not two numeric columns",
                        path.display(),
                        ln + 1
                    )))
                }
            }
        }
        Self::new(points)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let p = &self.points;
        if x <= p[0].0 {
            return p[0].1;
        }
        if x >= p[p.len() - 1].0 {
            return p[p.len() - 1].1;
        }
        let j = p.partition_point(|q| q.0 <= x);
        let (x0, y0) = p[j - 1];
        let (x1, y1) = p[j];
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }

    pub fn sample(&self, mesh: &Mesh) -> Vec<f64> {
        mesh.vertices().into_iter().map(|x| self.eval(x)).collect()
    }
}

/// Continuous P1 bathymetry B and reference B0 on mesh vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct Bathymetry {
    pub b: Vec<f64>,
    pub b0: Vec<f64>,
}

impl Bathymetry {
    pub fn new(mesh: &Mesh, b: Vec<f64>, b0: Vec<f64>) -> Result<Self> {
        let n = mesh.n_vertices();
        if b.len() != n || b0.len() != n {
            return Err(Error::Dimension { expected: n, got: b.len().min(b0.len()) });
        }
        for (j, (&x, &y)) in b.iter().zip(&b0).enumerate() {
            if !(x < 0.0 && y < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "bathymetry must be strictly negative (vertex {j}: B = {x}, B0 = {y})"
                )));
            }
        }
        Ok(Self { b, b0 })
    }

    pub fn at_rest(mesh: &Mesh, b0: Vec<f64>) -> Result<Self> {
        Self::new(mesh, b0.clone(), b0)
    }

    pub fn slopes(&self, mesh: &Mesh) -> Vec<f64> {
        let dx = mesh.dx();
        self.b.windows(2).map(|w| (w[1] - w[0]) / dx).collect()
    }

    pub fn perturbation(&self) -> Vec<f64> {
        self.b.iter().zip(&self.b0).map(|(b, b0)| b - b0).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationWindow {
    pub c: f64,
    pub d: f64,
}

impl ObservationWindow {
    pub fn new(mesh: &Mesh, c: f64, d: f64) -> Result<Self> {
        if !(mesh.a < c && c < d && d < mesh.b) {
            return Err(Error::InvalidArgument(format!(
                "observation window [{c}, {d}] must lie strictly inside [{}, {}]",
                mesh.a, mesh.b
            )));
        }
        Ok(Self { c, d })
    }

    /// Node weights w with (1/(d−c))∫_c^d q dx = Σ w_i q_i for a DG field q.
    pub fn node_weights(&self, mesh: &Mesh) -> Vec<(usize, f64)> {
        let dx = mesh.dx();
        let len = self.d - self.c;
        let mut out = Vec::new();
        for k in 0..mesh.elements {
            let xl = mesh.vertex(k);
            let xr = mesh.vertex(k + 1);
            let x0 = self.c.max(xl);
            let x1 = self.d.min(xr);
            if x1 <= x0 {
                continue;
            }
            let xm = 0.5 * (x0 + x1);
            let l1 = (xm - xl) / dx;
            let w = (x1 - x0) / len;
            out.push((2 * k, w * (1.0 - l1)));
            out.push((2 * k + 1, w * l1));
        }
        out
    }

    /// Window average of a continuous vertex field.
    pub fn average_vertices(&self, mesh: &Mesh, q: &[f64]) -> f64 {
        let nodes = mesh.vertex_to_nodes(q);
        self.node_weights(mesh).iter().map(|&(i, w)| w * nodes[i]).sum()
    }
}

/// Precomputed window average of h + B0.
#[derive(Debug, Clone)]
pub struct Observer {
    pub weights: Vec<(usize, f64)>,
    pub offset: f64,
}

impl Observer {
    pub fn new(mesh: &Mesh, window: &ObservationWindow, b0: &[f64]) -> Self {
        Self { weights: window.node_weights(mesh), offset: window.average_vertices(mesh, b0) }
    }

    pub fn observe(&self, h: &[f64]) -> f64 {
        self.weights.iter().map(|&(i, w)| w * h[i]).sum::<f64>() + self.offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub t_final: f64,
    pub cfl: f64,
    /// Explicit step; must respect the stability bound.
    pub dt: Option<f64>,
    pub c_visc: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { t_final: 4000.0, cfl: 0.3, dt: None, c_visc: 1.0 }
    }
}

impl SolverConfig {
    pub fn viscosity(&self, mesh: &Mesh) -> f64 {
        self.c_visc * mesh.dx() * U_REF
    }
}

/// Uniform time grid for a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn time(&self, m: usize) -> f64 {
        m as f64 * self.dt
    }
    pub fn t_final(&self) -> f64 {
        self.steps as f64 * self.dt
    }
    /// Trapezoid weights, endpoints halved; they sum to T_F.
    pub fn quadrature_weights(&self) -> Vec<f64> {
        let mut w = vec![self.dt; self.steps + 1];
        w[0] *= 0.5;
        w[self.steps] *= 0.5;
        w
    }
}

/// Stability bound for P1 DG with SSP-RK2.
pub const MAX_CFL: f64 = 1.0 / 3.0;

/// C^LF at rest, Δt = CFL·h̄/C^LF shrunk so that the steps land on T_F.
pub fn time_grid(mesh: &Mesh, b0: &[f64], cfg: &SolverConfig) -> Result<TimeGrid> {
    if !(cfg.t_final > 0.0) {
        return Err(Error::InvalidArgument(format!("final time must be positive, got {}", cfg.t_final)));
    }
    if !(cfg.c_visc >= 0.0) {
        return Err(Error::InvalidArgument("viscosity coefficient must be nonnegative".into()));
    }
    let c0 = b0.iter().map(|&b| (GRAVITY * -b).sqrt()).fold(0.0, f64::max);
    let dx = mesh.dx();
    let target = match cfg.dt {
        Some(dt) => {
            if !(dt > 0.0) || dt * c0 / dx > MAX_CFL {
                return Err(Error::Cfl(format!(
                    "dt = {dt} s gives Courant number {:.3} > {MAX_CFL:.3}",
                    dt * c0 / dx
                )));
            }
            dt
        }
        None => {
            if !(cfg.cfl > 0.0 && cfg.cfl <= MAX_CFL) {
                return Err(Error::Cfl(format!("CFL must lie in (0, {MAX_CFL:.3}], got {}", cfg.cfl)));
            }
            cfg.cfl * dx / c0
        }
    };
    let steps = (cfg.t_final / target - 1e-9).ceil().max(1.0) as usize;
    Ok(TimeGrid { dt: cfg.t_final / steps as f64, steps })
}

/// One SSP-RK2 step: u¹ = u + Δt L(u); u⁺ = ½u + ½(u¹ + Δt L(u¹)).
pub fn ssp_rk2_step<F>(u: &[f64], dt: f64, mut rhs: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let mut k = vec![0.0; u.len()];
    rhs(u, &mut k)?;
    let u1: Vec<f64> = u.iter().zip(&k).map(|(a, b)| a + dt * b).collect();
    rhs(&u1, &mut k)?;
    Ok(u.iter().zip(u1.iter().zip(&k)).map(|(a, (b, c))| 0.5 * a + 0.5 * (b + dt * c)).collect())
}

/// Global LF constant max |v/h| + √(gh) and the node attaining it (first on ties).
pub fn lax_friedrichs_constant(h: &[f64], v: &[f64], time: f64) -> Result<(f64, usize)> {
    let mut c = 0.0;
    let mut imax = 0;
    for (i, (&hi, &vi)) in h.iter().zip(v).enumerate() {
        if !(hi >= H_MIN) {
            return Err(Error::Positivity { element: i / 2, time, value: hi });
        }
        let s = vi.abs() / hi + (GRAVITY * hi).sqrt();
        if s > c {
            c = s;
            imax = i;
        }
    }
    Ok((c, imax))
}

/// (f⁻ + f⁺)/2 + (C/2)·n⁻·(q⁻ − q⁺)
pub fn numerical_flux(q_minus: f64, q_plus: f64, f_minus: f64, f_plus: f64, c_lf: f64, n_minus: f64) -> f64 {
    0.5 * (f_minus + f_plus) + 0.5 * c_lf * n_minus * (q_minus - q_plus)
}

pub fn momentum_flux(h: f64, v: f64, phi: f64, eps: f64) -> f64 {
    v * v / h + 0.5 * GRAVITY * h * h - eps * h * phi
}

/// Scratch space for one evaluation of the semi-discrete operator.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub c: f64,
    pub imax: usize,
    pub u: Vec<f64>,
    pub uhat: Vec<f64>,
    pub phi: Vec<f64>,
    pub fnode: Vec<f64>,
    pub fh: Vec<f64>,
    pub fv: Vec<f64>,
    // reverse-mode accumulators
    fh_bar: Vec<f64>,
    fv_bar: Vec<f64>,
    fnode_bar: Vec<f64>,
    pub phi_bar: Vec<f64>,
    u_bar: Vec<f64>,
    uhat_bar: Vec<f64>,
}

impl Workspace {
    pub fn new(mesh: &Mesh) -> Self {
        let n = mesh.n_nodes();
        let k = mesh.elements + 1;
        Self {
            c: 0.0,
            imax: 0,
            u: vec![0.0; n],
            uhat: vec![0.0; k],
            phi: vec![0.0; n],
            fnode: vec![0.0; n],
            fh: vec![0.0; k],
            fv: vec![0.0; k],
            fh_bar: vec![0.0; k],
            fv_bar: vec![0.0; k],
            fnode_bar: vec![0.0; n],
            phi_bar: vec![0.0; n],
            u_bar: vec![0.0; n],
            uhat_bar: vec![0.0; k],
        }
    }
}

/// Test fixture: flips the sign of the interior jump penalty in the reverse
/// sweep only, so adjoint gradients stop matching the forward solver.
#[doc(hidden)]
pub static FLUX_SIGN_FAULT: std::sync::atomic::AtomicBool = std::sync::atomic::AtomicBool::new(false);

/// Semi-discrete DG operator L(q) for packed q = [h; v] (each 2K long).
#[derive(Debug, Clone)]
pub struct DgOperator {
    pub mesh: Mesh,
    pub slopes: Vec<f64>,
    pub eps: f64,
    /// Abort threshold for the LF constant.
    pub c_limit: f64,
}

impl DgOperator {
    pub fn new(mesh: Mesh, bathymetry: &Bathymetry, eps: f64) -> Self {
        Self { slopes: bathymetry.slopes(&mesh), mesh, eps, c_limit: f64::INFINITY }
    }

    pub(crate) fn prepare(&self, q: &[f64], time: f64, ws: &mut Workspace) -> Result<()> {
        let n = self.mesh.n_nodes();
        let ke = self.mesh.elements;
        let (h, v) = q.split_at(n);
        let (c, imax) = lax_friedrichs_constant(h, v, time)?;
        if c > self.c_limit {
            return Err(Error::WaveSpeed { time, c, limit: self.c_limit });
        }
        ws.c = c;
        ws.imax = imax;
        for i in 0..n {
            ws.u[i] = v[i] / h[i];
        }
        ws.uhat[0] = 0.0;
        ws.uhat[ke] = 0.0;
        for j in 1..ke {
            ws.uhat[j] = 0.5 * (ws.u[2 * j - 1] + ws.u[2 * j]);
        }
        let s = 2.0 / self.mesh.dx();
        for k in 0..ke {
            let (a, b) = (2 * k, 2 * k + 1);
            let m = 0.5 * (ws.u[a] + ws.u[b]);
            let r0 = m - ws.uhat[k];
            let r1 = -m + ws.uhat[k + 1];
            ws.phi[a] = s * (2.0 * r0 - r1);
            ws.phi[b] = s * (-r0 + 2.0 * r1);
        }
        for i in 0..n {
            ws.fnode[i] = momentum_flux(h[i], v[i], ws.phi[i], self.eps);
        }
        ws.fh[0] = 0.0;
        ws.fv[0] = ws.fnode[0] - c * v[0];
        ws.fh[ke] = 0.0;
        ws.fv[ke] = ws.fnode[n - 1] + c * v[n - 1];
        for j in 1..ke {
            let (l, r) = (2 * j - 1, 2 * j);
            ws.fh[j] = numerical_flux(h[l], h[r], v[l], v[r], c, 1.0);
            ws.fv[j] = numerical_flux(v[l], v[r], ws.fnode[l], ws.fnode[r], c, 1.0);
        }
        Ok(())
    }

    /// out = L(q); leaves φ, C^LF and fluxes in `ws`.
    pub fn apply(&self, q: &[f64], time: f64, ws: &mut Workspace, out: &mut [f64]) -> Result<()> {
        self.prepare(q, time, ws)?;
        let n = self.mesh.n_nodes();
        let dx = self.mesh.dx();
        let s = 2.0 / dx;
        let eps = self.eps;
        let (h, v) = q.split_at(n);
        let (oh, ov) = out.split_at_mut(n);
        for k in 0..self.mesh.elements {
            let (a, b) = (2 * k, 2 * k + 1);
            let vh = 0.5 * (v[a] + v[b]);
            let mut vol = 0.0;
            for (la, lb) in [(GA, GB), (GB, GA)] {
                let hq = la * h[a] + lb * h[b];
                let vq = la * v[a] + lb * v[b];
                let pq = la * ws.phi[a] + lb * ws.phi[b];
                vol += 0.5 * momentum_flux(hq, vq, pq, eps);
            }
            let coef = -GRAVITY * self.slopes[k] * dx / 6.0;
            let sa = coef * (2.0 * h[a] + h[b]);
            let sb = coef * (h[a] + 2.0 * h[b]);
            let rha = -vh + ws.fh[k];
            let rhb = vh - ws.fh[k + 1];
            let rva = -vol + ws.fv[k] + sa;
            let rvb = vol - ws.fv[k + 1] + sb;
            oh[a] = s * (2.0 * rha - rhb);
            oh[b] = s * (-rha + 2.0 * rhb);
            ov[a] = s * (2.0 * rva - rvb);
            ov[b] = s * (-rva + 2.0 * rvb);
        }
        Ok(())
    }

    /// Reverse mode: q̄ += (∂L/∂q)ᵀ seed, b̄x += (∂L/∂B_x)ᵀ seed. The adjoint
    /// of φ is left in `ws.phi_bar`.
    pub fn vjp(
        &self,
        q: &[f64],
        time: f64,
        seed: &[f64],
        ws: &mut Workspace,
        q_bar: &mut [f64],
        bx_bar: &mut [f64],
    ) -> Result<()> {
        self.prepare(q, time, ws)?;
        let n = self.mesh.n_nodes();
        let ke = self.mesh.elements;
        let dx = self.mesh.dx();
        let s = 2.0 / dx;
        let eps = self.eps;
        let c = ws.c;
        let (h, v) = q.split_at(n);
        let (sh, sv) = seed.split_at(n);
        let (hb, vb) = q_bar.split_at_mut(n);
        ws.fh_bar.iter_mut().for_each(|x| *x = 0.0);
        ws.fv_bar.iter_mut().for_each(|x| *x = 0.0);
        ws.fnode_bar.iter_mut().for_each(|x| *x = 0.0);
        ws.phi_bar.iter_mut().for_each(|x| *x = 0.0);
        ws.u_bar.iter_mut().for_each(|x| *x = 0.0);
        ws.uhat_bar.iter_mut().for_each(|x| *x = 0.0);
        let mut c_bar = 0.0;

        for k in 0..ke {
            let (a, b) = (2 * k, 2 * k + 1);
            let rha = s * (2.0 * sh[a] - sh[b]);
            let rhb = s * (-sh[a] + 2.0 * sh[b]);
            let rva = s * (2.0 * sv[a] - sv[b]);
            let rvb = s * (-sv[a] + 2.0 * sv[b]);

            ws.fh_bar[k] += rha;
            ws.fh_bar[k + 1] -= rhb;
            let vh_bar = rhb - rha;
            vb[a] += 0.5 * vh_bar;
            vb[b] += 0.5 * vh_bar;

            ws.fv_bar[k] += rva;
            ws.fv_bar[k + 1] -= rvb;
            let vol_bar = rvb - rva;

            let coef = -GRAVITY * dx / 6.0;
            bx_bar[k] += coef * (rva * (2.0 * h[a] + h[b]) + rvb * (h[a] + 2.0 * h[b]));
            let bx = self.slopes[k];
            hb[a] += coef * bx * (2.0 * rva + rvb);
            hb[b] += coef * bx * (rva + 2.0 * rvb);

            let f_bar = 0.5 * vol_bar;
            for (la, lb) in [(GA, GB), (GB, GA)] {
                let hq = la * h[a] + lb * h[b];
                let vq = la * v[a] + lb * v[b];
                let pq = la * ws.phi[a] + lb * ws.phi[b];
                let dh = f_bar * (-vq * vq / (hq * hq) + GRAVITY * hq - eps * pq);
                let dv = f_bar * 2.0 * vq / hq;
                let dp = f_bar * (-eps * hq);
                hb[a] += la * dh;
                hb[b] += lb * dh;
                vb[a] += la * dv;
                vb[b] += lb * dv;
                ws.phi_bar[a] += la * dp;
                ws.phi_bar[b] += lb * dp;
            }
        }

        // wall fluxes (the h flux vanishes identically there)
        let fb = ws.fv_bar[0];
        ws.fnode_bar[0] += fb;
        c_bar -= fb * v[0];
        vb[0] -= c * fb;
        let fb = ws.fv_bar[ke];
        ws.fnode_bar[n - 1] += fb;
        c_bar += fb * v[n - 1];
        vb[n - 1] += c * fb;
        let pen = if FLUX_SIGN_FAULT.load(std::sync::atomic::Ordering::Relaxed) { -1.0 } else { 1.0 };
        for j in 1..ke {
            let (l, r) = (2 * j - 1, 2 * j);
            let fb = ws.fh_bar[j];
            vb[l] += 0.5 * fb;
            vb[r] += 0.5 * fb;
            c_bar += 0.5 * pen * fb * (h[l] - h[r]);
            hb[l] += 0.5 * pen * c * fb;
            hb[r] -= 0.5 * pen * c * fb;
            let fb = ws.fv_bar[j];
            ws.fnode_bar[l] += 0.5 * fb;
            ws.fnode_bar[r] += 0.5 * fb;
            c_bar += 0.5 * pen * fb * (v[l] - v[r]);
            vb[l] += 0.5 * pen * c * fb;
            vb[r] -= 0.5 * pen * c * fb;
        }

        for i in 0..n {
            let fb = ws.fnode_bar[i];
            hb[i] += fb * (-v[i] * v[i] / (h[i] * h[i]) + GRAVITY * h[i] - eps * ws.phi[i]);
            vb[i] += fb * 2.0 * v[i] / h[i];
            ws.phi_bar[i] += fb * (-eps * h[i]);
        }

        for k in 0..ke {
            let (a, b) = (2 * k, 2 * k + 1);
            let r0 = s * (2.0 * ws.phi_bar[a] - ws.phi_bar[b]);
            let r1 = s * (-ws.phi_bar[a] + 2.0 * ws.phi_bar[b]);
            ws.u_bar[a] += 0.5 * (r0 - r1);
            ws.u_bar[b] += 0.5 * (r0 - r1);
            ws.uhat_bar[k] -= r0;
            ws.uhat_bar[k + 1] += r1;
        }
        for j in 1..ke {
            ws.u_bar[2 * j - 1] += 0.5 * ws.uhat_bar[j];
            ws.u_bar[2 * j] += 0.5 * ws.uhat_bar[j];
        }
        for i in 0..n {
            vb[i] += ws.u_bar[i] / h[i];
            hb[i] -= ws.u_bar[i] * v[i] / (h[i] * h[i]);
        }

        let i = ws.imax;
        let sign = if v[i] > 0.0 {
            1.0
        } else if v[i] < 0.0 {
            -1.0
        } else {
            0.0
        };
        hb[i] += c_bar * (-v[i].abs() / (h[i] * h[i]) + 0.5 * (GRAVITY / h[i]).sqrt());
        vb[i] += c_bar * sign / h[i];
        Ok(())
    }
}

/// Packed state q = [h; v] at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub q: Vec<f64>,
}

impl State {
    pub fn at_rest(mesh: &Mesh, b0: &[f64]) -> Self {
        let mut q: Vec<f64> = mesh.vertex_to_nodes(b0).into_iter().map(|b| -b).collect();
        q.extend(std::iter::repeat(0.0).take(mesh.n_nodes()));
        Self { q }
    }
    pub fn h(&self) -> &[f64] {
        &self.q[..self.q.len() / 2]
    }
    pub fn v(&self) -> &[f64] {
        &self.q[self.q.len() / 2..]
    }
}

/// All time levels of one forward run.
#[derive(Debug, Clone)]
pub struct StateTrajectory {
    pub mesh: Mesh,
    pub grid: TimeGrid,
    pub eps: f64,
    pub bathymetry: Bathymetry,
    pub levels: Vec<State>,
    /// φ at each level (from the first-stage evaluation; the last level is
    /// evaluated separately).
    pub phi: Vec<Vec<f64>>,
    pub c_initial: f64,
}

impl StateTrajectory {
    pub fn time(&self, m: usize) -> f64 {
        self.grid.time(m)
    }
    pub fn mass(&self, m: usize) -> f64 {
        self.mesh.integrate_nodes(self.levels[m].h())
    }
    pub fn operator(&self) -> DgOperator {
        let mut op = DgOperator::new(self.mesh, &self.bathymetry, self.eps);
        op.c_limit = 2.0 * self.c_initial;
        op
    }

    /// Window average of h + B0 at level m.
    pub fn observe(&self, window: &ObservationWindow, m: usize) -> f64 {
        Observer::new(&self.mesh, window, &self.bathymetry.b0).observe(self.levels[m].h())
    }

    pub fn observable_series(&self, window: &ObservationWindow) -> Vec<f64> {
        let obs = Observer::new(&self.mesh, window, &self.bathymetry.b0);
        self.levels.iter().map(|s| obs.observe(s.h())).collect()
    }
}

/// Time marching with a per-level callback; returns the grid used.
pub fn march<C>(mesh: &Mesh, bathymetry: &Bathymetry, cfg: &SolverConfig, mut on_level: C) -> Result<TimeGrid>
where
    C: FnMut(usize, &State, &Workspace) -> Result<()>,
{
    let grid = time_grid(mesh, &bathymetry.b0, cfg)?;
    let eps = cfg.viscosity(mesh);
    let mut op = DgOperator::new(*mesh, bathymetry, eps);
    let mut ws = Workspace::new(mesh);
    let mut state = State::at_rest(mesh, &bathymetry.b0);
    let n4 = state.q.len();
    let mut k = vec![0.0; n4];
    let mut u1 = vec![0.0; n4];
    let dt = grid.dt;
    for m in 0..=grid.steps {
        let t = grid.time(m);
        op.apply(&state.q, t, &mut ws, &mut k)?;
        if m == 0 {
            op.c_limit = 2.0 * ws.c;
        }
        on_level(m, &state, &ws)?;
        if m == grid.steps {
            break;
        }
        for i in 0..n4 {
            u1[i] = state.q[i] + dt * k[i];
        }
        op.apply(&u1, t + dt, &mut ws, &mut k)?;
        for i in 0..n4 {
            state.q[i] = 0.5 * state.q[i] + 0.5 * (u1[i] + dt * k[i]);
        }
    }
    Ok(grid)
}

/// Forward solve from h = −B0, v = 0, keeping every level.
pub fn solve_forward(mesh: &Mesh, bathymetry: &Bathymetry, cfg: &SolverConfig) -> Result<StateTrajectory> {
    let mut levels = Vec::new();
    let mut phi = Vec::new();
    let mut c_initial = 0.0;
    let grid = march(mesh, bathymetry, cfg, |m, s, ws| {
        if m == 0 {
            c_initial = ws.c;
        }
        levels.push(s.clone());
        phi.push(ws.phi.clone());
        Ok(())
    })?;
    Ok(StateTrajectory {
        mesh: *mesh,
        grid,
        eps: cfg.viscosity(mesh),
        bathymetry: bathymetry.clone(),
        levels,
        phi,
        c_initial,
    })
}

/// Forward solve keeping only the observable series.
pub fn solve_observable(
    mesh: &Mesh,
    bathymetry: &Bathymetry,
    cfg: &SolverConfig,
    window: &ObservationWindow,
) -> Result<(TimeGrid, Vec<f64>)> {
    let obs = Observer::new(mesh, window, &bathymetry.b0);
    let mut series = Vec::new();
    let grid = march(mesh, bathymetry, cfg, |_, s, _| {
        series.push(obs.observe(s.h()));
        Ok(())
    })?;
    Ok((grid, series))
}
