//! Probability measures on R^n: rate functions, cumulant generating functions,
//! sampling and the whitening transform used by FORM/SORM.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Value returned by rate functions outside the support of the measure.
pub const INFINITE_RATE: f64 = f64::INFINITY;

pub fn is_infinite_rate(r: f64) -> bool {
    r == INFINITE_RATE
}

/// A rate function together with the pieces the optimizer needs.
pub trait RateFunction: Sync {
    fn dim(&self) -> usize;
    /// Rate at `theta`, or [`INFINITE_RATE`] outside the support.
    fn rate(&self, theta: &DVector<f64>) -> f64;
    fn rate_grad(&self, theta: &DVector<f64>) -> DVector<f64>;
    fn rate_hess_vec(&self, theta: &DVector<f64>, v: &DVector<f64>) -> DVector<f64>;
    /// Maps a gradient to a descent direction (covariance preconditioning).
    fn precondition(&self, theta: &DVector<f64>, g: &DVector<f64>) -> DVector<f64>;
    fn center(&self) -> DVector<f64>;
}

#[derive(Debug, Clone)]
pub struct GaussianMeasure {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    cov_inv: DMatrix<f64>,
    sqrt_cov: DMatrix<f64>,
    inv_sqrt_cov: DMatrix<f64>,
}

impl GaussianMeasure {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty mean vector".into()));
        }
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::Dimension { expected: n, got: cov.nrows() });
        }
        let scale = cov.amax();
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidArgument("covariance must be finite and nonzero".into()));
        }
        let asym = (&cov - cov.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::InvalidArgument(format!(
                "covariance not symmetric (max asymmetry {asym:e})"
            )));
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        let eig = sym.clone().symmetric_eigen();
        let lmax = eig.eigenvalues.max();
        let lmin = eig.eigenvalues.min();
        if !(lmin > (n as f64) * f64::EPSILON * lmax) {
            return Err(Error::InvalidArgument(format!(
                "covariance not positive definite (smallest eigenvalue {lmin:e})"
            )));
        }
        let v = &eig.eigenvectors;
        let from_diag = |f: &dyn Fn(f64) -> f64| {
            let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
            let m = v * d * v.transpose();
            (&m + m.transpose()) * 0.5
        };
        let sqrt_cov = from_diag(&|l| l.sqrt());
        let inv_sqrt_cov = from_diag(&|l| 1.0 / l.sqrt());
        let cov_inv = from_diag(&|l| 1.0 / l);
        Ok(Self { mean, cov: sym, cov_inv, sqrt_cov, inv_sqrt_cov })
    }

    pub fn standard(n: usize) -> Result<Self> {
        Self::new(DVector::zeros(n), DMatrix::identity(n, n))
    }

    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, DMatrix::identity(n, n) * variance)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
    pub fn cov_inv(&self) -> &DMatrix<f64> {
        &self.cov_inv
    }
    pub fn sqrt_cov(&self) -> &DMatrix<f64> {
        &self.sqrt_cov
    }
    pub fn inv_sqrt_cov(&self) -> &DMatrix<f64> {
        &self.inv_sqrt_cov
    }

    /// ½ (θ−θ0)ᵀ C⁻¹ (θ−θ0)
    pub fn rate(&self, theta: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim(), theta.len())?;
        let d = theta - &self.mean;
        Ok(0.5 * d.dot(&(&self.cov_inv * &d)))
    }

    pub fn rate_grad(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), theta.len())?;
        Ok(&self.cov_inv * (theta - &self.mean))
    }

    pub fn cgf(&self, eta: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim(), eta.len())?;
        Ok(eta.dot(&self.mean) + 0.5 * eta.dot(&(&self.cov * eta)))
    }

    pub fn cgf_grad(&self, eta: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), eta.len())?;
        Ok(&self.mean + &self.cov * eta)
    }

    /// θ = θ0 + C^{1/2} ζ for a given standard normal ζ.
    pub fn transform(&self, zeta: &DVector<f64>) -> DVector<f64> {
        &self.mean + &self.sqrt_cov * zeta
    }

    pub fn sample(&self, seed: u64, count: usize) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| self.transform(&standard_normal_vector(&mut rng, self.dim())))
            .collect()
    }

    /// Affine map θ = θ0 + A ξ with A = C^{1/2} R sending the optimizer to ‖ξ*‖ e1.
    pub fn whitening(&self, theta_star: &DVector<f64>) -> Result<WhiteningMap> {
        check_dim(self.dim(), theta_star.len())?;
        let n = self.dim();
        let d = &self.inv_sqrt_cov * (theta_star - &self.mean);
        let beta = d.norm();
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidArgument(
                "degenerate direction: optimizer coincides with the mean".into(),
            ));
        }
        let u = d / beta;
        // Householder H with H u = -sign e1, then flip the first row when needed.
        let mut w = u.clone();
        let flip = u[0] >= 0.0;
        w[0] += if flip { 1.0 } else { -1.0 };
        let ww = w.dot(&w);
        let mut rt = DMatrix::identity(n, n) - (&w * w.transpose()) * (2.0 / ww);
        if flip {
            for j in 0..n {
                rt[(0, j)] = -rt[(0, j)];
            }
        }
        let rotation = rt.transpose();
        let a = &self.sqrt_cov * &rotation;
        let a_inv = &rt * &self.inv_sqrt_cov;
        let mut xi_star = DVector::zeros(n);
        xi_star[0] = beta;
        Ok(WhiteningMap { a, a_inv, rotation, mean: self.mean.clone(), xi_star })
    }
}

impl RateFunction for GaussianMeasure {
    fn dim(&self) -> usize {
        self.mean.len()
    }
    fn rate(&self, theta: &DVector<f64>) -> f64 {
        let d = theta - &self.mean;
        0.5 * d.dot(&(&self.cov_inv * &d))
    }
    fn rate_grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.cov_inv * (theta - &self.mean)
    }
    fn rate_hess_vec(&self, _theta: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.cov_inv * v
    }
    fn precondition(&self, _theta: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
        &self.cov * g
    }
    fn center(&self) -> DVector<f64> {
        self.mean.clone()
    }
}

pub fn standard_normal_vector<R: rand::Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

#[derive(Debug, Clone)]
pub struct WhiteningMap {
    pub a: DMatrix<f64>,
    pub a_inv: DMatrix<f64>,
    pub rotation: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub xi_star: DVector<f64>,
}

impl WhiteningMap {
    pub fn to_theta(&self, xi: &DVector<f64>) -> DVector<f64> {
        &self.mean + &self.a * xi
    }
    pub fn to_xi(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.a_inv * (theta - &self.mean)
    }
    pub fn beta(&self) -> f64 {
        self.xi_star[0]
    }
}

/// Product of exponential distributions with rates α_k on θ_k ≥ 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExponentialMeasure {
    rates: Vec<f64>,
}

impl ExponentialMeasure {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::InvalidArgument("empty rate vector".into()));
        }
        if let Some(a) = rates.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
            return Err(Error::InvalidArgument(format!("exponential rate must be positive, got {a}")));
        }
        Ok(Self { rates })
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// −Σ log(1 − η_k/α_k); `None` outside η_k < α_k.
    pub fn cgf(&self, eta: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let mut s = 0.0;
        let mut g = DVector::zeros(eta.len());
        for (k, &a) in self.rates.iter().enumerate() {
            let r = 1.0 - eta[k] / a;
            if !(r > 0.0) {
                return None;
            }
            s -= r.ln();
            g[k] = 1.0 / (a - eta[k]);
        }
        Some((s, g))
    }
}

impl RateFunction for ExponentialMeasure {
    fn dim(&self) -> usize {
        self.rates.len()
    }
    /// Σ (α_k θ_k − 1 − log(α_k θ_k))
    fn rate(&self, theta: &DVector<f64>) -> f64 {
        let mut r = 0.0;
        for (k, &a) in self.rates.iter().enumerate() {
            if !(theta[k] > 0.0) {
                return INFINITE_RATE;
            }
            r += a * theta[k] - 1.0 - (a * theta[k]).ln();
        }
        r
    }
    fn rate_grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.rates.len(), |k, _| self.rates[k] - 1.0 / theta[k])
    }
    fn rate_hess_vec(&self, theta: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.rates.len(), |k, _| v[k] / (theta[k] * theta[k]))
    }
    fn precondition(&self, _theta: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.rates.len(), |k, _| g[k] / (self.rates[k] * self.rates[k]))
    }
    fn center(&self) -> DVector<f64> {
        DVector::from_fn(self.rates.len(), |k, _| 1.0 / self.rates[k])
    }
}

/// max_η ⟨η,θ⟩ − S(η) by BFGS ascent with backtracking. `cgf` returns
/// `None` outside its domain.
pub fn legendre_numeric<S>(cgf: S, theta: &DVector<f64>) -> Result<f64>
where
    S: Fn(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    const MAX_ITER: usize = 10_000;
    let n = theta.len();
    let tol = 1e-9 * (1.0 + theta.norm());
    let mut eta = DVector::zeros(n);
    let (s0, g0) = cgf(&eta).ok_or_else(|| Error::InvalidArgument("cgf undefined at 0".into()))?;
    let mut val = eta.dot(theta) - s0;
    let mut grad = theta - g0;
    let mut hinv = DMatrix::<f64>::identity(n, n);
    for it in 0..MAX_ITER {
        if grad.norm() <= tol {
            return Ok(val);
        }
        let mut dir = &hinv * &grad;
        if dir.dot(&grad) <= 0.0 {
            hinv = DMatrix::identity(n, n);
            dir = grad.clone();
        }
        let slope = dir.dot(&grad);
        let mut step = 1.0;
        let accepted = loop {
            let trial = &eta + &dir * step;
            if let Some((s, g)) = cgf(&trial) {
                let v = trial.dot(theta) - s;
                if v >= val + 1e-4 * step * slope {
                    break Some((trial, v, theta - g));
                }
            }
            step *= 0.5;
            if step < 1e-20 {
                break None;
            }
        };
        let Some((next, v, g)) = accepted else {
            if grad.norm() <= 1e-6 * (1.0 + theta.norm()) {
                return Ok(val);
            }
            return Err(Error::NoConvergence {
                iterations: it,
                reason: "line search stalled in Legendre transform".into(),
                last: eta.iter().copied().collect(),
            });
        };
        if v <= val && grad.norm() <= 1e-6 * (1.0 + theta.norm()) {
            return Ok(val);
        }
        // BFGS on the concave objective: curvature pairs use −Δgrad.
        let s_k = &next - &eta;
        let y_k = &grad - &g;
        let sy = s_k.dot(&y_k);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let id = DMatrix::<f64>::identity(n, n);
            let left = &id - &s_k * y_k.transpose() * rho;
            hinv = &left * &hinv * left.transpose() + &s_k * s_k.transpose() * rho;
        }
        eta = next;
        val = v;
        grad = g;
    }
    Err(Error::NoConvergence {
        iterations: MAX_ITER,
        reason: "Legendre transform ascent hit the iteration cap".into(),
        last: eta.iter().copied().collect(),
    })
}
