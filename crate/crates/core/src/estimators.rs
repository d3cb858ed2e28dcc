//! Tail probability estimators: Monte Carlo, mean-shifted importance
//! sampling, FORM, dense and low-rank SORM, constant-prefactor fitting.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{check_dim, Error, Result};
use crate::ldt::{EventMap, OptimumRecord, SweepResult};
use crate::measures::{standard_normal_vector, GaussianMeasure};

const Z95: f64 = 1.96;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mc,
    Is,
    Form,
    Sorm,
    SormLowrank,
    Fit,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Mc => "mc",
            Method::Is => "is",
            Method::Form => "form",
            Method::Sorm => "sorm",
            Method::SormLowrank => "sorm-lowrank",
            Method::Fit => "fit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityEstimate {
    pub z: f64,
    pub p_hat: f64,
    pub log10_p: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub method: Method,
    pub n_samples: Option<usize>,
    pub n_eigs: Option<usize>,
    pub rate_star: Option<f64>,
    /// FORM: the asymptotic bound e^{−I*}/√(2π·2I*).
    pub aux: Option<f64>,
    pub n_failed: usize,
}

impl ProbabilityEstimate {
    fn analytic(z: f64, log_p: f64, method: Method, rate_star: f64) -> Self {
        Self {
            z,
            p_hat: log_p.exp(),
            log10_p: log_p / std::f64::consts::LN_10,
            ci_low: None,
            ci_high: None,
            method,
            n_samples: None,
            n_eigs: None,
            rate_star: Some(rate_star),
            aux: None,
            n_failed: 0,
        }
    }

    pub fn covers(&self, p: f64) -> bool {
        match (self.ci_low, self.ci_high) {
            (Some(lo), Some(hi)) => lo <= p && p <= hi,
            _ => false,
        }
    }
}

/// Standard normal upper tail Φ(−x) = ½ erfc(x/√2).
pub fn normal_tail(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Evaluates F at the samples; forward-solve failures become `None`.
fn evaluate(event: &dyn EventMap, thetas: &[DVector<f64>]) -> Result<(Vec<Option<f64>>, usize)> {
    let vals: Vec<Result<f64>> = thetas.par_iter().map(|t| event.value(t)).collect();
    let mut out = Vec::with_capacity(vals.len());
    let mut failed = 0;
    for v in vals {
        match v {
            Ok(f) => out.push(Some(f)),
            Err(Error::Positivity { .. } | Error::WaveSpeed { .. }) => {
                failed += 1;
                out.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    if failed * 100 > thetas.len() {
        return Err(Error::TooManyFailures { failed, total: thetas.len() });
    }
    if failed > 0 {
        log::warn!("{failed} of {} forward solves failed and were excluded", thetas.len());
    }
    Ok((out, failed))
}

fn standard_draws(seed: u64, n: usize, dim: usize) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| standard_normal_vector(&mut rng, dim)).collect()
}

/// F-values of one Monte Carlo batch; reused for every threshold.
#[derive(Debug, Clone)]
pub struct McBatch {
    pub values: Vec<Option<f64>>,
    pub failed: usize,
}

impl McBatch {
    pub fn draw(event: &dyn EventMap, measure: &GaussianMeasure, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        check_dim(measure.dim(), event.dim())?;
        let thetas: Vec<DVector<f64>> =
            standard_draws(seed, n, measure.dim()).iter().map(|z| measure.transform(z)).collect();
        let (values, failed) = evaluate(event, &thetas)?;
        Ok(Self { values, failed })
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values: values.into_iter().map(Some).collect(), failed: 0 }
    }

    pub fn estimate(&self, z: f64) -> ProbabilityEstimate {
        let n = self.values.len() - self.failed;
        let hits = self.values.iter().filter(|v| matches!(v, Some(f) if *f >= z)).count();
        let p = hits as f64 / n as f64;
        let half = Z95 * (p * (1.0 - p) / n as f64).sqrt();
        ProbabilityEstimate {
            z,
            p_hat: p,
            log10_p: p.log10(),
            ci_low: Some((p - half).max(0.0)),
            ci_high: Some((p + half).min(1.0)),
            method: Method::Mc,
            n_samples: Some(n),
            n_eigs: None,
            rate_star: None,
            aux: None,
            n_failed: self.failed,
        }
    }

    pub fn curve(&self, zs: &[f64]) -> Vec<ProbabilityEstimate> {
        zs.iter().map(|&z| self.estimate(z)).collect()
    }
}

pub fn mc_estimate(event: &dyn EventMap, measure: &GaussianMeasure, z: f64, n: usize, seed: u64) -> Result<ProbabilityEstimate> {
    Ok(McBatch::draw(event, measure, n, seed)?.estimate(z))
}

pub fn mc_curve(event: &dyn EventMap, measure: &GaussianMeasure, zs: &[f64], n: usize, seed: u64) -> Result<Vec<ProbabilityEstimate>> {
    Ok(McBatch::draw(event, measure, n, seed)?.curve(zs))
}

/// Samples from N(θ*, C) with their F-values and log likelihood ratios.
#[derive(Debug, Clone)]
pub struct IsBatch {
    pub values: Vec<Option<f64>>,
    pub log_weights: Vec<f64>,
    pub rate_star: f64,
    pub failed: usize,
    pub center_z: f64,
}

impl IsBatch {
    pub fn draw(event: &dyn EventMap, measure: &GaussianMeasure, theta_star: &DVector<f64>, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        check_dim(measure.dim(), theta_star.len())?;
        let rate_star = measure.rate(theta_star)?;
        let eta = measure.rate_grad(theta_star)?;
        let shift = theta_star - measure.mean();
        let draws = standard_draws(seed, n, measure.dim());
        let mut thetas = Vec::with_capacity(n);
        let mut log_weights = Vec::with_capacity(n);
        for z in &draws {
            let t = measure.transform(z) + &shift;
            log_weights.push(-(&t - theta_star).dot(&eta));
            thetas.push(t);
        }
        let (values, failed) = evaluate(event, &thetas)?;
        let center_z = event.value(theta_star).unwrap_or(f64::NAN);
        Ok(Self { values, log_weights, rate_star, failed, center_z })
    }

    pub fn estimate(&self, z: f64) -> ProbabilityEstimate {
        let n = self.values.len() - self.failed;
        let hit: Vec<Option<f64>> = self
            .values
            .iter()
            .zip(&self.log_weights)
            .map(|(v, &lw)| match v {
                Some(f) if *f >= z => Some(lw),
                _ => None,
            })
            .collect();
        let lmax = hit.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let nf = n as f64;
        let (mean, var) = if lmax == f64::NEG_INFINITY {
            (0.0, 0.0)
        } else {
            // summands scaled by e^{−lmax}
            let ys: Vec<f64> = self
                .values
                .iter()
                .zip(&hit)
                .filter(|(v, _)| v.is_some())
                .map(|(_, h)| h.map_or(0.0, |lw| (lw - lmax).exp()))
                .collect();
            let m = ys.iter().sum::<f64>() / nf;
            let v = ys.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / nf;
            (m, v)
        };
        let scale = if lmax == f64::NEG_INFINITY { 0.0 } else { (lmax - self.rate_star).exp() };
        let p = mean * scale;
        let half = Z95 * (var / nf).sqrt() * scale;
        ProbabilityEstimate {
            z,
            p_hat: p,
            log10_p: p.log10(),
            ci_low: Some((p - half).max(0.0)),
            ci_high: Some(p + half),
            method: Method::Is,
            n_samples: Some(n),
            n_eigs: None,
            rate_star: Some(self.rate_star),
            aux: None,
            n_failed: self.failed,
        }
    }
}

pub fn is_estimate(
    event: &dyn EventMap,
    measure: &GaussianMeasure,
    rec: &OptimumRecord,
    z: f64,
    n: usize,
    seed: u64,
) -> Result<ProbabilityEstimate> {
    Ok(IsBatch::draw(event, measure, &rec.theta_vec(), n, seed)?.estimate(z))
}

/// Seed for the batch attached to sweep entry `j`.
pub fn partition_seed(seed: u64, j: usize) -> u64 {
    seed.wrapping_add((j as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// One batch per optimizer; each z is served by the optimizer with the
/// nearest z(λ).
pub fn is_curve(
    event: &dyn EventMap,
    measure: &GaussianMeasure,
    sweep: &SweepResult,
    zs: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<ProbabilityEstimate>> {
    let recs: Vec<&OptimumRecord> = sweep.records().collect();
    if recs.is_empty() {
        return Err(Error::InvalidArgument("sweep has no successful optimizers".into()));
    }
    let nearest = |z: f64| {
        (0..recs.len())
            .min_by(|&a, &b| (recs[a].z - z).abs().total_cmp(&(recs[b].z - z).abs()))
            .unwrap()
    };
    let owners: Vec<usize> = zs.iter().map(|&z| nearest(z)).collect();
    let mut batches: Vec<Option<IsBatch>> = vec![None; recs.len()];
    for &j in &owners {
        if batches[j].is_none() {
            batches[j] = Some(IsBatch::draw(event, measure, &recs[j].theta_vec(), n, partition_seed(seed, j))?);
        }
    }
    Ok(zs.iter().zip(&owners).map(|(&z, &j)| batches[j].as_ref().unwrap().estimate(z)).collect())
}

/// log of (2π)^{-1/2} e^{−I*} / √(2I*)
fn log_asymptotic_bound(rate_star: f64) -> f64 {
    -rate_star - 0.5 * LN_2PI - 0.5 * (2.0 * rate_star).ln()
}

/// Φ(−√(2I*)), with the asymptotic bound in `aux`.
pub fn form_from_rate(z: f64, rate_star: f64) -> ProbabilityEstimate {
    let beta = (2.0 * rate_star.max(0.0)).sqrt();
    let p = normal_tail(beta);
    let mut e = ProbabilityEstimate::analytic(z, p.ln(), Method::Form, rate_star);
    e.p_hat = p;
    if rate_star > 0.0 {
        e.aux = Some(log_asymptotic_bound(rate_star).exp());
    }
    e
}

pub fn form_estimate(rec: &OptimumRecord, measure: &GaussianMeasure) -> Result<ProbabilityEstimate> {
    let rate = measure.rate(&rec.theta_vec())?;
    Ok(form_from_rate(rec.z, rate))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SormSpectrum {
    /// Eigenvalues of the projected preconditioned Hessian, by decreasing magnitude.
    pub eigenvalues: Vec<f64>,
    /// How many enter the product.
    pub retained: usize,
    pub lambda: f64,
}

impl SormSpectrum {
    pub fn scaled(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|e| e * self.lambda).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("i,lambda_i,lambda_times_lambda_i\n");
        for (i, e) in self.eigenvalues.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", i + 1, e, e * self.lambda);
        }
        s
    }

    /// −½ Σ log(1 − λμ_i) over the retained eigenvalues.
    fn log_correction(&self) -> Result<f64> {
        let mut acc = 0.0;
        for (i, &mu) in self.eigenvalues.iter().take(self.retained).enumerate() {
            let f = 1.0 - self.lambda * mu;
            if !(f > 0.0) {
                return Err(Error::SormPositivity { index: i + 1, eigenvalue: mu, factor: f });
            }
            acc -= 0.5 * f.ln();
        }
        Ok(acc)
    }
}

fn sort_by_magnitude(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
    v
}

pub fn sorm_from_spectrum(z: f64, rate_star: f64, spec: &SormSpectrum, method: Method) -> Result<ProbabilityEstimate> {
    if !(rate_star > 0.0) {
        return Err(Error::InvalidArgument("second-order estimate needs a positive rate at the optimizer".into()));
    }
    let log_p = log_asymptotic_bound(rate_star) + spec.log_correction()?;
    let mut e = ProbabilityEstimate::analytic(z, log_p, method, rate_star);
    e.n_eigs = Some(spec.retained);
    Ok(e)
}

/// SORM with a full Hessian of F at θ*.
pub fn sorm_estimate_dense(
    rec: &OptimumRecord,
    measure: &GaussianMeasure,
    hessian: &DMatrix<f64>,
) -> Result<(ProbabilityEstimate, SormSpectrum)> {
    let n = measure.dim();
    if hessian.nrows() != n || hessian.ncols() != n {
        return Err(Error::Dimension { expected: n, got: hessian.nrows() });
    }
    let asym = (hessian - hessian.transpose()).amax();
    if asym > 1e-8 * hessian.amax().max(1.0) {
        return Err(Error::InvalidArgument(format!("Hessian is not symmetric (max asymmetry {asym:e})")));
    }
    let hs = (hessian + hessian.transpose()) * 0.5;
    let theta = rec.theta_vec();
    let w = measure.whitening(&theta)?;
    let full = w.a.transpose() * hs * &w.a;
    let sub = full.view((1, 1), (n - 1, n - 1)).into_owned();
    let sub = (&sub + sub.transpose()) * 0.5;
    let eig = sort_by_magnitude(sub.symmetric_eigen().eigenvalues.iter().copied().collect());
    let spec = SormSpectrum { retained: eig.len(), eigenvalues: eig, lambda: rec.lambda };
    let rate = measure.rate(&theta)?;
    Ok((sorm_from_spectrum(rec.z, rate, &spec, Method::Sorm)?, spec))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowRankOptions {
    pub rank: usize,
    pub tol: f64,
    pub oversampling: usize,
    pub power_iterations: usize,
    pub seed: u64,
}

impl Default for LowRankOptions {
    fn default() -> Self {
        Self { rank: 10, tol: 1e-3, oversampling: 5, power_iterations: 2, seed: 0 }
    }
}

/// Top eigenvalues of a symmetric operator on R^m by randomized subspace
/// iteration with Rayleigh-Ritz.
pub fn randomized_eigs<A>(m: usize, rank: usize, opts: &LowRankOptions, apply: A) -> Result<Vec<f64>>
where
    A: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    if rank == 0 || m == 0 {
        return Ok(Vec::new());
    }
    let l = (rank + opts.oversampling).min(m);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let omega = DMatrix::from_fn(m, l, |_, _| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng));
    let apply_cols = |x: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let cols: Vec<DVector<f64>> = (0..x.ncols())
            .into_par_iter()
            .map(|j| apply(&x.column(j).into_owned()))
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_columns(&cols))
    };
    let mut y = apply_cols(&omega)?;
    for _ in 0..opts.power_iterations {
        let q = y.qr().q();
        y = apply_cols(&q)?;
    }
    let q = y.qr().q();
    let t = q.transpose() * apply_cols(&q)?;
    let t = (&t + t.transpose()) * 0.5;
    let eig = sort_by_magnitude(t.symmetric_eigen().eigenvalues.iter().copied().collect());
    Ok(eig.into_iter().take(rank).collect())
}

/// SORM from Hessian-vector products of F at θ*.
/// Leading eigenvalues of the projected, covariance-preconditioned ∇²F at the
/// optimizer; `retained` counts those with |λ·λ_i| ≥ `opts.tol`.
pub fn lowrank_spectrum<H>(rec: &OptimumRecord, measure: &GaussianMeasure, hvp: H, opts: &LowRankOptions) -> Result<SormSpectrum>
where
    H: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    let n = measure.dim();
    let rank = if opts.rank > n - 1 {
        log::warn!("requested rank {} exceeds n-1 = {}; clamped", opts.rank, n - 1);
        n - 1
    } else {
        opts.rank
    };
    let theta = rec.theta_vec();
    let w = measure.whitening(&theta)?;
    let at = w.a.transpose();
    let apply = |x: &DVector<f64>| -> Result<DVector<f64>> {
        let mut full = DVector::zeros(n);
        full.rows_mut(1, n - 1).copy_from(x);
        let y = &at * hvp(&(&w.a * full))?;
        Ok(y.rows(1, n - 1).into_owned())
    };
    let eig = randomized_eigs(n - 1, rank, opts, apply)?;
    let retained = eig.iter().take_while(|&&mu| (rec.lambda * mu).abs() >= opts.tol).count();
    Ok(SormSpectrum { eigenvalues: eig, retained, lambda: rec.lambda })
}

pub fn sorm_estimate_lowrank<H>(
    rec: &OptimumRecord,
    measure: &GaussianMeasure,
    hvp: H,
    opts: &LowRankOptions,
) -> Result<(ProbabilityEstimate, SormSpectrum)>
where
    H: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    let spec = lowrank_spectrum(rec, measure, hvp, opts)?;
    let rate = measure.rate(&rec.theta_vec())?;
    Ok((sorm_from_spectrum(rec.z, rate, &spec, Method::SormLowrank)?, spec))
}

pub fn fit_constant_prefactor(mc: &[(f64, f64)], sweep: &SweepResult, window: (f64, f64)) -> Result<(f64, Vec<(f64, f64)>)> {
    let curve = sweep.rate_curve();
    let logs: Vec<f64> = mc
        .iter()
        .filter(|(z, p)| *z >= window.0 && *z <= window.1 && *p > 0.0)
        .filter_map(|&(z, p)| sweep.rate_at(z).map(|i| p.ln() + i))
        .collect();
    if logs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no Monte Carlo points with p > 0 inside the fit window [{}, {}] overlap the sweep",
            window.0, window.1
        )));
    }
    let c0 = (logs.iter().sum::<f64>() / logs.len() as f64).exp();
    Ok((c0, curve.iter().map(|&(z, i)| (z, c0 * (-i).exp())).collect()))
}

/// C₀(z) = p(z) e^{I*(z)} wherever the sweep covers z.
pub fn prefactor_extract(curve: &[(f64, f64)], sweep: &SweepResult) -> Vec<(f64, f64)> {
    curve.iter().filter_map(|&(z, p)| sweep.rate_at(z).map(|i| (z, p * i.exp()))).collect()
}

pub fn curve_to_csv(estimates: &[ProbabilityEstimate]) -> String {
    let mut s = String::from("z,p,ci_low,ci_high,method\n");
    for e in estimates {
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(s, "{},{},{},{},{}", e.z, e.p_hat, opt(e.ci_low), opt(e.ci_high), e.method.name());
    }
    s
}
