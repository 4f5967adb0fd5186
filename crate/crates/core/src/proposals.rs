//! Stationary stochastic AR(1) proposals `y = G x + g + nu`, `nu ~ N(0, Sigma)`,
//! with `G` and `Sigma` functions of the target precision `A`.
//!
//! A proposal is stored by its action on the target's eigenbasis: per mode
//! `i` it keeps `G_i`, `Sigma_i` and the precision `lambda~_i^2` of the
//! proposal-chain equilibrium `N(A_prop^{-1} beta, A_prop^{-1})`, plus the
//! equilibrium mean. The offset is recovered as `g = (I - G) * mean`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dense::{condition_number, DenseAr1, DenseGaussian};
use crate::error::{check_dim, Error, Result};
use crate::targets::{from_eigen, to_eigen, SpectralTarget};

/// Noise variance used for leapfrog modes that return exactly to their start.
pub const RESONANT_NOISE_FLOOR: f64 = 1e-24;
const RESONANCE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Sla,
    ThetaSla,
    Cn,
    Pcn,
    PSla,
    Langevin,
    Hmc,
    MultiStep,
    Custom,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Family::Sla => "sla",
            Family::ThetaSla => "theta-sla",
            Family::Cn => "cn",
            Family::Pcn => "pcn",
            Family::PSla => "p-sla",
            Family::Langevin => "langevin",
            Family::Hmc => "hmc",
            Family::MultiStep => "multi-step",
            Family::Custom => "custom",
        };
        f.write_str(s)
    }
}

/// Preconditioner / mass matrix `V`, restricted to functions of `A`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "values")]
pub enum Mass {
    Identity,
    /// `V = A^{-1}`.
    InversePrecision,
    /// Eigenvalues of `V` on the target eigenbasis.
    Eigenvalues(Vec<f64>),
}

impl Mass {
    /// Eigenvalues `V_i` for `target`.
    pub fn eigenvalues(&self, target: &SpectralTarget) -> Result<Vec<f64>> {
        let v = match self {
            Mass::Identity => vec![1.0; target.dim()],
            Mass::InversePrecision => target.eigenvalues().iter().map(|l| 1.0 / l).collect(),
            Mass::Eigenvalues(v) => {
                check_dim(target.dim(), v.len())?;
                v.clone()
            }
        };
        if let Some(i) = v.iter().position(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::invalid(format!(
                "mass eigenvalue {i} must be positive, got {}",
                v[i]
            )));
        }
        Ok(v)
    }
}

/// Equilibrium precision `lambda~^2 = (1 - G^2) / Sigma` of a scalar AR(1) chain.
pub fn stationary_precision(g: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
    check_dim(g.len(), noise.len())?;
    g.iter()
        .zip(noise)
        .enumerate()
        .map(|(i, (&gi, &si))| {
            if !(gi.abs() < 1.0) {
                return Err(Error::DivergentProposal {
                    mode: i,
                    value: gi.abs(),
                });
            }
            if !(si > 0.0) {
                return Err(Error::invalid(format!(
                    "noise variance at mode {i} must be > 0, got {si}"
                )));
            }
            Ok((1.0 - gi) * (1.0 + gi) / si)
        })
        .collect()
}

/// Noise variances `Sigma_i = (1 - G_i^2) / lambda~_i^2` that give a chain with
/// iteration eigenvalues `g` the equilibrium precision `stationary`.
pub fn noise_from_stationary(g: &[f64], stationary: &[f64]) -> Result<Vec<f64>> {
    check_dim(g.len(), stationary.len())?;
    g.iter()
        .zip(stationary)
        .enumerate()
        .map(|(i, (&gi, &li))| {
            if !(li > 0.0) {
                return Err(Error::invalid(format!(
                    "stationary precision at mode {i} must be > 0, got {li}"
                )));
            }
            if !(gi.abs() < 1.0) {
                return Err(Error::DivergentProposal {
                    mode: i,
                    value: gi.abs(),
                });
            }
            Ok((1.0 - gi) * (1.0 + gi) / li)
        })
        .collect()
}

/// Leapfrog schedule for the HMC proposal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmcSchedule {
    pub step_size: f64,
    pub steps: usize,
    pub mass: Mass,
}

impl HmcSchedule {
    pub fn new(step_size: f64, steps: usize, mass: Mass) -> Result<Self> {
        if !(step_size > 0.0) {
            return Err(Error::invalid(format!("step size must be > 0, got {step_size}")));
        }
        if steps == 0 {
            return Err(Error::invalid("number of leapfrog steps must be >= 1"));
        }
        Ok(Self { step_size, steps, mass })
    }

    /// `T' = L h`.
    pub fn integration_time(&self) -> f64 {
        self.steps as f64 * self.step_size
    }

    /// Per-mode stability flags `h^2 lambda_i^2 < 4` on the `V`-scaled spectrum.
    pub fn stability(&self, target: &SpectralTarget) -> Result<Vec<bool>> {
        let v = self.mass.eigenvalues(target)?;
        let h2 = self.step_size * self.step_size;
        Ok(target
            .eigenvalues()
            .iter()
            .zip(&v)
            .map(|(l, vi)| h2 * l * vi < 4.0)
            .collect())
    }
}

/// `theta = -acos(1 - h^2 lambda^2 / 2)` for a stable leapfrog mode.
fn leapfrog_angle(lambda2: f64, h: f64) -> Result<f64> {
    let s = h * h * lambda2;
    if !(s < 4.0) || !(s > 0.0) {
        return Err(Error::UnstableStep { mode: 0, value: s });
    }
    Ok(-(1.0 - 0.5 * s).acos())
}

/// Eigenvalue `cos(L theta)` of the `L`-step leapfrog iteration matrix for a
/// mode with precision eigenvalue `lambda2` (after mass scaling).
pub fn hmc_eigen(lambda2: f64, h: f64, steps: usize) -> Result<f64> {
    if steps == 0 {
        return Err(Error::invalid("number of leapfrog steps must be >= 1"));
    }
    if !(h > 0.0) || !(lambda2 > 0.0) {
        return Err(Error::invalid("h and lambda^2 must be positive"));
    }
    let theta = leapfrog_angle(lambda2, h)?;
    Ok((steps as f64 * theta).cos())
}

/// `k^L` for the single-mode leapfrog matrix
/// `k = [[1 - h^2 l/2, h], [-h l + h^3 l^2 / 4, 1 - h^2 l/2]]`, by repeated
/// multiplication.
pub fn leapfrog_matrix_power(lambda2: f64, h: f64, steps: usize) -> [[f64; 2]; 2] {
    let c = 1.0 - 0.5 * h * h * lambda2;
    let k = [[c, h], [-h * lambda2 + 0.25 * h.powi(3) * lambda2 * lambda2, c]];
    let mut acc = [[1.0, 0.0], [0.0, 1.0]];
    for _ in 0..steps {
        acc = [
            [
                acc[0][0] * k[0][0] + acc[0][1] * k[1][0],
                acc[0][0] * k[0][1] + acc[0][1] * k[1][1],
            ],
            [
                acc[1][0] * k[0][0] + acc[1][1] * k[1][0],
                acc[1][0] * k[0][1] + acc[1][1] * k[1][1],
            ],
        ];
    }
    acc
}

/// Equilibrium `N(mean, diag(precision)^{-1})` of a proposal chain, on the
/// proposal's eigenbasis.
#[derive(Clone, Debug)]
pub struct Stationary {
    pub precision: Vec<f64>,
    pub mean: Vec<f64>,
    pub mean_eigen: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Ar1Proposal {
    g: Vec<f64>,
    noise: Vec<f64>,
    stat_precision: Vec<f64>,
    mean: Vec<f64>,
    mean_eigen: Vec<f64>,
    basis: Option<Arc<DMatrix<f64>>>,
    family: Family,
    composed: usize,
}

impl Ar1Proposal {
    /// Proposal from per-mode `G_i`, `Sigma_i` and the equilibrium mean (in
    /// original coordinates).
    pub fn custom(g: Vec<f64>, noise: Vec<f64>, mean: Vec<f64>, basis: Option<Arc<DMatrix<f64>>>) -> Result<Self> {
        let stat_precision = stationary_precision(&g, &noise)?;
        check_dim(g.len(), mean.len())?;
        let mean_eigen = to_eigen(basis.as_deref(), &mean);
        Ok(Self {
            g,
            noise,
            stat_precision,
            mean,
            mean_eigen,
            basis,
            family: Family::Custom,
            composed: 1,
        })
    }

    /// Discretized Langevin proposal
    /// `y = (I + theta h VA/2)^{-1} [(I - (1-theta) h VA/2) x + h V b/2 + (hV)^{1/2} xi]`.
    pub fn langevin(theta: f64, h: f64, target: &SpectralTarget, mass: &Mass) -> Result<Self> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::invalid(format!("theta must lie in [0, 1], got {theta}")));
        }
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::invalid(format!("step size must be > 0, got {h}")));
        }
        let v = mass.eigenvalues(target)?;
        let d = target.dim();
        let mut g = Vec::with_capacity(d);
        let mut noise = Vec::with_capacity(d);
        let mut stat = Vec::with_capacity(d);
        for (i, (&l2, &vi)) in target.eigenvalues().iter().zip(&v).enumerate() {
            let b = vi * l2;
            let denom = 1.0 + 0.5 * theta * h * b;
            let gi = (1.0 - 0.5 * (1.0 - theta) * h * b) / denom;
            if !(gi.abs() < 1.0) {
                return Err(Error::DivergentProposal {
                    mode: i,
                    value: gi.abs(),
                });
            }
            g.push(gi);
            noise.push(h * vi / (denom * denom));
            // A_prop = A + (theta - 1/2)(h/2) A V A
            stat.push(l2 * (1.0 + (theta - 0.5) * 0.5 * h * b));
        }
        let family = match (theta, mass) {
            (0.0, Mass::Identity) => Family::Sla,
            (0.5, Mass::Identity) => Family::Cn,
            (_, Mass::Identity) => Family::ThetaSla,
            (0.5, Mass::InversePrecision) => Family::Pcn,
            (0.0, Mass::InversePrecision) => Family::PSla,
            _ => Family::Langevin,
        };
        Ok(Self {
            g,
            noise,
            stat_precision: stat,
            mean: target.mean().to_vec(),
            mean_eigen: target.mean_eigen().to_vec(),
            basis: target.basis().cloned(),
            family,
            composed: 1,
        })
    }

    /// Simplified Langevin algorithm: `theta = 0`, `V = I`.
    pub fn sla(h: f64, target: &SpectralTarget) -> Result<Self> {
        Self::langevin(0.0, h, target, &Mass::Identity)
    }

    pub fn theta_sla(theta: f64, h: f64, target: &SpectralTarget) -> Result<Self> {
        Self::langevin(theta, h, target, &Mass::Identity)
    }

    /// Crank-Nicolson: `theta = 1/2`, `V = I`.
    pub fn cn(h: f64, target: &SpectralTarget) -> Result<Self> {
        Self::langevin(0.5, h, target, &Mass::Identity)
    }

    /// Preconditioned Crank-Nicolson: `theta = 1/2`, `V = A^{-1}`.
    pub fn pcn(h: f64, target: &SpectralTarget) -> Result<Self> {
        Self::langevin(0.5, h, target, &Mass::InversePrecision)
    }

    /// Leapfrog HMC proposal with momentum `p_0 ~ N(0, V^{-1})`.
    ///
    /// Per mode with scaled precision `b = V_i lambda_i^2` and
    /// `a = sqrt(b (1 - h^2 b / 4))`, the `L`-step map factors as a rotation
    /// by `L theta`, so `G_i = cos(L theta)`, `Sigma_i = V_i sin^2(L theta) / a^2`
    /// and the equilibrium precision is `a^2 / V_i` for every `L`.
    pub fn hmc(schedule: &HmcSchedule, target: &SpectralTarget) -> Result<Self> {
        let h = schedule.step_size;
        if !(h > 0.0) {
            return Err(Error::invalid(format!("step size must be > 0, got {h}")));
        }
        if schedule.steps == 0 {
            return Err(Error::invalid("number of leapfrog steps must be >= 1"));
        }
        let v = schedule.mass.eigenvalues(target)?;
        let steps = schedule.steps as f64;
        let d = target.dim();
        let mut g = Vec::with_capacity(d);
        let mut noise = Vec::with_capacity(d);
        let mut stat = Vec::with_capacity(d);
        for (i, (&l2, &vi)) in target.eigenvalues().iter().zip(&v).enumerate() {
            let b = vi * l2;
            let s = h * h * b;
            if !(s < 4.0) {
                return Err(Error::UnstableStep { mode: i, value: s });
            }
            let theta = -(1.0 - 0.5 * s).acos();
            let a2 = b * (1.0 - 0.25 * s);
            let (sin_l, cos_l) = (steps * theta).sin_cos();
            let mut sig_hat = sin_l * sin_l / a2;
            if sin_l.abs() < RESONANCE_TOL {
                warn!(
                    "hmc mode {i} is resonant (|sin(L theta)| = {:e}); flooring its noise at {RESONANT_NOISE_FLOOR:e}",
                    sin_l.abs()
                );
                sig_hat = sig_hat.max(RESONANT_NOISE_FLOOR);
            }
            g.push(cos_l);
            noise.push(vi * sig_hat);
            stat.push(a2 / vi);
        }
        Ok(Self {
            g,
            noise,
            stat_precision: stat,
            mean: target.mean().to_vec(),
            mean_eigen: target.mean_eigen().to_vec(),
            basis: target.basis().cloned(),
            family: Family::Hmc,
            composed: 1,
        })
    }

    /// `L` steps of this proposal taken as one: `G_L = G^L`,
    /// `Sigma_L = sum_{l<L} G^{2l} Sigma`. The equilibrium is unchanged.
    pub fn compose_steps(&self, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("number of composed steps must be >= 1"));
        }
        if steps == 1 {
            return Ok(self.clone());
        }
        let mut g = Vec::with_capacity(self.dim());
        let mut noise = Vec::with_capacity(self.dim());
        for (&gi, &si) in self.g.iter().zip(&self.noise) {
            let g2 = gi * gi;
            let g2l = g2.powi(steps as i32);
            let series = if (1.0 - g2).abs() > 1e-8 {
                (1.0 - g2l) / (1.0 - g2)
            } else {
                let mut acc = 0.0;
                let mut p = 1.0;
                for _ in 0..steps {
                    acc += p;
                    p *= g2;
                }
                acc
            };
            g.push(gi.powi(steps as i32));
            noise.push(si * series);
        }
        Ok(Self {
            g,
            noise,
            stat_precision: self.stat_precision.clone(),
            mean: self.mean.clone(),
            mean_eigen: self.mean_eigen.clone(),
            basis: self.basis.clone(),
            family: if self.family == Family::Custom {
                Family::Custom
            } else {
                Family::MultiStep
            },
            composed: self.composed * steps,
        })
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    /// Eigenvalues `G_i`.
    pub fn g(&self) -> &[f64] {
        &self.g
    }

    /// Noise variances `Sigma_i`.
    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    /// Equilibrium precision eigenvalues `lambda~_i^2`.
    pub fn stationary_precision(&self) -> &[f64] {
        &self.stat_precision
    }

    /// Equilibrium mean `A_prop^{-1} beta` in original coordinates.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn mean_eigen(&self) -> &[f64] {
        &self.mean_eigen
    }

    pub fn basis(&self) -> Option<&Arc<DMatrix<f64>>> {
        self.basis.as_ref()
    }

    pub fn family(&self) -> Family {
        self.family
    }

    /// How many base steps one proposal takes (1 unless composed).
    pub fn composed_steps(&self) -> usize {
        self.composed
    }

    pub fn spectral_radius(&self) -> f64 {
        self.g.iter().map(|g| g.abs()).fold(0.0, f64::max)
    }

    pub fn stationary(&self) -> Stationary {
        Stationary {
            precision: self.stat_precision.clone(),
            mean: self.mean.clone(),
            mean_eigen: self.mean_eigen.clone(),
        }
    }

    /// The equilibrium as a target sharing this proposal's basis.
    pub fn stationary_target(&self) -> Result<SpectralTarget> {
        match &self.basis {
            None => SpectralTarget::diagonal(self.stat_precision.clone(), self.mean.clone()),
            Some(q) => SpectralTarget::with_shared_basis(self.stat_precision.clone(), q.clone(), self.mean.clone()),
        }
    }

    /// Offset `g = (I - G) * mean` in original coordinates.
    pub fn offset(&self) -> Vec<f64> {
        let gh: Vec<f64> = self
            .g
            .iter()
            .zip(&self.mean_eigen)
            .map(|(g, m)| (1.0 - g) * m)
            .collect();
        from_eigen(self.basis.as_deref(), &gh)
    }

    /// `beta = A_prop * mean` in original coordinates.
    pub fn beta(&self) -> Vec<f64> {
        let bh: Vec<f64> = self
            .stat_precision
            .iter()
            .zip(&self.mean_eigen)
            .map(|(l, m)| l * m)
            .collect();
        from_eigen(self.basis.as_deref(), &bh)
    }

    pub fn check_target(&self, target: &SpectralTarget) -> Result<()> {
        check_dim(target.dim(), self.dim())?;
        if !target.same_basis(self.basis.as_ref()) {
            return Err(Error::BasisMismatch);
        }
        Ok(())
    }

    /// Proposal in eigen-coordinates with caller-supplied standard normal noise.
    pub fn propose_eigen_with_noise(&self, xh: &[f64], xi: &[f64], out: &mut [f64]) {
        for i in 0..self.g.len() {
            let g = self.g[i];
            out[i] = g * xh[i] + (1.0 - g) * self.mean_eigen[i] + self.noise[i].sqrt() * xi[i];
        }
    }

    /// `G x + g + Sigma^{1/2} xi` with caller-supplied standard normal `xi`
    /// (in eigen-coordinates).
    pub fn propose_with_noise(&self, x: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), xi.len())?;
        let xh = to_eigen(self.basis.as_deref(), x);
        let mut yh = vec![0.0; self.dim()];
        self.propose_eigen_with_noise(&xh, xi, &mut yh);
        Ok(from_eigen(self.basis.as_deref(), &yh))
    }

    /// Draws `y = G x + g + nu`.
    pub fn propose<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let xi: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.propose_with_noise(x, &xi)
    }

    /// Dense `G`, `g`, `Sigma` in original coordinates.
    pub fn to_dense(&self) -> Result<DenseAr1> {
        let d = self.dim();
        let assemble = |vals: &[f64]| {
            let diag = DMatrix::from_diagonal(&DVector::from_column_slice(vals));
            match &self.basis {
                None => diag,
                Some(q) => q.as_ref() * diag * q.transpose(),
            }
        };
        let g = assemble(&self.g);
        let noise = assemble(&self.noise);
        let offset = DVector::from_vec(self.offset());
        debug_assert_eq!(offset.len(), d);
        DenseAr1::new(g, offset, noise)
    }

    /// Largest detailed-balance residual of the proposal chain against its own
    /// equilibrium, over `trials` random pairs.
    pub fn check_reversibility(&self, trials: usize, seed: u64) -> Result<f64> {
        self.to_dense()?.reversibility_residual(trials, seed)
    }
}

/// The MH algorithm rewritten in coordinates `x_hat = W^{-1} x`.
#[derive(Clone, Debug)]
pub struct TransformedAlgorithm {
    pub target: DenseGaussian,
    pub proposal: DenseAr1,
    pub w: DMatrix<f64>,
    pub w_inv: DMatrix<f64>,
    pub condition: f64,
}

impl TransformedAlgorithm {
    pub fn to_hat(&self, x: &[f64]) -> DVector<f64> {
        &self.w_inv * DVector::from_column_slice(x)
    }

    pub fn from_hat(&self, xh: &DVector<f64>) -> Vec<f64> {
        (&self.w * xh).as_slice().to_vec()
    }
}

/// Rewrites target and proposal in `x_hat = W^{-1} x` coordinates:
/// target precision `W^T A W`, linear term `W^T b`, iteration matrix
/// `W^{-1} G W`, offset `W^{-1} g`, noise `W^{-1} Sigma W^{-T}`.
pub fn transform_coords(
    proposal: &Ar1Proposal,
    target: &SpectralTarget,
    w: &DMatrix<f64>,
) -> Result<TransformedAlgorithm> {
    proposal.check_target(target)?;
    let d = target.dim();
    if w.nrows() != d || w.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: w.nrows(),
        });
    }
    let condition = condition_number(w);
    let w_inv = w
        .clone()
        .try_inverse()
        .filter(|_| condition.is_finite() && condition < 1e14)
        .ok_or_else(|| Error::Singular(format!("W (condition number {condition:e})")))?;
    let a = target.precision_matrix();
    let b = DVector::from_vec(target.linear_term());
    let t_target = DenseGaussian::new(w.transpose() * &a * w, w.transpose() * b)?;
    let dense = proposal.to_dense()?;
    let g_hat = &w_inv * &dense.g * w;
    let off_hat = &w_inv * &dense.offset;
    let noise_hat = &w_inv * &dense.noise * w_inv.transpose();
    let noise_hat = (&noise_hat + noise_hat.transpose()) * 0.5;
    let t_prop = DenseAr1::new(g_hat, off_hat, noise_hat)?;
    Ok(TransformedAlgorithm {
        target: t_target,
        proposal: t_prop,
        w: w.clone(),
        w_inv,
        condition,
    })
}

/// Smallest `T' > 0` with `lambda T' = 2 pi k` for the given mode, i.e. the
/// first full leapfrog period in the exact-integration limit.
pub fn full_period(lambda2: f64) -> f64 {
    2.0 * PI / lambda2.sqrt()
}
