//! Metropolis-Hastings chains driven by an [`Ar1Proposal`].
//!
//! The chain state is kept in the target's eigen-coordinates; the log
//! acceptance ratio is evaluated spectrally as
//! `Z = sum_i -(lambda_i^2 - lambda~_i^2)(y_i^2 - x_i^2)/2 + (b_i - beta_i)(y_i - x_i)`
//! plus `phi(x) - phi(y)` for perturbed targets.

use std::fmt;
use std::str::FromStr;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense::log_mh_ratio;
use crate::error::{check_dim, Error, Result};
use crate::proposals::{transform_coords, Ar1Proposal};
use crate::rng::{chain_seed, rng_from_seed, ChainRng};
use crate::targets::{from_eigen, to_eigen, SpectralTarget, Target};

/// Direction `q` for the expected squared jump `E[(q^T (x' - x))^2]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Direction {
    /// Coordinate axis `e_i` in original coordinates.
    Axis(usize),
    /// Eigenvector `q_i` of the target precision.
    Mode(usize),
    /// Arbitrary vector in original coordinates (not normalized).
    Vector(Vec<f64>),
    /// Average of the jumps over all coordinate axes, `|x' - x|^2 / d`.
    AxisMean,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::Axis(i) => write!(f, "axis:{i}"),
            Direction::Mode(i) => write!(f, "mode:{i}"),
            Direction::AxisMean => f.write_str("axis-mean"),
            Direction::Vector(v) => {
                let parts: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
                write!(f, "vector:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::invalid(format!(
                "unrecognized direction {s:?}; expected axis:I, mode:I, axis-mean or vector:X,Y,..."
            ))
        };
        if s == "axis-mean" {
            return Ok(Direction::AxisMean);
        }
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "axis" => rest.trim().parse().map(Direction::Axis).map_err(|_| bad()),
            "mode" => rest.trim().parse().map(Direction::Mode).map_err(|_| bad()),
            "vector" => rest
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Direction::Vector)
                .map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Direction {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Direction> for String {
    fn from(d: Direction) -> String {
        d.to_string()
    }
}

/// Where a chain starts.
#[derive(Clone, Debug, PartialEq)]
pub enum Start {
    State(Vec<f64>),
    /// Exact equilibrium draw; perturbed targets without a lower bound on
    /// `phi` start from a reference draw followed by burn-in.
    Equilibrium,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainOptions {
    /// Keep every log acceptance ratio `Z` (plus `phi` terms).
    pub record_trace: bool,
    /// Accumulate `xi_i = lambda_i (q_i^T (x - mean))` moments per mode.
    pub record_moments: bool,
    /// Number of batches for batch-means standard errors.
    pub batches: usize,
    /// Discarded initial steps; `None` means 0, or `10 d^{1/3}` when an
    /// equilibrium start has to fall back on burn-in.
    pub burn_in: Option<usize>,
    /// Allow the burn-in fallback for equilibrium starts.
    pub equilibrium_fallback: bool,
}

impl Default for ChainOptions {
    fn default() -> Self {
        Self {
            record_trace: false,
            record_moments: false,
            batches: 50,
            burn_in: None,
            equilibrium_fallback: true,
        }
    }
}

/// Running first and second moments of `xi_i` per mode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MomentSums {
    pub count: u64,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
}

/// `kappa_i = E[xi_i]`, `gamma_i = E[xi_i^2]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub kappa: Vec<f64>,
    pub gamma: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub steps: u64,
    pub accepts: u64,
    pub burn_in: u64,
    /// Sum of `alpha(x, y)` over recorded steps.
    pub sum_alpha: f64,
    pub directions: Vec<Direction>,
    /// Sums of `alpha (q^T (y - x))^2`, one per direction.
    pub jump_sums: Vec<f64>,
    /// Batch means of `alpha`, for standard errors.
    pub alpha_batches: Vec<f64>,
    /// Batch means of the jump statistic, per direction.
    pub jump_batches: Vec<Vec<f64>>,
    pub log_ratio_trace: Option<Vec<f64>>,
    pub moments: Option<MomentSums>,
}

fn batch_stderr(means: &[f64]) -> f64 {
    let n = means.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = means.iter().sum::<f64>() / n as f64;
    let var = means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

impl ChainStats {
    /// `E[alpha]` from the running sum of acceptance probabilities.
    pub fn mean_alpha(&self) -> f64 {
        self.sum_alpha / self.steps as f64
    }

    /// Fraction of accepted proposals.
    pub fn accept_rate(&self) -> f64 {
        self.accepts as f64 / self.steps as f64
    }

    pub fn alpha_stderr(&self) -> f64 {
        batch_stderr(&self.alpha_batches)
    }

    /// Expected squared jump in direction `k` (index into `directions`).
    pub fn jump(&self, k: usize) -> f64 {
        self.jump_sums[k] / self.steps as f64
    }

    pub fn jumps(&self) -> Vec<f64> {
        (0..self.jump_sums.len()).map(|k| self.jump(k)).collect()
    }

    pub fn jump_stderr(&self, k: usize) -> f64 {
        batch_stderr(&self.jump_batches[k])
    }

    /// Adds the statistics of another chain run with the same directions.
    pub fn merge(&mut self, other: &ChainStats) -> Result<()> {
        if self.steps == 0 && self.directions.is_empty() && self.jump_sums.is_empty() {
            *self = other.clone();
            return Ok(());
        }
        if self.directions != other.directions {
            return Err(Error::invalid("cannot merge chains with different jump directions"));
        }
        self.steps += other.steps;
        self.accepts += other.accepts;
        self.burn_in += other.burn_in;
        self.sum_alpha += other.sum_alpha;
        for (a, b) in self.jump_sums.iter_mut().zip(&other.jump_sums) {
            *a += b;
        }
        self.alpha_batches.extend_from_slice(&other.alpha_batches);
        for (a, b) in self.jump_batches.iter_mut().zip(&other.jump_batches) {
            a.extend_from_slice(b);
        }
        match (&mut self.log_ratio_trace, &other.log_ratio_trace) {
            (Some(a), Some(b)) => a.extend_from_slice(b),
            _ => self.log_ratio_trace = None,
        }
        match (&mut self.moments, &other.moments) {
            (Some(a), Some(b)) => {
                check_dim(a.sum.len(), b.sum.len())?;
                a.count += b.count;
                for i in 0..a.sum.len() {
                    a.sum[i] += b.sum[i];
                    a.sum_sq[i] += b.sum_sq[i];
                }
            }
            _ => self.moments = None,
        }
        Ok(())
    }

    /// Running averages of `xi_i` and `xi_i^2`.
    pub fn estimate_moments(&self) -> Result<Moments> {
        let m = self
            .moments
            .as_ref()
            .ok_or_else(|| Error::Unsupported("moment recording was not enabled for this chain".into()))?;
        let n = m.count as f64;
        Ok(Moments {
            kappa: m.sum.iter().map(|s| s / n).collect(),
            gamma: m.sum_sq.iter().map(|s| s / n).collect(),
        })
    }
}

/// Spectral log acceptance ratio for a proposal pair `(x, y)` in original
/// coordinates, including `phi(x) - phi(y)` for perturbed targets.
pub fn log_accept_ratio<T: Target + ?Sized>(target: &T, proposal: &Ar1Proposal, x: &[f64], y: &[f64]) -> Result<f64> {
    let g = target.gaussian();
    proposal.check_target(g)?;
    check_dim(g.dim(), x.len())?;
    check_dim(g.dim(), y.len())?;
    let coef = ZCoefficients::new(g, proposal);
    let z = coef.eval(&g.to_eigen(x), &g.to_eigen(y));
    Ok(z + target.potential(x) - target.potential(y))
}

/// `log [pi(y) pi*(x) / (pi(x) pi*(y))]` with `pi*` the equilibrium of the
/// (single- or multi-step) proposal chain. This is the acceptance ratio of
/// any number of composed steps of `base`.
pub fn multistep_accept_ratio<T: Target + ?Sized>(target: &T, base: &Ar1Proposal, x: &[f64], y: &[f64]) -> Result<f64> {
    base.check_target(target.gaussian())?;
    let eq = base.stationary_target()?;
    Ok(target.log_density(y)? - target.log_density(x)? - eq.log_density(y)? + eq.log_density(x)?)
}

/// Multi-step SLA acceptance ratio in explicit form,
/// `(h/8)(|Ax|^2 - |Ay|^2) - (h/4) b^T (Ax - Ay) + phi(x) - phi(y)`,
/// for proposal equilibrium precision `A - (h/4) A^2`.
pub fn sla_multistep_accept_ratio<T: Target + ?Sized>(target: &T, h: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    let g = target.gaussian();
    check_dim(g.dim(), x.len())?;
    check_dim(g.dim(), y.len())?;
    let a = g.precision_matrix();
    let b = DVector::from_vec(g.linear_term());
    let ax = &a * DVector::from_column_slice(x);
    let ay = &a * DVector::from_column_slice(y);
    let quad = 0.125 * h * (ax.norm_squared() - ay.norm_squared());
    let lin = -0.25 * h * b.dot(&(&ax - &ay));
    Ok(quad + lin + target.potential(x) - target.potential(y))
}

#[derive(Clone, Debug)]
struct ZCoefficients {
    quad: Vec<f64>,
    lin: Vec<f64>,
}

impl ZCoefficients {
    fn new(target: &SpectralTarget, proposal: &Ar1Proposal) -> Self {
        let lam = target.eigenvalues();
        let lam_t = proposal.stationary_precision();
        let mu = target.mean_eigen();
        let mu_t = proposal.mean_eigen();
        let quad = lam.iter().zip(lam_t).map(|(l, lt)| -0.5 * (l - lt)).collect();
        let lin = (0..lam.len()).map(|i| lam[i] * mu[i] - lam_t[i] * mu_t[i]).collect();
        Self { quad, lin }
    }

    fn eval(&self, xh: &[f64], yh: &[f64]) -> f64 {
        let mut z = 0.0;
        for i in 0..xh.len() {
            let (x, y) = (xh[i], yh[i]);
            z += self.quad[i] * (y * y - x * x) + self.lin[i] * (y - x);
        }
        z
    }
}

/// Outcome of a single MH transition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// Log acceptance ratio including `phi` terms.
    pub log_ratio: f64,
    pub alpha: f64,
    pub accepted: bool,
}

/// A single Metropolis-Hastings chain with its own RNG.
pub struct MhChain<'a, T: Target + ?Sized> {
    target: &'a T,
    proposal: &'a Ar1Proposal,
    coef: ZCoefficients,
    scale: Vec<f64>,
    shift: Vec<f64>,
    xh: Vec<f64>,
    yh: Vec<f64>,
    diff: Vec<f64>,
    x: Option<Vec<f64>>,
    phi_x: f64,
    rng: ChainRng,
}

impl<'a, T: Target + ?Sized> MhChain<'a, T> {
    pub fn new(target: &'a T, proposal: &'a Ar1Proposal, x0: &[f64], seed: u64) -> Result<Self> {
        Self::with_rng(target, proposal, x0, rng_from_seed(seed))
    }

    pub fn with_rng(target: &'a T, proposal: &'a Ar1Proposal, x0: &[f64], rng: ChainRng) -> Result<Self> {
        let g = target.gaussian();
        proposal.check_target(g)?;
        check_dim(g.dim(), x0.len())?;
        let d = g.dim();
        let scale = proposal.noise().iter().map(|s| s.sqrt()).collect();
        let shift = proposal
            .g()
            .iter()
            .zip(proposal.mean_eigen())
            .map(|(gi, m)| (1.0 - gi) * m)
            .collect();
        let (x, phi_x) = if target.is_perturbed() {
            (Some(x0.to_vec()), target.potential(x0))
        } else {
            (None, 0.0)
        };
        Ok(Self {
            target,
            proposal,
            coef: ZCoefficients::new(g, proposal),
            scale,
            shift,
            xh: g.to_eigen(x0),
            yh: vec![0.0; d],
            diff: vec![0.0; d],
            x,
            phi_x,
            rng,
        })
    }

    /// Current state in original coordinates.
    pub fn state(&self) -> Vec<f64> {
        match &self.x {
            Some(x) => x.clone(),
            None => self.target.gaussian().from_eigen(&self.xh),
        }
    }

    /// Current state in the target's eigen-coordinates.
    pub fn state_eigen(&self) -> &[f64] {
        &self.xh
    }

    /// `y - x` of the last proposal, in eigen-coordinates.
    pub fn last_difference(&self) -> &[f64] {
        &self.diff
    }

    pub fn step(&mut self) -> StepOutcome {
        let g = self.proposal.g();
        for i in 0..self.xh.len() {
            let xi: f64 = self.rng.sample(StandardNormal);
            self.yh[i] = g[i] * self.xh[i] + self.shift[i] + self.scale[i] * xi;
            self.diff[i] = self.yh[i] - self.xh[i];
        }
        let mut z = self.coef.eval(&self.xh, &self.yh);
        let mut y_orig = None;
        let mut phi_y = 0.0;
        if self.x.is_some() {
            let y = self.target.gaussian().from_eigen(&self.yh);
            phi_y = self.target.potential(&y);
            z += self.phi_x - phi_y;
            y_orig = Some(y);
        }
        let alpha = if z >= 0.0 { 1.0 } else { z.exp() };
        let u: f64 = self.rng.random();
        let accepted = u < alpha;
        if accepted {
            std::mem::swap(&mut self.xh, &mut self.yh);
            if let Some(y) = y_orig {
                self.x = Some(y);
                self.phi_x = phi_y;
            }
        }
        StepOutcome {
            log_ratio: z,
            alpha,
            accepted,
        }
    }
}

/// Directions expressed as eigen-coordinate vectors.
enum Probe {
    Vector(Vec<f64>),
    Mean(f64),
}

fn probes(target: &SpectralTarget, directions: &[Direction]) -> Result<Vec<Probe>> {
    let d = target.dim();
    directions
        .iter()
        .map(|dir| match dir {
            Direction::Axis(i) | Direction::Mode(i) if *i >= d => Err(Error::IndexOutOfRange { index: *i, dim: d }),
            Direction::Axis(i) => {
                let mut e = vec![0.0; d];
                e[*i] = 1.0;
                Ok(Probe::Vector(target.to_eigen(&e)))
            }
            Direction::Mode(i) => {
                let mut e = vec![0.0; d];
                e[*i] = 1.0;
                Ok(Probe::Vector(e))
            }
            Direction::Vector(v) => {
                check_dim(d, v.len())?;
                Ok(Probe::Vector(target.to_eigen(v)))
            }
            Direction::AxisMean => Ok(Probe::Mean(1.0 / d as f64)),
        })
        .collect()
}

/// Default burn-in when an equilibrium start cannot be drawn exactly.
pub fn default_burn_in(d: usize) -> usize {
    (10.0 * (d as f64).cbrt()).ceil() as usize
}

/// Runs `n` recorded MH steps and accumulates [`ChainStats`].
pub fn run_chain<T: Target + ?Sized>(
    target: &T,
    proposal: &Ar1Proposal,
    start: &Start,
    n: usize,
    directions: &[Direction],
    options: &ChainOptions,
    seed: u64,
) -> Result<ChainStats> {
    if n == 0 {
        return Err(Error::invalid("number of steps must be >= 1"));
    }
    let g = target.gaussian();
    proposal.check_target(g)?;
    let probes = probes(g, directions)?;
    let mut rng = rng_from_seed(seed);
    let (x0, burn_in) = match start {
        Start::State(x) => {
            check_dim(g.dim(), x.len())?;
            (x.clone(), options.burn_in.unwrap_or(0))
        }
        Start::Equilibrium => match target.exact_draw(&mut rng) {
            Some(x) => (x, options.burn_in.unwrap_or(0)),
            None if options.equilibrium_fallback => {
                let b = options.burn_in.unwrap_or_else(|| default_burn_in(g.dim()));
                debug!("no exact equilibrium draw available; burning in for {b} steps");
                (g.draw(&mut rng), b)
            }
            None => {
                return Err(Error::Unsupported(
                    "target cannot be sampled exactly for an equilibrium start".into(),
                ))
            }
        },
    };
    let mut chain = MhChain::with_rng(target, proposal, &x0, rng)?;
    for _ in 0..burn_in {
        chain.step();
    }

    let nd = directions.len();
    let batch_len = (n / options.batches.max(1)).max(1);
    let mut stats = ChainStats {
        burn_in: burn_in as u64,
        directions: directions.to_vec(),
        jump_sums: vec![0.0; nd],
        jump_batches: vec![Vec::new(); nd],
        log_ratio_trace: options.record_trace.then(|| Vec::with_capacity(n)),
        moments: options.record_moments.then(|| MomentSums {
            count: 0,
            sum: vec![0.0; g.dim()],
            sum_sq: vec![0.0; g.dim()],
        }),
        ..Default::default()
    };
    let lam_sqrt: Vec<f64> = g.eigenvalues().iter().map(|l| l.sqrt()).collect();
    let mu = g.mean_eigen();
    let mut batch_alpha = 0.0;
    let mut batch_jump = vec![0.0; nd];
    let mut in_batch = 0;
    for _ in 0..n {
        let out = chain.step();
        stats.steps += 1;
        stats.accepts += out.accepted as u64;
        stats.sum_alpha += out.alpha;
        batch_alpha += out.alpha;
        let diff = chain.last_difference();
        for (k, p) in probes.iter().enumerate() {
            let proj2 = match p {
                Probe::Vector(v) => {
                    let s: f64 = v.iter().zip(diff).map(|(a, b)| a * b).sum();
                    s * s
                }
                Probe::Mean(w) => w * diff.iter().map(|x| x * x).sum::<f64>(),
            };
            let j = out.alpha * proj2;
            stats.jump_sums[k] += j;
            batch_jump[k] += j;
        }
        if let Some(trace) = stats.log_ratio_trace.as_mut() {
            trace.push(out.log_ratio);
        }
        if let Some(m) = stats.moments.as_mut() {
            let xh = chain.state_eigen();
            m.count += 1;
            for i in 0..xh.len() {
                let xi = lam_sqrt[i] * (xh[i] - mu[i]);
                m.sum[i] += xi;
                m.sum_sq[i] += xi * xi;
            }
        }
        in_batch += 1;
        if in_batch == batch_len {
            stats.alpha_batches.push(batch_alpha / batch_len as f64);
            for k in 0..nd {
                stats.jump_batches[k].push(batch_jump[k] / batch_len as f64);
                batch_jump[k] = 0.0;
            }
            batch_alpha = 0.0;
            in_batch = 0;
        }
    }
    Ok(stats)
}

/// Runs `chains` independent chains in parallel with seeds derived from
/// `master_seed`, merging in chain order.
#[allow(clippy::too_many_arguments)]
pub fn run_chains<T: Target + ?Sized>(
    target: &T,
    proposal: &Ar1Proposal,
    start: &Start,
    n: usize,
    directions: &[Direction],
    options: &ChainOptions,
    master_seed: u64,
    chains: usize,
) -> Result<ChainStats> {
    if chains == 0 {
        return Err(Error::invalid("number of chains must be >= 1"));
    }
    let per_chain: Vec<Result<ChainStats>> = (0..chains)
        .into_par_iter()
        .map(|c| {
            run_chain(
                target,
                proposal,
                start,
                n,
                directions,
                options,
                chain_seed(master_seed, c as u64),
            )
        })
        .collect();
    let mut merged = ChainStats::default();
    for s in per_chain {
        merged.merge(&s?)?;
    }
    Ok(merged)
}

/// Result of running a chain alongside its image under `x_hat = W^{-1} x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub steps: usize,
    pub accepts: usize,
    pub condition_number: f64,
    /// `max |alpha(x, y) - alpha_hat(x_hat, y_hat)|`.
    pub max_alpha_diff: f64,
    /// `max |x - W x_hat|` over the run.
    pub max_state_diff: f64,
}

/// Runs `steps` MH transitions in original coordinates (spectral acceptance
/// ratio) and, with the same noise and uniforms, in `x_hat = W^{-1} x`
/// coordinates (acceptance ratio from the transformed densities).
pub fn paired_invariance_check(
    target: &SpectralTarget,
    proposal: &Ar1Proposal,
    w: &DMatrix<f64>,
    steps: usize,
    seed: u64,
) -> Result<InvarianceReport> {
    let alg = transform_coords(proposal, target, w)?;
    let d = target.dim();
    let basis = proposal.basis().map(|b| b.as_ref());
    let coef = ZCoefficients::new(target, proposal);
    let dense = proposal.to_dense()?;
    let mut rng = rng_from_seed(seed);
    let mut x = target.draw(&mut rng);
    let mut x_hat = alg.to_hat(&x);
    let mut report = InvarianceReport {
        steps,
        accepts: 0,
        condition_number: alg.condition,
        max_alpha_diff: 0.0,
        max_state_diff: 0.0,
    };
    let noise_sd: Vec<f64> = proposal.noise().iter().map(|s| s.sqrt()).collect();
    for _ in 0..steps {
        let xi: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let nu_h: Vec<f64> = xi.iter().zip(&noise_sd).map(|(a, s)| a * s).collect();
        let nu = DVector::from_vec(from_eigen(basis, &nu_h));
        let xv = DVector::from_column_slice(&x);
        let y = &dense.g * &xv + &dense.offset + &nu;
        let y_hat = &alg.proposal.g * &x_hat + &alg.proposal.offset + &alg.w_inv * &nu;

        let z = coef.eval(&to_eigen(basis, &x), &to_eigen(basis, y.as_slice()));
        let z_hat = log_mh_ratio(&alg.target, &alg.proposal, &x_hat, &y_hat);
        let alpha = z.min(0.0).exp();
        let alpha_hat = z_hat.min(0.0).exp();
        report.max_alpha_diff = report.max_alpha_diff.max((alpha - alpha_hat).abs());

        let u: f64 = rng.random();
        if u < alpha {
            report.accepts += 1;
            x = y.as_slice().to_vec();
        }
        if u < alpha_hat {
            x_hat = y_hat;
        }
        let back = alg.from_hat(&x_hat);
        let gap = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        report.max_state_diff = report.max_state_diff.max(gap);
    }
    Ok(report)
}
