//! Config-driven experiment runner behind the `ar1mcmc` binary.
//!
//! One TOML file describes one experiment:
//!
//! ```toml
//! [target]
//! d = 10000          # or: eigenvalues = [...], or: precision_file = "A.txt"
//! kappa = 0.0
//! c = 1.0
//!
//! [proposal]
//! family = "sla"     # sla | theta-sla | cn | pcn | langevin | hmc | custom
//! steps = 1          # composed steps (leapfrog steps for hmc)
//!
//! [chain]
//! n_steps = 100000
//! n_chains = 4
//! seed = 7
//! directions = ["axis:0", "axis-mean"]
//! ```
//!
//! Omitting `proposal.h` picks the step size from the optimal-scaling rules;
//! `proposal.target_acceptance` instead tunes `h` so that the finite-`d`
//! prediction hits the given acceptance.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::proposals::{Ar1Proposal, HmcSchedule, Mass};
use crate::sampler::{run_chains, ChainOptions, ChainStats, Direction, Start};
use crate::targets::{make_power_spectrum, PerturbedTarget, SpectralTarget};
use crate::theory::{
    gap_terms, hmc_limits, jump_predictions_all, langevin_limits, multistep_sla_limits, nongaussian_bounds,
    prediction_from_gap, tau_hmc, tau_langevin, JumpPrediction, JumpValue, LimitPrediction, Theorem,
};
use crate::tuning::{
    hmc_l, hmc_report, langevin_l, langevin_report, multistep_l, multistep_report, optimal_hmc_time,
    optimal_scaling_hmc, optimal_scaling_langevin, tune_step_to_acceptance, Aggregation, TuningReport,
    DEFAULT_MAX_STEPS,
};

/// Version of every JSON document the CLI writes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "ar1mcmc",
    version,
    about = "MH with stationary AR(1) proposals: predictions, sampling, tuning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-form acceptance and jump predictions.
    Predict(CommonArgs),
    /// Run MH chains and report acceptance and jump statistics.
    Sample(CommonArgs),
    /// Tuning constants and recommended step sizes.
    Tune(CommonArgs),
    /// Compare predictions with chain estimates; exits nonzero on failure.
    Verify(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Overrides `chain.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `chain.n_chains`.
    #[arg(long)]
    pub chains: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target: TargetSpec,
    pub proposal: ProposalSpec,
    #[serde(default)]
    pub chain: ChainSpec,
    #[serde(default)]
    pub prediction: PredictionSpec,
    #[serde(default)]
    pub tuning: TuningSpec,
    #[serde(default)]
    pub verify: VerifySpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_upper: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter_seed: Option<u64>,
    /// Explicit precision eigenvalues `lambda_i^2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eigenvalues: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    /// Dense precision `A`, whitespace- or comma-separated, one row per line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision_file: Option<PathBuf>,
    /// Linear term `b` for `precision_file`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationSpec>,
}

/// `phi(x) = amplitude * f(x_axis)` with `f` = sin or cos.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub amplitude: f64,
    #[serde(default)]
    pub axis: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    Sin,
    Cos,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalFamily {
    Sla,
    ThetaSla,
    Cn,
    Pcn,
    Langevin,
    Hmc,
    Custom,
}

/// `"identity"`, `"inverse-precision"`, or a list of eigenvalues of `V`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MassSpec {
    Named(String),
    Values(Vec<f64>),
}

impl Default for MassSpec {
    fn default() -> Self {
        MassSpec::Named("identity".into())
    }
}

impl MassSpec {
    fn to_mass(&self) -> Result<Mass> {
        match self {
            MassSpec::Named(s) if s == "identity" => Ok(Mass::Identity),
            MassSpec::Named(s) if s == "inverse-precision" => Ok(Mass::InversePrecision),
            MassSpec::Named(s) => Err(Error::config(
                "proposal.mass",
                format!("unknown mass {s:?}; expected identity, inverse-precision or a list"),
            )),
            MassSpec::Values(v) => Ok(Mass::Eigenvalues(v.clone())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalSpec {
    pub family: ProposalFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    /// Composed steps `L`; leapfrog steps for hmc.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default)]
    pub mass: MassSpec,
    /// HMC integration time `T`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integration_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_acceptance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSpec {
    pub n_steps: usize,
    pub n_chains: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    pub directions: Vec<Direction>,
    /// Initial state; an equilibrium draw when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<Vec<f64>>,
    pub batches: usize,
}

impl Default for ChainSpec {
    fn default() -> Self {
        Self {
            n_steps: 10_000,
            n_chains: 1,
            seed: 0,
            burn_in: None,
            directions: vec![Direction::AxisMean],
            start: None,
            batches: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionSpec {
    pub theorems: Vec<Theorem>,
    /// Replaces `tau` in the scaling-limit predictions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

impl Default for PredictionSpec {
    fn default() -> Self {
        Self {
            theorems: vec![Theorem::FiniteDimensional, Theorem::JumpSize],
            tau: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningSpec {
    /// Cost of one `phi` evaluation in multiplications by `A`.
    pub cost: f64,
    pub max_steps: usize,
    /// Modes whose jump the HMC integration time should favour.
    pub modes: Vec<usize>,
    pub aggregation: Aggregation,
}

impl Default for TuningSpec {
    fn default() -> Self {
        Self {
            cost: 0.0,
            max_steps: DEFAULT_MAX_STEPS,
            modes: vec![0],
            aggregation: Aggregation::Min,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySpec {
    pub theorem: Theorem,
    pub z_max: f64,
    pub acceptance_tolerance: f64,
    pub jump_relative_tolerance: f64,
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self {
            theorem: Theorem::FiniteDimensional,
            z_max: 3.0,
            acceptance_tolerance: 0.015,
            jump_relative_tolerance: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub format: Format,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| locate_field(text, s.start)).unwrap_or_default();
            Error::config(field, e.message().to_string())
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        for p in [&mut self.target.precision_file, &mut self.target.linear_file]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}

/// Dotted name of the key nearest to byte offset `pos`, for diagnostics.
fn locate_field(text: &str, pos: usize) -> String {
    let mut table = String::new();
    let mut key = String::new();
    let mut offset = 0;
    for line in text.lines() {
        if offset > pos {
            break;
        }
        let t = line.trim();
        if t.starts_with('[') {
            table = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if let Some((k, _)) = t.split_once('=') {
            key = k.trim().to_string();
        }
        offset += line.len() + 1;
    }
    match (table.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}

/// Target assembled from a [`TargetSpec`].
#[derive(Clone, Debug)]
pub struct BuiltTarget {
    pub gaussian: SpectralTarget,
    pub perturbed: Option<PerturbedTarget>,
    pub kappa: f64,
    /// `M` with `|phi| <= M`.
    pub bound: Option<f64>,
}

fn read_numbers(path: &Path, field: &str) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::config(field, format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|l| {
            l.split(|c: char| c.is_whitespace() || c == ',')
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::config(field, format!("not a number: {t:?}")))
                })
                .collect()
        })
        .collect()
}

pub fn build_target(spec: &TargetSpec) -> Result<BuiltTarget> {
    let cfg = |field: &str| {
        let field = format!("target.{field}");
        move |e: Error| match e {
            Error::Config { .. } => e,
            other => Error::config(field.clone(), other.to_string()),
        }
    };
    let sources = [
        spec.eigenvalues.is_some(),
        spec.precision_file.is_some(),
        spec.d.is_some(),
    ];
    if sources.iter().filter(|&&b| b).count() != 1 {
        return Err(Error::config(
            "target",
            "give exactly one of d, eigenvalues, precision_file",
        ));
    }
    let gaussian = if let Some(path) = &spec.precision_file {
        let rows = read_numbers(path, "target.precision_file")?;
        let d = rows.len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::config(
                "target.precision_file",
                "precision matrix must be square",
            ));
        }
        let a = nalgebra::DMatrix::from_fn(d, d, |i, j| rows[i][j]);
        let b = match &spec.linear_file {
            Some(p) => read_numbers(p, "target.linear_file")?.concat(),
            None => vec![0.0; d],
        };
        SpectralTarget::from_precision(&a, &b).map_err(cfg("precision_file"))?
    } else {
        let eig = match (&spec.eigenvalues, spec.d) {
            (Some(e), _) => e.clone(),
            (None, Some(d)) => {
                let c = spec.c.unwrap_or(1.0);
                make_power_spectrum(d, spec.kappa, c, spec.c_upper.unwrap_or(c), spec.jitter_seed).map_err(cfg("d"))?
            }
            (None, None) => unreachable!(),
        };
        let d = eig.len();
        SpectralTarget::diagonal(eig, vec![0.0; d]).map_err(cfg("eigenvalues"))?
    };
    let gaussian = match &spec.mean {
        Some(m) => gaussian.with_mean(m.clone()).map_err(cfg("mean"))?,
        None => gaussian,
    };
    let (perturbed, bound) = match &spec.perturbation {
        None => (None, None),
        Some(p) => {
            if !(p.amplitude >= 0.0) {
                return Err(Error::config("target.perturbation.amplitude", "must be >= 0"));
            }
            if p.axis >= gaussian.dim() {
                return Err(Error::config(
                    "target.perturbation.axis",
                    format!("must be < d = {}", gaussian.dim()),
                ));
            }
            let (m, axis, kind) = (p.amplitude, p.axis, p.kind);
            let phi: crate::targets::Potential = Arc::new(move |x: &[f64]| match kind {
                PerturbationKind::Sin => m * x[axis].sin(),
                PerturbationKind::Cos => m * x[axis].cos(),
            });
            let t = PerturbedTarget::new(gaussian.clone(), phi)
                .with_bound(m)
                .map_err(cfg("perturbation"))?;
            (Some(t), Some(m))
        }
    };
    Ok(BuiltTarget {
        gaussian,
        perturbed,
        kappa: spec.kappa,
        bound,
    })
}

/// Proposal assembled from a [`ProposalSpec`], with the resolved parameters.
#[derive(Clone, Debug)]
pub struct BuiltProposal {
    pub proposal: Ar1Proposal,
    pub family: ProposalFamily,
    pub theta: Option<f64>,
    pub h: Option<f64>,
    pub steps: usize,
    /// Eigenvalues `V_i lambda_i^2` of the preconditioned precision.
    pub preconditioned: Vec<f64>,
    pub notes: Vec<String>,
}

fn family_theta(spec: &ProposalSpec) -> Result<Option<f64>> {
    Ok(match spec.family {
        ProposalFamily::Sla => Some(0.0),
        ProposalFamily::Cn | ProposalFamily::Pcn => Some(0.5),
        ProposalFamily::ThetaSla | ProposalFamily::Langevin => {
            let t = spec
                .theta
                .ok_or_else(|| Error::config("proposal.theta", "required for this family"))?;
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config("proposal.theta", format!("must lie in [0, 1], got {t}")));
            }
            Some(t)
        }
        ProposalFamily::Hmc | ProposalFamily::Custom => None,
    })
}

fn family_mass(spec: &ProposalSpec) -> Result<Mass> {
    match spec.family {
        ProposalFamily::Pcn => Ok(Mass::InversePrecision),
        ProposalFamily::Sla | ProposalFamily::ThetaSla | ProposalFamily::Cn => {
            if spec.mass != MassSpec::default() {
                return Err(Error::config(
                    "proposal.mass",
                    "this family uses V = I; use family = \"langevin\"",
                ));
            }
            Ok(Mass::Identity)
        }
        _ => spec.mass.to_mass(),
    }
}

fn langevin_build(theta: f64, mass: &Mass, steps: usize, target: &SpectralTarget, h: f64) -> Result<Ar1Proposal> {
    let base = Ar1Proposal::langevin(theta, h, target, mass)?;
    if steps > 1 {
        base.compose_steps(steps)
    } else {
        Ok(base)
    }
}

pub fn build_proposal(spec: &ProposalSpec, target: &BuiltTarget, tuning: &TuningSpec) -> Result<BuiltProposal> {
    let g = &target.gaussian;
    let d = g.dim() as f64;
    let kappa = target.kappa;
    let cfg = |field: &'static str| {
        move |e: Error| match e {
            Error::Config { .. } => e,
            other => Error::config(format!("proposal.{field}"), other.to_string()),
        }
    };
    let mut notes = Vec::new();
    if spec.family == ProposalFamily::Custom {
        let req = |v: &Option<Vec<f64>>, f: &str| {
            v.clone()
                .ok_or_else(|| Error::config(format!("proposal.{f}"), "required for custom"))
        };
        let mean = spec.mean.clone().unwrap_or_else(|| g.mean().to_vec());
        let p = Ar1Proposal::custom(req(&spec.g, "g")?, req(&spec.noise, "noise")?, mean, g.basis().cloned())
            .map_err(cfg("g"))?;
        let steps = spec.steps.unwrap_or(1);
        let p = if steps > 1 {
            p.compose_steps(steps).map_err(cfg("steps"))?
        } else {
            p
        };
        return Ok(BuiltProposal {
            preconditioned: g.eigenvalues().to_vec(),
            proposal: p,
            family: spec.family,
            theta: None,
            h: None,
            steps,
            notes,
        });
    }
    let mass = family_mass(spec)?;
    let v = mass.eigenvalues(g).map_err(cfg("mass"))?;
    let pre: Vec<f64> = v.iter().zip(g.eigenvalues()).map(|(v, l)| v * l).collect();

    if spec.family == ProposalFamily::Hmc {
        if spec.target_acceptance.is_some() {
            return Err(Error::config(
                "proposal.target_acceptance",
                "not supported for hmc; set h or leave it to the scaling rule",
            ));
        }
        let t = match spec.integration_time {
            Some(t) if t > 0.0 => Some(t),
            Some(t) => {
                return Err(Error::config(
                    "proposal.integration_time",
                    format!("must be > 0, got {t}"),
                ))
            }
            None => None,
        };
        let (h, steps) = match (spec.h, spec.steps) {
            (Some(h), Some(l)) => (h, l),
            (Some(h), None) => {
                let t = t.ok_or_else(|| Error::config("proposal.steps", "give steps or integration_time"))?;
                (h, ((t / h).round() as usize).max(1))
            }
            (None, fixed) => {
                let t = match t {
                    Some(t) => t,
                    None => optimal_hmc_time(&pre, &tuning.modes, tuning.aggregation)
                        .map_err(|e| Error::config("tuning.modes", e.to_string()))?,
                };
                let tau = tau_hmc(&pre, kappa, t);
                let l = hmc_l(optimal_scaling_hmc().s0, tau).map_err(cfg("integration_time"))?;
                let h = l * d.powf(-0.25 - kappa);
                let steps = fixed.unwrap_or(((t / h).round() as usize).max(1));
                notes.push(format!("h = {h} from the HMC scaling rule at T = {t}"));
                (h, steps)
            }
        };
        let p = Ar1Proposal::hmc(&HmcSchedule::new(h, steps, mass).map_err(cfg("h"))?, g).map_err(cfg("h"))?;
        return Ok(BuiltProposal {
            proposal: p,
            family: spec.family,
            theta: None,
            h: Some(h),
            steps,
            preconditioned: pre,
            notes,
        });
    }

    let theta = family_theta(spec)?.expect("langevin-type family");
    let steps = spec.steps.unwrap_or(1);
    if steps == 0 {
        return Err(Error::config("proposal.steps", "must be >= 1"));
    }
    let h = match (spec.h, spec.target_acceptance) {
        (Some(_), Some(_)) => {
            return Err(Error::config(
                "proposal.target_acceptance",
                "give either h or target_acceptance",
            ))
        }
        (Some(h), None) => h,
        (None, Some(acc)) => {
            let bmax = pre.iter().cloned().fold(0.0, f64::max);
            let hi = if theta < 0.5 {
                0.999 * 4.0 / ((1.0 - 2.0 * theta) * bmax)
            } else {
                1e3 / bmax
            };
            let h = tune_step_to_acceptance(g, |h| langevin_build(theta, &mass, steps, g, h), acc, 1e-10 / bmax, hi)
                .map_err(cfg("target_acceptance"))?;
            notes.push(format!("h = {h} tuned to predicted acceptance {acc}"));
            h
        }
        (None, None) => {
            let s0 = optimal_scaling_langevin().s0;
            let tau = tau_langevin(&pre, kappa);
            let l = if steps > 1 {
                if theta != 0.0 {
                    return Err(Error::config(
                        "proposal.h",
                        "required for composed steps with theta != 0",
                    ));
                }
                multistep_l(s0, steps, tau)
            } else {
                langevin_l(s0, theta, tau)
            }
            .map_err(cfg("h"))?;
            let h = l * l * d.powf(-1.0 / 3.0 - 2.0 * kappa);
            notes.push(format!("h = {h} from the Langevin scaling rule"));
            h
        }
    };
    let p = langevin_build(theta, &mass, steps, g, h).map_err(cfg("h"))?;
    Ok(BuiltProposal {
        proposal: p,
        family: spec.family,
        theta: Some(theta),
        h: Some(h),
        steps,
        preconditioned: pre,
        notes,
    })
}

/// `E[(w^T (x' - x))^2]` from per-mode jumps; off-diagonal mode terms are
/// dropped, so this is exact only for eigenvector directions.
fn project_jump(dir: &Direction, target: &SpectralTarget, per_mode: &[f64]) -> Result<f64> {
    let d = target.dim();
    let weights = |w: Vec<f64>| -> f64 { target.to_eigen(&w).iter().zip(per_mode).map(|(c, j)| c * c * j).sum() };
    Ok(match dir {
        Direction::Mode(i) => *per_mode.get(*i).ok_or(Error::IndexOutOfRange { index: *i, dim: d })?,
        Direction::AxisMean => per_mode.iter().sum::<f64>() / d as f64,
        Direction::Axis(i) => {
            if *i >= d {
                return Err(Error::IndexOutOfRange { index: *i, dim: d });
            }
            let mut e = vec![0.0; d];
            e[*i] = 1.0;
            weights(e)
        }
        Direction::Vector(w) => {
            crate::error::check_dim(d, w.len())?;
            weights(w.clone())
        }
    })
}

fn single_mode(dir: &Direction, target: &SpectralTarget) -> Option<usize> {
    match dir {
        Direction::Mode(i) => Some(*i),
        Direction::Axis(i) if target.basis().is_none() => Some(*i),
        _ => None,
    }
}

/// Scales a scaling-limit prediction to a different `tau`. In all three
/// limits `sigma` grows like `sqrt(tau)` and the jumps are proportional to
/// the acceptance.
fn override_tau(p: &mut LimitPrediction, tau: f64) -> Result<()> {
    let old = p.tau.ok_or_else(|| Error::invalid("prediction has no tau"))?;
    if !(tau > 0.0) || !(old > 0.0) {
        return Err(Error::config("prediction.tau", "must be > 0"));
    }
    let sigma = p.sigma2.sqrt() * (tau / old).sqrt();
    let acc = 2.0 * crate::normal::cdf(-0.5 * sigma);
    let ratio = if p.acceptance > 0.0 { acc / p.acceptance } else { 0.0 };
    for j in &mut p.jump {
        j.value *= ratio;
    }
    p.sigma2 = sigma * sigma;
    p.mu = -0.5 * p.sigma2;
    p.acceptance = acc;
    p.tau = Some(tau);
    p.notes.push(format!("tau overridden from {old} to {tau}"));
    Ok(())
}

/// All requested predictions for one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictOutput {
    pub schema: u32,
    pub command: String,
    pub dimension: usize,
    pub family: ProposalFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    pub steps: usize,
    pub predictions: Vec<LimitPrediction>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub jump_size: Vec<JumpPrediction>,
    /// `e^{-3M}` to `e^{3M}` around the Gaussian values for perturbed targets.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bounds: Vec<BoundRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub quantity: String,
    pub gaussian: f64,
    pub lower: f64,
    pub upper: f64,
}

fn predict_one(
    theorem: Theorem,
    cfg: &ExperimentConfig,
    target: &BuiltTarget,
    built: &BuiltProposal,
) -> Result<Option<LimitPrediction>> {
    let g = &target.gaussian;
    let d = g.dim() as f64;
    let dirs = &cfg.chain.directions;
    let kappa = target.kappa;
    let labelled = |per_mode: &[f64]| -> Result<Vec<JumpValue>> {
        dirs.iter()
            .map(|dir| {
                Ok(JumpValue {
                    direction: dir.to_string(),
                    value: project_jump(dir, g, per_mode)?,
                })
            })
            .collect()
    };
    let mut p = match theorem {
        Theorem::FiniteDimensional => {
            let gap = gap_terms(g, &built.proposal)?;
            let mut p = prediction_from_gap(&gap)?;
            let per_mode: Vec<f64> = jump_predictions_all(&gap)?.iter().map(|j| j.value).collect();
            p.jump = labelled(&per_mode)?;
            p.step_size = built.h;
            p.steps = Some(built.steps);
            p
        }
        Theorem::JumpSize | Theorem::NonGaussian => return Ok(None),
        Theorem::LangevinLimit | Theorem::MultistepSlaLimit => {
            let (Some(theta), Some(h)) = (built.theta, built.h) else {
                return Err(Error::config(
                    "prediction.theorems",
                    format!("{theorem:?} needs a Langevin-type proposal"),
                ));
            };
            let l = (h * d.powf(1.0 / 3.0 + 2.0 * kappa)).sqrt();
            let mut p = if theorem == Theorem::MultistepSlaLimit {
                if theta != 0.0 {
                    return Err(Error::config(
                        "prediction.theorems",
                        "the multi-step limit needs family = sla",
                    ));
                }
                multistep_sla_limits(kappa, l, built.steps, &built.preconditioned)?
            } else {
                if built.steps != 1 {
                    return Err(Error::config(
                        "prediction.theorems",
                        "use multistep-sla-limit for composed steps",
                    ));
                }
                langevin_limits(kappa, l, theta, &built.preconditioned)?
            };
            let v = p.jump[0].value;
            p.jump = labelled(&vec![v; g.dim()])?;
            p
        }
        Theorem::HmcLimit => {
            let (ProposalFamily::Hmc, Some(h)) = (built.family, built.h) else {
                return Err(Error::config("prediction.theorems", "hmc-limit needs family = hmc"));
            };
            let l = h * d.powf(0.25 + kappa);
            let t = (built.steps as f64 + 1e-9) * h;
            let all: Vec<usize> = (0..g.dim()).collect();
            let mut p = hmc_limits(kappa, l, t, &built.preconditioned, &all)?;
            let per_mode: Vec<f64> = p.jump.iter().map(|j| j.value).collect();
            p.jump = labelled(&per_mode)?;
            p
        }
    };
    if let (Some(tau), true) = (cfg.prediction.tau, theorem != Theorem::FiniteDimensional) {
        override_tau(&mut p, tau)?;
    }
    Ok(Some(p))
}

pub fn predict(cfg: &ExperimentConfig) -> Result<PredictOutput> {
    let target = build_target(&cfg.target)?;
    let built = build_proposal(&cfg.proposal, &target, &cfg.tuning)?;
    predict_with(cfg, &target, &built)
}

fn predict_with(cfg: &ExperimentConfig, target: &BuiltTarget, built: &BuiltProposal) -> Result<PredictOutput> {
    let mut out = PredictOutput {
        schema: SCHEMA_VERSION,
        command: "predict".into(),
        dimension: target.gaussian.dim(),
        family: built.family,
        step_size: built.h,
        steps: built.steps,
        predictions: Vec::new(),
        jump_size: Vec::new(),
        bounds: Vec::new(),
        notes: built.notes.clone(),
    };
    for &th in &cfg.prediction.theorems {
        if let Some(p) = predict_one(th, cfg, target, built)? {
            out.predictions.push(p);
        }
    }
    if cfg.prediction.theorems.contains(&Theorem::JumpSize) {
        let gap = gap_terms(&target.gaussian, &built.proposal)?;
        let all = jump_predictions_all(&gap)?;
        for dir in &cfg.chain.directions {
            if let Some(i) = single_mode(dir, &target.gaussian) {
                out.jump_size.push(all.get(i).cloned().ok_or(Error::IndexOutOfRange {
                    index: i,
                    dim: all.len(),
                })?);
            }
        }
    }
    if let Some(m) = target.bound {
        let base = match out.predictions.iter().find(|p| p.theorem == Theorem::FiniteDimensional) {
            Some(p) => p.clone(),
            None => predict_one(Theorem::FiniteDimensional, cfg, target, built)?.expect("finite-d prediction"),
        };
        let mut row = |q: String, v: f64| -> Result<()> {
            let (lower, upper) = nongaussian_bounds(m, v)?;
            out.bounds.push(BoundRow {
                quantity: q,
                gaussian: v,
                lower,
                upper,
            });
            Ok(())
        };
        row("acceptance".into(), base.acceptance)?;
        for j in &base.jump {
            row(format!("jump:{}", j.direction), j.value)?;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpEstimate {
    pub direction: String,
    pub value: f64,
    pub stderr: f64,
}

/// Merged chain statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutput {
    pub schema: u32,
    pub command: String,
    pub dimension: usize,
    pub family: ProposalFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    pub steps: usize,
    pub seed: u64,
    pub chains: usize,
    pub n_steps: u64,
    pub accepts: u64,
    pub burn_in: u64,
    pub mean_alpha: f64,
    pub alpha_stderr: f64,
    pub accept_rate: f64,
    pub jumps: Vec<JumpEstimate>,
}

fn run_sampling(cfg: &ExperimentConfig, target: &BuiltTarget, built: &BuiltProposal) -> Result<ChainStats> {
    let c = &cfg.chain;
    if c.n_steps == 0 {
        return Err(Error::config("chain.n_steps", "must be >= 1"));
    }
    if c.n_chains == 0 {
        return Err(Error::config("chain.n_chains", "must be >= 1"));
    }
    let start = match &c.start {
        Some(x) => Start::State(x.clone()),
        None => Start::Equilibrium,
    };
    let opts = ChainOptions {
        batches: c.batches,
        burn_in: c.burn_in,
        ..Default::default()
    };
    info!("running {} chain(s) of {} steps", c.n_chains, c.n_steps);
    match &target.perturbed {
        Some(t) => run_chains(
            t,
            &built.proposal,
            &start,
            c.n_steps,
            &c.directions,
            &opts,
            c.seed,
            c.n_chains,
        ),
        None => run_chains(
            &target.gaussian,
            &built.proposal,
            &start,
            c.n_steps,
            &c.directions,
            &opts,
            c.seed,
            c.n_chains,
        ),
    }
    .map_err(|e| match e {
        Error::IndexOutOfRange { .. } | Error::DimensionMismatch { .. } | Error::InvalidParameter(_) => {
            Error::config("chain", e.to_string())
        }
        other => other,
    })
}

fn sample_output(
    cfg: &ExperimentConfig,
    target: &BuiltTarget,
    built: &BuiltProposal,
    stats: &ChainStats,
) -> SampleOutput {
    SampleOutput {
        schema: SCHEMA_VERSION,
        command: "sample".into(),
        dimension: target.gaussian.dim(),
        family: built.family,
        step_size: built.h,
        steps: built.steps,
        seed: cfg.chain.seed,
        chains: cfg.chain.n_chains,
        n_steps: stats.steps,
        accepts: stats.accepts,
        burn_in: stats.burn_in,
        mean_alpha: stats.mean_alpha(),
        alpha_stderr: stats.alpha_stderr(),
        accept_rate: stats.accept_rate(),
        jumps: stats
            .directions
            .iter()
            .enumerate()
            .map(|(k, d)| JumpEstimate {
                direction: d.to_string(),
                value: stats.jump(k),
                stderr: stats.jump_stderr(k),
            })
            .collect(),
    }
}

pub fn sample(cfg: &ExperimentConfig) -> Result<SampleOutput> {
    let target = build_target(&cfg.target)?;
    let built = build_proposal(&cfg.proposal, &target, &cfg.tuning)?;
    let stats = run_sampling(cfg, &target, &built)?;
    Ok(sample_output(cfg, &target, &built, &stats))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub name: String,
    pub theorem: Theorem,
    pub predicted: f64,
    pub empirical: f64,
    pub stderr: f64,
    pub z: f64,
    pub samples: u64,
    pub tolerance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema: u32,
    pub command: String,
    pub pass: bool,
    pub rows: Vec<VerifyRow>,
    pub sample: SampleOutput,
}

fn z_score(diff: f64, se: f64) -> f64 {
    if diff == 0.0 {
        0.0
    } else if se > 0.0 {
        diff / se
    } else {
        f64::INFINITY.copysign(diff)
    }
}

pub fn verify(cfg: &ExperimentConfig) -> Result<VerifyReport> {
    let target = build_target(&cfg.target)?;
    let built = build_proposal(&cfg.proposal, &target, &cfg.tuning)?;
    let theorem = cfg.verify.theorem;
    if matches!(theorem, Theorem::JumpSize | Theorem::NonGaussian) {
        return Err(Error::config("verify.theorem", "choose an acceptance theorem"));
    }
    let pred = predict_one(theorem, cfg, &target, &built)?.expect("acceptance theorem");
    let stats = run_sampling(cfg, &target, &built)?;
    let v = &cfg.verify;
    let mut rows = Vec::new();
    let bounds = target.bound.map(|m| move |x: f64| nongaussian_bounds(m, x));
    let mut push = |name: String, predicted: f64, empirical: f64, se: f64, tol: f64| -> Result<()> {
        let (lower, upper, pass, z) = match &bounds {
            Some(b) => {
                let (lo, hi) = b(predicted)?;
                let margin = v.z_max * se;
                let z = if empirical < lo {
                    z_score(empirical - lo, se)
                } else if empirical > hi {
                    z_score(empirical - hi, se)
                } else {
                    0.0
                };
                (
                    Some(lo),
                    Some(hi),
                    empirical >= lo - margin && empirical <= hi + margin,
                    z,
                )
            }
            None => {
                let z = z_score(empirical - predicted, se);
                (
                    None,
                    None,
                    z.abs() <= v.z_max || (empirical - predicted).abs() <= tol,
                    z,
                )
            }
        };
        rows.push(VerifyRow {
            name,
            theorem,
            predicted,
            empirical,
            stderr: se,
            z,
            samples: stats.steps,
            tolerance: tol,
            lower,
            upper,
            pass,
        });
        Ok(())
    };
    push(
        "acceptance".into(),
        pred.acceptance,
        stats.mean_alpha(),
        stats.alpha_stderr(),
        v.acceptance_tolerance,
    )?;
    for (k, j) in pred.jump.iter().enumerate() {
        push(
            format!("jump:{}", j.direction),
            j.value,
            stats.jump(k),
            stats.jump_stderr(k),
            v.jump_relative_tolerance * j.value.abs(),
        )?;
    }
    Ok(VerifyReport {
        schema: SCHEMA_VERSION,
        command: "verify".into(),
        pass: rows.iter().all(|r| r.pass),
        rows,
        sample: sample_output(cfg, &target, &built, &stats),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneOutput {
    pub schema: u32,
    pub command: String,
    pub family: ProposalFamily,
    #[serde(flatten)]
    pub report: TuningReport,
}

pub fn tune(cfg: &ExperimentConfig) -> Result<TuneOutput> {
    let target = build_target(&cfg.target)?;
    let spec = &cfg.proposal;
    let mass = match spec.family {
        ProposalFamily::Custom => return Err(Error::config("proposal.family", "custom proposals have no tuning rule")),
        _ => family_mass(spec)?,
    };
    let v = mass
        .eigenvalues(&target.gaussian)
        .map_err(|e| Error::config("proposal.mass", e.to_string()))?;
    let pre: Vec<f64> = v
        .iter()
        .zip(target.gaussian.eigenvalues())
        .map(|(v, l)| v * l)
        .collect();
    let t = &cfg.tuning;
    let field = |f: &'static str| move |e: Error| Error::config(f, e.to_string());
    let report = match spec.family {
        ProposalFamily::Sla => {
            multistep_report(t.cost, &pre, target.kappa, t.max_steps).map_err(field("tuning.cost"))?
        }
        ProposalFamily::Hmc => {
            hmc_report(&pre, target.kappa, &t.modes, t.aggregation).map_err(field("tuning.modes"))?
        }
        _ => {
            let theta = family_theta(spec)?.expect("langevin-type family");
            langevin_report(theta, &pre, target.kappa).map_err(field("proposal.theta"))?
        }
    };
    Ok(TuneOutput {
        schema: SCHEMA_VERSION,
        command: "tune".into(),
        family: spec.family,
        report,
    })
}

fn json(value: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn csv_num(x: f64) -> String {
    format!("{x:?}")
}

pub fn predict_csv(out: &PredictOutput) -> String {
    let mut s = String::from("theorem,quantity,value\n");
    for p in &out.predictions {
        let th = serde_json::to_value(p.theorem)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default();
        let mut row = |q: &str, v: f64| {
            let _ = writeln!(s, "{th},{q},{}", csv_num(v));
        };
        row("acceptance", p.acceptance);
        row("mu", p.mu);
        row("sigma2", p.sigma2);
        if let Some(t) = p.tau {
            row("tau", t);
        }
        for j in &p.jump {
            row(&format!("jump:{}", j.direction), j.value);
        }
    }
    for b in &out.bounds {
        let _ = writeln!(s, "bounds,{}:lower,{}", b.quantity, csv_num(b.lower));
        let _ = writeln!(s, "bounds,{}:upper,{}", b.quantity, csv_num(b.upper));
    }
    s
}

pub fn sample_csv(out: &SampleOutput) -> String {
    let mut s = String::from("quantity,value,stderr\n");
    let _ = writeln!(
        s,
        "mean_alpha,{},{}",
        csv_num(out.mean_alpha),
        csv_num(out.alpha_stderr)
    );
    let _ = writeln!(s, "accept_rate,{},", csv_num(out.accept_rate));
    for j in &out.jumps {
        let _ = writeln!(s, "jump:{},{},{}", j.direction, csv_num(j.value), csv_num(j.stderr));
    }
    s
}

pub fn verify_csv(r: &VerifyReport) -> String {
    let mut s = String::from("name,predicted,empirical,stderr,z,samples,pass\n");
    for row in &r.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            row.name,
            csv_num(row.predicted),
            csv_num(row.empirical),
            csv_num(row.stderr),
            csv_num(row.z),
            row.samples,
            row.pass
        );
    }
    s
}

/// Efficiency curve: `L,t,efficiency` for sla, `s,efficiency` otherwise.
pub fn tune_csv(out: &TuneOutput) -> String {
    let r = &out.report;
    match (out.family, r.cost) {
        (ProposalFamily::Sla, Some(t)) => {
            let mut s = String::from("L,t,efficiency\n");
            for &(l, e) in &r.efficiency_curve {
                let _ = writeln!(s, "{},{},{}", l as usize, csv_num(t), csv_num(e));
            }
            s
        }
        _ => {
            let mut s = String::from("s,efficiency\n");
            for &(x, e) in &r.efficiency_curve {
                let _ = writeln!(s, "{},{}", csv_num(x), csv_num(e));
            }
            s
        }
    }
}

fn emit(text: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Runs one subcommand and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let (args, which) = match cli.command {
        Command::Predict(a) => (a, "predict"),
        Command::Sample(a) => (a, "sample"),
        Command::Tune(a) => (a, "tune"),
        Command::Verify(a) => (a, "verify"),
    };
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.chain.seed = s;
    }
    if let Some(c) = args.chains {
        cfg.chain.n_chains = c;
    }
    if let Some(f) = args.format {
        cfg.output.format = f;
    }
    if let Some(p) = args.out {
        cfg.output.path = Some(p);
    }
    let csv = cfg.output.format == Format::Csv;
    let path = cfg.output.path.clone();
    let mut code = 0;
    let text = match which {
        "predict" => {
            let o = predict(&cfg)?;
            if csv {
                predict_csv(&o)
            } else {
                json(&o)?
            }
        }
        "sample" => {
            let o = sample(&cfg)?;
            if csv {
                sample_csv(&o)
            } else {
                json(&o)?
            }
        }
        "tune" => {
            let o = tune(&cfg)?;
            if csv {
                tune_csv(&o)
            } else {
                json(&o)?
            }
        }
        _ => {
            let o = verify(&cfg)?;
            if !o.pass {
                code = 1;
            }
            if csv {
                verify_csv(&o)
            } else {
                json(&o)?
            }
        }
    };
    emit(&text, path.as_deref())?;
    Ok(code)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SLA: &str = r#"
[target]
d = 50

[proposal]
family = "sla"
h = 0.2

[chain]
n_steps = 2000
n_chains = 2
seed = 3
directions = ["axis:0", "axis-mean", "mode:4"]
batches = 20
"#;

    #[test]
    fn config_round_trip() {
        let cfg = ExperimentConfig::from_toml(SLA).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.chain.directions[2], Direction::Mode(4));
        assert_eq!(cfg.prediction, PredictionSpec::default());
    }

    #[test]
    fn config_errors_name_the_field() {
        let bad = SLA.replace("family = \"sla\"", "family = \"nope\"");
        match ExperimentConfig::from_toml(&bad) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "proposal.family"),
            other => panic!("{other:?}"),
        }
        let cfg = ExperimentConfig::from_toml(&SLA.replace("h = 0.2", "h = -1.0")).unwrap();
        match predict(&cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "proposal.h"),
            other => panic!("{other:?}"),
        }
        let cfg = ExperimentConfig::from_toml(&SLA.replace("d = 50", "d = 50\neigenvalues = [1.0]")).unwrap();
        assert!(matches!(build_target(&cfg.target), Err(Error::Config { .. })));
    }

    #[test]
    fn axis_projection_matches_mode_on_diagonal_target() {
        let cfg = ExperimentConfig::from_toml(SLA).unwrap();
        let out = predict(&cfg).unwrap();
        let fd = &out.predictions[0];
        assert_eq!(fd.theorem, Theorem::FiniteDimensional);
        assert_eq!(fd.jump.len(), 3);
        assert_eq!(out.jump_size.len(), 2);
        assert_eq!(fd.jump[0].value, out.jump_size[0].value);
    }

    #[test]
    fn tau_override_changes_limit_acceptance() {
        let mut cfg = ExperimentConfig::from_toml(SLA).unwrap();
        cfg.prediction.theorems = vec![Theorem::LangevinLimit];
        let base = predict(&cfg).unwrap().predictions[0].clone();
        cfg.prediction.tau = base.tau;
        let same = predict(&cfg).unwrap().predictions[0].clone();
        assert!((same.acceptance - base.acceptance).abs() < 1e-14);
        cfg.prediction.tau = Some(4.0 * base.tau.unwrap());
        let moved = predict(&cfg).unwrap().predictions[0].clone();
        assert!(moved.acceptance < base.acceptance);
        assert!((moved.sigma2 - 4.0 * base.sigma2).abs() < 1e-12);
    }

    #[test]
    fn tune_csv_has_fixed_columns() {
        let cfg = ExperimentConfig::from_toml(SLA).unwrap();
        let out = tune(&cfg).unwrap();
        let csv = tune_csv(&out);
        assert!(csv.starts_with("L,t,efficiency\n1,0.0,"));
        assert_eq!(out.report.recommended_l, Some(3));
    }
}
