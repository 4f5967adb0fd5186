//! Metropolis-Hastings with stationary AR(1) proposals on Gaussian and
//! perturbed-Gaussian targets: samplers, closed-form acceptance and jump
//! predictions, and tuning rules.
//!
//! ```
//! use ar1mcmc::targets::make_power_spectrum;
//! use ar1mcmc::theory::acceptance_prediction;
//! use ar1mcmc::{run_chains, Ar1Proposal, ChainOptions, Direction, SpectralTarget, Start};
//!
//! let target = SpectralTarget::centered(make_power_spectrum(100, 0.0, 1.0, 1.0, None)?)?;
//! let proposal = Ar1Proposal::sla(0.2, &target)?;
//! let predicted = acceptance_prediction(&target, &proposal)?;
//! let stats = run_chains(&target, &proposal, &Start::Equilibrium, 2000, &[Direction::AxisMean],
//!                        &ChainOptions::default(), 7, 2)?;
//! assert!((predicted.acceptance - stats.mean_alpha()).abs() < 0.1);
//! # Ok::<(), ar1mcmc::Error>(())
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod dense;
pub mod error;
pub mod normal;
pub mod proposals;
pub mod rng;
pub mod sampler;
pub mod targets;
pub mod theory;
pub mod tuning;

pub use error::{Error, Result};
pub use proposals::{Ar1Proposal, Family, HmcSchedule, Mass};
pub use sampler::{run_chain, run_chains, ChainOptions, ChainStats, Direction, MhChain, Start};
pub use targets::{PerturbedTarget, SpectralTarget, Target};
pub use theory::{GapTerms, JumpPrediction, LimitPrediction, Theorem};
pub use tuning::TuningReport;
