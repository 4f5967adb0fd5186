//! Closed-form predictions: per-mode gap terms, the Gaussian limit of the log
//! acceptance ratio, expected acceptance and squared jump sizes, the scaling
//! limits of the Langevin, multi-step and HMC families, and corrections and
//! bounds for perturbed targets.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::normal;
use crate::proposals::Ar1Proposal;
use crate::targets::SpectralTarget;

/// Per-mode gap between target and proposal:
/// `g~ = 1 - G`, `g^ = 1 - G^2`, `r = (l^2 - l~^2)/l^2`, `r~ = l^2 / l~^2`,
/// `r^ = mu - mu~`, and the terms `T0..T5` built from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapTerms {
    pub lambda2: Vec<f64>,
    pub lambda2_tilde: Vec<f64>,
    pub g: Vec<f64>,
    pub g_tilde: Vec<f64>,
    pub g_hat: Vec<f64>,
    pub r: Vec<f64>,
    pub r_tilde: Vec<f64>,
    pub r_hat: Vec<f64>,
    /// `t[j][i] = T_{j i}`.
    pub t: [Vec<f64>; 6],
    /// `mu_{d,i} = T0 + T3 + T4`.
    pub mu: Vec<f64>,
    /// `sigma_{d,i}^2 = T1^2 + T2^2 + 2 T3^2 + 2 T4^2 + T5^2`.
    pub sigma2: Vec<f64>,
}

struct ModeTerms {
    t: [f64; 6],
    mu: f64,
    sigma2: f64,
}

fn mode_terms(lam2: f64, g: f64, r: f64, r_tilde: f64, r_hat: f64) -> ModeTerms {
    let lam = lam2.sqrt();
    let g_tilde = 1.0 - g;
    let g_hat = (1.0 - g) * (1.0 + g);
    let root = (r_tilde * g_hat).max(0.0).sqrt();
    let t = [
        r_hat * r_hat * lam2 * (0.5 * r * g_hat - g_tilde),
        r_hat * lam * (r * g_hat - g_tilde),
        r_hat * lam * root * (1.0 - r * g),
        0.5 * r * g_hat,
        -0.5 * r * r_tilde * g_hat,
        -r * g * root,
    ];
    let mu = t[0] + t[3] + t[4];
    let sigma2 = t[1] * t[1] + t[2] * t[2] + 2.0 * t[3] * t[3] + 2.0 * t[4] * t[4] + t[5] * t[5];
    ModeTerms { t, mu, sigma2 }
}

/// Gap terms of `proposal` against the Gaussian `target` (shared eigenbasis).
pub fn gap_terms(target: &SpectralTarget, proposal: &Ar1Proposal) -> Result<GapTerms> {
    proposal.check_target(target)?;
    let d = target.dim();
    let lam = target.eigenvalues();
    let lam_t = proposal.stationary_precision();
    let mu = target.mean_eigen();
    let mu_t = proposal.mean_eigen();
    let mut out = GapTerms {
        lambda2: lam.to_vec(),
        lambda2_tilde: lam_t.to_vec(),
        g: proposal.g().to_vec(),
        g_tilde: Vec::with_capacity(d),
        g_hat: Vec::with_capacity(d),
        r: Vec::with_capacity(d),
        r_tilde: Vec::with_capacity(d),
        r_hat: Vec::with_capacity(d),
        t: Default::default(),
        mu: Vec::with_capacity(d),
        sigma2: Vec::with_capacity(d),
    };
    for i in 0..d {
        let g = proposal.g()[i];
        let r = (lam[i] - lam_t[i]) / lam[i];
        let r_tilde = lam[i] / lam_t[i];
        let r_hat = mu[i] - mu_t[i];
        let m = mode_terms(lam[i], g, r, r_tilde, r_hat);
        out.g_tilde.push(1.0 - g);
        out.g_hat.push((1.0 - g) * (1.0 + g));
        out.r.push(r);
        out.r_tilde.push(r_tilde);
        out.r_hat.push(r_hat);
        for j in 0..6 {
            out.t[j].push(m.t[j]);
        }
        out.mu.push(m.mu);
        out.sigma2.push(m.sigma2);
    }
    Ok(out)
}

impl GapTerms {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `mu = sum_i mu_{d,i}`.
    pub fn mu_total(&self) -> f64 {
        self.mu.iter().sum()
    }

    /// `sigma^2 = sum_i sigma_{d,i}^2`.
    pub fn sigma2_total(&self) -> f64 {
        self.sigma2.iter().sum()
    }

    /// Largest discrepancy between the stored terms and a recomputation from
    /// `lambda^2`, `G`, `r`, `r~`, `r^`.
    pub fn consistency_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.dim() {
            let m = mode_terms(self.lambda2[i], self.g[i], self.r[i], self.r_tilde[i], self.r_hat[i]);
            for j in 0..6 {
                worst = worst.max((m.t[j] - self.t[j][i]).abs());
            }
            worst = worst
                .max((m.mu - self.mu[i]).abs())
                .max((m.sigma2 - self.sigma2[i]).abs());
        }
        worst
    }
}

/// `ln Phi(x)`, accurate in the far left tail.
fn ln_cdf(x: f64) -> f64 {
    if x > -30.0 {
        normal::cdf(x).ln()
    } else {
        let x2 = x * x;
        -0.5 * x2 - (-x).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2)).ln()
    }
}

/// `E[1 ^ e^X]` for `X ~ N(mu, sigma^2)`:
/// `Phi(mu/sigma) + e^{mu + sigma^2/2} Phi(-sigma - mu/sigma)`.
/// At `sigma = 0` this is `1` for `mu >= 0` and `e^mu` otherwise.
pub fn limit_acceptance(mu: f64, sigma: f64) -> Result<f64> {
    if mu.is_nan() || sigma.is_nan() {
        return Err(Error::invalid("limit_acceptance: NaN input"));
    }
    if sigma < 0.0 {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(if mu >= 0.0 { 1.0 } else { mu.exp() });
    }
    if sigma.is_infinite() {
        return Ok(0.0);
    }
    let first = normal::cdf(mu / sigma);
    let second = (mu + 0.5 * sigma * sigma + ln_cdf(-sigma - mu / sigma)).exp();
    Ok((first + second).clamp(0.0, 1.0))
}

/// Which result a prediction comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Theorem {
    /// Gaussian limit of `Z` evaluated with finite-`d` sums.
    FiniteDimensional,
    /// Expected squared jump, leave-one-out acceptance times `U1`.
    JumpSize,
    LangevinLimit,
    MultistepSlaLimit,
    HmcLimit,
    /// Acceptance with the first- and second-moment correction for a perturbed target.
    NonGaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpValue {
    pub direction: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitPrediction {
    pub theorem: Theorem,
    pub mu: f64,
    pub sigma2: f64,
    pub acceptance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// `tau` from the integral approximation of a power-law spectrum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_integral: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub jump: Vec<JumpValue>,
    /// Lyapunov ratios for `T1..T5`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lyapunov: Option<[f64; 5]>,
    pub lyapunov_ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl LimitPrediction {
    fn new(theorem: Theorem, mu: f64, sigma2: f64, acceptance: f64) -> Self {
        Self {
            theorem,
            mu,
            sigma2,
            acceptance,
            tau: None,
            tau_integral: None,
            jump: Vec::new(),
            lyapunov: None,
            lyapunov_ok: true,
            step_size: None,
            steps: None,
            notes: Vec::new(),
        }
    }
}

/// Default Lyapunov exponent `delta`.
pub const LYAPUNOV_DELTA: f64 = 1.0;
/// Ratios above this are flagged.
pub const LYAPUNOV_THRESHOLD: f64 = 0.1;

/// `sum_i |T_ji|^{2+delta} / (sum_i T_ji^2)^{1+delta/2}` for `j = 1..5`.
/// An all-zero column gives 0.
pub fn lyapunov_diagnostic(gap: &GapTerms, delta: f64) -> Result<[f64; 5]> {
    if !(delta > 0.0) {
        return Err(Error::invalid(format!("delta must be > 0, got {delta}")));
    }
    let mut out = [0.0; 5];
    for (j, slot) in out.iter_mut().enumerate() {
        let col = &gap.t[j + 1];
        let scale = col.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if scale == 0.0 {
            continue;
        }
        // rescale to avoid under/overflow; the ratio is scale invariant
        let num: f64 = col.iter().map(|x| (x.abs() / scale).powf(2.0 + delta)).sum();
        let den: f64 = col
            .iter()
            .map(|x| (x / scale).powi(2))
            .sum::<f64>()
            .powf(1.0 + 0.5 * delta);
        *slot = num / den;
    }
    Ok(out)
}

/// `max_{j=1..5, i} |T_ji| sqrt(d)`: a finite-`d` stand-in for the requirement
/// that the terms be `O(d^{-1/2})`. Values above 1 suggest the
/// perturbed-target correction is not trustworthy.
pub fn order_gate(gap: &GapTerms) -> f64 {
    let sd = (gap.dim() as f64).sqrt();
    (1..6).flat_map(|j| gap.t[j].iter()).fold(0.0f64, |m, x| m.max(x.abs())) * sd
}

/// Threshold for [`order_gate`].
pub const ORDER_GATE_THRESHOLD: f64 = 1.0;

/// Finite-`d` acceptance prediction `E[1 ^ e^Z]` with `Z ~ N(sum mu_i, sum sigma_i^2)`.
pub fn acceptance_prediction(target: &SpectralTarget, proposal: &Ar1Proposal) -> Result<LimitPrediction> {
    let gap = gap_terms(target, proposal)?;
    prediction_from_gap(&gap)
}

pub fn prediction_from_gap(gap: &GapTerms) -> Result<LimitPrediction> {
    let mu = gap.mu_total();
    let sigma2 = gap.sigma2_total().max(0.0);
    let acc = limit_acceptance(mu, sigma2.sqrt())?;
    let mut p = LimitPrediction::new(Theorem::FiniteDimensional, mu, sigma2, acc);
    let lyap = lyapunov_diagnostic(gap, LYAPUNOV_DELTA)?;
    p.lyapunov_ok = lyap.iter().all(|&r| r <= LYAPUNOV_THRESHOLD);
    if !p.lyapunov_ok {
        p.notes.push(format!(
            "Lyapunov ratio above {LYAPUNOV_THRESHOLD} (delta = {LYAPUNOV_DELTA}); Gaussian limit of Z is doubtful"
        ));
    }
    p.lyapunov = Some(lyap);
    Ok(p)
}

/// Expected squared jump along eigenvector `q_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpPrediction {
    pub mode: usize,
    /// `g~^2 r^^2 + g~^2 / l^2 + g^ / l~^2`.
    pub u1: f64,
    /// Acceptance with mode `i` left out of `mu`, `sigma^2`.
    pub u2: f64,
    /// Bound on the error term.
    pub u3: f64,
    /// `U1 U2`.
    pub value: f64,
    /// `((1+G)/l~^2 + (1-G)/l^2 + r^^2)(1-G) E[alpha]`.
    pub simplified: f64,
    pub acceptance: f64,
}

pub fn jump_prediction(target: &SpectralTarget, proposal: &Ar1Proposal, mode: usize) -> Result<JumpPrediction> {
    let gap = gap_terms(target, proposal)?;
    jump_from_gap(&gap, mode)
}

pub fn jump_from_gap(gap: &GapTerms, i: usize) -> Result<JumpPrediction> {
    let d = gap.dim();
    if i >= d {
        return Err(Error::IndexOutOfRange { index: i, dim: d });
    }
    let (mu, s2) = (gap.mu_total(), gap.sigma2_total());
    let acceptance = limit_acceptance(mu, s2.max(0.0).sqrt())?;
    let mu_minus = mu - gap.mu[i];
    let s2_minus = (s2 - gap.sigma2[i]).max(0.0);
    let u2 = limit_acceptance(mu_minus, s2_minus.sqrt())?;
    Ok(jump_terms(gap, i, u2, acceptance))
}

fn jump_terms(gap: &GapTerms, i: usize, u2: f64, acceptance: f64) -> JumpPrediction {
    let (gt, gh, rh, rt) = (gap.g_tilde[i], gap.g_hat[i], gap.r_hat[i], gap.r_tilde[i]);
    let (l2, lt2, g) = (gap.lambda2[i], gap.lambda2_tilde[i], gap.g[i]);
    let u1 = gt * gt * rh * rh + gt * gt / l2 + gh / lt2;
    let inner = gt * gt + rt * gh;
    let u3 = (gap.sigma2[i] + gap.mu[i] * gap.mu[i]).sqrt()
        * (gt.powi(4) * rh.powi(4) + 3.0 / (l2 * l2) * inner * inner + 6.0 / l2 * rh * rh * gt * gt * inner).sqrt();
    let simplified = ((1.0 + g) / lt2 + (1.0 - g) / l2 + rh * rh) * (1.0 - g) * acceptance;
    JumpPrediction {
        mode: i,
        u1,
        u2,
        u3,
        value: u1 * u2,
        simplified,
        acceptance,
    }
}

/// Jump predictions for every mode, sharing one pass over the gap terms.
pub fn jump_predictions_all(gap: &GapTerms) -> Result<Vec<JumpPrediction>> {
    let (mu, s2) = (gap.mu_total(), gap.sigma2_total());
    let acceptance = limit_acceptance(mu, s2.max(0.0).sqrt())?;
    (0..gap.dim())
        .map(|i| {
            let u2 = limit_acceptance(mu - gap.mu[i], (s2 - gap.sigma2[i]).max(0.0).sqrt())?;
            Ok(jump_terms(gap, i, u2, acceptance))
        })
        .collect()
}

/// Envelope constants `c = min lambda_i / i^kappa`, `C = max lambda_i / i^kappa`.
pub fn spectrum_envelope(lambda2: &[f64], kappa: f64) -> (f64, f64) {
    let mut c = f64::INFINITY;
    let mut cc = 0.0f64;
    for (k, l2) in lambda2.iter().enumerate() {
        let ratio = l2.sqrt() / ((k + 1) as f64).powf(kappa);
        c = c.min(ratio);
        cc = cc.max(ratio);
    }
    (c, cc)
}

fn check_spectrum(lambda2: &[f64], kappa: f64, notes: &mut Vec<String>) -> Result<()> {
    if lambda2.is_empty() {
        return Err(Error::invalid("spectrum must be non-empty"));
    }
    if let Some(i) = lambda2.iter().position(|&x| !(x > 0.0)) {
        return Err(Error::invalid(format!("eigenvalue {i} must be > 0")));
    }
    if !(kappa >= 0.0) {
        return Err(Error::invalid(format!("kappa must be >= 0, got {kappa}")));
    }
    let (c, cc) = spectrum_envelope(lambda2, kappa);
    if cc / c > 1e3 {
        let msg = format!("spectrum is far from c i^kappa (C/c = {:.3e})", cc / c);
        warn!("{msg}");
        notes.push(msg);
    }
    Ok(())
}

/// `c^p / (1 + p kappa)` when `lambda_i = c i^kappa` exactly.
fn power_law_integral(lambda2: &[f64], kappa: f64, p: f64) -> Option<f64> {
    let (c, cc) = spectrum_envelope(lambda2, kappa);
    ((cc - c).abs() <= 1e-12 * c).then(|| c.powf(p) / (1.0 + p * kappa))
}

/// `tau = d^{-(6 kappa + 1)} sum_i lambda_i^6`.
pub fn tau_langevin(lambda2: &[f64], kappa: f64) -> f64 {
    let d = lambda2.len() as f64;
    lambda2.iter().map(|l| l * l * l).sum::<f64>() / d.powf(6.0 * kappa + 1.0)
}

/// `tau = d^{-(4 kappa + 1)} sum_i lambda_i^4 sin^2(lambda_i T')`.
pub fn tau_hmc(lambda2: &[f64], kappa: f64, t_prime: f64) -> f64 {
    let d = lambda2.len() as f64;
    lambda2
        .iter()
        .map(|l2| {
            let s = (l2.sqrt() * t_prime).sin();
            l2 * l2 * s * s
        })
        .sum::<f64>()
        / d.powf(4.0 * kappa + 1.0)
}

/// Scaling limit of the theta-method Langevin proposal with
/// `h = l^2 d^{-1/3 - 2 kappa}` on the (preconditioned) spectrum `lambda2`:
/// acceptance `2 Phi(-l^3 |theta - 1/2| sqrt(tau) / 4)`, jump `h` times that.
pub fn langevin_limits(kappa: f64, l: f64, theta: f64, lambda2: &[f64]) -> Result<LimitPrediction> {
    if !(l > 0.0) {
        return Err(Error::invalid(format!("l must be > 0, got {l}")));
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::invalid(format!("theta must lie in [0, 1], got {theta}")));
    }
    let mut notes = Vec::new();
    check_spectrum(lambda2, kappa, &mut notes)?;
    let d = lambda2.len() as f64;
    let tau = tau_langevin(lambda2, kappa);
    let h = l * l * d.powf(-1.0 / 3.0 - 2.0 * kappa);
    let s = l.powi(3) * (theta - 0.5).abs() * tau.sqrt() / 4.0;
    let acceptance = 2.0 * normal::cdf(-s);
    if theta == 0.5 {
        let msg = "theta = 1/2: Z vanishes in the limit and this step-size scaling is suboptimal".to_string();
        warn!("{msg}");
        notes.push(msg);
    }
    let sigma = 2.0 * s;
    let mut p = LimitPrediction::new(Theorem::LangevinLimit, -0.5 * sigma * sigma, sigma * sigma, acceptance);
    p.tau = Some(tau);
    p.tau_integral = power_law_integral(lambda2, kappa, 6.0);
    p.step_size = Some(h);
    p.jump = vec![JumpValue {
        direction: "any".into(),
        value: 2.0 * h * normal::cdf(-s),
    }];
    p.notes = notes;
    Ok(p)
}

/// Scaling limit of `L`-step SLA with `h = l^2 d^{-1/3 - 2 kappa}`:
/// acceptance `2 Phi(-l^3 sqrt(L tau) / 8)`, jump `2 L h Phi(...)`.
pub fn multistep_sla_limits(kappa: f64, l: f64, steps: usize, lambda2: &[f64]) -> Result<LimitPrediction> {
    if steps == 0 {
        return Err(Error::invalid("number of composed steps must be >= 1"));
    }
    if !(l > 0.0) {
        return Err(Error::invalid(format!("l must be > 0, got {l}")));
    }
    let mut notes = Vec::new();
    check_spectrum(lambda2, kappa, &mut notes)?;
    let d = lambda2.len() as f64;
    let tau = tau_langevin(lambda2, kappa);
    let h = l * l * d.powf(-1.0 / 3.0 - 2.0 * kappa);
    let lf = steps as f64;
    let s = l.powi(3) * (lf * tau).sqrt() / 8.0;
    let acceptance = 2.0 * normal::cdf(-s);
    let sigma = 2.0 * s;
    let mut p = LimitPrediction::new(
        Theorem::MultistepSlaLimit,
        -0.5 * sigma * sigma,
        sigma * sigma,
        acceptance,
    );
    p.tau = Some(tau);
    p.tau_integral = power_law_integral(lambda2, kappa, 6.0);
    p.step_size = Some(h);
    p.steps = Some(steps);
    p.jump = vec![JumpValue {
        direction: "any".into(),
        value: 2.0 * lf * h * normal::cdf(-s),
    }];
    p.notes = notes;
    Ok(p)
}

/// Scaling limit of HMC with `h = l d^{-1/4 - kappa}`, `L = floor(T / h)`,
/// `T' = L h`: acceptance `2 Phi(-l^2 sqrt(tau) / 8)` and, along eigenvector
/// `q_i`, jump `2 (1 - cos(lambda_i T')) / lambda_i^2` times the acceptance.
pub fn hmc_limits(kappa: f64, l: f64, t: f64, lambda2: &[f64], modes: &[usize]) -> Result<LimitPrediction> {
    if !(l > 0.0) || !(t > 0.0) {
        return Err(Error::invalid("l and T must be > 0"));
    }
    let mut notes = Vec::new();
    check_spectrum(lambda2, kappa, &mut notes)?;
    let d = lambda2.len();
    let h = l * (d as f64).powf(-0.25 - kappa);
    let steps = (t / h).floor() as usize;
    if steps == 0 {
        return Err(Error::invalid(format!(
            "integration time {t} is shorter than the step size {h}"
        )));
    }
    let t_prime = steps as f64 * h;
    let tau = tau_hmc(lambda2, kappa, t_prime);
    let s = l * l * tau.sqrt() / 8.0;
    let acceptance = 2.0 * normal::cdf(-s);
    let sigma = 2.0 * s;
    let mut p = LimitPrediction::new(Theorem::HmcLimit, -0.5 * sigma * sigma, sigma * sigma, acceptance);
    p.tau = Some(tau);
    p.step_size = Some(h);
    p.steps = Some(steps);
    for &i in modes {
        if i >= d {
            return Err(Error::IndexOutOfRange { index: i, dim: d });
        }
        let lam = lambda2[i].sqrt();
        p.jump.push(JumpValue {
            direction: format!("mode:{i}"),
            value: 2.0 * (1.0 - (lam * t_prime).cos()) / lambda2[i] * acceptance,
        });
    }
    p.notes = notes;
    Ok(p)
}

/// `[e^{-3M} v, e^{3M} v]` for acceptance or squared jump of a target whose
/// perturbation satisfies `|phi| <= M`.
pub fn nongaussian_bounds(bound: f64, gaussian_value: f64) -> Result<(f64, f64)> {
    if !(bound >= 0.0) {
        return Err(Error::invalid(format!("bound M must be >= 0, got {bound}")));
    }
    if !(gaussian_value >= 0.0) {
        return Err(Error::invalid(format!("value must be >= 0, got {gaussian_value}")));
    }
    Ok((
        (-3.0 * bound).exp() * gaussian_value,
        (3.0 * bound).exp() * gaussian_value,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonGaussianPrediction {
    pub mu: f64,
    pub sigma2: f64,
    pub mu_ng: f64,
    pub sigma2_ng: f64,
    pub acceptance: f64,
    pub gaussian_acceptance: f64,
    /// `sum_i T1_i^2 + T3_i^2`; zero means the correction vanishes.
    pub collapse: f64,
    pub same_as_gaussian: bool,
    pub order_gate: f64,
    pub order_gate_ok: bool,
}

/// `mu_ng = mu + sum (kappa_i T1_i + T3_i (gamma_i - 1))`,
/// `sigma_ng^2 = sigma^2 + sum (kappa_i T1_i + T3_i (gamma_i - 1))^2`.
pub fn nongaussian_mu_sigma(gap: &GapTerms, kappas: &[f64], gammas: &[f64]) -> Result<NonGaussianPrediction> {
    check_dim(gap.dim(), kappas.len())?;
    check_dim(gap.dim(), gammas.len())?;
    let (mu, sigma2) = (gap.mu_total(), gap.sigma2_total());
    let mut shift = 0.0;
    let mut spread = 0.0;
    let mut collapse = 0.0;
    for i in 0..gap.dim() {
        let c = kappas[i] * gap.t[1][i] + gap.t[3][i] * (gammas[i] - 1.0);
        shift += c;
        spread += c * c;
        collapse += gap.t[1][i] * gap.t[1][i] + gap.t[3][i] * gap.t[3][i];
    }
    let mu_ng = mu + shift;
    let sigma2_ng = sigma2 + spread;
    let gate = order_gate(gap);
    let tol = 1e-6 * (1.0 + mu.abs() + sigma2);
    Ok(NonGaussianPrediction {
        mu,
        sigma2,
        mu_ng,
        sigma2_ng,
        acceptance: limit_acceptance(mu_ng, sigma2_ng.max(0.0).sqrt())?,
        gaussian_acceptance: limit_acceptance(mu, sigma2.max(0.0).sqrt())?,
        collapse,
        same_as_gaussian: shift.abs() <= tol && spread <= tol,
        order_gate: gate,
        order_gate_ok: gate < ORDER_GATE_THRESHOLD,
    })
}

/// Interval for the squared jump along `q_i` on a perturbed target:
/// `(g~^2 r^^2 + g^/l~^2) E[alpha] + 2 (r^ g~^2 gamma^{1/2} / l) u + (g~^2 gamma / l^2) v`
/// over `u in [-1, 1]`, `v in [0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpInterval {
    pub lower: f64,
    pub upper: f64,
    pub leading: f64,
}

pub fn nongaussian_jump_prediction(gap: &GapTerms, i: usize, gamma: f64, expected_alpha: f64) -> Result<JumpInterval> {
    let d = gap.dim();
    if i >= d {
        return Err(Error::IndexOutOfRange { index: i, dim: d });
    }
    if !(gamma >= 0.0) || !(0.0..=1.0).contains(&expected_alpha) {
        return Err(Error::invalid("gamma must be >= 0 and E[alpha] in [0, 1]"));
    }
    let (gt, gh, rh) = (gap.g_tilde[i], gap.g_hat[i], gap.r_hat[i]);
    let (l2, lt2) = (gap.lambda2[i], gap.lambda2_tilde[i]);
    let leading = (gt * gt * rh * rh + gh / lt2) * expected_alpha;
    let cross = (2.0 * rh * gt * gt * gamma.sqrt() / l2.sqrt()).abs();
    let v_term = gt * gt * gamma / l2;
    Ok(JumpInterval {
        lower: leading - cross,
        upper: leading + cross + v_term,
        leading,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposals::{HmcSchedule, Mass};
    use crate::rng::rng_from_seed;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_target(d: usize, seed: u64) -> SpectralTarget {
        let mut rng = rng_from_seed(seed);
        let q = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal))
            .qr()
            .q();
        let lam = (0..d).map(|_| rng.random_range(0.3..3.0)).collect();
        let mean = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        SpectralTarget::with_basis(lam, q, mean).unwrap()
    }

    /// Mean and variance of a quadratic form `c + a^T w + w^T M w`, `w ~ N(0, I)`.
    fn quad_form_moments(c: f64, a: &[f64], m: &[[f64; 2]; 2]) -> (f64, f64) {
        let tr = m[0][0] + m[1][1];
        let tr2 = m[0][0] * m[0][0] + 2.0 * m[0][1] * m[1][0] + m[1][1] * m[1][1];
        (c + tr, a[0] * a[0] + a[1] * a[1] + 2.0 * tr2)
    }

    /// Per-mode `Z_i` written directly as a quadratic form in `(xi, nu)`:
    /// `x = mu + xi / lambda`, `y = G x + (1-G) mu~ + sqrt(Sigma) nu`.
    fn oracle_mode(l2: f64, lt2: f64, g: f64, mu: f64, mu_t: f64) -> (f64, f64) {
        let lam = l2.sqrt();
        let s = (1.0 - g * g) / lt2;
        let sd = s.sqrt();
        let k = -0.5 * (l2 - lt2);
        let e = l2 * mu - lt2 * mu_t;
        // y = y0 + yx xi + yn nu ; x = mu + xi / lam
        let y0 = g * mu + (1.0 - g) * mu_t;
        let yx = g / lam;
        let yn = sd;
        let x0 = mu;
        let xx = 1.0 / lam;
        // Z = k (y^2 - x^2) + e (y - x)
        let c = k * (y0 * y0 - x0 * x0) + e * (y0 - x0);
        let a = [
            k * 2.0 * (y0 * yx - x0 * xx) + e * (yx - xx),
            k * 2.0 * y0 * yn + e * yn,
        ];
        let m = [[k * (yx * yx - xx * xx), k * yx * yn], [k * yx * yn, k * yn * yn]];
        quad_form_moments(c, &a, &m)
    }

    #[test]
    fn mu_sigma_match_quadratic_form_oracle() {
        let t = random_target(6, 3);
        for p in [
            Ar1Proposal::sla(0.4, &t).unwrap(),
            Ar1Proposal::theta_sla(0.9, 0.7, &t).unwrap(),
            Ar1Proposal::hmc(&HmcSchedule::new(0.3, 5, Mass::Identity).unwrap(), &t).unwrap(),
            Ar1Proposal::custom(
                vec![0.2, -0.3, 0.5, 0.0, 0.7, 0.1],
                vec![0.5, 1.0, 0.3, 2.0, 0.1, 0.8],
                vec![0.3, -0.2, 1.0, 0.0, 0.5, -1.0],
                t.basis().cloned(),
            )
            .unwrap(),
        ] {
            let gap = gap_terms(&t, &p).unwrap();
            for i in 0..6 {
                let (m, v) = oracle_mode(
                    t.eigenvalues()[i],
                    p.stationary_precision()[i],
                    p.g()[i],
                    t.mean_eigen()[i],
                    p.mean_eigen()[i],
                );
                assert!(
                    (gap.mu[i] - m).abs() < 1e-10 * (1.0 + m.abs()),
                    "{} mode {i}: {} vs {m}",
                    p.family(),
                    gap.mu[i]
                );
                assert!(
                    (gap.sigma2[i] - v).abs() < 1e-10 * (1.0 + v),
                    "{} mode {i}: {} vs {v}",
                    p.family(),
                    gap.sigma2[i]
                );
            }
            assert!(gap.consistency_residual() < 1e-14);
        }
    }

    #[test]
    fn matched_equilibrium_has_no_gap() {
        let t = random_target(4, 1);
        let gap = gap_terms(&t, &Ar1Proposal::pcn(0.5, &t).unwrap()).unwrap();
        for j in 0..6 {
            assert!(gap.t[j].iter().all(|x| x.abs() < 1e-15));
        }
        assert_eq!(gap.mu_total(), 0.0);
    }

    #[test]
    fn sla_scalar_t3() {
        let t = SpectralTarget::centered(vec![1.0]).unwrap();
        let gap = gap_terms(&t, &Ar1Proposal::sla(0.5, &t).unwrap()).unwrap();
        assert_relative_eq!(gap.r[0], 0.125, epsilon = 1e-15);
        assert_relative_eq!(gap.g_tilde[0], 0.25, epsilon = 1e-15);
        assert_relative_eq!(gap.g_hat[0], 0.4375, epsilon = 1e-15);
        assert_relative_eq!(gap.t[3][0], 0.02734375, epsilon = 1e-15);
    }

    #[test]
    fn negating_mean_gap_flips_t1_t2_only() {
        let a = mode_terms(1.7, 0.4, 0.2, 1.25, 0.6);
        let b = mode_terms(1.7, 0.4, 0.2, 1.25, -0.6);
        assert_eq!(a.t[1], -b.t[1]);
        assert_eq!(a.t[2], -b.t[2]);
        for j in [0, 3, 4, 5] {
            assert_eq!(a.t[j], b.t[j]);
        }
    }

    #[test]
    fn mu_matches_expansion() {
        let t = random_target(7, 12);
        let p = Ar1Proposal::custom(
            vec![0.3, 0.1, -0.2, 0.6, 0.4, 0.0, 0.8],
            vec![0.4, 0.9, 0.5, 0.2, 1.1, 0.7, 0.05],
            vec![1.0, 0.5, -0.5, 0.0, 0.2, -0.1, 0.3],
            t.basis().cloned(),
        )
        .unwrap();
        let gap = gap_terms(&t, &p).unwrap();
        let mut expansion = 0.0;
        for i in 0..7 {
            let (l2, lt2, g, rh) = (gap.lambda2[i], gap.lambda2_tilde[i], gap.g[i], gap.r_hat[i]);
            expansion += -0.5 * (l2 - lt2).powi(2) / (l2 * lt2) * (1.0 - g * g) - rh * rh * l2 * (1.0 - g)
                + 0.5 * rh * rh * (l2 - lt2) * (1.0 - g * g);
        }
        assert!((gap.mu_total() - expansion).abs() < 1e-10);
    }

    #[test]
    fn limit_acceptance_examples() {
        assert_eq!(limit_acceptance(0.0, 0.0).unwrap(), 1.0);
        assert_relative_eq!(limit_acceptance(-0.5, 0.0).unwrap(), (-0.5f64).exp());
        assert_relative_eq!(
            limit_acceptance(-0.5, 1.0).unwrap(),
            2.0 * normal::cdf(-0.5),
            epsilon = 1e-14
        );
        assert!((limit_acceptance(-0.5, 1.0).unwrap() - 0.617075).abs() < 1e-6);
        let s = 2.0 * 0.5620;
        assert!((limit_acceptance(-0.5 * s * s, s).unwrap() - 0.574).abs() < 1e-3);
        assert!(limit_acceptance(f64::NAN, 1.0).is_err());
        assert!(limit_acceptance(0.0, -1.0).is_err());
        // far tail stays finite
        let v = limit_acceptance(-800.0, 40.0).unwrap();
        assert!(v.is_finite() && (0.0..=1.0).contains(&v));
    }

    proptest! {
        #[test]
        fn limit_acceptance_in_unit_interval(mu in -50.0f64..50.0, sigma in 0.0f64..20.0) {
            let a = limit_acceptance(mu, sigma).unwrap();
            prop_assert!(a > 0.0 && a <= 1.0);
        }

        #[test]
        fn balanced_mean_gives_two_phi(sigma in 0.01f64..10.0) {
            let a = limit_acceptance(-0.5 * sigma * sigma, sigma).unwrap();
            prop_assert!((a - 2.0 * normal::cdf(-0.5 * sigma)).abs() < 1e-12);
        }
    }

    #[test]
    fn limit_acceptance_matches_quadrature() {
        // E[1 ^ e^X] by trapezoidal quadrature
        for &(mu, s) in &[(-0.3, 0.8), (0.4, 1.5), (-2.0, 0.3)] {
            let n = 200_000;
            let (lo, hi) = (mu - 12.0 * s, mu + 12.0 * s);
            let dx = (hi - lo) / n as f64;
            let mut acc = 0.0;
            for k in 0..=n {
                let x = lo + k as f64 * dx;
                let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                acc += w * x.min(0.0).exp() * normal::pdf((x - mu) / s) / s * dx;
            }
            assert!((acc - limit_acceptance(mu, s).unwrap()).abs() < 1e-8);
        }
    }

    #[test]
    fn pcn_prediction_is_one() {
        let t = random_target(5, 2);
        let p = acceptance_prediction(&t, &Ar1Proposal::pcn(0.2, &t).unwrap()).unwrap();
        assert_eq!(p.acceptance, 1.0);
        assert_eq!(p.mu, 0.0);
        assert_eq!(p.sigma2, 0.0);
        assert_eq!(p.lyapunov, Some([0.0; 5]));
    }

    #[test]
    fn scalar_sla_prediction_matches_mc_of_its_own_gaussian() {
        // one mode: Z is exactly the quadratic form, so the Gaussian law is an
        // approximation; compare the formula with MC of E[1 ^ e^X], X ~ N(mu, sigma^2)
        let t = SpectralTarget::centered(vec![1.0]).unwrap();
        let p = Ar1Proposal::sla(0.5, &t).unwrap();
        let pred = acceptance_prediction(&t, &p).unwrap();
        let mut rng = rng_from_seed(5);
        let n = 1_000_000;
        let sd = pred.sigma2.sqrt();
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let x = pred.mu + sd * rng.sample::<f64, _>(StandardNormal);
            let a = x.min(0.0).exp();
            sum += a;
            sum2 += a * a;
        }
        let m = sum / n as f64;
        let se = ((sum2 / n as f64 - m * m) / n as f64).sqrt();
        assert!((m - pred.acceptance).abs() < 3.0 * se);
    }

    #[test]
    fn lyapunov_examples() {
        let d = 16;
        let mut gap = gap_terms(
            &SpectralTarget::centered(vec![1.0; d]).unwrap(),
            &Ar1Proposal::sla(0.3, &SpectralTarget::centered(vec![1.0; d]).unwrap()).unwrap(),
        )
        .unwrap();
        let r = lyapunov_diagnostic(&gap, 1.0).unwrap();
        // SLA has no mean gap: T1 = T2 = 0, T3..T5 exchangeable
        assert_eq!(r[0], 0.0);
        assert_eq!(r[1], 0.0);
        for &x in &r[2..] {
            assert_relative_eq!(x, (d as f64).powf(-0.5), epsilon = 1e-12);
        }
        let r2 = lyapunov_diagnostic(&gap, 2.0).unwrap();
        assert_relative_eq!(r2[2], 1.0 / d as f64, epsilon = 1e-12);
        for j in 3..6 {
            for i in 1..d {
                gap.t[j][i] = 0.0;
            }
        }
        let single = lyapunov_diagnostic(&gap, 1.0).unwrap();
        assert_relative_eq!(single[2], 1.0, epsilon = 1e-12);
        assert!(lyapunov_diagnostic(&gap, 0.0).is_err());
    }

    #[test]
    fn sla_large_d_lyapunov_is_small() {
        let t = SpectralTarget::centered(vec![1.0; 10_000]).unwrap();
        let p = Ar1Proposal::sla(0.12, &t).unwrap();
        let r = lyapunov_diagnostic(&gap_terms(&t, &p).unwrap(), 1.0).unwrap();
        assert!(r.iter().all(|&x| x < 0.05));
    }

    #[test]
    fn pcn_jump_is_two_one_minus_g_over_lambda2() {
        let t = random_target(4, 6);
        let p = Ar1Proposal::pcn(0.6, &t).unwrap();
        let gap = gap_terms(&t, &p).unwrap();
        for i in 0..4 {
            let j = jump_from_gap(&gap, i).unwrap();
            assert_eq!(j.u2, 1.0);
            let expect = 2.0 * (1.0 - p.g()[i]) / t.eigenvalues()[i];
            assert_relative_eq!(j.value, expect, max_relative = 1e-12);
            assert_relative_eq!(j.simplified, expect, max_relative = 1e-12);
        }
        assert!(matches!(jump_from_gap(&gap, 4), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn jump_theorem_and_lemma_agree_within_u3() {
        for seed in 0..10 {
            let t = random_target(30, 100 + seed);
            let p = Ar1Proposal::theta_sla(0.2, 0.05, &t).unwrap();
            let gap = gap_terms(&t, &p).unwrap();
            for j in jump_predictions_all(&gap).unwrap() {
                assert!((j.value - j.simplified).abs() <= j.u3 + 1e-12, "{j:?}");
            }
        }
    }

    #[test]
    fn all_modes_match_single_mode_path() {
        let t = random_target(8, 44);
        let p = Ar1Proposal::sla(0.2, &t).unwrap();
        let gap = gap_terms(&t, &p).unwrap();
        let all = jump_predictions_all(&gap).unwrap();
        for (i, j) in all.iter().enumerate() {
            assert_eq!(*j, jump_from_gap(&gap, i).unwrap());
        }
    }

    #[test]
    fn langevin_limit_examples() {
        let ones = vec![1.0; 1000];
        let half = langevin_limits(0.0, 1.0, 0.5, &ones).unwrap();
        assert_eq!(half.acceptance, 1.0);
        assert!(!half.notes.is_empty());
        let s0: f64 = 0.825_15;
        let l = (8.0 * s0.powi(3)).cbrt();
        let sla = langevin_limits(0.0, l, 0.0, &ones).unwrap();
        assert!((sla.acceptance - 0.574).abs() < 1e-3);
        assert_relative_eq!(sla.tau.unwrap(), 1.0);
        assert_relative_eq!(sla.tau_integral.unwrap(), 1.0);
        assert_relative_eq!(
            sla.acceptance,
            limit_acceptance(sla.mu, sla.sigma2.sqrt()).unwrap(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn tau_partial_sum_vs_integral() {
        let lam2: Vec<f64> = (1..=1000).map(|i| (i * i) as f64).collect();
        let p = langevin_limits(1.0, 1.0, 0.0, &lam2).unwrap();
        let exact: f64 = (1..=1000u64).map(|i| (i as f64).powi(6)).sum::<f64>() / 1000f64.powi(7);
        assert_relative_eq!(p.tau.unwrap(), exact, max_relative = 1e-12);
        assert_relative_eq!(p.tau_integral.unwrap(), 1.0 / 7.0, max_relative = 1e-12);
        assert!((exact * 7.0 - 1.0).abs() < 0.01);
    }

    #[test]
    fn multistep_one_step_is_sla() {
        let ones = vec![1.0; 200];
        let a = multistep_sla_limits(0.0, 1.3, 1, &ones).unwrap();
        let b = langevin_limits(0.0, 1.3, 0.0, &ones).unwrap();
        assert_relative_eq!(a.acceptance, b.acceptance, epsilon = 1e-12);
        assert_relative_eq!(a.jump[0].value, b.jump[0].value, epsilon = 1e-12);
        assert!(multistep_sla_limits(0.0, 1.3, 0, &ones).is_err());
    }

    #[test]
    fn multistep_optimum_is_the_same_acceptance() {
        let ones = vec![1.0; 100];
        let s0: f64 = 0.825_15;
        for steps in [1usize, 2, 3, 5, 8] {
            // s = l (L tau)^{1/6} / 2
            let l = 2.0 * s0 / (steps as f64).powf(1.0 / 6.0);
            let p = multistep_sla_limits(0.0, l, steps, &ones).unwrap();
            assert!((p.acceptance - 0.574).abs() < 1e-3);
        }
    }

    #[test]
    fn hmc_limit_examples() {
        // lambda = 1, T' = 2 pi: zero jump
        let ones = vec![1.0; 16];
        let l = 16f64.powf(0.25) * 2.0 * std::f64::consts::PI / 100.0; // h = 2 pi / 100
        let p = hmc_limits(0.0, l, 2.0 * std::f64::consts::PI + 1e-9, &ones, &[0]).unwrap();
        assert_eq!(p.steps, Some(100));
        assert!(p.jump[0].value.abs() < 1e-12);
        // lambda = 2, T' = pi / 2: jump 4 / lambda^2 times acceptance
        let fours = vec![4.0; 16];
        let h = std::f64::consts::PI / 2.0 / 50.0;
        let p = hmc_limits(0.0, h * 2.0, std::f64::consts::PI / 2.0 + 1e-9, &fours, &[3]).unwrap();
        assert_relative_eq!(p.jump[0].value, 1.0 * p.acceptance, max_relative = 1e-10);
        assert!(hmc_limits(0.0, 1.0, 1.0, &ones, &[16]).is_err());
    }

    #[test]
    fn hmc_limit_at_quarter_period() {
        // tau = 1 at lambda = 1, T' = pi/2; l solves 2 Phi(-l^2/8) = 0.651
        let l2 = -8.0 * normal::quantile(0.651 / 2.0);
        let d = 10_000usize;
        let h = l2.sqrt() * (d as f64).powf(-0.25);
        let steps = (std::f64::consts::FRAC_PI_2 / h).round();
        let t_prime = steps * h;
        let tau = tau_hmc(&vec![1.0; d], 0.0, t_prime);
        assert!((tau - t_prime.sin().powi(2)).abs() < 1e-12);
        let exact = tau_hmc(&[1.0], 0.0, std::f64::consts::FRAC_PI_2);
        assert_relative_eq!(exact, 1.0, epsilon = 1e-15);
        let p = hmc_limits(
            0.0,
            l2.sqrt(),
            std::f64::consts::FRAC_PI_2 / h * h + 1e-12,
            &[1.0; 4],
            &[],
        )
        .unwrap();
        assert!(p.acceptance > 0.6);
    }

    #[test]
    fn bounds_examples() {
        assert_eq!(nongaussian_bounds(0.0, 0.7).unwrap(), (0.7, 0.7));
        let (lo, hi) = nongaussian_bounds(0.1, 0.574).unwrap();
        assert!((lo - 0.4252).abs() < 1e-4);
        assert!((hi - 0.7748).abs() < 1e-4);
        let (lo2, hi2) = nongaussian_bounds(0.2, 0.574).unwrap();
        assert!(lo2 < lo && hi2 > hi);
        assert!(nongaussian_bounds(-0.1, 0.5).is_err());
    }

    #[test]
    fn nongaussian_correction_examples() {
        let t = random_target(5, 8);
        let p = Ar1Proposal::custom(
            vec![0.2, 0.3, 0.4, 0.5, 0.6],
            vec![0.5; 5],
            vec![0.1, 0.2, 0.3, 0.4, 0.5],
            t.basis().cloned(),
        )
        .unwrap();
        let gap = gap_terms(&t, &p).unwrap();
        let plain = nongaussian_mu_sigma(&gap, &[0.0; 5], &[1.0; 5]).unwrap();
        assert_eq!(plain.mu_ng, plain.mu);
        assert_eq!(plain.sigma2_ng, plain.sigma2);
        assert!(plain.same_as_gaussian);

        // pCN: T1 = T3 = 0 whatever the moments
        let pcn = gap_terms(&t, &Ar1Proposal::pcn(0.3, &t).unwrap()).unwrap();
        let any = nongaussian_mu_sigma(&pcn, &[0.3, -0.2, 0.1, 0.0, 0.5], &[1.5, 0.7, 1.0, 2.0, 0.9]).unwrap();
        assert_eq!(any.mu_ng, any.mu);
        assert_eq!(any.collapse, 0.0);

        // hand-set d = 2
        let mut g2 = gap_terms(
            &SpectralTarget::centered(vec![1.0, 1.0]).unwrap(),
            &Ar1Proposal::sla(0.2, &SpectralTarget::centered(vec![1.0, 1.0]).unwrap()).unwrap(),
        )
        .unwrap();
        g2.t[1] = vec![0.1, -0.2];
        g2.t[3] = vec![0.05, 0.02];
        let ng = nongaussian_mu_sigma(&g2, &[0.5, 1.0], &[1.2, 0.8]).unwrap();
        let c0 = 0.5 * 0.1 + 0.05 * 0.2;
        let c1 = 1.0 * -0.2 + 0.02 * -0.2;
        assert_relative_eq!(ng.mu_ng - ng.mu, c0 + c1, epsilon = 1e-15);
        assert_relative_eq!(ng.sigma2_ng - ng.sigma2, c0 * c0 + c1 * c1, epsilon = 1e-15);
        assert!(!ng.same_as_gaussian);
        assert!(nongaussian_mu_sigma(&g2, &[0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn nongaussian_jump_interval_examples() {
        let t = SpectralTarget::centered(vec![2.0, 3.0]).unwrap();
        let gap = gap_terms(&t, &Ar1Proposal::sla(0.1, &t).unwrap()).unwrap();
        let iv = nongaussian_jump_prediction(&gap, 0, 1.0, 0.8).unwrap();
        // r^ = 0: no cross term, width g~^2 / lambda^2
        assert_relative_eq!(iv.upper - iv.lower, gap.g_tilde[0].powi(2) / 2.0, epsilon = 1e-15);
        assert_relative_eq!(iv.lower, gap.g_hat[0] / gap.lambda2_tilde[0] * 0.8, epsilon = 1e-15);
        assert!(nongaussian_jump_prediction(&gap, 2, 1.0, 0.8).is_err());
    }
}
