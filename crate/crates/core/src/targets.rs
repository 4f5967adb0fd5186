//! Gaussian reference targets `N(A^{-1} b, A^{-1})` stored through the
//! eigendecomposition `A = Q diag(lambda^2) Q^T`, and bounded changes of
//! measure `d pi / d pi_ref = exp(-phi)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{StandardNormal, Uniform};

use crate::error::{check_dim, Error, Result};
use crate::rng::rng_from_seed;

const ORTHO_TOL: f64 = 1e-10;

/// Precision eigenvalues `lambda_i^2 = (c i^kappa)^2`, `i = 1..=d`.
///
/// With `jitter_seed` set, each `lambda_i` is drawn uniformly from
/// `[c i^kappa, c_upper i^kappa]` instead of sitting on the lower envelope.
pub fn make_power_spectrum(d: usize, kappa: f64, c: f64, c_upper: f64, jitter_seed: Option<u64>) -> Result<Vec<f64>> {
    if d == 0 {
        return Err(Error::invalid("dimension must be at least 1"));
    }
    if !(c > 0.0) {
        return Err(Error::invalid(format!("spectrum constant c must be > 0, got {c}")));
    }
    if !(kappa >= 0.0) {
        return Err(Error::invalid(format!("kappa must be >= 0, got {kappa}")));
    }
    if !(c_upper >= c) {
        return Err(Error::invalid(format!("upper constant {c_upper} below c = {c}")));
    }
    let spectrum = match jitter_seed {
        None => (1..=d)
            .map(|i| {
                let lam = c * (i as f64).powf(kappa);
                lam * lam
            })
            .collect(),
        Some(seed) => {
            let mut rng = rng_from_seed(seed);
            let unit = Uniform::new_inclusive(0.0, 1.0).expect("unit interval");
            (1..=d)
                .map(|i| {
                    let ik = (i as f64).powf(kappa);
                    let lam = c * ik + (c_upper - c) * ik * rng.sample(unit);
                    lam * lam
                })
                .collect()
        }
    };
    Ok(spectrum)
}

/// Gaussian target held in spectral form.
///
/// `eigenvalues` are the precision eigenvalues `lambda_i^2` in basis order.
/// Without a basis the precision matrix is `diag(eigenvalues)`.
#[derive(Clone, Debug)]
pub struct SpectralTarget {
    eigenvalues: Vec<f64>,
    basis: Option<Arc<DMatrix<f64>>>,
    mean: Vec<f64>,
    mean_eigen: Vec<f64>,
}

impl SpectralTarget {
    pub fn diagonal(eigenvalues: Vec<f64>, mean: Vec<f64>) -> Result<Self> {
        check_dim(eigenvalues.len(), mean.len())?;
        validate_eigenvalues(&eigenvalues)?;
        Ok(Self {
            mean_eigen: mean.clone(),
            eigenvalues,
            basis: None,
            mean,
        })
    }

    /// Zero-mean diagonal target.
    pub fn centered(eigenvalues: Vec<f64>) -> Result<Self> {
        let d = eigenvalues.len();
        Self::diagonal(eigenvalues, vec![0.0; d])
    }

    /// Target with an explicit orthogonal basis `Q` (columns are eigenvectors).
    pub fn with_basis(eigenvalues: Vec<f64>, basis: DMatrix<f64>, mean: Vec<f64>) -> Result<Self> {
        Self::with_shared_basis(eigenvalues, Arc::new(basis), mean)
    }

    pub fn with_shared_basis(eigenvalues: Vec<f64>, basis: Arc<DMatrix<f64>>, mean: Vec<f64>) -> Result<Self> {
        let d = eigenvalues.len();
        check_dim(d, mean.len())?;
        validate_eigenvalues(&eigenvalues)?;
        if basis.nrows() != d || basis.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: basis.nrows(),
            });
        }
        let gram = basis.transpose() * basis.as_ref();
        let dev = (gram - DMatrix::<f64>::identity(d, d)).amax();
        if dev > ORTHO_TOL {
            return Err(Error::invalid(format!(
                "basis is not orthogonal: max |Q^T Q - I| = {dev:e}"
            )));
        }
        let mean_eigen = (basis.transpose() * DVector::from_column_slice(&mean))
            .as_slice()
            .to_vec();
        Ok(Self {
            eigenvalues,
            basis: Some(basis),
            mean,
            mean_eigen,
        })
    }

    /// Builds the target from a dense precision matrix `A` and linear term `b`,
    /// i.e. density proportional to `exp(-x^T A x / 2 + b^T x)`.
    pub fn from_precision(a: &DMatrix<f64>, b: &[f64]) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d {
            return Err(Error::invalid("precision matrix must be square"));
        }
        check_dim(d, b.len())?;
        let asym = (a - a.transpose()).amax();
        if asym > 1e-10 * a.amax().max(1.0) {
            return Err(Error::invalid(format!(
                "precision matrix not symmetric (max asymmetry {asym:e})"
            )));
        }
        let sym = (a + a.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        if let Some(bad) = eigenvalues.iter().position(|&l| !(l > 0.0)) {
            return Err(Error::invalid(format!(
                "precision matrix is not positive definite (eigenvalue {} = {:e})",
                bad, eigenvalues[bad]
            )));
        }
        let mut q = DMatrix::<f64>::zeros(d, d);
        for (col, &src) in order.iter().enumerate() {
            q.set_column(col, &eig.eigenvectors.column(src));
        }
        // mean = Q diag(1/lambda^2) Q^T b
        let bhat = q.transpose() * DVector::from_column_slice(b);
        let mhat = DVector::from_iterator(d, bhat.iter().zip(&eigenvalues).map(|(bi, l)| bi / l));
        let mean = (&q * &mhat).as_slice().to_vec();
        Self::with_basis(eigenvalues, q, mean)
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Precision eigenvalues `lambda_i^2`.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn basis(&self) -> Option<&Arc<DMatrix<f64>>> {
        self.basis.as_ref()
    }

    /// Mean `A^{-1} b` in original coordinates.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Mean expressed in eigen-coordinates, `Q^T A^{-1} b`.
    pub fn mean_eigen(&self) -> &[f64] {
        &self.mean_eigen
    }

    /// Same spectrum and basis, different mean.
    pub fn with_mean(&self, mean: Vec<f64>) -> Result<Self> {
        match &self.basis {
            None => Self::diagonal(self.eigenvalues.clone(), mean),
            Some(q) => Self::with_shared_basis(self.eigenvalues.clone(), q.clone(), mean),
        }
    }

    /// `Q^T x`; identity without a basis.
    pub fn to_eigen(&self, x: &[f64]) -> Vec<f64> {
        to_eigen(self.basis.as_deref(), x)
    }

    /// `Q x_hat`; identity without a basis.
    pub fn from_eigen(&self, xh: &[f64]) -> Vec<f64> {
        from_eigen(self.basis.as_deref(), xh)
    }

    pub fn precision_matrix(&self) -> DMatrix<f64> {
        self.assemble(|l| l)
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        self.assemble(|l| 1.0 / l)
    }

    fn assemble(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let d = self.dim();
        let diag = DMatrix::from_diagonal(&DVector::from_iterator(d, self.eigenvalues.iter().map(|&l| f(l))));
        match &self.basis {
            None => diag,
            Some(q) => q.as_ref() * diag * q.transpose(),
        }
    }

    /// Linear term `b = A * mean`.
    pub fn linear_term(&self) -> Vec<f64> {
        let bh: Vec<f64> = self
            .eigenvalues
            .iter()
            .zip(&self.mean_eigen)
            .map(|(l, m)| l * m)
            .collect();
        self.from_eigen(&bh)
    }

    /// Unnormalized log density `-x^T A x / 2 + b^T x`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.log_density_eigen(&self.to_eigen(x)))
    }

    /// [`Self::log_density`] for a point already in eigen-coordinates.
    pub fn log_density_eigen(&self, xh: &[f64]) -> f64 {
        self.eigenvalues
            .iter()
            .zip(&self.mean_eigen)
            .zip(xh)
            .map(|((l, m), x)| l * x * (m - 0.5 * x))
            .sum()
    }

    /// One exact draw `A^{-1} b + Q diag(1/lambda) xi`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let xh = self.draw_eigen(rng);
        self.from_eigen(&xh)
    }

    /// Exact draw in eigen-coordinates.
    pub fn draw_eigen<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.eigenvalues
            .iter()
            .zip(&self.mean_eigen)
            .map(|(l, m)| {
                let z: f64 = rng.sample(StandardNormal);
                m + z / l.sqrt()
            })
            .collect()
    }

    /// `n` i.i.d. exact draws; deterministic for a fixed seed.
    pub fn sample_gaussian(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| self.draw(&mut rng)).collect()
    }

    /// Whether `other` uses the same eigenbasis (pointer or entrywise equality).
    pub fn same_basis(&self, other: Option<&Arc<DMatrix<f64>>>) -> bool {
        same_basis(self.basis.as_ref(), other)
    }
}

fn validate_eigenvalues(eigenvalues: &[f64]) -> Result<()> {
    if eigenvalues.is_empty() {
        return Err(Error::invalid("dimension must be at least 1"));
    }
    if let Some(i) = eigenvalues.iter().position(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(Error::invalid(format!(
            "precision eigenvalue {i} must be positive and finite, got {}",
            eigenvalues[i]
        )));
    }
    Ok(())
}

pub(crate) fn same_basis(a: Option<&Arc<DMatrix<f64>>>, b: Option<&Arc<DMatrix<f64>>>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => Arc::ptr_eq(x, y) || x.as_ref() == y.as_ref(),
        _ => false,
    }
}

pub(crate) fn to_eigen(basis: Option<&DMatrix<f64>>, x: &[f64]) -> Vec<f64> {
    match basis {
        None => x.to_vec(),
        Some(q) => (q.transpose() * DVector::from_column_slice(x)).as_slice().to_vec(),
    }
}

pub(crate) fn from_eigen(basis: Option<&DMatrix<f64>>, xh: &[f64]) -> Vec<f64> {
    match basis {
        None => xh.to_vec(),
        Some(q) => (q * DVector::from_column_slice(xh)).as_slice().to_vec(),
    }
}

/// The perturbation `phi` of a change of measure.
pub type Potential = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Regularity constants attached to a perturbation. Carried along for
/// bookkeeping only; nothing in the crate computes with them.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Regularity {
    pub s: f64,
    pub s_prime: f64,
    pub s_double_prime: f64,
    pub growth_constant: f64,
    pub growth_power: f64,
}

/// Target with density proportional to `exp(-phi(x)) * pi_ref(x)`.
#[derive(Clone)]
pub struct PerturbedTarget {
    base: SpectralTarget,
    phi: Potential,
    bound: Option<f64>,
    lower: Option<f64>,
    regularity: Option<Regularity>,
}

impl fmt::Debug for PerturbedTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PerturbedTarget")
            .field("base", &self.base)
            .field("bound", &self.bound)
            .field("lower", &self.lower)
            .field("regularity", &self.regularity)
            .finish_non_exhaustive()
    }
}

/// Output of [`PerturbedTarget::sample_perturbed`].
#[derive(Clone, Debug)]
pub struct RejectionDraws {
    pub samples: Vec<Vec<f64>>,
    /// Fraction of reference draws that were kept.
    pub acceptance: f64,
}

impl PerturbedTarget {
    pub fn new(base: SpectralTarget, phi: Potential) -> Self {
        Self {
            base,
            phi,
            bound: None,
            lower: None,
            regularity: None,
        }
    }

    /// `phi` with `|phi| <= bound`; also sets the lower bound to `-bound`
    /// unless a tighter one is supplied later.
    pub fn with_bound(mut self, bound: f64) -> Result<Self> {
        if !(bound >= 0.0) {
            return Err(Error::invalid(format!("bound M must be >= 0, got {bound}")));
        }
        self.bound = Some(bound);
        if self.lower.is_none() {
            self.lower = Some(-bound);
        }
        Ok(self)
    }

    pub fn with_lower_bound(mut self, lower: f64) -> Self {
        self.lower = Some(lower);
        self
    }

    pub fn with_regularity(mut self, regularity: Regularity) -> Self {
        self.regularity = Some(regularity);
        self
    }

    pub fn base(&self) -> &SpectralTarget {
        &self.base
    }

    pub fn bound(&self) -> Option<f64> {
        self.bound
    }

    pub fn lower_bound(&self) -> Option<f64> {
        self.lower
    }

    pub fn regularity(&self) -> Option<&Regularity> {
        self.regularity.as_ref()
    }

    pub fn phi(&self, x: &[f64]) -> f64 {
        (self.phi)(x)
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.base.log_density(x)? - self.phi(x))
    }

    /// Largest `|phi(x)|` over `points` when it exceeds the declared bound.
    pub fn check_bound(&self, points: &[Vec<f64>]) -> Result<()> {
        let Some(m) = self.bound else { return Ok(()) };
        for p in points {
            let v = self.phi(p);
            if v.abs() > m * (1.0 + 1e-12) {
                return Err(Error::invalid(format!(
                    "|phi(x)| = {} exceeds declared bound {m}",
                    v.abs()
                )));
            }
        }
        Ok(())
    }

    /// One exact draw by rejection from the reference Gaussian. Returns the
    /// draw and the number of reference proposals it took.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Vec<f64>, u64)> {
        let m = self
            .lower
            .ok_or_else(|| Error::Unsupported("exact sampling needs a lower bound m with phi >= m".into()))?;
        let mut tries = 0u64;
        loop {
            tries += 1;
            let x = self.base.draw(rng);
            let keep = (-(self.phi(&x) - m)).exp();
            let u: f64 = rng.random();
            if u < keep {
                return Ok((x, tries));
            }
        }
    }

    /// `n` exact draws by rejection with envelope `exp(-m)`.
    pub fn sample_perturbed(&self, n: usize, seed: u64) -> Result<RejectionDraws> {
        let mut rng = rng_from_seed(seed);
        let mut samples = Vec::with_capacity(n);
        let mut tries = 0u64;
        for _ in 0..n {
            let (x, t) = self.draw(&mut rng)?;
            tries += t;
            samples.push(x);
        }
        let acceptance = if tries == 0 { 1.0 } else { n as f64 / tries as f64 };
        Ok(RejectionDraws { samples, acceptance })
    }
}

/// Anything the sampler can target: a Gaussian reference plus an optional
/// perturbation.
pub trait Target: Send + Sync {
    fn gaussian(&self) -> &SpectralTarget;

    /// `phi(x)`; zero for a pure Gaussian.
    fn potential(&self, _x: &[f64]) -> f64 {
        0.0
    }

    fn is_perturbed(&self) -> bool {
        false
    }

    fn dim(&self) -> usize {
        self.gaussian().dim()
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.gaussian().log_density(x)? - self.potential(x))
    }

    /// Exact equilibrium draw, or `None` if the target cannot be sampled directly.
    fn exact_draw(&self, rng: &mut dyn rand::RngCore) -> Option<Vec<f64>>;
}

impl Target for SpectralTarget {
    fn gaussian(&self) -> &SpectralTarget {
        self
    }

    fn exact_draw(&self, rng: &mut dyn rand::RngCore) -> Option<Vec<f64>> {
        Some(self.draw(rng))
    }
}

impl Target for PerturbedTarget {
    fn gaussian(&self) -> &SpectralTarget {
        &self.base
    }

    fn potential(&self, x: &[f64]) -> f64 {
        self.phi(x)
    }

    fn is_perturbed(&self) -> bool {
        true
    }

    fn exact_draw(&self, rng: &mut dyn rand::RngCore) -> Option<Vec<f64>> {
        self.draw(rng).ok().map(|(x, _)| x)
    }
}
