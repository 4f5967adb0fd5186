//! Dense-matrix Gaussians and AR(1) kernels.
//!
//! These work for arbitrary `G`, `g`, `Sigma` (not necessarily functions of
//! the target precision) and evaluate everything from the raw definitions.
//! They back the reversibility check, coordinate transforms, and serve as the
//! independent route for the spectral formulas in tests.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::rng::rng_from_seed;

/// Unnormalized Gaussian `exp(-x^T P x / 2 + l^T x)`.
#[derive(Clone, Debug)]
pub struct DenseGaussian {
    pub precision: DMatrix<f64>,
    pub linear: DVector<f64>,
}

impl DenseGaussian {
    pub fn new(precision: DMatrix<f64>, linear: DVector<f64>) -> Result<Self> {
        let d = precision.nrows();
        if precision.ncols() != d {
            return Err(Error::invalid("precision must be square"));
        }
        check_dim(d, linear.len())?;
        Ok(Self { precision, linear })
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        -0.5 * x.dot(&(&self.precision * x)) + self.linear.dot(x)
    }

    pub fn mean(&self) -> Result<DVector<f64>> {
        self.precision
            .clone()
            .lu()
            .solve(&self.linear)
            .ok_or_else(|| Error::Singular("precision".into()))
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        self.precision
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular("precision".into()))
    }

    /// Exact draw via a Cholesky factor of the covariance.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let cov = self.covariance()?;
        let sym = (&cov + cov.transpose()) * 0.5;
        let chol = Cholesky::new(sym).ok_or_else(|| Error::Singular("covariance not s.p.d.".into()))?;
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        Ok(self.mean()? + chol.l() * z)
    }
}

/// General AR(1) kernel `y = G x + g + nu`, `nu ~ N(0, Sigma)`.
#[derive(Clone, Debug)]
pub struct DenseAr1 {
    pub g: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub noise: DMatrix<f64>,
    noise_chol: Cholesky<f64, Dyn>,
}

impl DenseAr1 {
    pub fn new(g: DMatrix<f64>, offset: DVector<f64>, noise: DMatrix<f64>) -> Result<Self> {
        let d = g.nrows();
        if g.ncols() != d || noise.nrows() != d || noise.ncols() != d {
            return Err(Error::invalid("G and Sigma must be square and of equal size"));
        }
        check_dim(d, offset.len())?;
        let sym = (&noise + noise.transpose()) * 0.5;
        let noise_chol = Cholesky::new(sym).ok_or_else(|| Error::invalid("noise covariance is not s.p.d."))?;
        Ok(Self {
            g,
            offset,
            noise,
            noise_chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    /// `log q(x, y)` up to an additive constant that does not depend on `x` or `y`.
    pub fn log_transition(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let r = y - &self.g * x - &self.offset;
        let s = self.noise_chol.solve(&r);
        -0.5 * r.dot(&s)
    }

    /// `G x + g + L xi` with `L L^T = Sigma`.
    pub fn propose_with_noise(&self, x: &DVector<f64>, xi: &DVector<f64>) -> DVector<f64> {
        &self.g * x + &self.offset + self.noise_chol.l() * xi
    }

    pub fn propose<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let xi = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        self.propose_with_noise(x, &xi)
    }

    /// Spectral radius of `G`.
    pub fn spectral_radius(&self) -> f64 {
        self.g
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// Equilibrium of the proposal chain from the series
    /// `A_prop^{-1} = sum_l G^l Sigma (G^T)^l`, `beta = A_prop (I - G)^{-1} g`.
    pub fn stationary(&self) -> Result<DenseGaussian> {
        let rho = self.spectral_radius();
        if rho >= 1.0 {
            return Err(Error::DivergentProposal { mode: 0, value: rho });
        }
        let d = self.dim();
        let mut cov = self.noise.clone();
        let mut term = self.noise.clone();
        for _ in 0..100_000 {
            term = &self.g * term * self.g.transpose();
            cov += &term;
            if term.amax() <= 1e-17 * cov.amax() {
                break;
            }
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        let precision = cov
            .try_inverse()
            .ok_or_else(|| Error::Singular("stationary covariance".into()))?;
        let mean = (DMatrix::<f64>::identity(d, d) - &self.g)
            .lu()
            .solve(&self.offset)
            .ok_or_else(|| Error::Singular("I - G".into()))?;
        let linear = &precision * mean;
        DenseGaussian::new(precision, linear)
    }

    /// Largest detailed-balance residual
    /// `|log pi*(x) + log q(x,y) - log pi*(y) - log q(y,x)|` over pairs with
    /// `x ~ pi*` and `y ~ q(x, .)`, `pi*` the proposal equilibrium.
    pub fn reversibility_residual(&self, trials: usize, seed: u64) -> Result<f64> {
        let eq = self.stationary()?;
        let mut rng = rng_from_seed(seed);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let x = eq.draw(&mut rng)?;
            let y = self.propose(&x, &mut rng);
            let fwd = eq.log_density(&x) + self.log_transition(&x, &y);
            let bwd = eq.log_density(&y) + self.log_transition(&y, &x);
            worst = worst.max((fwd - bwd).abs());
        }
        Ok(worst)
    }
}

/// `log [pi(y) q(y,x) / (pi(x) q(x,y))]` straight from the definitions.
pub fn log_mh_ratio(target: &DenseGaussian, kernel: &DenseAr1, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    target.log_density(y) + kernel.log_transition(y, x) - target.log_density(x) - kernel.log_transition(x, y)
}

/// Condition number `sigma_max / sigma_min` of a square matrix.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_stationary_matches_closed_form() {
        // G = 0.75, Sigma = 0.5: precision (1 - G^2) / Sigma = 0.875
        let k = DenseAr1::new(
            DMatrix::from_element(1, 1, 0.75),
            DVector::from_element(1, 0.25),
            DMatrix::from_element(1, 1, 0.5),
        )
        .unwrap();
        let eq = k.stationary().unwrap();
        assert!((eq.precision[(0, 0)] - 0.875).abs() < 1e-12);
        assert!((eq.mean().unwrap()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn divergent_kernel_is_rejected() {
        let k = DenseAr1::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert!(matches!(k.stationary(), Err(Error::DivergentProposal { .. })));
    }

    #[test]
    fn scalar_kernel_is_reversible() {
        let k = DenseAr1::new(
            DMatrix::from_element(1, 1, -0.4),
            DVector::from_element(1, 2.0),
            DMatrix::from_element(1, 1, 1.3),
        )
        .unwrap();
        assert!(k.reversibility_residual(200, 1).unwrap() < 1e-10);
    }

    #[test]
    fn condition_number_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5, 1.0]));
        assert!((condition_number(&m) - 4.0).abs() < 1e-12);
    }
}
