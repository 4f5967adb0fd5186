//! Python bindings for `ar1mcmc`.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ar1mcmc::proposals::{Ar1Proposal, HmcSchedule, Mass};
use ar1mcmc::sampler::{run_chains, ChainOptions, Direction, Start};
use ar1mcmc::targets::{make_power_spectrum, SpectralTarget};
use ar1mcmc::theory;
use ar1mcmc::tuning;

fn err(e: ar1mcmc::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_mass(mass: &Bound<'_, PyAny>) -> PyResult<Mass> {
    if let Ok(s) = mass.extract::<String>() {
        return match s.as_str() {
            "identity" => Ok(Mass::Identity),
            "inverse-precision" => Ok(Mass::InversePrecision),
            _ => Err(PyValueError::new_err(format!("unknown mass {s:?}"))),
        };
    }
    Ok(Mass::Eigenvalues(mass.extract()?))
}

/// Gaussian target with precision eigenvalues `lambda_i^2`.
#[pyclass(name = "Target", module = "ar1mcmc_py", frozen)]
struct PyTarget {
    inner: SpectralTarget,
}

#[pymethods]
impl PyTarget {
    #[new]
    #[pyo3(signature = (eigenvalues, mean = None))]
    fn new(eigenvalues: Vec<f64>, mean: Option<Vec<f64>>) -> PyResult<Self> {
        let d = eigenvalues.len();
        let inner = SpectralTarget::diagonal(eigenvalues, mean.unwrap_or_else(|| vec![0.0; d])).map_err(err)?;
        Ok(Self { inner })
    }

    /// `lambda_i = c i^kappa`.
    #[staticmethod]
    #[pyo3(signature = (d, kappa = 0.0, c = 1.0))]
    fn power_law(d: usize, kappa: f64, c: f64) -> PyResult<Self> {
        let eig = make_power_spectrum(d, kappa, c, c, None).map_err(err)?;
        Ok(Self {
            inner: SpectralTarget::centered(eig).map_err(err)?,
        })
    }

    /// Target `exp(-x^T A x / 2 + b^T x)` from a dense precision.
    #[staticmethod]
    fn from_precision(a: Vec<Vec<f64>>, b: Vec<f64>) -> PyResult<Self> {
        let d = a.len();
        if a.iter().any(|r| r.len() != d) {
            return Err(PyValueError::new_err("precision must be square"));
        }
        let m = nalgebra::DMatrix::from_fn(d, d, |i, j| a[i][j]);
        Ok(Self {
            inner: SpectralTarget::from_precision(&m, &b).map_err(err)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn eigenvalues(&self) -> Vec<f64> {
        self.inner.eigenvalues().to_vec()
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.inner.mean().to_vec()
    }

    fn log_density(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.log_density(&x).map_err(err)
    }

    #[pyo3(signature = (n, seed = 0))]
    fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        self.inner.sample_gaussian(n, seed)
    }

    fn __repr__(&self) -> String {
        format!("Target(dim={})", self.inner.dim())
    }
}

/// Stationary AR(1) proposal `y = G x + g + nu`.
#[pyclass(name = "Proposal", module = "ar1mcmc_py", frozen)]
struct PyProposal {
    inner: Ar1Proposal,
}

#[pymethods]
impl PyProposal {
    #[staticmethod]
    fn sla(target: &PyTarget, h: f64) -> PyResult<Self> {
        Ar1Proposal::sla(h, &target.inner)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    #[staticmethod]
    fn theta_sla(target: &PyTarget, theta: f64, h: f64) -> PyResult<Self> {
        Ar1Proposal::theta_sla(theta, h, &target.inner)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    #[staticmethod]
    fn cn(target: &PyTarget, h: f64) -> PyResult<Self> {
        Ar1Proposal::cn(h, &target.inner)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    #[staticmethod]
    fn pcn(target: &PyTarget, h: f64) -> PyResult<Self> {
        Ar1Proposal::pcn(h, &target.inner)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    /// Theta-method Langevin proposal; `mass` is "identity",
    /// "inverse-precision" or a list of eigenvalues of `V`.
    #[staticmethod]
    fn langevin(target: &PyTarget, theta: f64, h: f64, mass: &Bound<'_, PyAny>) -> PyResult<Self> {
        let mass = parse_mass(mass)?;
        Ar1Proposal::langevin(theta, h, &target.inner, &mass)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (target, h, steps, mass = None))]
    fn hmc(target: &PyTarget, h: f64, steps: usize, mass: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let mass = mass.map(parse_mass).transpose()?.unwrap_or(Mass::Identity);
        let schedule = HmcSchedule::new(h, steps, mass).map_err(err)?;
        Ar1Proposal::hmc(&schedule, &target.inner)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    /// Per-mode `G_i`, `Sigma_i` and stationary mean in the target's eigenbasis.
    #[staticmethod]
    #[pyo3(signature = (target, g, noise, mean = None))]
    fn custom(target: &PyTarget, g: Vec<f64>, noise: Vec<f64>, mean: Option<Vec<f64>>) -> PyResult<Self> {
        let mean = mean.unwrap_or_else(|| target.inner.mean().to_vec());
        Ar1Proposal::custom(g, noise, mean, target.inner.basis().cloned())
            .map(|inner| Self { inner })
            .map_err(err)
    }

    fn compose(&self, steps: usize) -> PyResult<Self> {
        self.inner.compose_steps(steps).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn family(&self) -> String {
        self.inner.family().to_string()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn g(&self) -> Vec<f64> {
        self.inner.g().to_vec()
    }

    #[getter]
    fn noise(&self) -> Vec<f64> {
        self.inner.noise().to_vec()
    }

    #[getter]
    fn stationary_precision(&self) -> Vec<f64> {
        self.inner.stationary_precision().to_vec()
    }

    #[pyo3(signature = (x, seed = 0))]
    fn propose(&self, x: Vec<f64>, seed: u64) -> PyResult<Vec<f64>> {
        let mut rng = ar1mcmc::rng::rng_from_seed(seed);
        self.inner.propose(&x, &mut rng).map_err(err)
    }

    #[pyo3(signature = (trials = 1000, seed = 0))]
    fn reversibility_residual(&self, trials: usize, seed: u64) -> PyResult<f64> {
        self.inner.check_reversibility(trials, seed).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Proposal(family={}, dim={})", self.inner.family(), self.inner.dim())
    }
}

/// `E[1 ^ e^X]` for `X ~ N(mu, sigma^2)`.
#[pyfunction]
fn limit_acceptance(mu: f64, sigma: f64) -> PyResult<f64> {
    theory::limit_acceptance(mu, sigma).map_err(err)
}

/// Finite-dimensional acceptance prediction.
#[pyfunction]
fn predict_acceptance<'py>(py: Python<'py>, target: &PyTarget, proposal: &PyProposal) -> PyResult<Bound<'py, PyDict>> {
    let p = theory::acceptance_prediction(&target.inner, &proposal.inner).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("mu", p.mu)?;
    d.set_item("sigma2", p.sigma2)?;
    d.set_item("acceptance", p.acceptance)?;
    d.set_item("lyapunov", p.lyapunov.map(|l| l.to_vec()))?;
    d.set_item("lyapunov_ok", p.lyapunov_ok)?;
    Ok(d)
}

/// Expected squared jump along eigenvector `mode`.
#[pyfunction]
fn predict_jump<'py>(
    py: Python<'py>,
    target: &PyTarget,
    proposal: &PyProposal,
    mode: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let j = theory::jump_prediction(&target.inner, &proposal.inner, mode).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("u1", j.u1)?;
    d.set_item("u2", j.u2)?;
    d.set_item("u3", j.u3)?;
    d.set_item("value", j.value)?;
    d.set_item("simplified", j.simplified)?;
    d.set_item("acceptance", j.acceptance)?;
    Ok(d)
}

/// Runs `chains` MH chains from equilibrium and returns acceptance and jump estimates.
#[pyfunction]
#[pyo3(signature = (target, proposal, n_steps, directions = vec!["axis-mean".to_string()], seed = 0, chains = 1))]
fn sample<'py>(
    py: Python<'py>,
    target: &PyTarget,
    proposal: &PyProposal,
    n_steps: usize,
    directions: Vec<String>,
    seed: u64,
    chains: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let dirs: Vec<Direction> = directions
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let stats = py
        .detach(|| {
            run_chains(
                &target.inner,
                &proposal.inner,
                &Start::Equilibrium,
                n_steps,
                &dirs,
                &ChainOptions::default(),
                seed,
                chains,
            )
        })
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("steps", stats.steps)?;
    d.set_item("accepts", stats.accepts)?;
    d.set_item("mean_alpha", stats.mean_alpha())?;
    d.set_item("alpha_stderr", stats.alpha_stderr())?;
    d.set_item("accept_rate", stats.accept_rate())?;
    let jumps = PyDict::new(py);
    for (k, dir) in directions.iter().enumerate() {
        jumps.set_item(dir, (stats.jump(k), stats.jump_stderr(k)))?;
    }
    d.set_item("jumps", jumps)?;
    Ok(d)
}

/// `(s0, acceptance)` maximizing `s^2 Phi(-s^3)`.
#[pyfunction]
fn optimal_scaling_langevin() -> (f64, f64) {
    let o = tuning::optimal_scaling_langevin();
    (o.s0, o.acceptance)
}

/// `(s0, acceptance)` maximizing `sqrt(s) Phi(-s)`.
#[pyfunction]
fn optimal_scaling_hmc() -> (f64, f64) {
    let o = tuning::optimal_scaling_hmc();
    (o.s0, o.acceptance)
}

#[pyfunction]
#[pyo3(signature = (t = 0.0, max_steps = 20))]
fn optimal_multistep<'py>(py: Python<'py>, t: f64, max_steps: usize) -> PyResult<Bound<'py, PyDict>> {
    let r = tuning::optimal_multistep(t, max_steps).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("recommended_l", r.recommended_l)?;
    d.set_item("continuous_optimum", r.continuous_optimum)?;
    d.set_item("efficiency_curve", r.efficiency_curve)?;
    Ok(d)
}

/// SLA step size (optionally `steps` composed) whose predicted acceptance is `target_acceptance`.
#[pyfunction]
#[pyo3(signature = (target, target_acceptance, steps = 1))]
fn tune_sla_step(target: &PyTarget, target_acceptance: f64, steps: usize) -> PyResult<f64> {
    let t = &target.inner;
    let bmax = t.eigenvalues().iter().cloned().fold(0.0, f64::max);
    tuning::tune_step_to_acceptance(
        t,
        |h| Ar1Proposal::sla(h, t)?.compose_steps(steps),
        target_acceptance,
        1e-10 / bmax,
        0.999 * 4.0 / bmax,
    )
    .map_err(err)
}

#[pymodule]
pub fn ar1mcmc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTarget>()?;
    m.add_class::<PyProposal>()?;
    m.add_function(wrap_pyfunction!(limit_acceptance, m)?)?;
    m.add_function(wrap_pyfunction!(predict_acceptance, m)?)?;
    m.add_function(wrap_pyfunction!(predict_jump, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_scaling_langevin, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_scaling_hmc, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_multistep, m)?)?;
    m.add_function(wrap_pyfunction!(tune_sla_step, m)?)?;
    Ok(())
}
