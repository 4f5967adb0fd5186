//! Standard normal helpers shared by the theory and tuning code.

use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use std::sync::OnceLock;

fn standard() -> &'static Normal {
    static N: OnceLock<Normal> = OnceLock::new();
    N.get_or_init(Normal::standard)
}

/// Standard normal cumulative distribution function.
pub fn cdf(x: f64) -> f64 {
    standard().cdf(x)
}

/// Standard normal density.
pub fn pdf(x: f64) -> f64 {
    standard().pdf(x)
}

/// Inverse of [`cdf`] on (0, 1).
pub fn quantile(p: f64) -> f64 {
    standard().inverse_cdf(p)
}
