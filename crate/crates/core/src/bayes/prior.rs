//! Priors: `beta0 ~ N(0, 100)`, `beta_i | tau ~ DoubleExp(0, 1/tau)`,
//! `tau ~ chi-squared(1)`, `gamma ~ Dirichlet(1, ..., 1)`.

use std::f64::consts::PI;

use statrs::function::gamma::ln_gamma;

use crate::hazard::ModelParams;

pub const INTERCEPT_PRIOR_VARIANCE: f64 = 100.0;

pub fn ln_normal_intercept(beta0: f64) -> f64 {
    -0.5 * beta0 * beta0 / INTERCEPT_PRIOR_VARIANCE - 0.5 * (2.0 * PI * INTERCEPT_PRIOR_VARIANCE).ln()
}

/// Double-exponential log-density with rate `tau` (scale `1 / tau`).
pub fn ln_double_exponential(beta: f64, tau: f64) -> f64 {
    (tau / 2.0).ln() - tau * beta.abs()
}

pub fn ln_chi_squared_1(tau: f64) -> f64 {
    if !(tau > 0.0) {
        return f64::NEG_INFINITY;
    }
    -0.5 * tau.ln() - 0.5 * tau - 0.5 * (2.0 * PI).ln()
}

/// Dirichlet(1, ..., 1) log-density: `ln Gamma(L)` on the simplex.
pub fn ln_flat_dirichlet(gamma: &[f64]) -> f64 {
    let on_simplex = gamma.iter().all(|&g| g >= 0.0)
        && (gamma.iter().sum::<f64>() - 1.0).abs() <= crate::hazard::SIMPLEX_TOL;
    if on_simplex {
        ln_gamma(gamma.len() as f64)
    } else {
        f64::NEG_INFINITY
    }
}

/// Joint log-prior; `-inf` for `tau <= 0` or weights off the simplex.
pub fn log_prior(params: &ModelParams) -> f64 {
    if !(params.tau > 0.0) {
        return f64::NEG_INFINITY;
    }
    let dirichlet = ln_flat_dirichlet(&params.gamma);
    if dirichlet == f64::NEG_INFINITY {
        return dirichlet;
    }
    ln_normal_intercept(params.beta0)
        + params.beta.iter().map(|&b| ln_double_exponential(b, params.tau)).sum::<f64>()
        + ln_chi_squared_1(params.tau)
        + dirichlet
}
