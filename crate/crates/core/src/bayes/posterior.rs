//! Log-posterior on the unconstrained space used by the sampler.
//!
//! Layout of the unconstrained vector:
//! `[beta0, beta_1..beta_p, z_1..z_{L-1}, ln tau]`, where the baseline
//! weights are the additive log-ratio inverse
//! `gamma_l = exp(z_l) / (1 + sum exp(z))`, `gamma_L = 1 / (1 + sum exp(z))`.
//! Log-Jacobians of both transforms are included.

use serde::{Deserialize, Serialize};

use crate::hazard::ModelParams;

use super::likelihood::PreparedCohort;
use super::prior::{ln_chi_squared_1, ln_normal_intercept, INTERCEPT_PRIOR_VARIANCE};
use super::sampler::LogDensity;

/// How the non-differentiable `|beta|` of the lasso prior is treated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum LassoMode {
    /// Exact `|beta|` with subgradient `sign(beta)`, `0` at exactly zero.
    #[default]
    Subgradient,
    /// `sqrt(beta^2 + eps^2)` in place of `|beta|`.
    Smoothed { eps: f64 },
}

impl LassoMode {
    fn abs(self, b: f64) -> (f64, f64) {
        match self {
            LassoMode::Subgradient => {
                let s = if b > 0.0 {
                    1.0
                } else if b < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                (b.abs(), s)
            }
            LassoMode::Smoothed { eps } => {
                let r = (b * b + eps * eps).sqrt();
                (r, b / r)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub p: usize,
    pub l: usize,
}

impl Layout {
    pub fn dim(&self) -> usize {
        1 + self.p + (self.l - 1) + 1
    }

    pub fn beta_range(&self) -> std::ops::Range<usize> {
        1..1 + self.p
    }

    pub fn z_range(&self) -> std::ops::Range<usize> {
        1 + self.p..self.p + self.l
    }

    pub fn log_tau_index(&self) -> usize {
        self.p + self.l
    }

    /// Maps an unconstrained vector to model parameters.
    pub fn to_params(&self, theta: &[f64]) -> ModelParams {
        let gamma = alr_inverse(&theta[self.z_range()]);
        ModelParams {
            beta0: theta[0],
            beta: theta[self.beta_range()].to_vec(),
            gamma,
            tau: theta[self.log_tau_index()].exp(),
        }
    }

    pub fn from_params(&self, params: &ModelParams) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.dim());
        theta.push(params.beta0);
        theta.extend_from_slice(&params.beta);
        let last = params.gamma[self.l - 1];
        theta.extend(params.gamma[..self.l - 1].iter().map(|g| (g / last).ln()));
        theta.push(params.tau.ln());
        theta
    }
}

/// Additive log-ratio inverse with the last component as reference.
pub fn alr_inverse(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(0.0f64, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    out.push((-max).exp());
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|g| *g /= total);
    out
}

#[derive(Debug, Clone)]
pub struct LogPosterior {
    pub data: PreparedCohort,
    pub layout: Layout,
    pub lasso: LassoMode,
}

impl LogPosterior {
    pub fn new(data: PreparedCohort, lasso: LassoMode) -> Self {
        let layout = Layout { p: data.n_covariates(), l: data.basis_count() };
        Self { data, layout, lasso }
    }
}

impl LogDensity for LogPosterior {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn log_density_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let Layout { p, l } = self.layout;
        let beta0 = theta[0];
        let beta = &theta[self.layout.beta_range()];
        let z = &theta[self.layout.z_range()];
        let log_tau = theta[self.layout.log_tau_index()];
        let tau = log_tau.exp();
        let gamma = alr_inverse(z);
        if !beta0.is_finite() || !tau.is_finite() || !(tau > 0.0) || gamma.iter().any(|g| !g.is_finite()) {
            return f64::NEG_INFINITY;
        }

        let mut g_beta0 = 0.0;
        let mut g_beta = vec![0.0; p];
        let mut g_gamma = vec![0.0; l];
        let ll = self
            .data
            .log_likelihood_grad(beta0, beta, &gamma, &mut g_beta0, &mut g_beta, &mut g_gamma);
        if !ll.is_finite() {
            return f64::NEG_INFINITY;
        }

        // Intercept prior.
        let mut lp = ll + ln_normal_intercept(beta0);
        g_beta0 -= beta0 / INTERCEPT_PRIOR_VARIANCE;

        // Lasso prior on slopes, conditional on tau.
        let mut abs_sum = 0.0;
        for (g, &b) in g_beta.iter_mut().zip(beta) {
            let (a, s) = self.lasso.abs(b);
            abs_sum += a;
            *g -= tau * s;
        }
        lp += p as f64 * (tau / 2.0).ln() - tau * abs_sum;

        // Hyperprior on tau plus the log-transform Jacobian.
        lp += ln_chi_squared_1(tau) + log_tau;
        let g_log_tau = p as f64 - tau * abs_sum - 0.5 - 0.5 * tau + 1.0;

        // Flat Dirichlet is constant; ALR Jacobian is sum ln gamma_l.
        lp += gamma.iter().map(|g| g.ln()).sum::<f64>();
        let weighted: f64 = gamma.iter().zip(&g_gamma).map(|(a, b)| a * b).sum();

        grad[0] = g_beta0;
        grad[self.layout.beta_range()].copy_from_slice(&g_beta);
        for (k, idx) in self.layout.z_range().enumerate() {
            grad[idx] = gamma[k] * (g_gamma[k] - weighted) + 1.0 - l as f64 * gamma[k];
        }
        grad[self.layout.log_tau_index()] = g_log_tau;
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        lp
    }
}
