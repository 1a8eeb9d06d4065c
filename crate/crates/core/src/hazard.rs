//! Proportional-hazards event hazard with an M-spline baseline:
//! `hazard(t | x) = M(t; gamma) * exp(beta0 + x'beta)` and
//! `survival(t | x) = exp(-I(t; gamma) * exp(beta0 + x'beta))`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spline::SplineBasis;

/// Tolerance for the simplex constraint on baseline weights.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub tau: f64,
}

impl ModelParams {
    pub fn new(beta0: f64, beta: Vec<f64>, gamma: Vec<f64>, tau: f64) -> Result<Self> {
        let p = Self { beta0, beta, gamma, tau };
        p.check_simplex()?;
        if !(p.tau > 0.0) {
            return Err(Error::Value(format!("shrinkage rate must be positive, got {}", p.tau)));
        }
        Ok(p)
    }

    /// Uniform baseline weights, zero coefficients.
    pub fn neutral(n_covariates: usize, basis_count: usize) -> Self {
        Self {
            beta0: 0.0,
            beta: vec![0.0; n_covariates],
            gamma: vec![1.0 / basis_count as f64; basis_count],
            tau: 1.0,
        }
    }

    pub fn on_simplex(&self) -> bool {
        self.gamma.iter().all(|&g| g >= 0.0 && g.is_finite())
            && (self.gamma.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL
    }

    fn check_simplex(&self) -> Result<()> {
        if self.on_simplex() {
            Ok(())
        } else {
            Err(Error::Value(format!("baseline weights not on the simplex: {:?}", self.gamma)))
        }
    }

    pub fn check_shape(&self, n_covariates: usize, basis_count: usize) -> Result<()> {
        if self.beta.len() != n_covariates {
            return Err(Error::Schema(format!(
                "{} coefficients for {n_covariates} covariates",
                self.beta.len()
            )));
        }
        if self.gamma.len() != basis_count {
            return Err(Error::Schema(format!(
                "{} baseline weights for {basis_count} basis functions",
                self.gamma.len()
            )));
        }
        self.check_simplex()
    }

    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.beta.len());
        self.beta0 + x.iter().zip(&self.beta).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Named covariate values for one subject.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CovariateProfile(pub BTreeMap<String, f64>);

impl CovariateProfile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.0.insert(name.to_string(), value);
        self
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.0.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }

    /// Covariate values in the order given by `names`.
    pub fn design_row(&self, names: &[String]) -> Result<Vec<f64>> {
        names
            .iter()
            .map(|n| match self.0.get(n) {
                None => Err(Error::Schema(format!("missing covariate '{n}'"))),
                Some(v) if !v.is_finite() => {
                    Err(Error::Value(format!("covariate '{n}' is not finite")))
                }
                Some(&v) => Ok(v),
            })
            .collect()
    }
}

/// `exp(beta0 + x'beta)`.
pub fn relative_risk(x: &[f64], params: &ModelParams) -> f64 {
    params.linear_predictor(x).exp()
}

pub fn relative_risk_for(
    profile: &CovariateProfile,
    names: &[String],
    params: &ModelParams,
) -> Result<f64> {
    Ok(relative_risk(&profile.design_row(names)?, params))
}

pub fn baseline_hazard(t: f64, params: &ModelParams, basis: &SplineBasis) -> Result<f64> {
    let m = basis.mspline(t)?;
    Ok(dot(&m, &params.gamma))
}

pub fn cumulative_baseline(t: f64, params: &ModelParams, basis: &SplineBasis) -> Result<f64> {
    let i = basis.ispline(t)?;
    Ok(dot(&i, &params.gamma))
}

pub fn cud_hazard(t: f64, x: &[f64], params: &ModelParams, basis: &SplineBasis) -> Result<f64> {
    Ok(baseline_hazard(t, params, basis)? * relative_risk(x, params))
}

pub fn cud_cumulative_hazard(
    t: f64,
    x: &[f64],
    params: &ModelParams,
    basis: &SplineBasis,
) -> Result<f64> {
    Ok(cumulative_baseline(t, params, basis)? * relative_risk(x, params))
}

pub fn cud_survival(t: f64, x: &[f64], params: &ModelParams, basis: &SplineBasis) -> Result<f64> {
    Ok((-cud_cumulative_hazard(t, x, params, basis)?).exp())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
