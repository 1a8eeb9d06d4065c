//! Bayesian fitting of the proportional-hazards model: weighted likelihood,
//! priors, NUTS sampling, posterior summaries and variable selection.

pub mod diagnostics;
pub mod fit;
pub mod likelihood;
pub mod mode;
pub mod posterior;
pub mod prior;
pub mod sampler;
pub mod summary;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hazard::CovariateProfile;

pub use fit::{run_mcmc, Draw, FitConfig, FitDiagnostics, PosteriorDraws};
pub use likelihood::{log_likelihood, PreparedCohort};
pub use posterior::{LassoMode, LogPosterior};
pub use prior::log_prior;
pub use summary::{
    posterior_summary, select_credible_interval, select_scaled_neighborhood, HazardRatioRow,
};

/// One subject: entry (left-truncation) age, exit age, event flag, survey
/// weight and covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRecord {
    pub id: String,
    pub t0: f64,
    pub t: f64,
    pub event: bool,
    pub weight: f64,
    pub covariates: CovariateProfile,
}

impl CohortRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.t0.is_finite() || !self.t.is_finite() {
            return Err(Error::Value(format!("record '{}': non-finite age", self.id)));
        }
        if self.t < self.t0 {
            return Err(Error::Value(format!(
                "record '{}': exit age {} precedes entry age {}",
                self.id, self.t, self.t0
            )));
        }
        if !(self.weight > 0.0) || !self.weight.is_finite() {
            return Err(Error::Value(format!(
                "record '{}': weight must be positive, got {}",
                self.id, self.weight
            )));
        }
        Ok(())
    }
}
