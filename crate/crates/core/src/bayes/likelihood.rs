//! Survey-weighted log-likelihood for left-truncated, right-censored data:
//!
//! ```text
//! sum_j w_j * [ delta_j * ln h(t_j | x_j) + ln S(t_j | x_j) - ln S(t0_j | x_j) ]
//! ```

use crate::error::{Error, Result};
use crate::hazard::{dot, ModelParams};
use crate::spline::SplineBasis;

use super::CohortRecord;

/// Cohort with basis values precomputed at each record's entry and exit.
#[derive(Debug, Clone)]
pub struct PreparedCohort {
    n: usize,
    p: usize,
    l: usize,
    x: Vec<f64>,
    weight: Vec<f64>,
    event: Vec<bool>,
    /// M-spline values at `t` (zero rows for censored records).
    mspline: Vec<f64>,
    /// `I(t) - I(t0)` per basis function.
    ispline_diff: Vec<f64>,
}

impl PreparedCohort {
    pub fn new(records: &[CohortRecord], covariates: &[String], basis: &SplineBasis) -> Result<Self> {
        let n = records.len();
        let p = covariates.len();
        let l = basis.basis_count();
        let mut x = Vec::with_capacity(n * p);
        let mut weight = Vec::with_capacity(n);
        let mut event = Vec::with_capacity(n);
        let mut mspline = vec![0.0; n * l];
        let mut ispline_diff = vec![0.0; n * l];
        let mut i0 = vec![0.0; l];
        let mut i1 = vec![0.0; l];
        for (j, r) in records.iter().enumerate() {
            r.validate()?;
            x.extend(r.covariates.design_row(covariates).map_err(|e| {
                Error::Schema(format!("record '{}': {e}", r.id))
            })?);
            weight.push(r.weight);
            event.push(r.event);
            basis.ispline_into(r.t0, &mut i0)?;
            basis.ispline_into(r.t, &mut i1)?;
            for k in 0..l {
                ispline_diff[j * l + k] = (i1[k] - i0[k]).max(0.0);
            }
            if r.event {
                basis.mspline_into(r.t, &mut mspline[j * l..(j + 1) * l])?;
            }
        }
        Ok(Self { n, p, l, x, weight, event, mspline, ispline_diff })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn n_covariates(&self) -> usize {
        self.p
    }

    pub fn basis_count(&self) -> usize {
        self.l
    }

    pub fn event_count(&self) -> usize {
        self.event.iter().filter(|&&e| e).count()
    }

    /// Returns a copy with every weight multiplied by `c`.
    pub fn scale_weights(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.weight.iter_mut().for_each(|w| *w *= c);
        out
    }

    fn row(&self, j: usize) -> &[f64] {
        &self.x[j * self.p..(j + 1) * self.p]
    }

    /// Log-likelihood; `-inf` when some event time has zero hazard.
    pub fn log_likelihood(&self, beta0: f64, beta: &[f64], gamma: &[f64]) -> f64 {
        let mut total = 0.0;
        for j in 0..self.n {
            let eta = beta0 + dot(self.row(j), beta);
            let cum = dot(&self.ispline_diff[j * self.l..(j + 1) * self.l], gamma);
            let mut c = -eta.exp() * cum;
            if self.event[j] {
                let h = dot(&self.mspline[j * self.l..(j + 1) * self.l], gamma);
                if !(h > 0.0) {
                    return f64::NEG_INFINITY;
                }
                c += h.ln() + eta;
            }
            total += self.weight[j] * c;
        }
        total
    }

    /// Log-likelihood with gradients with respect to `beta0`, `beta` and the
    /// (unconstrained) baseline weights `gamma`.
    pub fn log_likelihood_grad(
        &self,
        beta0: f64,
        beta: &[f64],
        gamma: &[f64],
        g_beta0: &mut f64,
        g_beta: &mut [f64],
        g_gamma: &mut [f64],
    ) -> f64 {
        *g_beta0 = 0.0;
        g_beta.iter_mut().for_each(|g| *g = 0.0);
        g_gamma.iter_mut().for_each(|g| *g = 0.0);
        let mut total = 0.0;
        for j in 0..self.n {
            let xj = self.row(j);
            let w = self.weight[j];
            let eta = beta0 + dot(xj, beta);
            let e = eta.exp();
            let di = &self.ispline_diff[j * self.l..(j + 1) * self.l];
            let cum = dot(di, gamma);
            let mut c = -e * cum;
            let mut g_eta = -e * cum;
            if self.event[j] {
                let m = &self.mspline[j * self.l..(j + 1) * self.l];
                let h = dot(m, gamma);
                if !(h > 0.0) {
                    return f64::NEG_INFINITY;
                }
                c += h.ln() + eta;
                g_eta += 1.0;
                for k in 0..self.l {
                    g_gamma[k] += w * m[k] / h;
                }
            }
            for k in 0..self.l {
                g_gamma[k] -= w * e * di[k];
            }
            total += w * c;
            *g_beta0 += w * g_eta;
            for (g, xv) in g_beta.iter_mut().zip(xj) {
                *g += w * g_eta * xv;
            }
        }
        total
    }
}

/// Weighted log-likelihood of `records` under `params`.
pub fn log_likelihood(
    records: &[CohortRecord],
    covariates: &[String],
    params: &ModelParams,
    basis: &SplineBasis,
) -> Result<f64> {
    params.check_shape(covariates.len(), basis.basis_count())?;
    let prepared = PreparedCohort::new(records, covariates, basis)?;
    Ok(prepared.log_likelihood(params.beta0, &params.beta, &params.gamma))
}
