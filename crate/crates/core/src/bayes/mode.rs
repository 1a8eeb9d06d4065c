//! Penalized posterior mode with the shrinkage rate held fixed.
//!
//! Maximizes `loglik - rate * sum |beta_i|` (optionally plus the intercept
//! prior) over `(beta0, beta, gamma)` by accelerated proximal gradient with
//! backtracking: soft thresholding for `beta`, Euclidean projection onto the
//! simplex for `gamma`. `rate = 0` without the intercept prior is maximum
//! likelihood.

use crate::hazard::ModelParams;

use super::likelihood::PreparedCohort;
use super::prior::INTERCEPT_PRIOR_VARIANCE;

/// Consecutive near-stationary iterations required to stop.
const STALL_ITERATIONS: usize = 20;

#[derive(Debug, Clone, Copy)]
pub struct ModeOptions {
    pub lasso_rate: f64,
    pub intercept_prior: bool,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ModeOptions {
    fn default() -> Self {
        Self { lasso_rate: 0.0, intercept_prior: false, max_iter: 100_000, tol: 1e-13 }
    }
}

#[derive(Debug, Clone)]
pub struct ModeFit {
    pub params: ModelParams,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

struct Problem<'a> {
    data: &'a PreparedCohort,
    p: usize,
    l: usize,
    opts: ModeOptions,
}

impl Problem<'_> {
    /// Smooth part (negated log-likelihood and intercept prior) and its gradient.
    fn smooth(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let beta0 = x[0];
        let beta = &x[1..1 + self.p];
        let gamma = &x[1 + self.p..];
        let mut gb0 = 0.0;
        let mut gb = vec![0.0; self.p];
        let mut gg = vec![0.0; self.l];
        let ll = self.data.log_likelihood_grad(beta0, beta, gamma, &mut gb0, &mut gb, &mut gg);
        if !ll.is_finite() {
            return f64::INFINITY;
        }
        let mut f = -ll;
        if self.opts.intercept_prior {
            f += 0.5 * beta0 * beta0 / INTERCEPT_PRIOR_VARIANCE;
            gb0 -= beta0 / INTERCEPT_PRIOR_VARIANCE;
        }
        grad[0] = -gb0;
        for i in 0..self.p {
            grad[1 + i] = -gb[i];
        }
        for k in 0..self.l {
            grad[1 + self.p + k] = -gg[k];
        }
        f
    }

    fn penalty(&self, x: &[f64]) -> f64 {
        self.opts.lasso_rate * x[1..1 + self.p].iter().map(|b| b.abs()).sum::<f64>()
    }

    fn prox(&self, x: &mut [f64], step: f64) {
        let thr = step * self.opts.lasso_rate;
        for b in &mut x[1..1 + self.p] {
            *b = b.signum() * (b.abs() - thr).max(0.0);
        }
        project_simplex(&mut x[1 + self.p..]);
    }
}

/// Euclidean projection onto `{g : g >= 0, sum g = 1}` by the sort-and-threshold
/// rule.
fn project_simplex(v: &mut [f64]) {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter_mut().for_each(|x| *x = (*x - theta).max(0.0));
}

pub fn penalized_mode(data: &PreparedCohort, opts: ModeOptions) -> ModeFit {
    let p = data.n_covariates();
    let l = data.basis_count();
    let prob = Problem { data, p, l, opts };
    let dim = 1 + p + l;

    let mut x = vec![0.0; dim];
    x[1 + p..].iter_mut().for_each(|g| *g = 1.0 / l as f64);
    let mut y = x.clone();
    let mut grad = vec![0.0; dim];
    let mut t: f64 = 1.0;
    let mut step = 1.0 / (data.len().max(1) as f64);
    let mut obj = prob.smooth(&x, &mut grad) + prob.penalty(&x);
    let mut converged = false;
    let mut stalled = 0;
    let mut iterations = 0;

    for it in 0..opts.max_iter {
        iterations = it + 1;
        let fy = prob.smooth(&y, &mut grad);
        let gy = grad.clone();
        let mut candidate;
        loop {
            candidate = y.iter().zip(&gy).map(|(v, g)| v - step * g).collect::<Vec<_>>();
            prob.prox(&mut candidate, step);
            let fc = prob.smooth(&candidate, &mut grad);
            let diff: Vec<f64> = candidate.iter().zip(&y).map(|(a, b)| a - b).collect();
            let lin: f64 = diff.iter().zip(&gy).map(|(d, g)| d * g).sum();
            let quad: f64 = diff.iter().map(|d| d * d).sum::<f64>() / (2.0 * step);
            if fc.is_finite() && fc <= fy + lin + quad + 1e-12 * fy.abs() {
                break;
            }
            step *= 0.5;
            if step < 1e-300 {
                break;
            }
        }
        let new_obj = prob.smooth(&candidate, &mut grad) + prob.penalty(&candidate);
        let moved: f64 = candidate.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = 1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt();

        let small = (obj - new_obj).abs() <= opts.tol * (1.0 + obj.abs()) && moved < opts.tol.sqrt() * scale;
        stalled = if small { stalled + 1 } else { 0 };
        if stalled >= STALL_ITERATIONS {
            converged = true;
            if new_obj <= obj {
                x = candidate;
                obj = new_obj;
            }
            break;
        }
        if new_obj > obj {
            // Momentum overshot: restart from the last iterate. Without
            // momentum the step itself was too long.
            if t == 1.0 {
                step *= 0.5;
            }
            y = x.clone();
            t = 1.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        y = candidate
            .iter()
            .zip(&x)
            .map(|(c, prev)| c + momentum * (c - prev))
            .collect();
        x = candidate;
        t = t_next;
        obj = new_obj;
        // Allow the step to grow back after backtracking.
        step *= 1.25;
    }

    let gamma = x[1 + p..].to_vec();
    ModeFit {
        params: ModelParams { beta0: x[0], beta: x[1..1 + p].to_vec(), gamma, tau: opts.lasso_rate.max(f64::MIN_POSITIVE) },
        objective: obj,
        iterations,
        converged,
    }
}
