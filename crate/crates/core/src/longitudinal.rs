//! Random-intercept linear mixed model for multi-wave predictors,
//! `value_it = g0 + nu_i + g1 * age_it + eps_it`, fitted by maximum
//! likelihood, and the per-subject summaries derived from it.
//!
//! With `rho = s_nu^2 / s_eps^2` fixed, the fixed effects are a GLS solve and
//! `s_eps^2` has a closed form, so the likelihood is profiled down to a
//! one-dimensional search over `ln rho` (plus the boundary `rho = 0`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelObservation {
    pub subject: String,
    pub wave: u32,
    pub age: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmFit {
    pub gamma0: f64,
    pub gamma1: f64,
    pub sigma_nu2: f64,
    pub sigma_eps2: f64,
    pub log_likelihood: f64,
    pub warnings: Vec<String>,
}

impl LmmFit {
    /// Residual of one observation about the fixed line.
    pub fn residual(&self, obs: &PanelObservation) -> f64 {
        obs.value - self.gamma0 - self.gamma1 * obs.age
    }
}

const LN_RHO_RANGE: (f64, f64) = (-18.0, 18.0);
const GRID_POINTS: usize = 73;
const GOLDEN_TOL: f64 = 1e-10;

struct Subject {
    ages: Vec<f64>,
    values: Vec<f64>,
}

/// Groups observations by subject in wave order.
fn group(panel: &[PanelObservation]) -> Result<Vec<Subject>> {
    let mut by: BTreeMap<&str, Vec<&PanelObservation>> = BTreeMap::new();
    for o in panel {
        if !o.age.is_finite() || !o.value.is_finite() {
            return Err(Error::Value(format!("subject '{}': non-finite observation", o.subject)));
        }
        by.entry(o.subject.as_str()).or_default().push(o);
    }
    let mut out = Vec::with_capacity(by.len());
    for (id, mut obs) in by {
        obs.sort_by_key(|o| o.wave);
        if obs.windows(2).any(|w| w[0].wave == w[1].wave) {
            return Err(Error::Value(format!("subject '{id}': repeated wave")));
        }
        if obs.windows(2).any(|w| !(w[1].age > w[0].age)) {
            return Err(Error::Value(format!("subject '{id}': ages must increase across waves")));
        }
        out.push(Subject { ages: obs.iter().map(|o| o.age).collect(), values: obs.iter().map(|o| o.value).collect() });
    }
    Ok(out)
}

struct Profile {
    gamma0: f64,
    gamma1: f64,
    sigma_eps2: f64,
    loglik: f64,
}

/// Profiled fit at a fixed variance ratio.
fn profile(subjects: &[Subject], rho: f64) -> Profile {
    // Normal equations of the GLS problem with W_i = I - c_i J.
    let (mut a00, mut a01, mut a11, mut b0, mut b1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut n_total = 0.0;
    let mut log_det = 0.0;
    for s in subjects {
        let n = s.ages.len() as f64;
        let c = rho / (1.0 + n * rho);
        let sa: f64 = s.ages.iter().sum();
        let sy: f64 = s.values.iter().sum();
        let saa: f64 = s.ages.iter().map(|a| a * a).sum();
        let say: f64 = s.ages.iter().zip(&s.values).map(|(a, y)| a * y).sum();
        a00 += n - c * n * n;
        a01 += sa - c * n * sa;
        a11 += saa - c * sa * sa;
        b0 += sy - c * n * sy;
        b1 += say - c * sa * sy;
        n_total += n;
        log_det += (n * rho).ln_1p();
    }
    let det = a00 * a11 - a01 * a01;
    let gamma0 = (a11 * b0 - a01 * b1) / det;
    let gamma1 = (a00 * b1 - a01 * b0) / det;
    let mut quad = 0.0;
    for s in subjects {
        let n = s.ages.len() as f64;
        let c = rho / (1.0 + n * rho);
        let r: Vec<f64> = s.ages.iter().zip(&s.values).map(|(a, y)| y - gamma0 - gamma1 * a).collect();
        let sr: f64 = r.iter().sum();
        quad += r.iter().map(|x| x * x).sum::<f64>() - c * sr * sr;
    }
    let sigma_eps2 = quad / n_total;
    let loglik = -0.5 * n_total * ((2.0 * std::f64::consts::PI * sigma_eps2).ln() + 1.0) - 0.5 * log_det;
    Profile { gamma0, gamma1, sigma_eps2, loglik }
}

fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > GOLDEN_TOL {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        }
    }
    0.5 * (lo + hi)
}

/// Maximum-likelihood fit of the random-intercept model.
pub fn fit_lmm(panel: &[PanelObservation]) -> Result<LmmFit> {
    let subjects = group(panel)?;
    if subjects.len() < 2 {
        return Err(Error::Argument("mixed model needs at least 2 subjects".into()));
    }
    if subjects.iter().any(|s| s.values.len() < 2) {
        return Err(Error::Argument("mixed model needs at least 2 observations per subject".into()));
    }

    let ols = profile(&subjects, 0.0);
    let scale: f64 = subjects.iter().flat_map(|s| s.values.iter()).map(|y| y * y).sum::<f64>()
        / panel.len() as f64;
    if !(ols.sigma_eps2 > 1e-24 * scale.max(1e-300)) {
        return Ok(LmmFit {
            gamma0: ols.gamma0,
            gamma1: ols.gamma1,
            sigma_nu2: 0.0,
            sigma_eps2: 0.0,
            log_likelihood: f64::INFINITY,
            warnings: vec!["observations lie exactly on the fixed line; variance components set to 0".into()],
        });
    }

    let objective = |u: f64| profile(&subjects, u.exp()).loglik;
    let (lo, hi) = LN_RHO_RANGE;
    let step = (hi - lo) / (GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..GRID_POINTS).map(|i| objective(lo + i as f64 * step)).collect();
    let best = grid
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("nonempty grid");
    let left = lo + best.saturating_sub(1) as f64 * step;
    let right = lo + (best + 1).min(GRID_POINTS - 1) as f64 * step;
    let u = golden_max(objective, left, right);
    let mut chosen = (u.exp(), profile(&subjects, u.exp()));
    if ols.loglik >= chosen.1.loglik {
        chosen = (0.0, ols);
    }
    let (rho, p) = chosen;
    let mut warnings = Vec::new();
    if rho == 0.0 {
        warnings.push("random-intercept variance at the boundary 0".into());
    } else if u >= hi - step {
        warnings.push("variance ratio at the upper search bound".into());
    }
    Ok(LmmFit {
        gamma0: p.gamma0,
        gamma1: p.gamma1,
        sigma_nu2: rho * p.sigma_eps2,
        sigma_eps2: p.sigma_eps2,
        log_likelihood: p.loglik,
        warnings,
    })
}

/// Marginal log-likelihood of the panel at arbitrary parameter values.
pub fn lmm_log_likelihood(panel: &[PanelObservation], gamma0: f64, gamma1: f64, sigma_nu2: f64, sigma_eps2: f64) -> Result<f64> {
    if !(sigma_eps2 > 0.0) || sigma_nu2 < 0.0 {
        return Err(Error::Argument("need sigma_eps2 > 0 and sigma_nu2 >= 0".into()));
    }
    let subjects = group(panel)?;
    let mut ll = 0.0;
    for s in &subjects {
        let n = s.ages.len() as f64;
        let r: Vec<f64> = s.ages.iter().zip(&s.values).map(|(a, y)| y - gamma0 - gamma1 * a).collect();
        let sr: f64 = r.iter().sum();
        let rr: f64 = r.iter().map(|x| x * x).sum();
        let denom = sigma_eps2 + n * sigma_nu2;
        let quad = (rr - sigma_nu2 / denom * sr * sr) / sigma_eps2;
        let log_det = (n - 1.0) * sigma_eps2.ln() + denom.ln();
        ll += -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + log_det + quad);
    }
    Ok(ll)
}

/// Best linear unbiased predictor of one subject's random intercept.
pub fn blup(observations: &[PanelObservation], fit: &LmmFit) -> Result<f64> {
    if observations.is_empty() {
        return Err(Error::Value("no observations for subject".into()));
    }
    let n = observations.len() as f64;
    let mean_resid = observations.iter().map(|o| fit.residual(o)).sum::<f64>() / n;
    let denom = fit.sigma_nu2 + fit.sigma_eps2 / n;
    if denom == 0.0 {
        return Ok(mean_resid);
    }
    Ok(fit.sigma_nu2 / denom * mean_resid)
}

/// BLUPs for every subject in the panel.
pub fn blup_all(panel: &[PanelObservation], fit: &LmmFit) -> BTreeMap<String, f64> {
    let mut by: BTreeMap<String, Vec<PanelObservation>> = BTreeMap::new();
    for o in panel {
        by.entry(o.subject.clone()).or_default().push(o.clone());
    }
    by.into_iter()
        .map(|(id, obs)| {
            let b = blup(&obs, fit).expect("nonempty group");
            (id, b)
        })
        .collect()
}

/// Mean of the values observed strictly before `cutoff_age`; `None` when no
/// observation qualifies.
pub fn mean_over_waves(observations: &[PanelObservation], cutoff_age: f64) -> Option<f64> {
    let eligible: Vec<f64> = observations.iter().filter(|o| o.age < cutoff_age).map(|o| o.value).collect();
    if eligible.is_empty() {
        None
    } else {
        Some(eligible.iter().sum::<f64>() / eligible.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::Normal;

    fn obs(subject: &str, wave: u32, age: f64, value: f64) -> PanelObservation {
        PanelObservation { subject: subject.into(), wave, age, value }
    }

    fn simulate(n: usize, s_nu2: f64, s_eps2: f64, seed: u64) -> Vec<PanelObservation> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let nu = Normal::new(0.0, s_nu2.sqrt()).unwrap();
        let eps = Normal::new(0.0, s_eps2.sqrt()).unwrap();
        let mut out = Vec::new();
        for i in 0..n {
            let b: f64 = rng.sample(nu);
            let waves = 2 + (i % 2);
            for w in 0..waves {
                let age = 13.0 + 2.0 * w as f64 + rng.random::<f64>();
                out.push(obs(&format!("p{i}"), w as u32 + 1, age, 1.0 + 0.3 * age + b + rng.sample(eps)));
            }
        }
        out
    }

    #[test]
    fn noiseless_line() {
        let mut panel = Vec::new();
        for i in 0..5 {
            for (w, age) in [13.0, 15.0, 17.0].iter().enumerate() {
                panel.push(obs(&format!("s{i}"), w as u32, *age + i as f64 * 0.1, 1.0 + 0.5 * (*age + i as f64 * 0.1)));
            }
        }
        let fit = fit_lmm(&panel).unwrap();
        assert!((fit.gamma0 - 1.0).abs() < 1e-9 && (fit.gamma1 - 0.5).abs() < 1e-10);
        assert_eq!((fit.sigma_nu2, fit.sigma_eps2), (0.0, 0.0));
        assert!(!fit.warnings.is_empty());
    }

    #[test]
    fn constant_values_degenerate() {
        let panel: Vec<_> = (0..4).flat_map(|i| (0..2).map(move |w| obs(&format!("s{i}"), w, 13.0 + w as f64 + i as f64, 2.0))).collect();
        let fit = fit_lmm(&panel).unwrap();
        assert_eq!((fit.sigma_nu2, fit.sigma_eps2), (0.0, 0.0));
        assert!((fit.gamma0 - 2.0).abs() < 1e-9 && fit.gamma1.abs() < 1e-10);
    }

    #[test]
    fn simulation_recovers_variances() {
        let panel = simulate(2000, 1.0, 0.25, 3);
        let fit = fit_lmm(&panel).unwrap();
        assert!((fit.sigma_nu2 - 1.0).abs() < 0.1, "{}", fit.sigma_nu2);
        assert!((fit.sigma_eps2 - 0.25).abs() < 0.025, "{}", fit.sigma_eps2);
        assert!((fit.gamma1 - 0.3).abs() < 0.03);
        let at_truth = lmm_log_likelihood(&panel, 1.0, 0.3, 1.0, 0.25).unwrap();
        assert!(fit.log_likelihood >= at_truth - 1e-6);
        let direct = lmm_log_likelihood(&panel, fit.gamma0, fit.gamma1, fit.sigma_nu2, fit.sigma_eps2).unwrap();
        assert!((direct - fit.log_likelihood).abs() < 1e-6 * direct.abs());
    }

    #[test]
    fn subject_order_irrelevant() {
        let panel = simulate(200, 0.5, 0.5, 4);
        let mut rev = panel.clone();
        rev.reverse();
        let a = fit_lmm(&panel).unwrap();
        let b = fit_lmm(&rev).unwrap();
        assert!((a.sigma_nu2 - b.sigma_nu2).abs() < 1e-8 && (a.gamma0 - b.gamma0).abs() < 1e-8);
    }

    #[test]
    fn no_between_subject_variance_hits_boundary() {
        let panel = simulate(300, 0.0, 1.0, 5);
        let fit = fit_lmm(&panel).unwrap();
        assert!(fit.sigma_nu2 < 0.1);
    }

    #[test]
    fn blup_shrinkage() {
        let fit = LmmFit { gamma0: 0.0, gamma1: 0.0, sigma_nu2: 1.0, sigma_eps2: 1.0, log_likelihood: 0.0, warnings: vec![] };
        let o = [obs("a", 1, 13.0, 1.0), obs("a", 2, 15.0, 1.0), obs("a", 3, 17.0, 1.0)];
        assert!((blup(&o, &fit).unwrap() - 0.75).abs() < 1e-15);
        let on_line = [obs("a", 1, 13.0, 0.0)];
        assert_eq!(blup(&on_line, &fit).unwrap(), 0.0);
        let raw = LmmFit { sigma_eps2: 0.0, ..fit.clone() };
        assert_eq!(blup(&o, &raw).unwrap(), 1.0);
        assert!(blup(&[], &fit).is_err());
    }

    #[test]
    fn wave_mean_cutoff() {
        let o = [obs("a", 1, 13.0, 2.0), obs("a", 2, 15.0, 4.0), obs("a", 3, 17.0, 6.0)];
        assert_eq!(mean_over_waves(&o, 20.0), Some(4.0));
        assert_eq!(mean_over_waves(&o, 16.0), Some(3.0));
        assert_eq!(mean_over_waves(&o, 13.0), None);
        assert_eq!(mean_over_waves(&[obs("b", 1, 12.0, 0.3)], 14.0), Some(0.3));
    }

    #[test]
    fn rejects_bad_panels() {
        assert!(fit_lmm(&[obs("a", 1, 13.0, 1.0), obs("a", 2, 14.0, 2.0)]).is_err());
        let dup = [obs("a", 1, 13.0, 1.0), obs("a", 1, 14.0, 2.0), obs("b", 1, 13.0, 1.0), obs("b", 2, 14.0, 1.0)];
        assert!(fit_lmm(&dup).is_err());
    }
}
