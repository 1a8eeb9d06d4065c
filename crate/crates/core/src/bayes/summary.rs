//! Posterior hazard-ratio table and the two variable-selection rules.

use serde::{Deserialize, Serialize};

use crate::stats::{equal_tailed, mean, sample_sd};

use super::PosteriorDraws;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardRatioRow {
    pub covariate: String,
    pub hazard_ratio: f64,
    pub cri_low: f64,
    pub cri_high: f64,
}

/// Posterior mean of `exp(beta_i)` with a 95% equal-tailed interval.
pub fn posterior_summary(draws: &PosteriorDraws) -> Vec<HazardRatioRow> {
    draws
        .covariates
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let hr: Vec<f64> = draws.coefficient(i).iter().map(|b| b.exp()).collect();
            let (lo, hi) = if hr.is_empty() { (f64::NAN, f64::NAN) } else { equal_tailed(&hr, 0.95) };
            HazardRatioRow { covariate: name.clone(), hazard_ratio: mean(&hr), cri_low: lo, cri_high: hi }
        })
        .collect()
}

pub fn format_summary(rows: &[HazardRatioRow]) -> String {
    let mut s = String::from("variable,hr,cri\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.2},\"({:.2}, {:.2})\"\n",
            r.covariate, r.hazard_ratio, r.cri_low, r.cri_high
        ));
    }
    s
}

/// Covariates whose equal-tailed `level` interval excludes zero.
pub fn select_credible_interval(draws: &PosteriorDraws, level: f64) -> Vec<String> {
    assert!(level > 0.0 && level < 1.0, "level must lie in (0, 1)");
    draws
        .covariates
        .iter()
        .enumerate()
        .filter(|(i, _)| {
            let (lo, hi) = equal_tailed(&draws.coefficient(*i), level);
            lo > 0.0 || hi < 0.0
        })
        .map(|(_, n)| n.clone())
        .collect()
}

/// Posterior probability that `|beta_i|` lies within one posterior standard
/// deviation of zero.
pub fn neighborhood_probability(samples: &[f64]) -> f64 {
    let sd = sample_sd(samples);
    if sd == 0.0 {
        return if samples.iter().all(|&b| b == 0.0) { 1.0 } else { 0.0 };
    }
    samples.iter().filter(|b| b.abs() <= sd).count() as f64 / samples.len() as f64
}

/// Covariates kept by the scaled-neighborhood rule: excluded when the
/// neighborhood probability exceeds `threshold`.
pub fn select_scaled_neighborhood(draws: &PosteriorDraws, threshold: f64) -> Vec<String> {
    assert!(threshold > 0.0 && threshold < 1.0, "threshold must lie in (0, 1)");
    draws
        .covariates
        .iter()
        .enumerate()
        .filter(|(i, _)| neighborhood_probability(&draws.coefficient(*i)) <= threshold)
        .map(|(_, n)| n.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub rule: String,
    pub knob: f64,
    pub selected: Vec<String>,
}

/// Both rules across a grid of levels and thresholds, deduplicated into
/// distinct candidate models.
pub fn selection_sweep(draws: &PosteriorDraws, levels: &[f64], thresholds: &[f64]) -> Vec<SelectionOutcome> {
    let mut out = Vec::new();
    for &l in levels {
        out.push(SelectionOutcome {
            rule: "credible_interval".into(),
            knob: l,
            selected: select_credible_interval(draws, l),
        });
    }
    for &t in thresholds {
        out.push(SelectionOutcome {
            rule: "scaled_neighborhood".into(),
            knob: t,
            selected: select_scaled_neighborhood(draws, t),
        });
    }
    out
}
