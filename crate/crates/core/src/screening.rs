//! Weighted Cox partial likelihood with left truncation (Breslow ties), the
//! univariate screen, the multivariate sign-flip report and the C-index.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::CohortRecord;
use crate::error::{Error, Result};
use crate::stats::two_sided_p;

const MAX_NEWTON: usize = 50;
const MAX_HALVINGS: usize = 30;
const LOGLIK_TOL: f64 = 1e-10;
const BETA_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub covariates: Vec<String>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub z: Vec<f64>,
    pub p_value: Vec<f64>,
    pub log_partial_likelihood: f64,
    pub iterations: usize,
}

/// Design matrix and risk-set sweep order for one covariate subset.
struct CoxData {
    p: usize,
    x: Vec<f64>,
    t0: Vec<f64>,
    t: Vec<f64>,
    w: Vec<f64>,
    /// Distinct event times, descending, with the records failing at each.
    event_times: Vec<(f64, Vec<usize>)>,
    by_exit_desc: Vec<usize>,
    by_entry_desc: Vec<usize>,
}

impl CoxData {
    fn new(records: &[CohortRecord], covariates: &[String]) -> Result<Self> {
        let p = covariates.len();
        let mut x = Vec::with_capacity(records.len() * p);
        for r in records {
            r.validate()?;
            x.extend(r.covariates.design_row(covariates).map_err(|e| Error::Schema(format!("record '{}': {e}", r.id)))?);
        }
        let t0: Vec<f64> = records.iter().map(|r| r.t0).collect();
        let t: Vec<f64> = records.iter().map(|r| r.t).collect();
        let w: Vec<f64> = records.iter().map(|r| r.weight).collect();
        let mut events: Vec<usize> = (0..records.len()).filter(|&i| records[i].event).collect();
        events.sort_by(|&a, &b| t[b].total_cmp(&t[a]));
        let mut event_times: Vec<(f64, Vec<usize>)> = Vec::new();
        for i in events {
            match event_times.last_mut() {
                Some((tt, v)) if *tt == t[i] => v.push(i),
                _ => event_times.push((t[i], vec![i])),
            }
        }
        let mut by_exit_desc: Vec<usize> = (0..records.len()).collect();
        by_exit_desc.sort_by(|&a, &b| t[b].total_cmp(&t[a]));
        let mut by_entry_desc: Vec<usize> = (0..records.len()).collect();
        by_entry_desc.sort_by(|&a, &b| t0[b].total_cmp(&t0[a]));
        Ok(Self { p, x, t0, t, w, event_times, by_exit_desc, by_entry_desc })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    /// Log partial likelihood, score and information at `beta`.
    fn evaluate(&self, beta: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let p = self.p;
        let n = self.w.len();
        let eta: Vec<f64> = (0..n).map(|i| crate::hazard::dot(self.row(i), beta)).collect();
        // Centre for numerical stability; cancels in the ratio.
        let shift = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.0);
        let r: Vec<f64> = (0..n).map(|i| self.w[i] * (eta[i] - shift).exp()).collect();

        let mut s0 = 0.0;
        let mut s1 = vec![0.0; p];
        let mut s2 = vec![0.0; p * p];
        let update = |i: usize, sign: f64, s0: &mut f64, s1: &mut [f64], s2: &mut [f64]| {
            let xi = self.row(i);
            *s0 += sign * r[i];
            for a in 0..p {
                s1[a] += sign * r[i] * xi[a];
                for b in 0..p {
                    s2[a * p + b] += sign * r[i] * xi[a] * xi[b];
                }
            }
        };

        let mut loglik = 0.0;
        let mut score = vec![0.0; p];
        let mut info = vec![0.0; p * p];
        let (mut ia, mut ir) = (0, 0);
        for (tau, failing) in &self.event_times {
            while ia < n && self.t[self.by_exit_desc[ia]] >= *tau {
                update(self.by_exit_desc[ia], 1.0, &mut s0, &mut s1, &mut s2);
                ia += 1;
            }
            while ir < n && self.t0[self.by_entry_desc[ir]] >= *tau {
                update(self.by_entry_desc[ir], -1.0, &mut s0, &mut s1, &mut s2);
                ir += 1;
            }
            if !(s0 > 0.0) {
                continue;
            }
            let dw: f64 = failing.iter().map(|&i| self.w[i]).sum();
            for &i in failing {
                loglik += self.w[i] * (eta[i] - shift);
                for a in 0..p {
                    score[a] += self.w[i] * self.row(i)[a];
                }
            }
            loglik -= dw * s0.ln();
            for a in 0..p {
                let ma = s1[a] / s0;
                score[a] -= dw * ma;
                for b in 0..p {
                    info[a * p + b] += dw * (s2[a * p + b] / s0 - ma * s1[b] / s0);
                }
            }
        }
        (loglik, score, info)
    }
}

/// Weighted log partial likelihood at `beta`.
pub fn cox_log_partial_likelihood(records: &[CohortRecord], covariates: &[String], beta: &[f64]) -> Result<f64> {
    if beta.len() != covariates.len() {
        return Err(Error::Argument("beta length must match covariates".into()));
    }
    Ok(CoxData::new(records, covariates)?.evaluate(beta).0)
}

/// Score vector of the weighted log partial likelihood at `beta`.
pub fn cox_score(records: &[CohortRecord], covariates: &[String], beta: &[f64]) -> Result<Vec<f64>> {
    if beta.len() != covariates.len() {
        return Err(Error::Argument("beta length must match covariates".into()));
    }
    Ok(CoxData::new(records, covariates)?.evaluate(beta).1)
}

/// Newton-Raphson maximization of the weighted partial likelihood.
pub fn fit_cox(records: &[CohortRecord], covariates: &[String]) -> Result<CoxFit> {
    let data = CoxData::new(records, covariates)?;
    if data.event_times.is_empty() {
        return Err(Error::Value("Cox fit needs at least one event".into()));
    }
    let p = data.p;
    for (a, name) in covariates.iter().enumerate() {
        let first = data.x.get(a).copied();
        if (0..records.len()).all(|i| Some(data.row(i)[a]) == first) {
            return Err(Error::Rank(format!("covariate '{name}' is constant")));
        }
    }

    let mut beta = vec![0.0; p];
    let (mut ll, mut score, mut info) = data.evaluate(&beta);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..MAX_NEWTON {
        iterations = it + 1;
        let Some(chol) = DMatrix::from_row_slice(p, p, &info).cholesky() else {
            if it == 0 {
                return Err(Error::Rank("information matrix is singular".into()));
            }
            // Information vanishing along the path: estimates diverging.
            return Err(Error::NonConvergence(format!(
                "Cox fit diverged after {it} iterations (monotone likelihood)"
            )));
        };
        let step = chol.solve(&DVector::from_vec(score.clone()));
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            let eval = data.evaluate(&trial);
            if eval.0.is_finite() && eval.0 >= ll - 1e-12 * ll.abs() {
                accepted = Some((trial, eval));
                break;
            }
            scale *= 0.5;
        }
        let Some((trial, eval)) = accepted else {
            break;
        };
        let dbeta = trial.iter().zip(&beta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let dll = (eval.0 - ll).abs();
        beta = trial;
        (ll, score, info) = eval;
        if dll < LOGLIK_TOL * (1.0 + ll.abs()) && dbeta < BETA_TOL * (1.0 + beta.iter().map(|b| b.abs()).fold(0.0, f64::max)) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence(format!(
            "Cox fit did not converge in {MAX_NEWTON} iterations (monotone likelihood?)"
        )));
    }

    let chol = DMatrix::from_row_slice(p, p, &info)
        .cholesky()
        .ok_or_else(|| Error::Rank("information matrix is singular at the estimate".into()))?;
    let cov = chol.inverse();
    let se: Vec<f64> = (0..p).map(|a| cov[(a, a)].sqrt()).collect();
    let z: Vec<f64> = beta.iter().zip(&se).map(|(b, s)| b / s).collect();
    let p_value = z.iter().map(|&z| two_sided_p(z)).collect();
    Ok(CoxFit {
        covariates: covariates.to_vec(),
        beta,
        se,
        z,
        p_value,
        log_partial_likelihood: ll,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenRow {
    pub predictor: String,
    pub beta: Option<f64>,
    pub se: Option<f64>,
    pub p_value: Option<f64>,
    pub retained: bool,
    /// Multivariate coefficient sign differs from the univariate one.
    pub sign_flip: Option<bool>,
    pub error: Option<String>,
}

/// Univariate screen: keep predictors with Wald `p < alpha`. Predictors whose
/// fit fails are reported with the error and not retained.
pub fn univariate_screen(records: &[CohortRecord], predictors: &[String], alpha: f64) -> Vec<ScreenRow> {
    predictors
        .par_iter()
        .map(|name| match fit_cox(records, std::slice::from_ref(name)) {
            Ok(fit) => ScreenRow {
                predictor: name.clone(),
                beta: Some(fit.beta[0]),
                se: Some(fit.se[0]),
                p_value: Some(fit.p_value[0]),
                retained: fit.p_value[0] < alpha,
                sign_flip: None,
                error: None,
            },
            Err(e) => ScreenRow {
                predictor: name.clone(),
                beta: None,
                se: None,
                p_value: None,
                retained: false,
                sign_flip: None,
                error: Some(e.to_string()),
            },
        })
        .collect()
}

/// Fits the retained predictors jointly and flags sign changes against the
/// univariate estimates. Exclusion is left to the operator.
pub fn sign_flip_report(records: &[CohortRecord], rows: &mut [ScreenRow]) -> Result<Option<CoxFit>> {
    let retained: Vec<String> = rows.iter().filter(|r| r.retained).map(|r| r.predictor.clone()).collect();
    if retained.is_empty() {
        return Ok(None);
    }
    let fit = fit_cox(records, &retained)?;
    for row in rows.iter_mut().filter(|r| r.retained) {
        let k = retained.iter().position(|n| *n == row.predictor).expect("retained predictor");
        let uni = row.beta.expect("retained rows have estimates");
        row.sign_flip = Some(uni.signum() != fit.beta[k].signum());
    }
    Ok(Some(fit))
}

/// Univariate screen followed by the sign-flip check.
pub fn screen(records: &[CohortRecord], predictors: &[String], alpha: f64) -> Result<Vec<ScreenRow>> {
    let mut rows = univariate_screen(records, predictors, alpha);
    sign_flip_report(records, &mut rows)?;
    Ok(rows)
}

pub fn format_screen_table(rows: &[ScreenRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut s = String::from("predictor,beta,se,p,retained,sign_flip,error\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.predictor,
            opt(r.beta),
            opt(r.se),
            opt(r.p_value),
            r.retained,
            r.sign_flip.map(|b| b.to_string()).unwrap_or_default(),
            r.error.as_deref().unwrap_or("").replace(',', ";"),
        ));
    }
    s
}

/// Fraction of records carrying a value for every predictor.
pub fn complete_fraction(records: &[CohortRecord], predictors: &[String]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let complete = records
        .iter()
        .filter(|r| predictors.iter().all(|p| r.covariates.get(p).is_some_and(f64::is_finite)))
        .count();
    complete as f64 / records.len() as f64
}

/// Concordance counts: `value = (concordant + tied / 2) / usable`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Concordance {
    pub concordant: u64,
    pub tied: u64,
    pub usable: u64,
    pub value: f64,
}

impl Concordance {
    pub(crate) fn from_counts(concordant: u64, tied: u64, usable: u64) -> Result<Self> {
        if usable == 0 {
            return Err(Error::UndefinedMetric("no usable pairs".into()));
        }
        let value = (2 * concordant + tied) as f64 / (2 * usable) as f64;
        Ok(Self { concordant, tied, usable, value })
    }
}

struct Fenwick(Vec<u64>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Self(vec![0; n + 1])
    }

    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< rank`.
    fn below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// (less, equal, total) counts over a set selected by ascending key.
fn sweep_counts(
    order: &[usize],
    key: &[f64],
    strict: bool,
    events: &[usize],
    t: &[f64],
    rank: &[usize],
    n_ranks: usize,
) -> Vec<(u64, u64, u64)> {
    let mut fw = Fenwick::new(n_ranks);
    let mut inserted = 0u64;
    let mut k = 0;
    let mut out = vec![(0, 0, 0); events.len()];
    for (e, &i) in events.iter().enumerate() {
        let tau = t[i];
        while k < order.len() && (if strict { key[order[k]] < tau } else { key[order[k]] <= tau }) {
            fw.add(rank[order[k]]);
            inserted += 1;
            k += 1;
        }
        let less = fw.below(rank[i]);
        let equal = fw.below(rank[i] + 1) - less;
        out[e] = (less, equal, inserted);
    }
    out
}

/// Harrell-type C-index for left-truncated data: over pairs with `i` an event,
/// `t_i < t_j` and `j` at risk at `t_i` (`t0_j < t_i`), the share with
/// `score_i > score_j`, ties counted one half.
pub fn c_index(records: &[CohortRecord], scores: &[f64]) -> Result<Concordance> {
    if records.len() != scores.len() {
        return Err(Error::Argument("one score per record required".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Value("scores must be finite".into()));
    }
    let n = records.len();
    let t0: Vec<f64> = records.iter().map(|r| r.t0).collect();
    let t: Vec<f64> = records.iter().map(|r| r.t).collect();

    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let rank: Vec<usize> = scores.iter().map(|s| sorted.partition_point(|v| v < s)).collect();

    let mut events: Vec<usize> = (0..n).filter(|&i| records[i].event).collect();
    events.sort_by(|&a, &b| t[a].total_cmp(&t[b]));
    let mut by_entry: Vec<usize> = (0..n).collect();
    by_entry.sort_by(|&a, &b| t0[a].total_cmp(&t0[b]));
    let mut by_exit: Vec<usize> = (0..n).collect();
    by_exit.sort_by(|&a, &b| t[a].total_cmp(&t[b]));

    // #{t0_j < tau, t_j > tau} = #{t0_j < tau} - #{t_j <= tau} + #{t0_j = t_j = tau}.
    let a = sweep_counts(&by_entry, &t0, true, &events, &t, &rank, sorted.len());
    let b = sweep_counts(&by_exit, &t, false, &events, &t, &rank, sorted.len());
    let mut point: std::collections::HashMap<u64, Vec<usize>> = std::collections::HashMap::new();
    for j in 0..n {
        if t0[j] == t[j] {
            point.entry(t[j].to_bits()).or_default().push(rank[j]);
        }
    }
    point.values_mut().for_each(|v| v.sort_unstable());

    let (mut conc, mut tied, mut usable) = (0u64, 0u64, 0u64);
    for (e, &i) in events.iter().enumerate() {
        let (c_less, c_eq, c_tot) = match point.get(&t[i].to_bits()) {
            Some(v) => {
                let lo = v.partition_point(|&r| r < rank[i]) as u64;
                let hi = v.partition_point(|&r| r <= rank[i]) as u64;
                (lo, hi - lo, v.len() as u64)
            }
            None => (0, 0, 0),
        };
        conc += a[e].0 + c_less - b[e].0;
        tied += a[e].1 + c_eq - b[e].1;
        usable += a[e].2 + c_tot - b[e].2;
    }
    Concordance::from_counts(conc, tied, usable)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hazard::CovariateProfile;

    fn rec(id: usize, t0: f64, t: f64, event: bool, x: f64) -> CohortRecord {
        CohortRecord {
            id: format!("r{id}"),
            t0,
            t,
            event,
            weight: 1.0,
            covariates: CovariateProfile::new().with("x", x),
        }
    }

    #[test]
    fn two_at_risk_one_event_is_half() {
        let data = [rec(0, 0.0, 1.0, true, 0.3), rec(1, 0.0, 2.0, false, -0.4)];
        let ll = cox_log_partial_likelihood(&data, &["x".into()], &[0.0]).unwrap();
        assert!((ll - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn late_entrant_not_in_risk_set() {
        let data = [rec(0, 0.0, 1.0, true, 0.0), rec(1, 0.0, 2.0, false, 0.0), rec(2, 1.0, 3.0, false, 0.0)];
        let ll = cox_log_partial_likelihood(&data, &["x".into()], &[0.0]).unwrap();
        assert!((ll - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn constant_covariate_is_rank_error() {
        let data = [rec(0, 0.0, 1.0, true, 1.0), rec(1, 0.0, 2.0, false, 1.0)];
        assert!(matches!(fit_cox(&data, &["x".into()]), Err(Error::Rank(_))));
    }

    #[test]
    fn separation_fails_to_converge() {
        // Every event has the largest x in its risk set.
        let data: Vec<_> = (0..10).map(|i| rec(i, 0.0, 1.0 + i as f64, true, -(i as f64))).collect();
        let r = fit_cox(&data, &["x".into()]);
        assert!(matches!(r, Err(Error::NonConvergence(_))), "{r:?}");
    }

    #[test]
    fn c_index_edges() {
        let data: Vec<_> = (0..6).map(|i| rec(i, 0.0, 1.0 + i as f64, i % 2 == 0, 0.0)).collect();
        let perfect: Vec<f64> = (0..6).map(|i| -(i as f64)).collect();
        assert_eq!(c_index(&data, &perfect).unwrap().value, 1.0);
        assert_eq!(c_index(&data, &[0.5; 6]).unwrap().value, 0.5);
        let censored: Vec<_> = (0..3).map(|i| rec(i, 0.0, 1.0, false, 0.0)).collect();
        assert!(matches!(c_index(&censored, &[0.0; 3]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn screen_threshold_and_empty() {
        assert!(univariate_screen(&[], &[], 0.25).is_empty());
        let row = |p: f64| ScreenRow {
            predictor: "x".into(),
            beta: Some(0.1),
            se: Some(0.1),
            p_value: Some(p),
            retained: p < 0.25,
            sign_flip: None,
            error: None,
        };
        assert!(row(0.24).retained && !row(0.26).retained);
        assert!(format_screen_table(&[row(0.24)]).starts_with("predictor,beta,se,p,retained,sign_flip,error\nx,"));
    }
}
