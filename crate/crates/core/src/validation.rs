//! Interval discrimination and calibration, logistic recalibration and
//! k-fold cross-validation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{run_mcmc, CohortRecord, FitConfig};
use crate::error::{Error, Result};
use crate::mortality::LifeTableHazard;
use crate::risk::{Anchor, RiskEngine, RiskQuery};
use crate::screening::Concordance;
use crate::stats::{inv_logit, logit, pairwise_sum};

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    EventInInterval,
    EventFree,
    CensoredInInterval,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::EventInInterval => "event_in_interval",
            Outcome::EventFree => "event_free",
            Outcome::CensoredInInterval => "censored_in_interval",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "event_in_interval" => Ok(Outcome::EventInInterval),
            "event_free" => Ok(Outcome::EventFree),
            "censored_in_interval" => Ok(Outcome::CensoredInInterval),
            other => Err(Error::Format(format!("unknown outcome `{other}`"))),
        }
    }

    fn included(self) -> bool {
        self != Outcome::CensoredInInterval
    }
}

/// Outcome over `(a, b]` for a subject at risk at `a`; `None` when not at risk.
pub fn classify(record: &CohortRecord, a: f64, b: f64) -> Option<Outcome> {
    if record.t0 > a || record.t <= a {
        return None;
    }
    Some(if record.event && record.t <= b {
        Outcome::EventInInterval
    } else if record.t >= b {
        Outcome::EventFree
    } else {
        Outcome::CensoredInInterval
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutcomePair {
    pub id: String,
    pub a: f64,
    pub b: f64,
    pub risk: f64,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub subgroups: BTreeMap<String, String>,
}

fn included(pairs: &[PredictionOutcomePair]) -> impl Iterator<Item = &PredictionOutcomePair> {
    pairs.iter().filter(|p| p.outcome.included())
}

/// Mann–Whitney AUC of cases against event-free controls; ties count one half.
pub fn interval_auc(pairs: &[PredictionOutcomePair]) -> Result<Concordance> {
    let mut controls: Vec<f64> = pairs
        .iter()
        .filter(|p| p.outcome == Outcome::EventFree)
        .map(|p| p.risk)
        .collect();
    controls.sort_by(f64::total_cmp);
    let cases: Vec<f64> = pairs
        .iter()
        .filter(|p| p.outcome == Outcome::EventInInterval)
        .map(|p| p.risk)
        .collect();
    if cases.is_empty() || controls.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs cases and controls, got {} and {}",
            cases.len(),
            controls.len()
        )));
    }
    let usable = cases.len() as u64 * controls.len() as u64;
    let (mut greater, mut tied) = (0u64, 0u64);
    for r in cases {
        let below = controls.partition_point(|c| *c < r);
        let upto = controls.partition_point(|c| *c <= r);
        greater += below as u64;
        tied += (upto - below) as u64;
    }
    Concordance::from_counts(greater, tied, usable)
}

/// Expected against observed events. `ratio` is infinite when nothing was
/// observed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub n: usize,
    pub expected: f64,
    pub observed: u64,
    pub ratio: f64,
}

impl Calibration {
    fn from_risks<'a>(pairs: impl Iterator<Item = &'a PredictionOutcomePair>) -> Self {
        let mut risks = Vec::new();
        let mut observed = 0;
        for p in pairs.filter(|p| p.outcome.included()) {
            risks.push(p.risk);
            observed += u64::from(p.outcome == Outcome::EventInInterval);
        }
        let expected = pairwise_sum(&risks);
        let ratio = if observed == 0 { f64::INFINITY } else { expected / observed as f64 };
        Self { n: risks.len(), expected, observed, ratio }
    }
}

pub fn expected_observed(pairs: &[PredictionOutcomePair]) -> Calibration {
    Calibration::from_risks(pairs.iter())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileRow {
    pub quartile: usize,
    pub low: f64,
    pub high: f64,
    pub calibration: Calibration,
}

/// E/O within risk quartiles. Subjects are ranked by `(risk, id)` and group
/// `k` holds ranks `ceil((k-1)n/4) < r <= ceil(kn/4)`.
pub fn quartile_calibration(pairs: &[PredictionOutcomePair]) -> Result<Vec<QuartileRow>> {
    let mut ranked: Vec<&PredictionOutcomePair> = included(pairs).collect();
    let n = ranked.len();
    if n < 4 {
        return Err(Error::Value(format!("quartile calibration needs at least 4 subjects, got {n}")));
    }
    ranked.sort_by(|x, y| x.risk.total_cmp(&y.risk).then_with(|| x.id.cmp(&y.id)));
    let bound = |k: usize| (k * n).div_ceil(4);
    Ok((1..=4)
        .map(|k| {
            let group = &ranked[bound(k - 1)..bound(k)];
            QuartileRow {
                quartile: k,
                low: group.first().map_or(f64::NAN, |p| p.risk),
                high: group.last().map_or(f64::NAN, |p| p.risk),
                calibration: Calibration::from_risks(group.iter().copied()),
            }
        })
        .collect())
}

/// E/O for each level of subgroup `label`.
pub fn subgroup_calibration(pairs: &[PredictionOutcomePair], label: &str) -> Result<Vec<(String, Calibration)>> {
    let mut groups: BTreeMap<&str, Vec<&PredictionOutcomePair>> = BTreeMap::new();
    for p in included(pairs) {
        let level = p
            .subgroups
            .get(label)
            .ok_or_else(|| Error::Schema(format!("subject {} has no `{label}` label", p.id)))?;
        groups.entry(level).or_default().push(p);
    }
    Ok(groups
        .into_iter()
        .map(|(level, ps)| (level.to_string(), Calibration::from_risks(ps.into_iter())))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recalibration {
    pub intercept: f64,
    pub risks: Vec<f64>,
    pub iterations: usize,
}

fn offset_loglik(lr: &[f64], y: &[bool], alpha: f64) -> f64 {
    lr.iter()
        .zip(y)
        .map(|(&l, &yi)| {
            let eta = l + alpha;
            // log p = -softplus(-eta), log(1-p) = -softplus(eta)
            let s = if yi { -eta } else { eta };
            -(s.max(0.0) + (-s.abs()).exp().ln_1p())
        })
        .sum()
}

/// Intercept-only logistic regression with `logit(risk)` as offset.
pub fn recalibrate(risks: &[f64], outcomes: &[bool]) -> Result<Recalibration> {
    if risks.len() != outcomes.len() {
        return Err(Error::Argument(format!(
            "{} risks but {} outcomes",
            risks.len(),
            outcomes.len()
        )));
    }
    if let Some(r) = risks.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(Error::Value(format!("risk {r} outside (0, 1)")));
    }
    let events = outcomes.iter().filter(|y| **y).count();
    if events == 0 || events == outcomes.len() {
        return Err(Error::NonConvergence(
            "recalibration intercept diverges when all outcomes are identical".into(),
        ));
    }
    let lr: Vec<f64> = risks.iter().map(|&r| logit(r)).collect();
    let mut alpha = 0.0;
    let mut ll = offset_loglik(&lr, outcomes, alpha);
    for iteration in 1..=NEWTON_MAX_ITER {
        let (mut score, mut info) = (0.0, 0.0);
        for (&l, &y) in lr.iter().zip(outcomes) {
            let p = inv_logit(l + alpha);
            score += f64::from(u8::from(y)) - p;
            info += p * (1.0 - p);
        }
        if !(info > 0.0) {
            return Err(Error::NonConvergence("recalibration information vanished".into()));
        }
        let mut step = score / info;
        let mut next = offset_loglik(&lr, outcomes, alpha + step);
        let mut halvings = 0;
        while next < ll && halvings < 50 {
            step *= 0.5;
            next = offset_loglik(&lr, outcomes, alpha + step);
            halvings += 1;
        }
        alpha += step;
        ll = next;
        if step.abs() < NEWTON_TOL {
            let risks = lr.iter().map(|&l| inv_logit(l + alpha)).collect();
            return Ok(Recalibration { intercept: alpha, risks, iterations: iteration });
        }
    }
    Err(Error::NonConvergence(format!(
        "recalibration intercept not converged after {NEWTON_MAX_ITER} iterations"
    )))
}

/// Recalibrates on the cases and controls of `pairs` and shifts every pair's
/// risk by the fitted intercept.
pub fn recalibrate_pairs(pairs: &[PredictionOutcomePair]) -> Result<(Recalibration, Vec<PredictionOutcomePair>)> {
    let (risks, outcomes): (Vec<f64>, Vec<bool>) = included(pairs)
        .map(|p| (p.risk, p.outcome == Outcome::EventInInterval))
        .unzip();
    let fit = recalibrate(&risks, &outcomes)?;
    let mut updated = pairs.to_vec();
    let mut fitted = fit.risks.iter();
    for p in &mut updated {
        p.risk = if p.outcome.included() {
            *fitted.next().expect("one fitted risk per included pair")
        } else if p.risk > 0.0 && p.risk < 1.0 {
            inv_logit(logit(p.risk) + fit.intercept)
        } else {
            p.risk
        };
    }
    Ok((fit, updated))
}

/// AUC, overall and quartile E/O, and E/O by each subgroup label present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub cases: usize,
    pub controls: usize,
    pub censored: usize,
    pub auc: Option<Concordance>,
    pub calibration: Calibration,
    pub quartiles: Vec<QuartileRow>,
    pub subgroups: BTreeMap<String, Vec<(String, Calibration)>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

pub fn validation_report(pairs: &[PredictionOutcomePair]) -> Result<ValidationReport> {
    let count = |o: Outcome| pairs.iter().filter(|p| p.outcome == o).count();
    let mut notes = Vec::new();
    let auc = match interval_auc(pairs) {
        Ok(c) => Some(c),
        Err(e) => {
            notes.push(e.to_string());
            None
        }
    };
    let quartiles = match quartile_calibration(pairs) {
        Ok(q) => q,
        Err(e) => {
            notes.push(e.to_string());
            Vec::new()
        }
    };
    let mut labels: Vec<&String> = pairs.iter().flat_map(|p| p.subgroups.keys()).collect();
    labels.sort();
    labels.dedup();
    let mut subgroups = BTreeMap::new();
    for label in labels {
        subgroups.insert(label.clone(), subgroup_calibration(pairs, label)?);
    }
    Ok(ValidationReport {
        cases: count(Outcome::EventInInterval),
        controls: count(Outcome::EventFree),
        censored: count(Outcome::CensoredInInterval),
        auc,
        calibration: expected_observed(pairs),
        quartiles,
        subgroups,
        notes,
    })
}

fn fmt_num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.4}")
    } else if x.is_nan() {
        "NA".into()
    } else {
        "inf".into()
    }
}

fn calibration_cells(c: &Calibration) -> String {
    format!("{},{},{},{}", c.n, fmt_num(c.expected), c.observed, fmt_num(c.ratio))
}

/// Delimited tables: overall discrimination and calibration, quartiles, then
/// one block per subgroup label.
pub fn format_validation_report(label: &str, r: &ValidationReport) -> String {
    let mut s = String::new();
    let auc = r.auc.map_or("NA".into(), |a| fmt_num(a.value));
    s.push_str("interval,cases,controls,censored_excluded,auc,n,E,O,E/O\n");
    let _ = writeln!(s, "{label},{},{},{},{auc},{}", r.cases, r.controls, r.censored, calibration_cells(&r.calibration));
    s.push('\n');
    s.push_str("interval,quartile,risk_low,risk_high,n,E,O,E/O\n");
    for q in &r.quartiles {
        let _ = writeln!(
            s,
            "{label},{},{},{},{}",
            q.quartile,
            fmt_num(q.low),
            fmt_num(q.high),
            calibration_cells(&q.calibration)
        );
    }
    for (name, rows) in &r.subgroups {
        s.push('\n');
        let _ = writeln!(s, "interval,{name},n,E,O,E/O");
        for (level, c) in rows {
            let _ = writeln!(s, "{label},{level},{}", calibration_cells(c));
        }
    }
    s
}

/// Prediction interval evaluated in cross-validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "anchor", rename_all = "snake_case")]
pub enum Horizon {
    /// `(t0, t0 + years]` from each subject's age of first use.
    AfterFirstUse { years: f64 },
    /// `(a, b]` for subjects using and at risk at age `a`.
    AtAge { a: f64, b: f64 },
}

impl Horizon {
    pub fn label(&self) -> String {
        match self {
            Horizon::AfterFirstUse { years } => format!("{years}y_after_first_use"),
            Horizon::AtAge { a, b } => format!("age_{a}_to_{b}"),
        }
    }

    fn window(&self, r: &CohortRecord) -> (f64, f64, Anchor) {
        match *self {
            Horizon::AfterFirstUse { years } => (r.t0, r.t0 + years, Anchor::AtFirstUse),
            Horizon::AtAge { a, b } => (a, b, Anchor::AtAge),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub seed: u64,
    pub horizons: Vec<Horizon>,
    /// Covariate whose value labels the subgroup calibration table.
    #[serde(default)]
    pub subgroup: Option<String>,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 1,
            horizons: vec![Horizon::AfterFirstUse { years: 5.0 }],
            subgroup: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub test_events: usize,
    /// Held-out subjects skipped because the window left the fold's basis domain.
    pub out_of_domain: usize,
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalResult {
    pub horizon: Horizon,
    pub report: ValidationReport,
    pub pairs: Vec<PredictionOutcomePair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub intervals: Vec<IntervalResult>,
}

/// Fold index per subject: a seeded shuffle dealt round-robin.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds.max(1);
    }
    fold
}

struct FoldOutput {
    report: FoldReport,
    pairs: Vec<Vec<PredictionOutcomePair>>,
}

fn run_fold(
    k: usize,
    records: &[CohortRecord],
    assignment: &[usize],
    covariates: &[String],
    fit: &FitConfig,
    mortality: &LifeTableHazard,
    cv: &CvConfig,
) -> FoldOutput {
    let train: Vec<CohortRecord> = records
        .iter()
        .zip(assignment)
        .filter(|(_, f)| **f != k)
        .map(|(r, _)| r.clone())
        .collect();
    let test: Vec<&CohortRecord> = records.iter().zip(assignment).filter(|(_, f)| **f == k).map(|(r, _)| r).collect();
    let mut report = FoldReport {
        fold: k,
        n_train: train.len(),
        n_test: test.len(),
        test_events: test.iter().filter(|r| r.event).count(),
        out_of_domain: 0,
        flag: None,
    };
    let empty = || vec![Vec::new(); cv.horizons.len()];
    if report.test_events == 0 {
        report.flag = Some("no events in held-out fold".into());
        return FoldOutput { report, pairs: empty() };
    }
    if !train.iter().any(|r| r.event) {
        report.flag = Some("no events in training folds".into());
        return FoldOutput { report, pairs: empty() };
    }
    let fitted = fit
        .basis_for(&train)
        .and_then(|basis| run_mcmc(&train, covariates, &basis, fit).map(|d| (basis, d)));
    let (basis, draws) = match fitted {
        Ok(x) => x,
        Err(e) => {
            report.flag = Some(format!("fit failed: {e}"));
            return FoldOutput { report, pairs: empty() };
        }
    };
    let engine = RiskEngine::new(covariates.to_vec(), basis, mortality.clone());
    let mut pairs = Vec::with_capacity(cv.horizons.len());
    for h in &cv.horizons {
        let mut out = Vec::new();
        for r in &test {
            let (a, b, anchor) = h.window(r);
            let Some(outcome) = classify(r, a, b) else { continue };
            let mut q = RiskQuery::new(a, b, r.covariates.clone(), anchor);
            q.first_use_age = Some(r.t0);
            let estimate = match engine.posterior_risk(&q, draws.params()) {
                Ok(e) => e,
                Err(Error::Domain { .. }) => {
                    report.out_of_domain += 1;
                    continue;
                }
                Err(e) => {
                    report.flag = Some(format!("prediction failed for {}: {e}", r.id));
                    return FoldOutput { report, pairs: empty() };
                }
            };
            let mut subgroups = BTreeMap::new();
            if let Some(name) = &cv.subgroup {
                if let Some(v) = r.covariates.get(name) {
                    subgroups.insert(name.clone(), format!("{v}"));
                }
            }
            out.push(PredictionOutcomePair {
                id: r.id.clone(),
                a,
                b,
                risk: estimate.mean_risk,
                outcome,
                subgroups,
            });
        }
        pairs.push(out);
    }
    FoldOutput { report, pairs }
}

/// Refits on each training split, predicts the held-out fold and pools the
/// held-out predictions per horizon. Flagged folds contribute nothing.
pub fn cross_validate(
    records: &[CohortRecord],
    covariates: &[String],
    fit: &FitConfig,
    mortality: &LifeTableHazard,
    cv: &CvConfig,
) -> Result<CvReport> {
    if cv.folds < 2 {
        return Err(Error::Argument(format!("need at least 2 folds, got {}", cv.folds)));
    }
    if records.len() < cv.folds {
        return Err(Error::Argument(format!(
            "{} subjects cannot fill {} folds",
            records.len(),
            cv.folds
        )));
    }
    fit.validate()?;
    let assignment = fold_assignment(records.len(), cv.folds, cv.seed);
    let outputs: Vec<FoldOutput> = (0..cv.folds)
        .into_par_iter()
        .map(|k| run_fold(k, records, &assignment, covariates, fit, mortality, cv))
        .collect();
    let mut intervals = Vec::with_capacity(cv.horizons.len());
    for (h_index, h) in cv.horizons.iter().enumerate() {
        let mut pooled: Vec<PredictionOutcomePair> = outputs.iter().flat_map(|o| o.pairs[h_index].iter().cloned()).collect();
        pooled.sort_by(|x, y| x.id.cmp(&y.id));
        let report = validation_report(&pooled)?;
        intervals.push(IntervalResult { horizon: *h, report, pairs: pooled });
    }
    Ok(CvReport { folds: outputs.into_iter().map(|o| o.report).collect(), intervals })
}

pub fn format_cv_report(r: &CvReport) -> String {
    let mut s = String::from("fold,n_train,n_test,test_events,out_of_domain,flag\n");
    for f in &r.folds {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            f.fold + 1,
            f.n_train,
            f.n_test,
            f.test_events,
            f.out_of_domain,
            f.flag.as_deref().unwrap_or("")
        );
    }
    for i in &r.intervals {
        s.push('\n');
        s.push_str(&format_validation_report(&i.horizon.label(), &i.report));
    }
    s
}
