//! Cohort generator with a known data-generating model.
//!
//! Each subject draws covariates and an entry age, then a CUD time by
//! inverting the conditional survival, a death time from the life table and a
//! uniform censoring time. The observed exit is the earliest of the three (and
//! of the administrative end of follow-up). The latent times are kept in a
//! separate truth table.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Bernoulli, Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::CohortRecord;
use crate::error::{Error, Result};
use crate::hazard::{CovariateProfile, ModelParams};
use crate::mortality::LifeTableHazard;
use crate::spline::SplineBasis;

const BISECTION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Baseline {
    /// `M(t; gamma) * exp(beta0 + x'beta)` on the basis domain.
    Spline { basis: SplineBasis, params: ModelParams },
    /// `rate * exp(x'beta)`.
    Constant { rate: f64, beta: Vec<f64> },
}

impl Baseline {
    fn coefficients(&self) -> &[f64] {
        match self {
            Baseline::Spline { params, .. } => &params.beta,
            Baseline::Constant { beta, .. } => beta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum Distn {
    Constant { value: f64 },
    Bernoulli { p: f64 },
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, sd: f64 },
}

impl Distn {
    fn validate(&self, what: &str) -> Result<()> {
        let ok = match *self {
            Distn::Constant { value } => value.is_finite(),
            Distn::Bernoulli { p } => (0.0..=1.0).contains(&p),
            Distn::Uniform { low, high } => low.is_finite() && high.is_finite() && low <= high,
            Distn::Normal { mean, sd } => mean.is_finite() && sd >= 0.0 && sd.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid distribution for {what}: {self:?}")))
        }
    }

    fn sample(&self, rng: &mut ChaCha20Rng) -> f64 {
        match *self {
            Distn::Constant { value } => value,
            Distn::Bernoulli { p } => {
                if Bernoulli::new(p).expect("validated").sample(rng) {
                    1.0
                } else {
                    0.0
                }
            }
            Distn::Uniform { low, high } => {
                if low == high {
                    low
                } else {
                    Uniform::new(low, high).expect("validated").sample(rng)
                }
            }
            Distn::Normal { mean, sd } => Normal::new(mean, sd).expect("validated").sample(rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    #[serde(flatten)]
    pub dist: Distn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub baseline: Baseline,
    /// Competing mortality; `None` disables death.
    pub mortality: Option<LifeTableHazard>,
    pub covariates: Vec<CovariateSpec>,
    pub entry: Distn,
    /// Censoring uniform on `[t0 + cmin, t0 + cmax]`; `None` disables it.
    pub censoring: Option<(f64, f64)>,
    pub weights: Distn,
    /// End of follow-up. Defaults to the basis upper bound for spline baselines.
    pub follow_up_end: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstOutcome {
    Cud,
    Death,
    Censored,
    EndOfFollowUp,
}

/// Latent times for one subject; infinite when the event never occurs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub id: String,
    pub cud_time: f64,
    pub death_time: f64,
    pub censor_time: f64,
    pub first: FirstOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedCohort {
    pub covariates: Vec<String>,
    pub records: Vec<CohortRecord>,
    pub truth: Vec<SubjectTruth>,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Argument("n must be positive".into()));
        }
        if let Some((cmin, cmax)) = self.censoring {
            if !(cmin >= 0.0 && cmin <= cmax) {
                return Err(Error::Argument(format!("censoring window ({cmin}, {cmax}) invalid")));
            }
        }
        self.entry.validate("entry age")?;
        self.weights.validate("weights")?;
        if let Distn::Uniform { low, .. } | Distn::Constant { value: low } = self.weights {
            if !(low > 0.0) {
                return Err(Error::Argument("weights must be positive".into()));
            }
        }
        for c in &self.covariates {
            c.dist.validate(&c.name)?;
        }
        if self.baseline.coefficients().len() != self.covariates.len() {
            return Err(Error::Argument(format!(
                "{} coefficients for {} covariates",
                self.baseline.coefficients().len(),
                self.covariates.len()
            )));
        }
        match &self.baseline {
            Baseline::Spline { basis, params } => params.check_shape(self.covariates.len(), basis.basis_count())?,
            Baseline::Constant { rate, .. } => {
                if !(*rate >= 0.0) || !rate.is_finite() {
                    return Err(Error::Argument(format!("rate must be nonnegative, got {rate}")));
                }
                let unbounded = self.censoring.is_none() && self.follow_up_end.is_none();
                if *rate == 0.0 && self.mortality.is_none() && unbounded {
                    return Err(Error::Argument(
                        "zero hazard with no death, censoring or follow-up bound never terminates".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn end_of_follow_up(&self) -> f64 {
        match (&self.baseline, self.follow_up_end) {
            (_, Some(e)) => e,
            (Baseline::Spline { basis, .. }, None) => basis.domain().1,
            (Baseline::Constant { .. }, None) => f64::INFINITY,
        }
    }
}

/// Inverts `H(t) - H(t0) = target` for a continuous nondecreasing `H` on
/// `[t0, hi]`. Returns infinity when the target is out of reach.
fn invert_cumulative(mut h: impl FnMut(f64) -> f64, t0: f64, hi: f64, target: f64) -> f64 {
    let base = h(t0);
    if h(hi) - base < target {
        return f64::INFINITY;
    }
    let (mut lo, mut up) = (t0, hi);
    while up - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + up);
        if h(mid) - base < target {
            lo = mid;
        } else {
            up = mid;
        }
    }
    0.5 * (lo + up)
}

/// Death time from `t0` under the piecewise-constant life-table hazard,
/// holding the last row beyond the table end.
fn death_time(table: &LifeTableHazard, t0: f64, target: f64) -> f64 {
    let hz = table.hazards();
    let mut remaining = target;
    let mut lo = t0;
    loop {
        let idx = lo.floor() as usize;
        let h = hz[idx.min(hz.len() - 1)];
        if idx >= hz.len() - 1 {
            return if h > 0.0 { lo + remaining / h } else { f64::INFINITY };
        }
        let hi = (idx + 1) as f64;
        let mass = h * (hi - lo);
        if mass >= remaining {
            return lo + remaining / h;
        }
        remaining -= mass;
        lo = hi;
    }
}

fn subject_rng(seed: u64, index: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn exp1(rng: &mut ChaCha20Rng) -> f64 {
    // -ln(U) with U in (0, 1].
    -(1.0 - rng.random::<f64>()).ln()
}

fn simulate_one(cfg: &SimConfig, names: &[String], index: usize) -> (CohortRecord, SubjectTruth) {
    let mut rng = subject_rng(cfg.seed, index);
    let x: Vec<f64> = cfg.covariates.iter().map(|c| c.dist.sample(&mut rng)).collect();
    let t0 = cfg.entry.sample(&mut rng);
    let e_cud = exp1(&mut rng);
    let e_death = exp1(&mut rng);
    let u_cens: f64 = rng.random();
    let weight = cfg.weights.sample(&mut rng);
    let end = cfg.end_of_follow_up();

    let cud_time = match &cfg.baseline {
        Baseline::Spline { basis, params } => {
            let rr = params.linear_predictor(&x).exp();
            let mut scratch = vec![0.0; basis.basis_count()];
            let (low, high) = basis.domain();
            let cum = |t: f64| {
                basis
                    .ispline_into(t.clamp(low, high), &mut scratch)
                    .expect("clamped into domain");
                rr * crate::hazard::dot(&scratch, &params.gamma)
            };
            invert_cumulative(cum, t0, high, e_cud)
        }
        Baseline::Constant { rate, beta } => {
            let h = rate * crate::hazard::dot(&x, beta).exp();
            if h > 0.0 {
                t0 + e_cud / h
            } else {
                f64::INFINITY
            }
        }
    };
    let death = cfg.mortality.as_ref().map_or(f64::INFINITY, |m| death_time(m, t0, e_death));
    let censor = cfg
        .censoring
        .map_or(f64::INFINITY, |(cmin, cmax)| t0 + cmin + (cmax - cmin) * u_cens);

    let (t, first) = [
        (cud_time, FirstOutcome::Cud),
        (death, FirstOutcome::Death),
        (censor, FirstOutcome::Censored),
        (end, FirstOutcome::EndOfFollowUp),
    ]
    .into_iter()
    .fold((f64::INFINITY, FirstOutcome::EndOfFollowUp), |acc, c| if c.0 < acc.0 { c } else { acc });

    let id = format!("s{:06}", index + 1);
    let mut profile = CovariateProfile::new();
    for (n, v) in names.iter().zip(&x) {
        profile.set(n, *v);
    }
    let record = CohortRecord {
        id: id.clone(),
        t0,
        t: t.max(t0),
        event: first == FirstOutcome::Cud,
        weight,
        covariates: profile,
    };
    let truth = SubjectTruth { id, cud_time, death_time: death, censor_time: censor, first };
    (record, truth)
}

/// Simulates `config.n` subjects. Subject `i` uses its own RNG stream, so the
/// cohort does not depend on the thread count.
pub fn simulate_cohort(config: &SimConfig) -> Result<SimulatedCohort> {
    config.validate()?;
    let names: Vec<String> = config.covariates.iter().map(|c| c.name.clone()).collect();
    let (records, truth): (Vec<_>, Vec<_>) = (0..config.n)
        .into_par_iter()
        .map(|i| simulate_one(config, &names, i))
        .unzip();
    for r in &records {
        if !r.t.is_finite() {
            return Err(Error::Numeric(format!("subject {} never leaves follow-up", r.id)));
        }
    }
    Ok(SimulatedCohort { covariates: names, records, truth })
}

/// Covariate names of the reference scenario.
pub const REFERENCE_COVARIATES: [&str; 5] = ["male", "conscientiousness", "neuroticism", "openness", "delinquency"];

/// Hazard ratios of the reference scenario, in `REFERENCE_COVARIATES` order.
pub const REFERENCE_HAZARD_RATIOS: [f64; 5] = [1.31, 0.34, 5.64, 5.16, 19.89];

/// The illustrative mortality table shipped with the crate.
pub fn reference_life_table() -> LifeTableHazard {
    LifeTableHazard::gompertz_makeham(5e-4, 2e-5, 0.095, 100).expect("valid parameters")
}

/// Scenario used for the shipped cohort and the recovery checks: binary sex,
/// four unit-interval scales, first use between 12 and 21, at least five
/// years of follow-up after entry.
pub fn reference_scenario(n: usize, seed: u64) -> SimConfig {
    let basis = SplineBasis::new(&[15.0, 18.0, 22.0, 28.0], 3, (10.0, 45.0)).expect("valid basis");
    let gamma = vec![0.02, 0.08, 0.2, 0.25, 0.2, 0.12, 0.08, 0.05];
    let beta = REFERENCE_HAZARD_RATIOS.iter().map(|hr| hr.ln()).collect();
    let params = ModelParams::new(-3.5, beta, gamma, 1.0).expect("valid parameters");
    let mut covariates = vec![CovariateSpec { name: "male".into(), dist: Distn::Bernoulli { p: 0.5 } }];
    covariates.extend(REFERENCE_COVARIATES[1..].iter().map(|n| CovariateSpec {
        name: (*n).into(),
        dist: Distn::Uniform { low: 0.0, high: 1.0 },
    }));
    SimConfig {
        n,
        baseline: Baseline::Spline { basis, params },
        mortality: Some(reference_life_table()),
        covariates,
        entry: Distn::Uniform { low: 12.0, high: 21.0 },
        censoring: Some((5.0, 25.0)),
        weights: Distn::Constant { value: 1.0 },
        follow_up_end: None,
        seed,
    }
}

pub fn truth_csv(truth: &[SubjectTruth]) -> String {
    let mut s = String::from("id,cud_time,death_time,censor_time,first\n");
    for t in truth {
        let first = match t.first {
            FirstOutcome::Cud => "cud",
            FirstOutcome::Death => "death",
            FirstOutcome::Censored => "censored",
            FirstOutcome::EndOfFollowUp => "end_of_follow_up",
        };
        s.push_str(&format!("{},{},{},{},{first}\n", t.id, t.cud_time, t.death_time, t.censor_time));
    }
    s
}
