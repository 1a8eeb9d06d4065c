//! Absolute risk of the event in `(a, b]` for a subject event-free at `a`,
//! accounting for competing death.
//!
//! `[a, b]` is cut at integer ages (and at multiples of the grid step). On
//! each piece both hazards are held constant: the event hazard at the piece
//! midpoint (or left endpoint) and the life-table hazard of that age. Each
//! piece contributes
//!
//! ```text
//! S(start) / S(a) * h1 / (h1 + h2) * (1 - exp(-(h1 + h2) * width))
//! ```
//!
//! which is the exact integral under piecewise-constant hazards, so event
//! risk, death risk and event-free survival partition one.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hazard::{dot, CovariateProfile, ModelParams};
use crate::mortality::LifeTableHazard;
use crate::spline::SplineBasis;
use crate::stats::{nearest_rank, pairwise_sum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalPoint {
    #[default]
    Midpoint,
    LeftEndpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskGrid {
    /// Piece width in years; pieces never straddle an integer age.
    pub step: f64,
    pub eval: EvalPoint,
}

impl Default for RiskGrid {
    fn default() -> Self {
        Self { step: 1.0, eval: EvalPoint::Midpoint }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// Prediction made at the age of first use, `a = first-use age`.
    AtFirstUse,
    /// Prediction made at a given age for someone already using by then.
    AtAge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskQuery {
    pub a: f64,
    pub b: f64,
    pub profile: CovariateProfile,
    pub anchor: Anchor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_use_age: Option<f64>,
}

impl RiskQuery {
    pub fn new(a: f64, b: f64, profile: CovariateProfile, anchor: Anchor) -> Self {
        Self { a, b, profile, anchor, first_use_age: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.a.is_finite() || !self.b.is_finite() {
            return Err(Error::Argument("ages must be finite".into()));
        }
        if self.b < self.a {
            return Err(Error::Argument(format!("horizon {} precedes start {}", self.b, self.a)));
        }
        if let Some(first) = self.first_use_age {
            if self.a < first {
                return Err(Error::Argument(format!(
                    "start age {} precedes age of first use {first}",
                    self.a
                )));
            }
            if self.anchor == Anchor::AtFirstUse && self.a != first {
                return Err(Error::Argument(
                    "at_first_use prediction must start at the age of first use".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub mean_risk: f64,
    pub cri_low: f64,
    pub cri_high: f64,
    /// Posterior-mean cumulative risk at each integer age in `(a, b]`, plus
    /// `b` itself when fractional.
    pub per_year_curve: Vec<(f64, f64)>,
    pub draws: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// One constant-hazard piece of `[a, b]`, with the baseline basis values at
/// its evaluation point already computed.
#[derive(Debug, Clone)]
struct Piece {
    width: f64,
    end: f64,
    mspline: Vec<f64>,
    death_hazard: f64,
}

/// A risk window prepared for repeated evaluation over parameter draws.
#[derive(Debug, Clone)]
pub struct RiskWindow {
    a: f64,
    b: f64,
    pieces: Vec<Piece>,
    mortality_clamped: bool,
}

impl RiskWindow {
    pub fn new(
        a: f64,
        b: f64,
        basis: &SplineBasis,
        mortality: &LifeTableHazard,
        grid: RiskGrid,
    ) -> Result<Self> {
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::Argument("ages must be finite".into()));
        }
        if b < a {
            return Err(Error::Argument(format!("horizon {b} precedes start {a}")));
        }
        if !(grid.step > 0.0) || grid.step > 1.0 {
            return Err(Error::Argument(format!("grid step must lie in (0, 1], got {}", grid.step)));
        }
        let (low, high) = basis.domain();
        for age in [a, b] {
            if !basis.contains(age) {
                return Err(Error::Domain { age, low, high });
            }
        }
        if a < 0.0 {
            return Err(Error::Range { age: a, max: mortality.horizon() });
        }

        let mut pieces = Vec::new();
        let mut clamped = false;
        let mut lo = a;
        let mut scratch = vec![0.0; basis.basis_count()];
        while lo < b {
            let hi = next_boundary(lo, grid.step).min(b);
            let at = match grid.eval {
                EvalPoint::Midpoint => 0.5 * (lo + hi),
                EvalPoint::LeftEndpoint => lo,
            };
            basis.mspline_into(at, &mut scratch)?;
            let (death_hazard, c) = mortality.hazard_at_clamped(0.5 * (lo + hi));
            clamped |= c;
            pieces.push(Piece { width: hi - lo, end: hi, mspline: scratch.clone(), death_hazard });
            lo = hi;
        }
        Ok(Self { a, b, pieces, mortality_clamped: clamped })
    }

    pub fn start(&self) -> f64 {
        self.a
    }

    pub fn end(&self) -> f64 {
        self.b
    }

    pub fn mortality_clamped(&self) -> bool {
        self.mortality_clamped
    }

    /// Ages at which a cumulative curve is reported.
    pub fn checkpoints(&self) -> Vec<f64> {
        self.pieces
            .iter()
            .map(|p| p.end)
            .filter(|&e| e == e.round() || e == self.b)
            .collect()
    }

    /// Walks the pieces for one draw, returning (event risk, death risk,
    /// event-free survival) and optionally recording cumulative event risk at
    /// each checkpoint.
    fn walk(&self, rr: f64, gamma: &[f64], mut curve: Option<&mut Vec<f64>>) -> (f64, f64, f64) {
        let mut surv = 1.0;
        let mut event = 0.0;
        let mut death = 0.0;
        for p in &self.pieces {
            let h1 = rr * dot(&p.mspline, gamma);
            let h2 = p.death_hazard;
            let total = h1 + h2;
            if total > 0.0 {
                let leave = -(-total * p.width).exp_m1();
                event += surv * leave * h1 / total;
                death += surv * leave * h2 / total;
                surv *= 1.0 - leave;
            }
            if let Some(c) = curve.as_deref_mut() {
                if p.end == p.end.round() || p.end == self.b {
                    c.push(event);
                }
            }
        }
        (event, death, surv)
    }

    pub fn event_risk(&self, x: &[f64], params: &ModelParams) -> f64 {
        self.walk(params.linear_predictor(x).exp(), &params.gamma, None).0
    }

    pub fn death_risk(&self, x: &[f64], params: &ModelParams) -> f64 {
        self.walk(params.linear_predictor(x).exp(), &params.gamma, None).1
    }

    /// Event-free survival `S1(b)S2(b) / (S1(a)S2(a))` under the same
    /// discretization.
    pub fn survival(&self, x: &[f64], params: &ModelParams) -> f64 {
        self.walk(params.linear_predictor(x).exp(), &params.gamma, None).2
    }

    pub fn partition(&self, x: &[f64], params: &ModelParams) -> (f64, f64, f64) {
        self.walk(params.linear_predictor(x).exp(), &params.gamma, None)
    }

    pub fn event_curve(&self, x: &[f64], params: &ModelParams) -> Vec<f64> {
        let mut c = Vec::new();
        self.walk(params.linear_predictor(x).exp(), &params.gamma, Some(&mut c));
        c
    }

    /// Posterior-averaged risk over `draws`.
    pub fn posterior(&self, x: &[f64], draws: &[&ModelParams]) -> Result<RiskEstimate> {
        if draws.is_empty() {
            return Err(Error::State("no posterior draws".into()));
        }
        let curves: Vec<Vec<f64>> = draws.par_iter().map(|p| self.event_curve(x, p)).collect();
        let n_points = self.checkpoints().len();
        let mut risks: Vec<f64> = curves
            .iter()
            .map(|c| c.last().copied().unwrap_or(0.0))
            .collect();
        let mean_risk = pairwise_sum(&risks) / risks.len() as f64;
        risks.sort_by(f64::total_cmp);
        let cri_low = nearest_rank(&risks, 0.025).min(mean_risk);
        let cri_high = nearest_rank(&risks, 0.975).max(mean_risk);

        let ages = self.checkpoints();
        let mut column = vec![0.0; curves.len()];
        let mut per_year_curve = Vec::with_capacity(n_points);
        for (k, &age) in ages.iter().enumerate() {
            for (slot, c) in column.iter_mut().zip(&curves) {
                *slot = c[k];
            }
            per_year_curve.push((age, pairwise_sum(&column) / column.len() as f64));
        }
        if let Some(last) = per_year_curve.last_mut() {
            last.1 = mean_risk;
        }
        // Running means of nondecreasing per-draw curves are nondecreasing up
        // to rounding; enforce it exactly.
        for i in 1..per_year_curve.len() {
            if per_year_curve[i].1 < per_year_curve[i - 1].1 {
                per_year_curve[i].1 = per_year_curve[i - 1].1;
            }
        }

        let mut warnings = Vec::new();
        if self.mortality_clamped {
            warnings.push(format!(
                "ages beyond the life table end in [{}, {}]; last available mortality rate held",
                self.a, self.b
            ));
        }
        Ok(RiskEstimate {
            mean_risk,
            cri_low,
            cri_high,
            per_year_curve,
            draws: draws.len(),
            warnings,
        })
    }
}

/// Next piece boundary above `lo`: the smaller of the next integer age and
/// the next multiple of `step`.
fn next_boundary(lo: f64, step: f64) -> f64 {
    let tol = 1e-9 * step;
    let next_int = (lo + tol).floor() + 1.0;
    let k = ((lo + tol) / step).floor() + 1.0;
    let next_step = k * step;
    let mut hi = next_int.min(next_step);
    // Snap to the integer when rounding put the step multiple a hair below it.
    if (hi - next_int).abs() <= tol {
        hi = next_int;
    }
    hi
}

/// Risk engine bound to a fitted model's basis, mortality and covariates.
#[derive(Debug, Clone)]
pub struct RiskEngine {
    pub covariates: Vec<String>,
    pub basis: SplineBasis,
    pub mortality: LifeTableHazard,
    pub grid: RiskGrid,
}

impl RiskEngine {
    pub fn new(covariates: Vec<String>, basis: SplineBasis, mortality: LifeTableHazard) -> Self {
        Self { covariates, basis, mortality, grid: RiskGrid::default() }
    }

    pub fn with_grid(mut self, grid: RiskGrid) -> Self {
        self.grid = grid;
        self
    }

    fn window(&self, q: &RiskQuery) -> Result<(RiskWindow, Vec<f64>)> {
        q.validate()?;
        let x = q.profile.design_row(&self.covariates)?;
        let w = RiskWindow::new(q.a, q.b, &self.basis, &self.mortality, self.grid)?;
        Ok((w, x))
    }

    pub fn absolute_risk(&self, q: &RiskQuery, params: &ModelParams) -> Result<f64> {
        let (w, x) = self.window(q)?;
        Ok(w.event_risk(&x, params))
    }

    pub fn competing_death_risk(&self, q: &RiskQuery, params: &ModelParams) -> Result<f64> {
        let (w, x) = self.window(q)?;
        Ok(w.death_risk(&x, params))
    }

    pub fn posterior_risk<'a, I>(&self, q: &RiskQuery, draws: I) -> Result<RiskEstimate>
    where
        I: IntoIterator<Item = &'a ModelParams>,
    {
        let (w, x) = self.window(q)?;
        let draws: Vec<&ModelParams> = draws.into_iter().collect();
        w.posterior(&x, &draws)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Degree-0, single-interval basis: M(t) = 1 / width, so the event
    /// hazard is exp(beta0) / width everywhere.
    fn flat(rate: f64, low: f64, high: f64) -> (SplineBasis, ModelParams) {
        let basis = SplineBasis::new(&[], 0, (low, high)).unwrap();
        let params = ModelParams::new((rate * (high - low)).ln(), vec![], vec![1.0], 1.0).unwrap();
        (basis, params)
    }

    fn engine(rate: f64, death: f64) -> (RiskEngine, ModelParams) {
        let (basis, params) = flat(rate, 0.0, 60.0);
        let table = LifeTableHazard::constant(death, 100).unwrap();
        (RiskEngine::new(vec![], basis, table), params)
    }

    fn query(a: f64, b: f64) -> RiskQuery {
        RiskQuery::new(a, b, CovariateProfile::new(), Anchor::AtAge)
    }

    #[test]
    fn constant_hazard_closed_form() {
        let (e, p) = engine(0.1, 0.02);
        let exact = 0.1 / 0.12 * (1.0 - (-0.6f64).exp());
        let r = e.absolute_risk(&query(0.0, 5.0), &p).unwrap();
        assert!((r - exact).abs() < 1e-12, "{r} vs {exact}");
        let d = e.competing_death_risk(&query(0.0, 5.0), &p).unwrap();
        assert!((d - 0.02 / 0.12 * (1.0 - (-0.6f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn empty_interval_is_zero() {
        let (e, p) = engine(0.1, 0.02);
        assert_eq!(e.absolute_risk(&query(16.0, 16.0), &p).unwrap(), 0.0);
        assert_eq!(e.competing_death_risk(&query(16.0, 16.0), &p).unwrap(), 0.0);
    }

    #[test]
    fn no_death_hazard_no_death_risk() {
        let (e, p) = engine(0.1, 0.0);
        assert_eq!(e.competing_death_risk(&query(3.0, 9.0), &p).unwrap(), 0.0);
    }

    #[test]
    fn reversed_interval_rejected() {
        let (e, p) = engine(0.1, 0.02);
        assert!(matches!(e.absolute_risk(&query(5.0, 4.0), &p), Err(Error::Argument(_))));
    }

    #[test]
    fn zero_event_hazard_in_window() {
        let basis = SplineBasis::new(&[20.0, 25.0], 1, (10.0, 35.0)).unwrap();
        // Last basis function lives on [25, 35]; the window [10, 20] sees none of it.
        let mut gamma = vec![0.0; basis.basis_count()];
        *gamma.last_mut().unwrap() = 1.0;
        let params = ModelParams::new(0.0, vec![], gamma, 1.0).unwrap();
        let table = LifeTableHazard::constant(0.01, 100).unwrap();
        let e = RiskEngine::new(vec![], basis, table);
        assert_eq!(e.absolute_risk(&query(10.0, 20.0), &params).unwrap(), 0.0);
    }

    #[test]
    fn fractional_pieces() {
        let w = RiskWindow::new(
            16.5,
            19.25,
            &flat(0.1, 0.0, 60.0).0,
            &LifeTableHazard::constant(0.0, 100).unwrap(),
            RiskGrid::default(),
        )
        .unwrap();
        let widths: Vec<f64> = w.pieces.iter().map(|p| p.width).collect();
        assert_eq!(widths, vec![0.5, 1.0, 1.0, 0.25]);
        assert_eq!(w.checkpoints(), vec![17.0, 18.0, 19.0, 19.25]);
    }

    #[test]
    fn fine_grid_boundaries() {
        let mut lo = 0.0;
        let mut n = 0;
        while lo < 5.0 {
            lo = next_boundary(lo, 0.01);
            n += 1;
        }
        assert_eq!(n, 500);
        assert_eq!(lo, 5.0);
    }

    #[test]
    fn single_draw_posterior() {
        let (e, p) = engine(0.05, 0.01);
        let q = query(16.0, 21.0);
        let r = e.absolute_risk(&q, &p).unwrap();
        let est = e.posterior_risk(&q, [&p]).unwrap();
        assert_eq!(est.mean_risk, r);
        assert_eq!(est.cri_low, r);
        assert_eq!(est.cri_high, r);
        assert_eq!(est.per_year_curve.len(), 5);
        assert!(e.posterior_risk(&q, std::iter::empty()).is_err());
    }

    #[test]
    fn first_use_anchor_checks() {
        let mut q = query(16.0, 21.0);
        q.anchor = Anchor::AtFirstUse;
        q.first_use_age = Some(15.0);
        assert!(q.validate().is_err());
        q.first_use_age = Some(16.0);
        assert!(q.validate().is_ok());
    }
}
