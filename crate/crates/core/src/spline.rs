//! M-spline and I-spline bases for the baseline hazard.
//!
//! M-splines are B-splines rescaled to integrate to one over their support,
//! evaluated with the order-1 base case `1 / (t[i+1] - t[i])` and the usual
//! triangular recursion. I-splines are their running integrals, obtained as
//! tail sums of order `k + 1` B-splines on the knot vector with one extra
//! right boundary knot.
//!
//! Boundary knots are repeated `order` times. At the right boundary the basis
//! is evaluated as a left limit, so `I_l(high) = 1` for every `l`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::quantile_type7;

pub const DEFAULT_DEGREE: usize = 3;
pub const DEFAULT_INTERIOR_KNOTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    knots: Vec<f64>,
    degree: usize,
}

impl SplineBasis {
    pub fn new(interior: &[f64], degree: usize, bounds: (f64, f64)) -> Result<Self> {
        let (low, high) = bounds;
        if !(low < high) || !low.is_finite() || !high.is_finite() {
            return Err(Error::Argument(format!("invalid bounds ({low}, {high})")));
        }
        let order = degree + 1;
        let mut knots = Vec::with_capacity(interior.len() + 2 * order);
        knots.extend(std::iter::repeat_n(low, order));
        knots.extend_from_slice(interior);
        knots.extend(std::iter::repeat_n(high, order));
        Self::from_knots(knots, degree)
    }

    /// Builds a basis from a full knot vector (boundary knots included).
    pub fn from_knots(knots: Vec<f64>, degree: usize) -> Result<Self> {
        let order = degree + 1;
        if knots.len() < 2 * order {
            return Err(Error::Format(format!(
                "knot vector of length {} too short for degree {degree}",
                knots.len()
            )));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::Format("non-finite knot".into()));
        }
        if knots.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Format("knots must be nondecreasing".into()));
        }
        let low = knots[0];
        let high = knots[knots.len() - 1];
        if !(low < high) {
            return Err(Error::Format("boundary knots must differ".into()));
        }
        if knots[..order].iter().any(|&k| k != low)
            || knots[knots.len() - order..].iter().any(|&k| k != high)
        {
            return Err(Error::Format(
                "boundary knots must be repeated to the spline order".into(),
            ));
        }
        let interior = &knots[order..knots.len() - order];
        if interior.iter().any(|&k| k <= low || k >= high) {
            return Err(Error::Format("interior knots must lie strictly inside bounds".into()));
        }
        Ok(Self { knots, degree })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn order(&self) -> usize {
        self.degree + 1
    }

    pub fn basis_count(&self) -> usize {
        self.knots.len() - self.order()
    }

    pub fn interior_knots(&self) -> &[f64] {
        let k = self.order();
        &self.knots[k..self.knots.len() - k]
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    pub fn contains(&self, t: f64) -> bool {
        let (low, high) = self.domain();
        t >= low && t <= high
    }

    fn check_domain(&self, t: f64) -> Result<()> {
        if self.contains(t) {
            Ok(())
        } else {
            let (low, high) = self.domain();
            Err(Error::Domain { age: t, low, high })
        }
    }

    /// Index `j` of the knot span holding `t`, using the left limit at the
    /// right boundary.
    fn span(&self, t: f64) -> usize {
        let k = self.order();
        let last = self.basis_count() - 1;
        let j = self.knots.partition_point(|&x| x <= t).saturating_sub(1);
        j.clamp(k - 1, last)
    }

    /// M-spline values `M_1(t) .. M_L(t)`.
    pub fn mspline(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.basis_count()];
        self.mspline_into(t, &mut out)?;
        Ok(out)
    }

    pub fn mspline_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        self.check_domain(t)?;
        let k = self.order();
        let j = self.span(t);
        out.iter_mut().for_each(|v| *v = 0.0);
        let local = nonzero_msplines(&self.knots, k, j, t);
        out[j + 1 - k..=j].copy_from_slice(&local);
        Ok(())
    }

    /// I-spline values `I_1(t) .. I_L(t)`, each the integral of `M_l` from
    /// the left boundary to `t`.
    pub fn ispline(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.basis_count()];
        self.ispline_into(t, &mut out)?;
        Ok(out)
    }

    pub fn ispline_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        self.check_domain(t)?;
        let k = self.order();
        let n = self.basis_count();
        let j = self.span(t);

        let mut extended = Vec::with_capacity(self.knots.len() + 1);
        extended.extend_from_slice(&self.knots);
        extended.push(self.domain().1);

        // Order k+1 splines nonzero on span j have indices j-k ..= j; the one
        // at index -1 (first span only) is never part of a tail sum.
        let local = nonzero_msplines(&extended, k + 1, j, t);
        let first = j as isize - k as isize;
        let mut bspl = vec![0.0; k + 1];
        for (offset, m_val) in local.iter().enumerate() {
            let m = first + offset as isize;
            if m < 0 {
                continue;
            }
            let m = m as usize;
            bspl[offset] = (extended[m + k + 1] - extended[m]) / (k + 1) as f64 * m_val;
        }

        let mut tail = 0.0;
        for i in (0..n).rev() {
            let ii = i as isize;
            out[i] = if ii > j as isize {
                0.0
            } else if ii < first {
                1.0
            } else {
                tail += bspl[(ii - first) as usize];
                tail.min(1.0)
            };
        }
        Ok(())
    }
}

/// Nonzero order-`order` M-splines on span `j`, indices `j+1-order ..= j`.
fn nonzero_msplines(knots: &[f64], order: usize, j: usize, t: f64) -> Vec<f64> {
    let mut vals = vec![0.0; order];
    // vals[order - 1] corresponds to index j at every stage.
    vals[order - 1] = 1.0 / (knots[j + 1] - knots[j]);
    for r in 2..=order {
        let scale = r as f64 / (r - 1) as f64;
        // Indices j+1-r ..= j, stored at positions order-r ..= order-1.
        for pos in (order - r)..order {
            if j + pos + 1 < order {
                vals[pos] = 0.0;
                continue;
            }
            let i = (j + pos + 1) - order;
            let denom = knots[i + r] - knots[i];
            if denom <= 0.0 {
                vals[pos] = 0.0;
                continue;
            }
            let left = if pos > order - r { vals[pos] } else { 0.0 };
            let right = if pos + 1 < order { vals[pos + 1] } else { 0.0 };
            vals[pos] = scale * ((t - knots[i]) * left + (knots[i + r] - t) * right) / denom;
        }
    }
    vals
}

/// Places interior knots at evenly spaced empirical quantiles of the event
/// times and boundary knots at `bounds`.
pub fn make_knots(
    event_times: &[f64],
    n_interior: usize,
    degree: usize,
    bounds: (f64, f64),
) -> Result<SplineBasis> {
    let (low, high) = bounds;
    if !(low < high) {
        return Err(Error::Argument(format!("bounds ({low}, {high}) must satisfy low < high")));
    }
    if n_interior == 0 {
        return SplineBasis::new(&[], degree, bounds);
    }
    if event_times.is_empty() {
        return Err(Error::DegenerateKnots("no event times for interior knots".into()));
    }
    let mut sorted: Vec<f64> = event_times.to_vec();
    if sorted.iter().any(|t| !t.is_finite()) {
        return Err(Error::Value("non-finite event time".into()));
    }
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < n_interior {
        return Err(Error::DegenerateKnots(format!(
            "{} distinct event times for {n_interior} interior knots",
            distinct.len()
        )));
    }

    let margin = (high - low) * 1e-6;
    let mut interior = Vec::with_capacity(n_interior);
    for i in 1..=n_interior {
        let p = i as f64 / (n_interior + 1) as f64;
        let q = quantile_type7(&sorted, p).clamp(low + margin, high - margin);
        interior.push(q);
    }
    if interior.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::DegenerateKnots(format!(
            "quantile knots coincide: {interior:?}"
        )));
    }
    SplineBasis::new(&interior, degree, bounds)
}
