//! Competing all-cause mortality from a period life table.
//!
//! Each integer age `x` carries a one-year death probability `q_x`, turned into
//! a constant hazard `-ln(1 - q_x)` over `[x, x + 1)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LifeTableRepr", into = "LifeTableRepr")]
pub struct LifeTableHazard {
    /// Free-text description of the table (source, sex-specific or combined).
    pub source: String,
    q: Vec<f64>,
    hazard: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LifeTableRepr {
    source: String,
    q: Vec<f64>,
}

impl TryFrom<LifeTableRepr> for LifeTableHazard {
    type Error = Error;

    fn try_from(r: LifeTableRepr) -> Result<Self> {
        Self::from_q(r.q, r.source)
    }
}

impl From<LifeTableHazard> for LifeTableRepr {
    fn from(t: LifeTableHazard) -> Self {
        Self { source: t.source, q: t.q }
    }
}

impl LifeTableHazard {
    /// Builds a table from `(age, q)` rows; ages must run 0, 1, 2, ... with no
    /// gaps or duplicates.
    pub fn from_rows(rows: &[(u32, f64)], source: impl Into<String>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Format("life table has no rows".into()));
        }
        for (expected, &(age, _)) in rows.iter().enumerate() {
            if age as usize != expected {
                return Err(Error::Format(format!(
                    "life table ages must be contiguous from 0: expected {expected}, found {age}"
                )));
            }
        }
        Self::from_q(rows.iter().map(|r| r.1).collect(), source)
    }

    pub fn from_q(q: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::Format("life table has no rows".into()));
        }
        for (age, &qx) in q.iter().enumerate() {
            if !(0.0..1.0).contains(&qx) {
                return Err(Error::Value(format!("q at age {age} must lie in [0, 1), got {qx}")));
            }
        }
        let hazard = q.iter().map(|&qx| -(-qx).ln_1p()).collect();
        Ok(Self { source: source.into(), q, hazard })
    }

    /// Constant hazard `rate` at every age `0..=max_age`.
    pub fn constant(rate: f64, max_age: u32) -> Result<Self> {
        if !(rate >= 0.0) || !rate.is_finite() {
            return Err(Error::Value(format!("mortality rate must be nonnegative, got {rate}")));
        }
        let q = vec![-(-rate).exp_m1(); max_age as usize + 1];
        let mut table = Self::from_q(q, format!("constant hazard {rate}"))?;
        // Keep the exact rate rather than its round trip through q.
        table.hazard.iter_mut().for_each(|h| *h = rate);
        Ok(table)
    }

    /// Illustrative table from the Gompertz-Makeham law
    /// `mu(x) = a + b * exp(c * x)`, integrated over each year of age.
    pub fn gompertz_makeham(a: f64, b: f64, c: f64, max_age: u32) -> Result<Self> {
        if !(a >= 0.0 && b >= 0.0 && c > 0.0) {
            return Err(Error::Value(format!("invalid Gompertz-Makeham parameters ({a}, {b}, {c})")));
        }
        let q = (0..=max_age)
            .map(|x| {
                let x = x as f64;
                let h = a + b / c * ((c * (x + 1.0)).exp() - (c * x).exp());
                -(-h).exp_m1()
            })
            .collect();
        Self::from_q(q, format!("Gompertz-Makeham a={a} b={b} c={c} (illustrative)"))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, path.display().to_string())
    }

    /// Parses `age,q` text with a header row.
    pub fn parse_csv(text: &str, source: impl Into<String>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
        if headers.len() != 2 || &headers[0] != "age" || &headers[1] != "q" {
            return Err(Error::Format(format!(
                "life table header must be 'age,q', got '{}'",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Format(format!("line {line}: {e}")))?;
            let age: u32 = rec[0]
                .parse()
                .map_err(|_| Error::Format(format!("line {line}: bad age '{}'", &rec[0])))?;
            let q: f64 = rec[1]
                .parse()
                .map_err(|_| Error::Format(format!("line {line}: bad q '{}'", &rec[1])))?;
            rows.push((age, q));
        }
        Self::from_rows(&rows, source)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("age,q\n");
        for (age, q) in self.q.iter().enumerate() {
            out.push_str(&format!("{age},{q}\n"));
        }
        out
    }

    pub fn max_age(&self) -> u32 {
        (self.q.len() - 1) as u32
    }

    /// Upper end of the covered range, `max_age + 1`.
    pub fn horizon(&self) -> f64 {
        self.q.len() as f64
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn hazards(&self) -> &[f64] {
        &self.hazard
    }

    /// Hazard in force at `age`.
    pub fn hazard_at(&self, age: f64) -> Result<f64> {
        if !(age >= 0.0) || age > self.horizon() {
            return Err(Error::Range { age, max: self.horizon() });
        }
        let idx = (age.floor() as usize).min(self.hazard.len() - 1);
        Ok(self.hazard[idx])
    }

    /// Hazard at `age`, holding the last row beyond the table end. The flag
    /// reports whether clamping happened.
    pub fn hazard_at_clamped(&self, age: f64) -> (f64, bool) {
        let idx = age.max(0.0).floor() as usize;
        if idx >= self.hazard.len() {
            (self.hazard[self.hazard.len() - 1], true)
        } else {
            (self.hazard[idx], false)
        }
    }

    /// Integrated hazard over `[a, t]`.
    pub fn cumulative(&self, a: f64, t: f64) -> Result<f64> {
        if !(a >= 0.0) || a > t {
            return Err(Error::Argument(format!("need 0 <= a <= t, got a={a}, t={t}")));
        }
        if t > self.horizon() {
            return Err(Error::Range { age: t, max: self.horizon() });
        }
        let mut total = 0.0;
        let mut lo = a;
        while lo < t {
            let idx = lo.floor() as usize;
            let hi = ((idx + 1) as f64).min(t);
            total += self.hazard[idx.min(self.hazard.len() - 1)] * (hi - lo);
            lo = hi;
        }
        Ok(total)
    }

    /// `S2(t) / S2(a)`.
    pub fn survival_ratio(&self, a: f64, t: f64) -> Result<f64> {
        Ok((-self.cumulative(a, t)?).exp())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn q_to_hazard() {
        let t = LifeTableHazard::from_rows(&[(0, 0.0), (1, 0.01), (2, 0.5)], "test").unwrap();
        assert_eq!(t.hazards()[0], 0.0);
        assert!((t.hazards()[1] - 0.010050335853501).abs() < 1e-14);
        assert!((t.hazards()[2] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(matches!(
            LifeTableHazard::from_rows(&[(0, 0.1), (2, 0.1)], "gap"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            LifeTableHazard::from_rows(&[(0, 0.1), (0, 0.1)], "dup"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            LifeTableHazard::from_rows(&[(0, 0.1), (1, 1.0)], "q=1"),
            Err(Error::Value(_))
        ));
        assert!(LifeTableHazard::parse_csv("age,p\n0,0.1\n", "hdr").is_err());
    }

    #[test]
    fn parses_csv_exactly() {
        let t = LifeTableHazard::parse_csv("age,q\n0,0.005411\n1,0.000395\n", "x").unwrap();
        assert_eq!(t.q(), &[0.005411, 0.000395]);
        assert_eq!(t.max_age(), 1);
        let again = LifeTableHazard::parse_csv(&t.to_csv(), "x").unwrap();
        assert_eq!(again.q(), t.q());
    }

    #[test]
    fn survival_ratio_cases() {
        let t = LifeTableHazard::constant(0.02, 100).unwrap();
        assert_eq!(t.survival_ratio(30.0, 30.0).unwrap(), 1.0);
        assert!((t.survival_ratio(16.0, 21.0).unwrap() - (-0.1f64).exp()).abs() < 1e-15);

        let rows: Vec<(u32, f64)> = (0..30).map(|a| (a, 0.001 * (a + 1) as f64)).collect();
        let t = LifeTableHazard::from_rows(&rows, "ramp").unwrap();
        let expected = 0.5 * t.hazards()[16] + 0.25 * t.hazards()[17];
        assert!((t.cumulative(16.5, 17.25).unwrap() - expected).abs() < 1e-16);
        assert!(matches!(t.survival_ratio(10.0, 30.5), Err(Error::Range { .. })));
        assert!(t.survival_ratio(10.0, 30.0).is_ok());
    }

    #[test]
    fn clamped_lookup() {
        let t = LifeTableHazard::constant(0.01, 5).unwrap();
        assert_eq!(t.hazard_at_clamped(3.5), (0.01, false));
        assert_eq!(t.hazard_at_clamped(7.0), (0.01, true));
    }
}
