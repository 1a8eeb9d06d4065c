//! Delimited-text readers and writers for cohorts, panels and prediction files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::bayes::CohortRecord;
use crate::error::{Error, Result};
use crate::hazard::CovariateProfile;
use crate::longitudinal::PanelObservation;
use crate::validation::{Outcome, PredictionOutcomePair};

pub const COHORT_COLUMNS: [&str; 5] = ["id", "t0", "t", "delta", "weight"];
pub const PANEL_COLUMNS: [&str; 4] = ["subject_id", "wave", "age", "value"];
pub const PREDICTION_COLUMNS: [&str; 5] = ["id", "a", "b", "risk", "outcome"];

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Header plus rows; `line` is the 1-based line number of the row.
struct Table {
    extra: Vec<String>,
    rows: Vec<(usize, csv::StringRecord)>,
}

fn read_table(text: &str, required: &[&str], what: &str) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("{what} header: {e}")))?
        .clone();
    let found: Vec<&str> = headers.iter().collect();
    if found.len() < required.len() || found[..required.len()] != *required {
        return Err(Error::Schema(format!(
            "{what} header must start with `{}`, got `{}`",
            required.join(","),
            found.join(",")
        )));
    }
    let extra: Vec<String> = found[required.len()..].iter().map(|s| s.to_string()).collect();
    let mut seen = std::collections::BTreeSet::new();
    for name in &extra {
        if name.is_empty() || !seen.insert(name.as_str()) || required.contains(&name.as_str()) {
            return Err(Error::Schema(format!("{what} header has empty or duplicate column `{name}`")));
        }
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Format(format!("{what} row {line}: {e}")))?;
        rows.push((line, rec));
    }
    Ok(Table { extra, rows })
}

fn field<'a>(rec: &'a csv::StringRecord, i: usize, name: &str, line: usize) -> Result<&'a str> {
    match rec.get(i) {
        Some(s) if !s.is_empty() => Ok(s),
        _ => Err(Error::Schema(format!("row {line}: missing value for `{name}`"))),
    }
}

fn number(rec: &csv::StringRecord, i: usize, name: &str, line: usize) -> Result<f64> {
    let s = field(rec, i, name, line)?;
    s.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::Format(format!("row {line}: `{name}` is not a finite number: `{s}`")))
}

/// Cohort file: `id,t0,t,delta,weight,<covariate...>`. Returns the records
/// and covariate names in column order.
pub fn parse_cohort(text: &str) -> Result<(Vec<CohortRecord>, Vec<String>)> {
    let table = read_table(text, &COHORT_COLUMNS, "cohort")?;
    let mut records = Vec::with_capacity(table.rows.len());
    let mut ids = std::collections::HashSet::new();
    for (line, rec) in &table.rows {
        let line = *line;
        let id = field(rec, 0, "id", line)?.to_string();
        if !ids.insert(id.clone()) {
            return Err(Error::Schema(format!("row {line}: duplicate id `{id}`")));
        }
        let delta = match field(rec, 3, "delta", line)? {
            "0" => false,
            "1" => true,
            other => return Err(Error::Format(format!("row {line}: delta must be 0 or 1, got `{other}`"))),
        };
        let mut covariates = CovariateProfile::new();
        for (k, name) in table.extra.iter().enumerate() {
            covariates.set(name, number(rec, COHORT_COLUMNS.len() + k, name, line)?);
        }
        let r = CohortRecord {
            id,
            t0: number(rec, 1, "t0", line)?,
            t: number(rec, 2, "t", line)?,
            event: delta,
            weight: number(rec, 4, "weight", line)?,
            covariates,
        };
        r.validate().map_err(|e| Error::Value(format!("row {line}: {e}")))?;
        records.push(r);
    }
    Ok((records, table.extra))
}

pub fn read_cohort(path: impl AsRef<Path>) -> Result<(Vec<CohortRecord>, Vec<String>)> {
    parse_cohort(&read_text(path)?)
}

/// Writes a cohort file. Missing covariates become empty fields.
pub fn format_cohort(records: &[CohortRecord], covariates: &[String]) -> String {
    let mut s = COHORT_COLUMNS.join(",");
    for c in covariates {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    for r in records {
        let _ = write!(s, "{},{},{},{},{}", r.id, r.t0, r.t, u8::from(r.event), r.weight);
        for c in covariates {
            s.push(',');
            if let Some(v) = r.covariates.get(c) {
                let _ = write!(s, "{v}");
            }
        }
        s.push('\n');
    }
    s
}

pub fn parse_panel(text: &str) -> Result<Vec<PanelObservation>> {
    let table = read_table(text, &PANEL_COLUMNS, "panel")?;
    table
        .rows
        .iter()
        .map(|(line, rec)| {
            let line = *line;
            let wave = field(rec, 1, "wave", line)?;
            Ok(PanelObservation {
                subject: field(rec, 0, "subject_id", line)?.to_string(),
                wave: wave
                    .parse()
                    .map_err(|_| Error::Format(format!("row {line}: bad wave `{wave}`")))?,
                age: number(rec, 2, "age", line)?,
                value: number(rec, 3, "value", line)?,
            })
        })
        .collect()
}

/// Prediction file: `id,a,b,risk,outcome,<subgroup...>`.
pub fn parse_predictions(text: &str) -> Result<Vec<PredictionOutcomePair>> {
    let table = read_table(text, &PREDICTION_COLUMNS, "predictions")?;
    table
        .rows
        .iter()
        .map(|(line, rec)| {
            let line = *line;
            let risk = number(rec, 3, "risk", line)?;
            if !(0.0..=1.0).contains(&risk) {
                return Err(Error::Value(format!("row {line}: risk {risk} outside [0, 1]")));
            }
            let outcome = Outcome::parse(field(rec, 4, "outcome", line)?)
                .map_err(|e| Error::Format(format!("row {line}: {e}")))?;
            let mut subgroups = BTreeMap::new();
            for (k, name) in table.extra.iter().enumerate() {
                let v = rec.get(PREDICTION_COLUMNS.len() + k).unwrap_or("");
                if !v.is_empty() {
                    subgroups.insert(name.clone(), v.to_string());
                }
            }
            Ok(PredictionOutcomePair {
                id: field(rec, 0, "id", line)?.to_string(),
                a: number(rec, 1, "a", line)?,
                b: number(rec, 2, "b", line)?,
                risk,
                outcome,
                subgroups,
            })
        })
        .collect()
}

pub fn format_predictions(pairs: &[PredictionOutcomePair]) -> String {
    let mut labels: Vec<&String> = pairs.iter().flat_map(|p| p.subgroups.keys()).collect();
    labels.sort();
    labels.dedup();
    let mut s = PREDICTION_COLUMNS.join(",");
    for l in &labels {
        s.push(',');
        s.push_str(l);
    }
    s.push('\n');
    for p in pairs {
        let _ = write!(s, "{},{},{},{},{}", p.id, p.a, p.b, p.risk, p.outcome.as_str());
        for l in &labels {
            s.push(',');
            if let Some(v) = p.subgroups.get(*l) {
                s.push_str(v);
            }
        }
        s.push('\n');
    }
    s
}

/// Covariate profile as a flat JSON object of name to value.
pub fn parse_profile(text: &str) -> Result<CovariateProfile> {
    let profile: CovariateProfile =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("profile: {e}")))?;
    if let Some((k, v)) = profile.0.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Value(format!("profile value for `{k}` is not finite: {v}")));
    }
    Ok(profile)
}

#[cfg(test)]
mod tests {
    use super::*;

    const COHORT: &str = "id,t0,t,delta,weight,male,delinquency\na,14,18.5,1,1.2,1,0.3\nb,15,30,0,0.8,0,0.1\n";

    #[test]
    fn cohort_round_trip() {
        let (records, names) = parse_cohort(COHORT).unwrap();
        assert_eq!(names, vec!["male", "delinquency"]);
        assert_eq!(records[0].covariates.get("delinquency"), Some(0.3));
        assert!(records[0].event && !records[1].event);
        let again = parse_cohort(&format_cohort(&records, &names)).unwrap();
        assert_eq!(again.0, records);
    }

    #[test]
    fn cohort_errors_name_the_row() {
        let missing = "id,t0,t,delta,weight,male\na,14,18,1,1,1\nb,15,30,0,1,\n";
        let e = parse_cohort(missing).unwrap_err();
        assert!(matches!(e, Error::Schema(_)) && e.to_string().contains("row 3"), "{e}");
        let bad_delta = "id,t0,t,delta,weight\na,14,18,2,1\n";
        assert!(parse_cohort(bad_delta).unwrap_err().to_string().contains("row 2"));
        let bad_header = "id,t,t0,delta,weight\n";
        assert!(matches!(parse_cohort(bad_header), Err(Error::Schema(_))));
        let backwards = "id,t0,t,delta,weight\na,18,14,0,1\n";
        assert!(parse_cohort(backwards).unwrap_err().to_string().contains("row 2"));
        let dup = "id,t0,t,delta,weight\na,14,18,0,1\na,14,18,0,1\n";
        assert!(parse_cohort(dup).is_err());
    }

    #[test]
    fn f64_fields_round_trip_exactly() {
        let (mut records, names) = parse_cohort(COHORT).unwrap();
        records[0].t = 18.0 + 1.0 / 3.0;
        records[1].covariates.set("delinquency", 0.1 + 0.2);
        let (again, _) = parse_cohort(&format_cohort(&records, &names)).unwrap();
        assert_eq!(again[0].t.to_bits(), records[0].t.to_bits());
        assert_eq!(again[1].covariates.get("delinquency"), Some(0.1 + 0.2));
    }

    #[test]
    fn predictions_round_trip() {
        let text = "id,a,b,risk,outcome,sex\np1,16,21,0.12,event_in_interval,f\np2,16,21,0.05,event_free,m\np3,17,22,0.2,censored_in_interval,\n";
        let pairs = parse_predictions(text).unwrap();
        assert_eq!(pairs[0].subgroups["sex"], "f");
        assert!(pairs[2].subgroups.is_empty());
        assert_eq!(format_predictions(&pairs), text);
        assert!(parse_predictions("id,a,b,risk,outcome\np,1,2,0.5,maybe\n").is_err());
        assert!(parse_predictions("id,a,b,risk,outcome\np,1,2,1.5,event_free\n").is_err());
    }

    #[test]
    fn panel_and_profile() {
        let panel = parse_panel("subject_id,wave,age,value\ns1,1,15.2,0.4\ns1,2,21.0,0.5\n").unwrap();
        assert_eq!(panel[1].wave, 2);
        let p = parse_profile(r#"{"male": 1, "delinquency": 0.25}"#).unwrap();
        assert_eq!(p.get("male"), Some(1.0));
        assert!(parse_profile(r#"{"male": "yes"}"#).is_err());
    }
}
