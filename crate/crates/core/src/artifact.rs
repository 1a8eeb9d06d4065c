//! Model artifact: a magic line, a JSON header and a CSV block of posterior
//! draws.
//!
//! ```text
//! CUDRISK-MODEL 1
//! { ...header... }
//! %%DRAWS
//! chain,iteration,beta0,beta[x],...,gamma[1],...,tau
//! 0,0,-3.41,...
//! ```
//!
//! Draw values are written in shortest round-trip form, so reading back gives
//! bit-identical parameters. The header stores the SHA-256 of the draw block.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayes::{CohortRecord, Draw, FitConfig, FitDiagnostics, PosteriorDraws};
use crate::error::{Error, Result};
use crate::hazard::ModelParams;
use crate::io::{read_text, write_text};
use crate::mortality::LifeTableHazard;
use crate::risk::{RiskEngine, RiskEstimate, RiskGrid, RiskQuery};
use crate::spline::SplineBasis;

pub const MAGIC: &str = "CUDRISK-MODEL";
pub const FORMAT_VERSION: u32 = 1;
const DRAWS_MARKER: &str = "%%DRAWS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub binary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub format_version: u32,
    pub created_by: String,
    pub covariates: Vec<String>,
    pub covariate_ranges: Vec<CovariateRange>,
    pub preprocessing: Vec<String>,
    pub basis: SplineBasis,
    pub life_table: LifeTableHazard,
    pub grid: RiskGrid,
    pub diagnostics: Option<FitDiagnostics>,
    pub seed: u64,
    pub config_digest: String,
    pub fit_config: FitConfig,
    pub n_subjects: usize,
    pub n_events: usize,
    pub n_draws: usize,
    /// Draw count before thinning, when thinned.
    pub thinned_from: Option<usize>,
    pub draws_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub header: ArtifactHeader,
    pub draws: PosteriorDraws,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex(&Sha256::digest(data))
}

pub fn config_digest(config: &FitConfig) -> String {
    sha256_hex(serde_json::to_string(config).expect("config serializes").as_bytes())
}

fn ranges(records: &[CohortRecord], covariates: &[String]) -> Vec<CovariateRange> {
    covariates
        .iter()
        .map(|name| {
            let values: Vec<f64> = records.iter().filter_map(|r| r.covariates.get(name)).collect();
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let binary = !values.is_empty() && values.iter().all(|v| *v == 0.0 || *v == 1.0);
            CovariateRange { name: name.clone(), min, max, binary }
        })
        .collect()
}

fn draws_block(covariates: &[String], basis_count: usize, draws: &[Draw]) -> String {
    let mut s = String::from("chain,iteration,beta0");
    for c in covariates {
        let _ = write!(s, ",beta[{c}]");
    }
    for l in 1..=basis_count {
        let _ = write!(s, ",gamma[{l}]");
    }
    s.push_str(",tau\n");
    for d in draws {
        let p = &d.params;
        let _ = write!(s, "{},{},{}", d.chain, d.iteration, p.beta0);
        for v in p.beta.iter().chain(&p.gamma) {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{}", p.tau);
    }
    s
}

fn parse_draws(block: &str, covariates: &[String], basis_count: usize) -> Result<Vec<Draw>> {
    let mut lines = block.lines();
    let expected = draws_block(covariates, basis_count, &[]);
    let header = lines.next().unwrap_or("");
    if header != expected.trim_end() {
        return Err(Error::Format(format!("draw header `{header}` does not match model shape")));
    }
    let width = 4 + covariates.len() + basis_count;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(Error::Format(format!("draw row {row}: expected {width} fields, got {}", cells.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("draw row {row}: bad index `{s}`")));
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("draw row {row}: bad number `{s}`")));
        let values = cells[2..].iter().map(|s| num(s)).collect::<Result<Vec<f64>>>()?;
        let p = covariates.len();
        let params = ModelParams {
            beta0: values[0],
            beta: values[1..1 + p].to_vec(),
            gamma: values[1 + p..1 + p + basis_count].to_vec(),
            tau: values[1 + p + basis_count],
        };
        out.push(Draw { chain: int(cells[0])?, iteration: int(cells[1])?, params });
    }
    Ok(out)
}

impl ModelArtifact {
    /// Packages a fit. `thin` keeps at most that many evenly spaced draws.
    #[allow(clippy::too_many_arguments)]
    pub fn from_fit(
        records: &[CohortRecord],
        basis: SplineBasis,
        life_table: LifeTableHazard,
        draws: PosteriorDraws,
        config: &FitConfig,
        preprocessing: Vec<String>,
        thin: Option<usize>,
    ) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::State("no posterior draws".into()));
        }
        let total = draws.len();
        let draws = match thin {
            Some(k) if k > 0 && k < total => draws.thinned(k),
            _ => draws,
        };
        let block = draws_block(&draws.covariates, basis.basis_count(), &draws.draws);
        let header = ArtifactHeader {
            format_version: FORMAT_VERSION,
            created_by: format!("cudrisk {}", env!("CARGO_PKG_VERSION")),
            covariates: draws.covariates.clone(),
            covariate_ranges: ranges(records, &draws.covariates),
            preprocessing,
            basis,
            life_table,
            grid: RiskGrid::default(),
            diagnostics: draws.diagnostics.clone(),
            seed: config.seed,
            config_digest: config_digest(config),
            fit_config: config.clone(),
            n_subjects: records.len(),
            n_events: records.iter().filter(|r| r.event).count(),
            n_draws: draws.len(),
            thinned_from: (draws.len() < total).then_some(total),
            draws_sha256: sha256_hex(block.as_bytes()),
        };
        let a = Self { header, draws };
        a.validate()?;
        Ok(a)
    }

    fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported artifact version {}", h.format_version)));
        }
        if self.draws.is_empty() || h.n_draws != self.draws.len() {
            return Err(Error::Format(format!(
                "artifact declares {} draws but holds {}",
                h.n_draws,
                self.draws.len()
            )));
        }
        let mut names = h.covariates.clone();
        names.sort();
        names.dedup();
        if names.len() != h.covariates.len() {
            return Err(Error::Format("duplicate covariate names".into()));
        }
        // Re-run basis validation; deserialization bypasses the constructor.
        SplineBasis::from_knots(h.basis.knots().to_vec(), h.basis.degree())?;
        for p in self.draws.params() {
            p.check_shape(h.covariates.len(), h.basis.basis_count())?;
        }
        Ok(())
    }

    pub fn draws_block(&self) -> String {
        draws_block(&self.header.covariates, self.header.basis.basis_count(), &self.draws.draws)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC} {}\n", self.header.format_version);
        s.push_str(&serde_json::to_string_pretty(&self.header).expect("header serializes"));
        s.push('\n');
        s.push_str(DRAWS_MARKER);
        s.push('\n');
        s.push_str(&self.draws_block());
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (first, rest) = text.split_once('\n').ok_or_else(|| Error::Format("empty artifact".into()))?;
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| Error::Format("not a cudrisk model artifact".into()))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(Error::Format(format!("unsupported artifact version `{version}`")));
        }
        let marker = format!("\n{DRAWS_MARKER}\n");
        let at = rest.find(&marker).ok_or_else(|| Error::Format("artifact has no draw section".into()))?;
        let header: ArtifactHeader = serde_json::from_str(&rest[..at])
            .map_err(|e| Error::Format(format!("artifact header: {e}")))?;
        let block = &rest[at + marker.len()..];
        let digest = sha256_hex(block.as_bytes());
        if digest != header.draws_sha256 {
            return Err(Error::Format("draw section checksum mismatch".into()));
        }
        let draws = parse_draws(block, &header.covariates, header.basis.basis_count())?;
        let draws = PosteriorDraws {
            covariates: header.covariates.clone(),
            draws,
            diagnostics: header.diagnostics.clone(),
        };
        let a = Self { header, draws };
        a.validate()?;
        Ok(a)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path, &self.to_text())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn engine(&self) -> RiskEngine {
        RiskEngine::new(self.header.covariates.clone(), self.header.basis.clone(), self.header.life_table.clone())
            .with_grid(self.header.grid)
    }

    /// Allowed ages for `a` and `b`.
    pub fn age_range(&self) -> (f64, f64) {
        self.header.basis.domain()
    }
}

/// A loaded artifact with its engine ready for repeated queries.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub artifact: ModelArtifact,
    engine: RiskEngine,
}

impl Predictor {
    pub fn new(artifact: ModelArtifact) -> Self {
        let engine = artifact.engine();
        Self { artifact, engine }
    }

    pub fn engine(&self) -> &RiskEngine {
        &self.engine
    }

    pub fn predict(&self, q: &RiskQuery) -> Result<RiskEstimate> {
        self.engine.posterior_risk(q, self.artifact.draws.params())
    }
}
