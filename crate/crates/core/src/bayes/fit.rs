use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hazard::ModelParams;
use crate::spline::{SplineBasis, DEFAULT_DEGREE, DEFAULT_INTERIOR_KNOTS};

use super::diagnostics::{effective_sample_size, split_rhat};
use super::likelihood::PreparedCohort;
use super::posterior::{LassoMode, Layout, LogPosterior};
use super::sampler::{run_chain, LogDensity, NutsSettings};
use super::CohortRecord;

const INIT_RETRIES: usize = 10;
const INIT_SD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub chains: usize,
    pub warmup: usize,
    pub iterations: usize,
    pub seed: u64,
    pub interior_knots: usize,
    pub degree: usize,
    /// Basis domain; defaults to `[floor(min t0), ceil(max t)]` of the cohort.
    pub lower_bound: Option<f64>,
    pub upper_bound: Option<f64>,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub lasso: LassoMode,
    pub rhat_max: f64,
    pub ess_min: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 1000,
            iterations: 1000,
            seed: 20240601,
            interior_knots: DEFAULT_INTERIOR_KNOTS,
            degree: DEFAULT_DEGREE,
            lower_bound: None,
            upper_bound: None,
            target_accept: 0.8,
            max_tree_depth: 10,
            lasso: LassoMode::Subgradient,
            rhat_max: 1.05,
            ess_min: 100.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.warmup == 0 || self.iterations == 0 {
            return Err(Error::Argument("chains, warmup and iterations must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Argument("target_accept must lie in (0, 1)".into()));
        }
        if self.max_tree_depth == 0 {
            return Err(Error::Argument("max_tree_depth must be positive".into()));
        }
        Ok(())
    }

    pub fn parse_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(format!("fit config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Basis domain for `records`, honouring configured bounds.
    pub fn domain_for(&self, records: &[CohortRecord]) -> Result<(f64, f64)> {
        let min_t0 = records.iter().map(|r| r.t0).fold(f64::INFINITY, f64::min);
        let max_t = records.iter().map(|r| r.t).fold(f64::NEG_INFINITY, f64::max);
        let low = self.lower_bound.unwrap_or(min_t0.floor());
        let high = self.upper_bound.unwrap_or(max_t.ceil());
        if !low.is_finite() || !high.is_finite() || !(low < high) {
            return Err(Error::Argument(format!("cannot derive basis domain ({low}, {high})")));
        }
        Ok((low, high))
    }

    /// Knot placement from the cohort's event times.
    pub fn basis_for(&self, records: &[CohortRecord]) -> Result<SplineBasis> {
        let bounds = self.domain_for(records)?;
        let events: Vec<f64> = records.iter().filter(|r| r.event).map(|r| r.t).collect();
        crate::spline::make_knots(&events, self.interior_knots, self.degree, bounds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub chain: usize,
    pub iteration: usize,
    pub params: ModelParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub mean_accept: f64,
    pub divergences: usize,
    pub step_size: f64,
    pub mean_tree_depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub parameter_names: Vec<String>,
    #[serde(with = "crate::stats::non_finite_as_null")]
    pub rhat: Vec<f64>,
    #[serde(with = "crate::stats::non_finite_as_null")]
    pub ess: Vec<f64>,
    pub chains: Vec<ChainStats>,
    pub rhat_max: f64,
    pub ess_min: f64,
}

impl FitDiagnostics {
    pub fn converged(&self) -> bool {
        self.rhat.iter().all(|r| *r < self.rhat_max) && self.ess.iter().all(|e| *e > self.ess_min)
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, name) in self.parameter_names.iter().enumerate() {
            if !(self.rhat[i] < self.rhat_max) {
                out.push(format!("{name}: split R-hat {:.4} >= {}", self.rhat[i], self.rhat_max));
            }
            if !(self.ess[i] > self.ess_min) {
                out.push(format!("{name}: ESS {:.1} <= {}", self.ess[i], self.ess_min));
            }
        }
        out
    }

    pub fn report(&self) -> String {
        let mut s = String::from("parameter,rhat,ess\n");
        for (i, name) in self.parameter_names.iter().enumerate() {
            s.push_str(&format!("{name},{:.4},{:.1}\n", self.rhat[i], self.ess[i]));
        }
        for (c, st) in self.chains.iter().enumerate() {
            s.push_str(&format!(
                "# chain {c}: accept {:.3}, divergences {}, step {:.4}, depth {:.2}\n",
                st.mean_accept, st.divergences, st.step_size, st.mean_tree_depth
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub covariates: Vec<String>,
    pub draws: Vec<Draw>,
    pub diagnostics: Option<FitDiagnostics>,
}

impl PosteriorDraws {
    pub fn from_params(covariates: Vec<String>, params: Vec<ModelParams>) -> Self {
        let draws = params
            .into_iter()
            .enumerate()
            .map(|(i, p)| Draw { chain: 0, iteration: i, params: p })
            .collect();
        Self { covariates, draws, diagnostics: None }
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn params(&self) -> impl Iterator<Item = &ModelParams> {
        self.draws.iter().map(|d| &d.params)
    }

    /// Draws of coefficient `index`.
    pub fn coefficient(&self, index: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d.params.beta[index]).collect()
    }

    /// Evenly spaced subset of at most `keep` draws, in original order.
    pub fn thinned(&self, keep: usize) -> Self {
        if keep == 0 || keep >= self.draws.len() {
            return self.clone();
        }
        let n = self.draws.len();
        let draws = (0..keep).map(|i| self.draws[i * n / keep].clone()).collect();
        Self { covariates: self.covariates.clone(), draws, diagnostics: self.diagnostics.clone() }
    }
}

fn parameter_names(covariates: &[String], l: usize) -> Vec<String> {
    let mut names = vec!["beta0".to_string()];
    names.extend(covariates.iter().map(|c| format!("beta[{c}]")));
    names.extend((1..=l).map(|i| format!("gamma[{i}]")));
    names.push("tau".into());
    names
}

fn flatten(p: &ModelParams) -> Vec<f64> {
    let mut v = vec![p.beta0];
    v.extend_from_slice(&p.beta);
    v.extend_from_slice(&p.gamma);
    v.push(p.tau);
    v
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64 + 1);
    rng
}

fn initial_point(target: &LogPosterior, rng: &mut ChaCha20Rng) -> Result<Vec<f64>> {
    let layout = target.layout;
    let normal = Normal::new(0.0, INIT_SD).expect("valid normal");
    let mut grad = vec![0.0; layout.dim()];
    for attempt in 0..INIT_RETRIES {
        let mut theta = vec![0.0; layout.dim()];
        theta[0] = rng.sample(normal);
        for i in layout.beta_range() {
            theta[i] = rng.sample(normal);
        }
        if attempt > 0 {
            for i in layout.z_range() {
                theta[i] = rng.sample(normal);
            }
            theta[layout.log_tau_index()] = rng.sample(normal);
        }
        if target.log_density_grad(&theta, &mut grad).is_finite() && grad.iter().all(|g| g.is_finite()) {
            return Ok(theta);
        }
    }
    Err(Error::Initialization(format!(
        "log-posterior not finite after {INIT_RETRIES} initializations"
    )))
}

/// Samples the posterior with `config.chains` independent NUTS chains.
pub fn run_mcmc(
    records: &[CohortRecord],
    covariates: &[String],
    basis: &SplineBasis,
    config: &FitConfig,
) -> Result<PosteriorDraws> {
    config.validate()?;
    let prepared = PreparedCohort::new(records, covariates, basis)?;
    let target = LogPosterior::new(prepared, config.lasso);
    let settings = NutsSettings {
        warmup: config.warmup,
        iterations: config.iterations,
        target_accept: config.target_accept,
        max_depth: config.max_tree_depth,
    };

    let outputs: Vec<Result<_>> = (0..config.chains)
        .into_par_iter()
        .map(|chain| {
            let mut rng = chain_rng(config.seed, chain);
            let init = initial_point(&target, &mut rng)?;
            Ok(run_chain(&target, &init, settings, &mut rng))
        })
        .collect();
    let outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;

    let layout: Layout = target.layout;
    let mut draws = Vec::with_capacity(config.chains * config.iterations);
    let mut per_chain: Vec<Vec<Vec<f64>>> = Vec::with_capacity(config.chains);
    for (chain, out) in outputs.iter().enumerate() {
        let mut flat = Vec::with_capacity(out.draws.len());
        for (it, theta) in out.draws.iter().enumerate() {
            let params = layout.to_params(theta);
            flat.push(flatten(&params));
            draws.push(Draw { chain, iteration: it, params });
        }
        per_chain.push(flat);
    }

    let names = parameter_names(covariates, basis.basis_count());
    let mut rhat = Vec::with_capacity(names.len());
    let mut ess = Vec::with_capacity(names.len());
    for k in 0..names.len() {
        let series: Vec<Vec<f64>> = per_chain.iter().map(|c| c.iter().map(|v| v[k]).collect()).collect();
        rhat.push(split_rhat(&series));
        ess.push(effective_sample_size(&series));
    }
    let chains = outputs
        .iter()
        .map(|o| ChainStats {
            mean_accept: o.mean_accept,
            divergences: o.divergences,
            step_size: o.step_size,
            mean_tree_depth: o.mean_tree_depth,
        })
        .collect();

    Ok(PosteriorDraws {
        covariates: covariates.to_vec(),
        draws,
        diagnostics: Some(FitDiagnostics {
            parameter_names: names,
            rhat,
            ess,
            chains,
            rhat_max: config.rhat_max,
            ess_min: config.ess_min,
        }),
    })
}
