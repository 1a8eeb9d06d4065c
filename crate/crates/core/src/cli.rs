//! Command-line front end. Exit codes: 0 ok, 2 bad input, 3 numeric or
//! convergence failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::artifact::{ModelArtifact, Predictor};
use crate::bayes::summary::{format_summary, selection_sweep};
use crate::bayes::{posterior_summary, run_mcmc, FitConfig};
use crate::error::{Error, Result};
use crate::io::{
    format_cohort, format_predictions, parse_panel, parse_predictions, parse_profile, read_cohort, read_text,
    write_text,
};
use crate::longitudinal::{blup_all, fit_lmm};
use crate::mortality::LifeTableHazard;
use crate::risk::{Anchor, RiskEstimate, RiskQuery};
use crate::screening::{format_screen_table, screen};
use crate::synthetic::{reference_life_table, reference_scenario, simulate_cohort, truth_csv, SimConfig};
use crate::validation::{
    cross_validate, format_cv_report, format_validation_report, recalibrate_pairs, validation_report, CvConfig,
    Horizon,
};

#[derive(Debug, Parser)]
#[command(name = "cudrisk", version, about = "Absolute risk of cannabis use disorder with competing mortality")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the Bayesian model to a cohort file and write a model artifact.
    Fit(FitArgs),
    /// Absolute risk for one covariate profile.
    Predict(PredictArgs),
    /// Discrimination and calibration tables for a predictions file.
    Validate(ValidateArgs),
    /// k-fold cross-validation on a cohort file.
    Cv(CvArgs),
    /// Intercept-only logistic recalibration of a predictions file.
    Recalibrate(RecalibrateArgs),
    /// Simulate a cohort from a known model.
    Simulate(SimulateArgs),
    /// Univariate Cox screening with a multivariable sign-flip check.
    Screen(ScreenArgs),
    /// Variable selection across credible levels and neighborhood thresholds.
    Sweep(SweepArgs),
    /// Mixed-model BLUPs for a longitudinal panel.
    Blup(BlupArgs),
    /// Serve predictions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    /// TOML fit configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Life table CSV with header `age,q`.
    #[arg(long)]
    pub life_table: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep at most this many evenly spaced draws. Affects Monte Carlo error only.
    #[arg(long)]
    pub thin: Option<usize>,
    /// Write the artifact even when the convergence gate fails.
    #[arg(long)]
    pub allow_unconverged: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AnchorArg {
    AtFirstUse,
    AtAge,
}

impl From<AnchorArg> for Anchor {
    fn from(a: AnchorArg) -> Self {
        match a {
            AnchorArg::AtFirstUse => Anchor::AtFirstUse,
            AnchorArg::AtAge => Anchor::AtAge,
        }
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, env = "CUDRISK_MODEL")]
    pub model: PathBuf,
    /// JSON object of covariate values.
    #[arg(long)]
    pub profile: PathBuf,
    #[arg(long, value_enum, default_value = "at-first-use")]
    pub anchor: AnchorArg,
    /// Start age; the age of first use for `at-first-use`.
    #[arg(long)]
    pub a: f64,
    /// End age. Exactly one of `--b` and `--horizon` is required.
    #[arg(long, conflicts_with = "horizon", required_unless_present = "horizon")]
    pub b: Option<f64>,
    /// Years after `a`.
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub first_use_age: Option<f64>,
    /// Print the estimate as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Predictions file `id,a,b,risk,outcome,subgroup...`.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long, default_value = "interval")]
    pub label: String,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub life_table: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 1)]
    pub cv_seed: u64,
    /// Years after first use, repeatable.
    #[arg(long = "after-first-use", default_values_t = [5.0])]
    pub after_first_use: Vec<f64>,
    /// Age interval `A:B`, repeatable.
    #[arg(long = "at-age")]
    pub at_age: Vec<String>,
    /// Covariate labelling the subgroup table.
    #[arg(long)]
    pub subgroup: Option<String>,
    /// Write pooled held-out predictions for the first interval here.
    #[arg(long)]
    pub predictions_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecalibrateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Updated predictions file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON scenario; the built-in reference scenario when omitted.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Latent event, death and censoring times.
    #[arg(long)]
    pub truth: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScreenArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    /// Comma-separated predictors; all cohort covariates when omitted.
    #[arg(long, value_delimiter = ',')]
    pub predictors: Vec<String>,
    #[arg(long, default_value_t = 0.25)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, env = "CUDRISK_MODEL")]
    pub model: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.7, 0.8, 0.9, 0.95])]
    pub levels: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.3, 0.4, 0.5])]
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct BlupArgs {
    /// Panel file `subject_id,wave,age,value`.
    #[arg(long)]
    pub panel: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "CUDRISK_MODEL")]
    pub model: PathBuf,
    #[arg(long, env = "CUDRISK_PORT", default_value_t = 8080)]
    pub port: u16,
}

fn load_config(path: Option<&Path>) -> Result<FitConfig> {
    match path {
        Some(p) => FitConfig::parse_toml(&read_text(p)?),
        None => Ok(FitConfig::default()),
    }
}

fn load_life_table(path: Option<&Path>) -> Result<LifeTableHazard> {
    match path {
        Some(p) => LifeTableHazard::load_csv(p),
        None => {
            log::warn!("no life table given; using the built-in illustrative table");
            Ok(reference_life_table())
        }
    }
}

fn fit(args: &FitArgs, out: &mut dyn Write) -> Result<()> {
    let (records, covariates) = read_cohort(&args.cohort)?;
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let life_table = load_life_table(args.life_table.as_deref())?;
    let basis = config.basis_for(&records)?;
    log::info!(
        "fitting {} subjects, {} covariates, {} basis functions",
        records.len(),
        covariates.len(),
        basis.basis_count()
    );
    let draws = run_mcmc(&records, &covariates, &basis, &config)?;
    let diag = draws.diagnostics.clone().expect("sampler reports diagnostics");
    if !diag.converged() {
        let msg = format!("convergence gate failed:\n{}\n{}", diag.failures().join("\n"), diag.report());
        if !args.allow_unconverged {
            return Err(Error::NonConvergence(msg));
        }
        log::warn!("{msg}");
    }
    let summary = format_summary(&posterior_summary(&draws));
    let notes = vec![
        "covariates used on their supplied scale".to_string(),
        format!("records with missing covariates rejected; {} subjects fitted", records.len()),
        format!("basis domain {:?}", basis.domain()),
    ];
    let artifact = ModelArtifact::from_fit(&records, basis, life_table, draws, &config, notes, args.thin)?;
    artifact.save(&args.out)?;
    write_out(out, &summary)?;
    write_out(out, &format!("# wrote {} draws to {}\n", artifact.draws.len(), args.out.display()))
}

pub fn predict_query(args: &PredictArgs) -> Result<RiskQuery> {
    let profile = parse_profile(&read_text(&args.profile)?)?;
    let b = match (args.b, args.horizon) {
        (Some(b), None) => b,
        (None, Some(h)) => args.a + h,
        _ => return Err(Error::Argument("give exactly one of --b and --horizon".into())),
    };
    let anchor: Anchor = args.anchor.into();
    let mut q = RiskQuery::new(args.a, b, profile, anchor);
    q.first_use_age = args.first_use_age.or((anchor == Anchor::AtFirstUse).then_some(args.a));
    Ok(q)
}

pub fn format_estimate(q: &RiskQuery, e: &RiskEstimate) -> String {
    let mut s = String::from("a,b,mean_risk,cri_low,cri_high,draws\n");
    let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6},{}", q.a, q.b, e.mean_risk, e.cri_low, e.cri_high, e.draws);
    s.push_str("\nage,cumulative_risk\n");
    for (age, r) in &e.per_year_curve {
        let _ = writeln!(s, "{age},{r:.6}");
    }
    for w in &e.warnings {
        let _ = writeln!(s, "# warning: {w}");
    }
    s
}

fn predict(args: &PredictArgs, out: &mut dyn Write) -> Result<()> {
    let predictor = Predictor::new(ModelArtifact::load(&args.model)?);
    let q = predict_query(args)?;
    let estimate = predictor.predict(&q)?;
    if args.json {
        let text = serde_json::to_string(&estimate).map_err(|e| Error::State(e.to_string()))?;
        write_out(out, &format!("{text}\n"))
    } else {
        write_out(out, &format_estimate(&q, &estimate))
    }
}

fn parse_age_pair(s: &str) -> Result<Horizon> {
    let bad = || Error::Argument(format!("--at-age expects A:B, got `{s}`"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok(Horizon::AtAge { a: a.trim().parse().map_err(|_| bad())?, b: b.trim().parse().map_err(|_| bad())? })
}

fn cv(args: &CvArgs, out: &mut dyn Write) -> Result<()> {
    let (records, covariates) = read_cohort(&args.cohort)?;
    let config = load_config(args.config.as_deref())?;
    let life_table = load_life_table(args.life_table.as_deref())?;
    let mut horizons: Vec<Horizon> = args.after_first_use.iter().map(|&years| Horizon::AfterFirstUse { years }).collect();
    for s in &args.at_age {
        horizons.push(parse_age_pair(s)?);
    }
    let cv = CvConfig { folds: args.folds, seed: args.cv_seed, horizons, subgroup: args.subgroup.clone() };
    let report = cross_validate(&records, &covariates, &config, &life_table, &cv)?;
    if let (Some(path), Some(first)) = (&args.predictions_out, report.intervals.first()) {
        write_text(path, &format_predictions(&first.pairs))?;
    }
    write_out(out, &format_cv_report(&report))
}

fn validate(args: &ValidateArgs, out: &mut dyn Write) -> Result<()> {
    let pairs = parse_predictions(&read_text(&args.predictions)?)?;
    let report = validation_report(&pairs)?;
    write_out(out, &format_validation_report(&args.label, &report))
}

fn recalibrate(args: &RecalibrateArgs, out: &mut dyn Write) -> Result<()> {
    let pairs = parse_predictions(&read_text(&args.predictions)?)?;
    let before = validation_report(&pairs)?;
    let (fit, updated) = recalibrate_pairs(&pairs)?;
    let after = validation_report(&updated)?;
    if let Some(path) = &args.out {
        write_text(path, &format_predictions(&updated))?;
    }
    let mut s = format!("intercept,{}\niterations,{}\n\n", fit.intercept, fit.iterations);
    s.push_str(&format_validation_report("before", &before));
    s.push('\n');
    s.push_str(&format_validation_report("after", &after));
    write_out(out, &s)
}

fn simulate(args: &SimulateArgs, out: &mut dyn Write) -> Result<()> {
    let config: SimConfig = match &args.scenario {
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| Error::Format(format!("scenario: {e}")))?,
        None => reference_scenario(args.n, args.seed),
    };
    let sim = simulate_cohort(&config)?;
    write_text(&args.out, &format_cohort(&sim.records, &sim.covariates))?;
    write_text(&args.truth, &truth_csv(&sim.truth))?;
    let events = sim.records.iter().filter(|r| r.event).count();
    write_out(out, &format!("subjects,{}\nevents,{events}\n", sim.records.len()))
}

fn screen_cmd(args: &ScreenArgs, out: &mut dyn Write) -> Result<()> {
    let (records, covariates) = read_cohort(&args.cohort)?;
    let predictors = if args.predictors.is_empty() { covariates } else { args.predictors.clone() };
    let rows = screen(&records, &predictors, args.alpha)?;
    write_out(out, &format_screen_table(&rows))
}

fn sweep(args: &SweepArgs, out: &mut dyn Write) -> Result<()> {
    let artifact = ModelArtifact::load(&args.model)?;
    let mut s = String::from("rule,knob,selected\n");
    for o in selection_sweep(&artifact.draws, &args.levels, &args.thresholds) {
        let _ = writeln!(s, "{},{},{}", o.rule, o.knob, o.selected.join(";"));
    }
    write_out(out, &s)
}

fn blup(args: &BlupArgs, out: &mut dyn Write) -> Result<()> {
    let panel = parse_panel(&read_text(&args.panel)?)?;
    let fit = fit_lmm(&panel)?;
    let mut s = format!(
        "gamma0,{}\ngamma1,{}\nsigma_nu2,{}\nsigma_eps2,{}\nlog_likelihood,{}\n",
        fit.gamma0, fit.gamma1, fit.sigma_nu2, fit.sigma_eps2, fit.log_likelihood
    );
    for w in &fit.warnings {
        let _ = writeln!(s, "# warning: {w}");
    }
    s.push_str("\nsubject_id,blup\n");
    for (id, b) in blup_all(&panel, &fit) {
        let _ = writeln!(s, "{id},{b}");
    }
    write_out(out, &s)
}

fn serve(args: &ServeArgs) -> Result<()> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    rt.block_on(crate::service::serve(args.model.clone(), args.port))
}

fn write_out(out: &mut dyn Write, s: &str) -> Result<()> {
    out.write_all(s.as_bytes()).map_err(|e| Error::io("stdout", e))
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Fit(a) => fit(a, out),
        Command::Predict(a) => predict(a, out),
        Command::Validate(a) => validate(a, out),
        Command::Cv(a) => cv(a, out),
        Command::Recalibrate(a) => recalibrate(a, out),
        Command::Simulate(a) => simulate(a, out),
        Command::Screen(a) => screen_cmd(a, out),
        Command::Sweep(a) => sweep(a, out),
        Command::Blup(a) => blup(a, out),
        Command::Serve(a) => serve(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = write!(err, "{}", e.render());
            return code;
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
