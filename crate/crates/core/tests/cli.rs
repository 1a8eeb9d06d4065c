use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cudrisk::artifact::ModelArtifact;
use cudrisk::io::parse_predictions;
use cudrisk::validation::{format_validation_report, validation_report};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cudrisk"));
    c.env("RUST_LOG", "error").env_remove("CUDRISK_MODEL");
    c
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn simulate(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let cohort = dir.join("cohort.csv");
    let o = run(&[
        "simulate",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        cohort.to_str().unwrap(),
        "--truth",
        dir.join("truth.csv").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    cohort
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_keeps_truth_separate() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = simulate(dir.path(), 50, 3);
    let text = std::fs::read_to_string(&cohort).unwrap();
    assert!(text.starts_with("id,t0,t,delta,weight,male,"));
    assert!(!text.contains("cud_time"));
    let truth = std::fs::read_to_string(dir.path().join("truth.csv")).unwrap();
    assert!(truth.starts_with("id,cud_time,death_time,censor_time,first"));
    assert_eq!(truth.lines().count(), 51);
}

#[test]
fn fit_is_deterministic_and_gated() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = simulate(dir.path(), 200, 5);
    let config = fixture("fit_small.toml");
    let fit = |out: &Path, extra: &[&str]| {
        let mut args = vec!["fit", "--cohort", p(&cohort), "--config", p(&config), "--out", p(out)];
        args.extend_from_slice(extra);
        run(&args)
    };
    let gated = fit(&dir.path().join("gated.cudrisk"), &[]);
    assert_eq!(gated.status.code(), Some(3), "{}", stderr(&gated));
    assert!(stderr(&gated).contains("convergence gate failed"));
    assert!(!dir.path().join("gated.cudrisk").exists());

    let a = dir.path().join("a.cudrisk");
    let b = dir.path().join("b.cudrisk");
    for out in [&a, &b] {
        let o = fit(out, &["--allow-unconverged"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("delinquency"));
    }
    let (ma, mb) = (ModelArtifact::load(&a).unwrap(), ModelArtifact::load(&b).unwrap());
    assert_eq!(ma.header.n_draws, 200);
    assert_eq!(ma.header.draws_sha256, mb.header.draws_sha256);
    assert_eq!(ma.draws_block(), mb.draws_block());

    let c = dir.path().join("c.cudrisk");
    assert!(fit(&c, &["--allow-unconverged", "--seed", "8"]).status.success());
    assert_ne!(ModelArtifact::load(&c).unwrap().header.draws_sha256, ma.header.draws_sha256);
}

#[test]
fn corrupt_cohort_row_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("bad.csv");
    std::fs::write(&cohort, "id,t0,t,delta,weight,male\na,14,18,1,1,1\nb,15,19,0,1,\n").unwrap();
    let o = run(&["fit", "--cohort", p(&cohort), "--out", p(&dir.path().join("m"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("row 3"), "{}", stderr(&o));
}

#[test]
fn predict_matches_frozen_fixture() {
    let expected: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("expected_risk.json")).unwrap()).unwrap();
    let model = fixture("reference_model.cudrisk");
    let profile = fixture("profile.json");
    let mut risks = Vec::new();
    for row in expected.as_array().unwrap() {
        let a = row["a"].as_f64().unwrap();
        let b = row["b"].as_f64().unwrap();
        let o = run(&[
            "predict", "--model", p(&model), "--profile", p(&profile), "--a", &a.to_string(), "--b", &b.to_string(),
            "--json",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let got: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        let r = got["mean_risk"].as_f64().unwrap();
        assert!((r - row["mean_risk"].as_f64().unwrap()).abs() < 1e-12, "{r}");
        risks.push(r);
    }
    assert!(risks[1] >= risks[0]);
}

#[test]
fn predict_horizon_zero_and_errors() {
    let model = fixture("reference_model.cudrisk");
    let o = run(&["predict", "--model", p(&model), "--profile", p(&fixture("profile.json")), "--a", "16", "--horizon", "0"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("16,16,0.000000,0.000000,0.000000"), "{}", stdout(&o));

    let dir = tempfile::tempdir().unwrap();
    let partial = dir.path().join("partial.json");
    std::fs::write(&partial, r#"{"male": 1, "conscientiousness": 0.5, "neuroticism": 0.5, "openness": 0.5}"#).unwrap();
    let o = run(&["predict", "--model", p(&model), "--profile", p(&partial), "--a", "16", "--horizon", "5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("delinquency"), "{}", stderr(&o));

    let o = run(&["predict", "--model", p(&model), "--profile", p(&fixture("profile.json")), "--a", "16", "--b", "90"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["predict", "--model", p(&model), "--a", "16"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn model_path_from_environment() {
    let o = bin()
        .env("CUDRISK_MODEL", fixture("reference_model.cudrisk"))
        .args(["predict", "--profile", p(&fixture("profile.json")), "--a", "16", "--horizon", "5"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn validate_is_a_pass_through() {
    let path = fixture("predictions.csv");
    let o = run(&["validate", "--predictions", p(&path), "--label", "5y"]);
    assert!(o.status.success());
    let pairs = parse_predictions(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let expected = format_validation_report("5y", &validation_report(&pairs).unwrap());
    assert_eq!(stdout(&o), expected);
}

fn intercept(o: &Output) -> f64 {
    let text = stdout(o);
    let line = text.lines().find(|l| l.starts_with("intercept,")).unwrap();
    line.split(',').nth(1).unwrap().parse().unwrap()
}

#[test]
fn recalibrate_twice_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let once = dir.path().join("once.csv");
    let twice = dir.path().join("twice.csv");
    let o1 = run(&["recalibrate", "--predictions", p(&fixture("predictions.csv")), "--out", p(&once)]);
    assert!(o1.status.success(), "{}", stderr(&o1));
    assert!(intercept(&o1) < 0.0);
    let o2 = run(&["recalibrate", "--predictions", p(&once), "--out", p(&twice)]);
    assert!(intercept(&o2).abs() < 1e-6, "{}", intercept(&o2));
}

#[test]
fn screen_sweep_and_blup_run() {
    let o = run(&["screen", "--cohort", "../../data/synthetic_cohort.csv", "--predictors", "male,delinquency"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("predictor,beta,se,p,retained,sign_flip,error\n"));

    let o = run(&["sweep", "--model", p(&fixture("reference_model.cudrisk")), "--levels", "0.95", "--thresholds", "0.1"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("credible_interval,0.95,") && text.contains("delinquency"), "{text}");

    let dir = tempfile::tempdir().unwrap();
    let panel = dir.path().join("panel.csv");
    let mut s = String::from("subject_id,wave,age,value\n");
    for i in 0..30 {
        let u = (i as f64 * 0.37).sin();
        for w in 0..3 {
            let age = 14.0 + 6.0 * w as f64 + 0.1 * i as f64;
            let noise = ((i * 7 + w * 3) as f64).cos() * 0.2;
            s.push_str(&format!("s{i},{},{age},{}\n", w + 1, 1.0 + 0.02 * age + u + noise));
        }
    }
    std::fs::write(&panel, s).unwrap();
    let o = run(&["blup", "--panel", p(&panel)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with('s') && l.as_bytes()[1].is_ascii_digit()).count(), 30);
}
