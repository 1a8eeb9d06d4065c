use cudrisk::bayes::mode::{penalized_mode, ModeOptions};
use cudrisk::bayes::summary::{neighborhood_probability, selection_sweep};
use cudrisk::bayes::{
    posterior_summary, run_mcmc, select_credible_interval, select_scaled_neighborhood, FitConfig, PosteriorDraws,
    PreparedCohort,
};
use cudrisk::hazard::ModelParams;
use cudrisk::spline::SplineBasis;
use cudrisk::stats::{equal_tailed, mean, sample_sd};
use cudrisk::synthetic::{reference_scenario, simulate_cohort};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::Normal;

fn small_fit_config(seed: u64) -> FitConfig {
    FitConfig { chains: 2, warmup: 200, iterations: 200, seed, ..FitConfig::default() }
}

fn draws_from(columns: Vec<Vec<f64>>) -> PosteriorDraws {
    let n = columns[0].len();
    let names = (0..columns.len()).map(|i| format!("b{i}")).collect();
    let params = (0..n)
        .map(|k| ModelParams { beta0: 0.0, beta: columns.iter().map(|c| c[k]).collect(), gamma: vec![1.0], tau: 1.0 })
        .collect();
    PosteriorDraws::from_params(names, params)
}

fn normal_draws(mean: f64, sd: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let d = Normal::new(mean, sd).unwrap();
    (0..n).map(|_| rng.sample(d)).collect()
}

#[test]
fn empty_data_recovers_intercept_prior() {
    let basis = SplineBasis::new(&[20.0, 30.0], 3, (10.0, 40.0)).unwrap();
    let config = FitConfig { iterations: 2000, seed: 5, ..FitConfig::default() };
    let draws = run_mcmc(&[], &[], &basis, &config).unwrap();
    let b0: Vec<f64> = draws.params().map(|p| p.beta0).collect();
    let diag = draws.diagnostics.as_ref().unwrap();
    let ess = diag.ess[0];
    let m = mean(&b0);
    let sd = sample_sd(&b0);
    let mcse = sd / ess.sqrt();
    assert!(m.abs() < 3.0 * mcse, "mean {m}, mcse {mcse}");
    assert!((sd - 10.0).abs() < 1.0, "sd {sd}");
    assert!(draws.params().all(|p| p.on_simplex()));
}

#[test]
fn same_seed_gives_identical_draws() {
    let sim = simulate_cohort(&reference_scenario(300, 4)).unwrap();
    let config = small_fit_config(77);
    let basis = config.basis_for(&sim.records).unwrap();
    let a = run_mcmc(&sim.records, &sim.covariates, &basis, &config).unwrap();
    let b = run_mcmc(&sim.records, &sim.covariates, &basis, &config).unwrap();
    assert_eq!(a.len(), 400);
    for (x, y) in a.draws.iter().zip(&b.draws) {
        assert_eq!((x.chain, x.iteration), (y.chain, y.iteration));
        assert_eq!(x.params.beta0.to_bits(), y.params.beta0.to_bits());
        for (u, v) in x.params.beta.iter().zip(&y.params.beta) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
        for (u, v) in x.params.gamma.iter().zip(&y.params.gamma) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }
    let c = run_mcmc(&sim.records, &sim.covariates, &basis, &small_fit_config(78)).unwrap();
    assert_ne!(a.draws[10].params, c.draws[10].params);
}

#[test]
fn draws_are_grouped_by_chain_in_order() {
    let sim = simulate_cohort(&reference_scenario(200, 6)).unwrap();
    let config = FitConfig { chains: 3, warmup: 100, iterations: 50, seed: 1, ..FitConfig::default() };
    let basis = config.basis_for(&sim.records).unwrap();
    let d = run_mcmc(&sim.records, &sim.covariates, &basis, &config).unwrap();
    let order: Vec<(usize, usize)> = d.draws.iter().map(|x| (x.chain, x.iteration)).collect();
    let expected: Vec<(usize, usize)> = (0..3).flat_map(|c| (0..50).map(move |i| (c, i))).collect();
    assert_eq!(order, expected);
    assert_eq!(d.diagnostics.unwrap().parameter_names.len(), 1 + 5 + basis.basis_count() + 1);
}

#[test]
fn config_from_toml() {
    let cfg = FitConfig::parse_toml("chains = 2\nseed = 9\niterations = 50\n[lasso]\nmode = \"smoothed\"\neps = 0.01\n").unwrap();
    assert_eq!(cfg.chains, 2);
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.warmup, 1000);
    assert!(FitConfig::parse_toml("chains = 0").is_err());
    assert!(FitConfig::parse_toml("unknown_key = 1").is_err());
}

fn prepared(n: usize, seed: u64) -> PreparedCohort {
    let sim = simulate_cohort(&reference_scenario(n, seed)).unwrap();
    let basis = FitConfig::default().basis_for(&sim.records).unwrap();
    PreparedCohort::new(&sim.records, &sim.covariates, &basis).unwrap()
}

#[test]
fn mode_l1_norm_shrinks_with_rate() {
    let data = prepared(600, 31);
    let mut last = f64::INFINITY;
    for rate in [0.0, 5.0, 20.0, 80.0] {
        let fit = penalized_mode(&data, ModeOptions { lasso_rate: rate, ..ModeOptions::default() });
        let l1: f64 = fit.params.beta.iter().map(|b| b.abs()).sum();
        assert!(l1 <= last + 1e-7, "rate {rate}: {l1} > {last}");
        last = l1;
    }
    let heavy = penalized_mode(&data, ModeOptions { lasso_rate: 1e4, ..ModeOptions::default() });
    assert!(heavy.params.beta.iter().all(|b| *b == 0.0));
}

#[test]
fn likelihood_argmax_ignores_weight_scale() {
    let data = prepared(400, 32);
    let opts = ModeOptions::default();
    let a = penalized_mode(&data, opts);
    let b = penalized_mode(&data.scale_weights(3.0), opts);
    assert!(a.converged && b.converged, "{} {}", a.iterations, b.iterations);
    for (x, y) in a.params.beta.iter().zip(&b.params.beta) {
        assert!((x - y).abs() < 1e-5, "{x} vs {y}");
    }
    assert!((a.params.beta0 - b.params.beta0).abs() < 1e-5);
    assert!((b.objective - 3.0 * a.objective).abs() < 1e-6 * b.objective.abs());
}

#[test]
fn summary_matches_direct_average() {
    let col = normal_draws(0.3, 0.2, 4000, 1);
    let d = draws_from(vec![col.clone()]);
    let row = &posterior_summary(&d)[0];
    let direct = col.iter().map(|b| b.exp()).sum::<f64>() / col.len() as f64;
    assert!((row.hazard_ratio - direct).abs() < 1e-12);
    let hr: Vec<f64> = col.iter().map(|b| b.exp()).collect();
    assert_eq!((row.cri_low, row.cri_high), equal_tailed(&hr, 0.95));
}

#[test]
fn credible_interval_rule_on_normal_draws() {
    let d = draws_from(vec![normal_draws(0.1, 0.05, 20_000, 2), normal_draws(0.0, 1.0, 20_000, 3)]);
    assert_eq!(select_credible_interval(&d, 0.95), vec!["b0".to_string()]);
    // Direct percentile computation.
    for level in [0.7, 0.8, 0.95] {
        let mut expected = Vec::new();
        for i in 0..2 {
            let mut v = d.coefficient(i);
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let lo = v[((((1.0 - level) / 2.0) * n as f64).ceil() as usize).max(1) - 1];
            let hi = v[((((1.0 + level) / 2.0) * n as f64).ceil() as usize).max(1) - 1];
            if lo > 0.0 || hi < 0.0 {
                expected.push(format!("b{i}"));
            }
        }
        assert_eq!(select_credible_interval(&d, level), expected);
    }
}

#[test]
fn scaled_neighborhood_rule_on_normal_draws() {
    let std = normal_draws(0.0, 1.0, 100_000, 4);
    let p = neighborhood_probability(&std);
    assert!((p - 0.6827).abs() < 0.01, "{p}");
    let shifted = normal_draws(3.0, 1.0, 100_000, 5);
    let q = neighborhood_probability(&shifted);
    assert!((q - 0.0228).abs() < 0.005, "{q}");
    let d = draws_from(vec![std, shifted]);
    assert_eq!(select_scaled_neighborhood(&d, 0.6), vec!["b1".to_string()]);
    assert_eq!(select_scaled_neighborhood(&d, 0.1), vec!["b1".to_string()]);
    assert_eq!(select_scaled_neighborhood(&d, 0.7), vec!["b0".to_string(), "b1".to_string()]);
    let sweep = selection_sweep(&d, &[0.7, 0.8, 0.95], &[0.1, 0.6]);
    assert_eq!(sweep.len(), 5);
}
