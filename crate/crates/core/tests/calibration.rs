use pdflood::emucal::{
    batch_means_se, calibrate, calibrate_with_discrepancy, estimate_discrepancy, fit_emulators, read_design, write_design,
    DesignSet, McmcConfig,
};
use pdflood::synthlab::{ToyModel, THETA_RANGE};

fn toy_design(noise_sd: f64, seed: u64) -> DesignSet {
    let thetas: Vec<f64> = (0..10).map(|j| 0.0145 + 0.009 * j as f64).collect();
    ToyModel::fixture().design(&thetas, 0.05, noise_sd, seed).unwrap()
}

#[test]
fn seeds_agree_within_monte_carlo_error() {
    let design = toy_design(0.01, 21);
    let a = calibrate(&design, &McmcConfig { seed: 1, ..Default::default() }).unwrap();
    let b = calibrate(&design, &McmcConfig { seed: 2, ..Default::default() }).unwrap();
    let se = batch_means_se(&a.posterior_samples).hypot(batch_means_se(&b.posterior_samples));
    assert!((a.theta_star - b.theta_star).abs() <= 2.0 * se, "{} vs {} (se {se})", a.theta_star, b.theta_star);
    assert_ne!(a.posterior_samples, b.posterior_samples);
}

#[test]
fn posterior_concentrates_on_an_exact_design_run() {
    let model = ToyModel::fixture();
    let thetas: Vec<f64> = (0..10).map(|j| 0.0145 + 0.009 * j as f64).collect();
    let target = thetas[6];
    let design = model.design(&thetas, target, 1e-4, 3).unwrap();
    let run = calibrate(&design, &McmcConfig::default()).unwrap();
    assert!((run.theta_star - target).abs() <= 0.009, "{} vs {target}", run.theta_star);
}

#[test]
fn samples_stay_inside_the_roughness_range() {
    let run = calibrate(&toy_design(0.05, 4), &McmcConfig::default()).unwrap();
    let (lo, hi) = THETA_RANGE;
    assert!(run.posterior_samples.iter().all(|&t| t > lo && t < hi));
    assert!(run.sigma_samples.iter().all(|&s| s > 0.0));
    let summary = run.summary();
    assert!(summary.credible_interval[0] > lo && summary.credible_interval[1] < hi);
    assert!((0.05..=0.95).contains(&summary.acceptance_rate));
}

#[test]
fn shifting_observations_and_discrepancy_together_changes_nothing() {
    let design = toy_design(0.01, 8);
    let delta = estimate_discrepancy(&design).unwrap();
    let c = 0.75;
    let shifted = DesignSet {
        obs: design.obs.iter().map(|z| z + c).collect(),
        ..design.clone()
    };
    let config = McmcConfig::default();
    let a = calibrate_with_discrepancy(&design, delta.clone(), &config).unwrap();
    let b = calibrate_with_discrepancy(&shifted, delta.iter().map(|d| d + c).collect(), &config).unwrap();
    let se = batch_means_se(&a.posterior_samples).hypot(batch_means_se(&b.posterior_samples));
    assert!((a.theta_star - b.theta_star).abs() <= 2.0 * se.max(1e-6));
}

#[test]
fn emulator_variance_peaks_inside_a_design_gap() {
    // five runs with a wide hole in the middle
    let thetas = vec![0.015, 0.02, 0.025, 0.085, 0.09];
    let model = ToyModel::fixture();
    let design = model.design(&thetas, 0.05, 0.0, 1).unwrap();
    let em = &fit_emulators(&design).unwrap()[0];
    let near = em.predict(0.0225).1;
    let mid = em.predict(0.055).1;
    assert!(near >= 0.0 && mid > near, "gap variance {mid} vs near {near}");
    for k in 0..=100 {
        let t = 0.0101 + 0.0898 * k as f64 / 100.0;
        assert!(em.predict(t).1 >= 0.0);
    }
}

#[test]
fn constant_outputs_give_a_flat_emulator() {
    let thetas = vec![0.02, 0.035, 0.05, 0.065, 0.08];
    let design = DesignSet::new(thetas, vec![vec![1.5, -2.0]; 5], vec![1.0, 1.0]).unwrap();
    for (i, em) in fit_emulators(&design).unwrap().iter().enumerate() {
        let want = design.outputs[0][i];
        let nugget = em.hyper().nugget;
        for k in 0..50 {
            let t = 0.011 + 0.088 * k as f64 / 49.0;
            let (m, v) = em.predict(t);
            assert!((m - want).abs() < 1e-9);
            // predicted observation variance: the latent part plus the nugget
            assert!(v - nugget <= nugget + 1e-8);
        }
    }
}

#[test]
fn design_files_reproduce_the_posterior() {
    let dir = tempfile::tempdir().unwrap();
    let (dp, op) = (dir.path().join("design.csv"), dir.path().join("obs.csv"));
    let design = toy_design(0.01, 9);
    write_design(&design, &dp, &op).unwrap();
    let back = read_design(&dp, &op).unwrap();
    let config = McmcConfig {
        iterations: 4000,
        burn_in: 1000,
        ..Default::default()
    };
    let a = calibrate(&design, &config).unwrap();
    let b = calibrate(&back, &config).unwrap();
    assert_eq!(a.posterior_samples, b.posterior_samples);
}

#[test]
fn too_few_runs_are_rejected() {
    let d = DesignSet::new(vec![0.02, 0.05, 0.08], vec![vec![1.0]; 3], vec![1.0]).unwrap();
    assert!(calibrate(&d, &McmcConfig::default()).is_err());
    assert!(DesignSet::new(vec![0.02, 0.05], vec![vec![1.0]; 2], vec![1.0]).is_err());
}
