mod common;

use common::*;
use gp_sbc::diagnostics::{assess, pooled_pvalue_mc, DiagnosticsConfig, Verdict, View};
use gp_sbc::kernel::InputPoints;
use gp_sbc::linalg::mvn_sample;
use gp_sbc::marg::{
    fit_type2, run_marg_check, sample_hyper_prior, sample_log_hyper_prior, HyperPrior,
    MargCheckSettings, OptimizerConfig,
};
use gp_sbc::model::{FaultSpec, Inference};
use gp_sbc::rng::{stream, trial_stream};
use gp_sbc::sbc::{run_sbc, run_sbc_with_threads, SbcConfig};
use nalgebra::{DMatrix, DVector};

#[test]
fn sample_means_obey_clt_bound() {
    let mut rng = trial_stream(17, 0);
    let draws = mvn_sample(
        &DVector::zeros(3),
        &DMatrix::identity(3, 3),
        &mut rng,
        100_000,
    )
    .unwrap();
    for c in 0..3 {
        let mean = draws.column(c).mean();
        assert!(mean.abs() < 4.0 / (1e5f64).sqrt(), "coordinate {c}: {mean}");
    }
}

#[test]
fn zero_factor_returns_mean() {
    let mut rng = trial_stream(1, 1);
    let mean = DVector::from_vec(vec![0.5, -2.0]);
    let draws = mvn_sample(&mean, &DMatrix::zeros(2, 2), &mut rng, 10).unwrap();
    for r in 0..10 {
        assert_eq!(draws.row(r).transpose(), mean);
    }
}

#[test]
fn hyper_prior_log_means() {
    let prior = HyperPrior::centered(&[0.3, -1.0], 0.7).unwrap();
    let mut rng = stream(8, 99, 0);
    let n = 100_000;
    let mut sums = [0.0; 2];
    for _ in 0..n {
        let d = sample_hyper_prior(&prior, &mut rng);
        assert!(d.iter().all(|v| *v > 0.0));
        for (s, v) in sums.iter_mut().zip(&d) {
            *s += v.ln();
        }
    }
    let se = 0.7 / (n as f64).sqrt();
    assert!((sums[0] / n as f64 - 0.3).abs() < 5.0 * se);
    assert!((sums[1] / n as f64 + 1.0).abs() < 5.0 * se);
}

#[test]
fn unfaulted_model_is_calibrated() {
    let model = se_model(1.0, 0.5, 0.1);
    let cfg = DiagnosticsConfig::default();
    let mut passes = 0;
    for seed in 0..10 {
        let tally = run_sbc(&model, &SbcConfig::default_geometry(seed)).unwrap();
        if assess(&tally, View::Pooled, &cfg, seed).unwrap().verdict == Verdict::Pass {
            passes += 1;
        }
    }
    assert!(passes >= 9, "{passes} of 10 passed");
}

#[test]
fn every_fault_is_detected() {
    let cfg = DiagnosticsConfig::default();
    let faults = [
        FaultSpec::ScaledPosteriorVariance { factor: 0.25 },
        FaultSpec::ScaledPosteriorVariance { factor: 4.0 },
        FaultSpec::ShiftedPosteriorMean { offset: 0.5 },
        FaultSpec::NoNoiseInPredictiveVariance,
        FaultSpec::WrongTriangularSide,
    ];
    for fault in faults {
        let model = se_model(1.0, 0.5, 0.1)
            .with_fault(Some(fault.clone()))
            .unwrap();
        let tally = run_sbc(&model, &SbcConfig::default_geometry(4)).unwrap();
        let p = pooled_pvalue_mc(&tally, &cfg, 4).unwrap();
        assert!(p < 0.01, "{fault:?} not detected, p = {p}");
    }
}

#[test]
fn transposed_mixing_is_detected() {
    let se = gp_sbc::kernel::KernelSpec::squared_exponential;
    let spec = gp_sbc::kernel::KernelSpec::LinearCoregionalization {
        latent_kernels: vec![se(1.0, vec![0.5]), se(1.0, vec![0.25])],
        mixing: vec![vec![1.0, 0.0], vec![0.8, 1.0]],
    };
    let sparse = Inference::Sparse {
        inducing: default_inducing(),
    };
    let clean = model(spec, vec![0.1, 0.1], sparse);
    let faulty = clean
        .with_fault(Some(FaultSpec::TransposedMixingMatrix))
        .unwrap();
    let cfg = DiagnosticsConfig::default();
    let sbc = SbcConfig::default_geometry(2);
    assert!(pooled_pvalue_mc(&run_sbc(&faulty, &sbc).unwrap(), &cfg, 2).unwrap() < 0.01);
    assert!(pooled_pvalue_mc(&run_sbc(&clean, &sbc).unwrap(), &cfg, 2).unwrap() >= 0.01);
}

#[test]
fn tally_is_independent_of_thread_count() {
    let model = identity_lmc(Inference::Sparse {
        inducing: default_inducing(),
    });
    let mut sbc = SbcConfig::default_geometry(21);
    sbc.n_trials = 300;
    let one = run_sbc_with_threads(&model, &sbc, 1).unwrap();
    let eight = run_sbc_with_threads(&model, &sbc, 8).unwrap();
    assert_eq!(one, eight);
}

#[test]
fn type2_recovers_noise_with_many_points() {
    let x = InputPoints::equispaced(200, 0.0, 1.0).unwrap();
    let truth = se_model(1.0, 0.5, 0.1);
    let theta0 = truth.log_hyperparameters().unwrap();
    let prior = HyperPrior::centered(&theta0, 1.0).unwrap();
    for seed in 0..3 {
        let y = se_data(seed, &x, 1.0, 0.5, 0.1);
        let mut rng = stream(seed, 50, 0);
        let inits: Vec<Vec<f64>> = (0..5)
            .map(|_| sample_log_hyper_prior(&prior, &mut rng))
            .collect();
        let fit = fit_type2(&truth, &x, &y, &inits, &OptimizerConfig::default()).unwrap();
        assert!(fit.converged);
        assert!(
            (fit.theta_hat[2] - theta0[2]).abs() < 0.3,
            "seed {seed}: {:?}",
            fit.theta_hat
        );
        for v in fit.init_lml.iter().flatten() {
            assert!(fit.final_lml >= *v);
        }
    }
}

#[test]
fn point_mass_prior_and_frozen_optimizer_reduce_to_sbc() {
    let template = se_model(1.0, 0.5, 0.1);
    let mu = vec![0.2, -0.9, -2.0];
    let x = InputPoints::equispaced(6, 0.0, 1.0).unwrap();
    let y = se_data(5, &x, 1.0, 0.5, 0.1);
    let mut sbc = SbcConfig::default_geometry(13);
    sbc.train = x;
    sbc.n_trials = 200;
    let settings = MargCheckSettings {
        optimizer: OptimizerConfig {
            max_iterations: 0,
            ..Default::default()
        },
        ..Default::default()
    };
    let report = run_marg_check(
        &template,
        &y,
        &HyperPrior::point_mass(&mu).unwrap(),
        &sbc,
        &settings,
    )
    .unwrap();
    assert_eq!(report.prologue.theta_hat, mu);
    let plain = run_sbc(&template.with_log_hyperparameters(&mu).unwrap(), &sbc).unwrap();
    assert_eq!(report.tally, plain);
    assert!(report
        .per_trial
        .iter()
        .all(|t| t.theta.as_deref() == Some(&mu[..])));
}

#[test]
fn valley_shrinks_with_more_data() {
    let template = se_model(1.0, 0.5, 0.1);
    let prior = HyperPrior::centered(&template.log_hyperparameters().unwrap(), 1.0).unwrap();
    let median = |n: usize| -> f64 {
        let mut scores: Vec<f64> = (0..3)
            .map(|seed| {
                let x = InputPoints::equispaced(n, 0.0, 1.0).unwrap();
                let y = se_data(100 + seed, &x, 1.0, 0.5, 0.1);
                let mut sbc = SbcConfig::default_geometry(seed);
                sbc.train = x;
                sbc.n_trials = 40;
                let r = run_marg_check(&template, &y, &prior, &sbc, &MargCheckSettings::default())
                    .unwrap();
                r.uniformity.valley_score.unwrap_or(f64::INFINITY)
            })
            .collect();
        scores.sort_by(f64::total_cmp);
        scores[1]
    };
    let small = median(3);
    let large = median(200);
    assert!(small >= large, "median valley n=3 {small} < n=200 {large}");
}
