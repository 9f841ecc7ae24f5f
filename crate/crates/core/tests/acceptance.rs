mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use gp_sbc::diagnostics::{assess, DiagnosticsConfig, Verdict, View};
use gp_sbc::kernel::InputPoints;
use gp_sbc::marg::{run_marg_check, HyperPrior, MargCheckSettings, MargVerdict, OptimizerConfig};
use gp_sbc::model::{
    exact_posterior, log_marginal_likelihood, sparse_posterior, FaultSpec, Inference,
};
use gp_sbc::sbc::{run_sbc, SbcConfig};
use nalgebra::DMatrix;
use rand::Rng;

const SEEDS: u64 = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

fn criterion(
    id: usize,
    name: &str,
    limit: Option<Duration>,
    body: impl FnOnce() -> Outcome,
) -> bool {
    let start = Instant::now();
    let out = body();
    let elapsed = start.elapsed();
    let in_time = limit.is_none_or(|l| elapsed < l);
    let pass = out.pass && in_time;
    let limit = limit
        .map(|l| format!(" (limit {} s)", l.as_secs()))
        .unwrap_or_default();
    println!(
        "{} criterion {id} {name}: {}; {:.1} s{limit}",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64()
    );
    pass
}

fn oracle_equivalence() -> Outcome {
    let mut r = rng(1001);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let d = r.random_range(1..=2);
        let spec = random_kernel(&mut r, d);
        let p = spec.output_dim();
        let noise: Vec<f64> = (0..p).map(|_| r.random_range(0.01..0.5)).collect();
        let x = {
            let n = r.random_range(1..=5);
            random_points(&mut r, n, d)
        };
        let xs = {
            let m = r.random_range(1..=5);
            random_points(&mut r, m, d)
        };
        let y = DMatrix::from_fn(x.nrows(), p, |_, _| r.random_range(-2.0..2.0));
        let m = model(spec.clone(), noise.clone(), Inference::Exact);
        let post = exact_posterior(
            &m,
            &InputPoints::new(x.clone()).unwrap(),
            &y,
            &InputPoints::new(xs.clone()).unwrap(),
        )
        .unwrap();
        let (mean, cov) = oracle_posterior(&spec, &noise, &x, &y, &xs);
        worst = worst
            .max(max_abs_diff_vec(post.mean(), &mean))
            .max(max_abs_diff(post.cov().values(), &cov));
    }
    Outcome {
        pass: worst < 1e-8,
        detail: format!("max abs error {worst:.3e} over 200 instances"),
    }
}

fn sparse_collapse() -> Outcome {
    let mut r = rng(1002);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let d = r.random_range(1..=2);
        let spec = random_kernel(&mut r, d);
        let p = spec.output_dim();
        let noise: Vec<f64> = (0..p).map(|_| r.random_range(0.05..0.5)).collect();
        let n = r.random_range(2..=5);
        let x = InputPoints::new(random_points(&mut r, n, d)).unwrap();
        let xs = {
            let m = r.random_range(1..=5);
            InputPoints::new(random_points(&mut r, m, d)).unwrap()
        };
        let y = DMatrix::from_fn(n, p, |_, _| r.random_range(-2.0..2.0));
        let exact = exact_posterior(
            &model(spec.clone(), noise.clone(), Inference::Exact),
            &x,
            &y,
            &xs,
        )
        .unwrap();
        let sparse = sparse_posterior(
            &model(
                spec,
                noise,
                Inference::Sparse {
                    inducing: x.clone(),
                },
            ),
            &x,
            &y,
            &xs,
        )
        .unwrap();
        worst = worst
            .max(max_abs_diff_vec(exact.mean(), sparse.mean()))
            .max(max_abs_diff(exact.cov().values(), sparse.cov().values()));
    }
    Outcome {
        pass: worst < 1e-6,
        detail: format!("max abs error {worst:.3e} over 50 instances"),
    }
}

fn gradient_check() -> Outcome {
    let mut r = rng(1003);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let d = r.random_range(1..=2);
        let m = model(
            random_se(&mut r, d),
            vec![r.random_range(0.05..0.5)],
            Inference::Exact,
        );
        let x = {
            let n = r.random_range(2..=8);
            InputPoints::new(random_points(&mut r, n, d)).unwrap()
        };
        let y = DMatrix::from_fn(x.len(), 1, |_, _| r.random_range(-2.0..2.0));
        let theta = m.log_hyperparameters().unwrap();
        let analytic = log_marginal_likelihood(&m, &x, &y).unwrap().gradient;
        let fd = central_difference(
            |t| {
                log_marginal_likelihood(&m.with_log_hyperparameters(t).unwrap(), &x, &y)
                    .unwrap()
                    .value
            },
            &theta,
            1e-5,
        );
        for (a, b) in analytic.iter().zip(&fd) {
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-3));
        }
    }
    Outcome {
        pass: worst < 1e-4,
        detail: format!("max relative error {worst:.3e} over 50 instances"),
    }
}

fn null_calibration() -> Outcome {
    let m = se_model(1.0, 0.5, 0.1);
    let cfg = DiagnosticsConfig::default();
    let passes = (0..SEEDS)
        .filter(|&seed| {
            let tally = run_sbc(&m, &SbcConfig::default_geometry(seed)).unwrap();
            assess(&tally, View::Pooled, &cfg, seed).unwrap().verdict == Verdict::Pass
        })
        .count();
    Outcome {
        pass: passes >= 95,
        detail: format!("pooled verdict pass in {passes}/100 seeds (need 95)"),
    }
}

/// Pooled valley scores of the faulted arms, collected while checking
/// detection so the valley criterion can reuse them.
struct FaultRuns {
    detected: usize,
    underdispersed_valleys: Vec<Option<f64>>,
}

fn fault_detection(runs: &mut FaultRuns) -> Outcome {
    let sparse = Inference::Sparse {
        inducing: default_inducing(),
    };
    let clean = identity_lmc(sparse);
    let faulty = clean
        .with_fault(Some(FaultSpec::ScaledPosteriorVariance { factor: 0.25 }))
        .unwrap();
    let cfg = DiagnosticsConfig::default();
    for seed in 0..SEEDS {
        let sbc = SbcConfig::default_geometry(seed);
        let bad = assess(&run_sbc(&faulty, &sbc).unwrap(), View::Pooled, &cfg, seed).unwrap();
        let good = assess(&run_sbc(&clean, &sbc).unwrap(), View::Pooled, &cfg, seed).unwrap();
        if bad.p_value_mc < 1e-3 && good.verdict == Verdict::Pass {
            runs.detected += 1;
        }
        runs.underdispersed_valleys.push(bad.valley_score);
    }
    Outcome {
        pass: runs.detected >= 95,
        detail: format!(
            "faulted p_mc < 1e-3 and unfaulted pass in {}/100 seeds (need 95)",
            runs.detected
        ),
    }
}

fn valley_direction(runs: &FaultRuns) -> Outcome {
    let valleys = runs
        .underdispersed_valleys
        .iter()
        .filter(|v| v.is_some_and(|v| v > 1.2))
        .count();
    let faulty = identity_lmc(Inference::Sparse {
        inducing: default_inducing(),
    })
    .with_fault(Some(FaultSpec::ScaledPosteriorVariance { factor: 4.0 }))
    .unwrap();
    let cfg = DiagnosticsConfig::default();
    let humps = (0..SEEDS)
        .filter(|&seed| {
            let tally = run_sbc(&faulty, &SbcConfig::default_geometry(seed)).unwrap();
            assess(&tally, View::Pooled, &cfg, seed)
                .unwrap()
                .valley_score
                .is_some_and(|v| v < 0.8)
        })
        .count();
    Outcome {
        pass: valleys >= 90 && humps >= 90,
        detail: format!("factor 0.25 valley > 1.2 in {valleys}/100, factor 4.0 valley < 0.8 in {humps}/100 (need 90 each)"),
    }
}

fn marg_scenario(n: usize, n_trials: usize, wanted: MargVerdict) -> usize {
    let template = se_model(1.0, 0.5, 0.1);
    let prior = HyperPrior::centered(&template.log_hyperparameters().unwrap(), 1.0).unwrap();
    let x = InputPoints::equispaced(n, 0.0, 1.0).unwrap();
    (0..SEEDS)
        .filter(|&seed| {
            let y = se_data(10_000 + seed, &x, 1.0, 0.5, 0.1);
            let mut sbc = SbcConfig::default_geometry(seed);
            sbc.train = x.clone();
            sbc.n_trials = n_trials;
            let report =
                run_marg_check(&template, &y, &prior, &sbc, &MargCheckSettings::default()).unwrap();
            report.verdict == wanted
        })
        .count()
}

fn marginalisation_check() -> Outcome {
    let small = marg_scenario(3, 400, MargVerdict::MarginalisationNeeded);
    let large = marg_scenario(200, 50, MargVerdict::Type2Adequate);
    Outcome {
        pass: small >= 80 && large >= 80,
        detail: format!(
            "n=3 marginalisation_needed in {small}/100, n=200 type2_adequate in {large}/100 (need 80 each)"
        ),
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run_binary(sub: &str, config: &Path, out: &Path, threads: usize) -> Option<i32> {
    Command::new(env!("CARGO_BIN_EXE_gp-sbc"))
        .env_remove("GP_SBC_THREADS")
        .arg(sub)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("--threads")
        .arg(threads.to_string())
        .output()
        .ok()?
        .status
        .code()
}

type Artifacts = Vec<(String, Vec<u8>)>;

/// Tally and SVG files in `dir`, sorted by name.
fn artifacts(dir: &Path) -> Artifacts {
    let mut files: Artifacts = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            p.extension().is_some_and(|e| e == "svg")
                || p.file_name()
                    .is_some_and(|n| n.to_string_lossy().ends_with("tally.csv"))
        })
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::TempDir::new().unwrap();
    let cases = [
        ("sbc", "sbc_default.json"),
        ("demo-bug", "demo_bug.json"),
        ("marg-check", "marg_check_small.json"),
    ];
    let mut notes = Vec::new();
    let mut pass = true;
    for (sub, file) in cases {
        let cfg = configs_dir().join(file);
        let runs: Vec<(Option<i32>, Artifacts)> = [1usize, 8, 1]
            .iter()
            .enumerate()
            .map(|(k, &threads)| {
                let out = tmp.path().join(format!("{sub}-{k}"));
                let code = run_binary(sub, &cfg, &out, threads);
                let files = if out.exists() {
                    artifacts(&out)
                } else {
                    Vec::new()
                };
                (code, files)
            })
            .collect();
        let ok = runs
            .iter()
            .all(|(c, f)| matches!(c, Some(0 | 2 | 3)) && !f.is_empty() && *f == runs[0].1);
        pass &= ok;
        notes.push(format!(
            "{sub} {}",
            if ok { "identical" } else { "differs" }
        ));
    }
    Outcome {
        pass,
        detail: notes.join(", "),
    }
}

fn reduction_identity() -> Outcome {
    let template = se_model(1.0, 0.5, 0.1);
    let settings = MargCheckSettings {
        optimizer: OptimizerConfig {
            max_iterations: 0,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut identical = 0;
    for seed in 0..10u64 {
        let mu = vec![0.3 - 0.1 * seed as f64, -0.7, -2.3];
        let x = InputPoints::equispaced(4 + seed as usize, 0.0, 1.0).unwrap();
        let y = se_data(seed, &x, 1.0, 0.5, 0.1);
        let mut sbc = SbcConfig::default_geometry(seed);
        sbc.train = x;
        sbc.n_trials = 200;
        let report = run_marg_check(
            &template,
            &y,
            &HyperPrior::point_mass(&mu).unwrap(),
            &sbc,
            &settings,
        )
        .unwrap();
        let plain = run_sbc(&template.with_log_hyperparameters(&mu).unwrap(), &sbc).unwrap();
        if report.tally == plain {
            identical += 1;
        }
    }
    Outcome {
        pass: identical == 10,
        detail: format!("bitwise identical tallies in {identical}/10 seeds"),
    }
}

fn main() {
    let secs = Duration::from_secs;
    let mut runs = FaultRuns {
        detected: 0,
        underdispersed_valleys: Vec::new(),
    };
    let results = [
        criterion(1, "oracle equivalence", Some(secs(10)), oracle_equivalence),
        criterion(2, "sparse collapse", Some(secs(10)), sparse_collapse),
        criterion(3, "gradient check", Some(secs(10)), gradient_check),
        criterion(4, "null calibration", Some(secs(300)), null_calibration),
        criterion(5, "fault detection", None, || fault_detection(&mut runs)),
        criterion(6, "valley direction", None, || valley_direction(&runs)),
        criterion(
            7,
            "marginalisation check",
            Some(secs(1200)),
            marginalisation_check,
        ),
        criterion(8, "determinism", None, determinism),
        criterion(9, "reduction identity", None, reduction_identity),
    ];
    let failed = results.iter().filter(|p| !**p).count();
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
