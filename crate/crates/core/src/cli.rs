//! Subcommands behind the `gp-sbc` binary.
//!
//! Exit codes: 0 pass / type-II adequate, 2 fail / marginalisation needed,
//! 3 inconclusive, 1 execution error.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{load_config, load_training_data, to_json, ExperimentConfig, Points};
use crate::diagnostics::{assess, rebin, DiagnosticsConfig, UniformityReport, Verdict, View};
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::marg::{run_marg_check, MargCheckReport};
use crate::model::{FaultSpec, GpModel};
use crate::output::{
    render_histogram, render_side_by_side, tally_csv, theta_names, theta_trace_csv, to_json_pretty,
    Annotations, RunWriter,
};
use crate::sbc::{pool_tally, run_sbc, with_threads, Pooling, RankTally, SbcConfig};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_FAIL: i32 = 2;
pub const EXIT_INCONCLUSIVE: i32 = 3;

/// Options shared by every subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    /// `None` uses the rayon default.
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Sbc,
    DemoBug,
    MargCheck,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Sbc => "sbc",
            Command::DemoBug => "demo-bug",
            Command::MargCheck => "marg-check",
        }
    }
}

/// Runs a subcommand and maps the outcome to an exit code, reporting errors
/// on stderr.
pub fn run(command: Command, opts: &RunOptions) -> i32 {
    let outcome = load_config(&opts.config).and_then(|mut cfg| {
        if let Some(seed) = opts.seed {
            cfg.sbc.base_seed = seed;
        }
        match command {
            Command::Sbc => cmd_sbc(&cfg, &opts.out, opts.threads),
            Command::DemoBug => cmd_demo_bug(&cfg, &opts.out, opts.threads),
            Command::MargCheck => cmd_marg_check(&cfg, &opts.out, opts.threads),
        }
    });
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("gp-sbc {}: error: {e}", command.name());
            EXIT_ERROR
        }
    }
}

fn verdict_code(v: Verdict) -> i32 {
    match v {
        Verdict::Pass => EXIT_PASS,
        Verdict::Fail => EXIT_FAIL,
        Verdict::Inconclusive => EXIT_INCONCLUSIVE,
    }
}

/// Uniformity reports for every view of an SBC tally.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SbcReport {
    pub verdict: Verdict,
    /// Views the verdict is based on; their alpha is Bonferroni-corrected.
    pub verdict_pooling: Pooling,
    pub n_trials: usize,
    pub n_completed: usize,
    pub failed_trials: Vec<usize>,
    pub pooled: UniformityReport,
    pub outputs: Vec<UniformityReport>,
    pub slices: Vec<UniformityReport>,
}

/// Assesses every view of `tally`. The verdict combines the views selected
/// by `pooling`: fail if any fails at `alpha / views`, else inconclusive if
/// any is, else pass.
pub fn sbc_report(
    tally: &RankTally,
    n_trials: usize,
    cfg: &DiagnosticsConfig,
    pooling: Pooling,
    seed: u64,
) -> Result<SbcReport> {
    let views = |pooling: Pooling| -> Vec<View> {
        match pooling {
            Pooling::Single => vec![View::Pooled],
            Pooling::PerOutput => (0..tally.n_outputs())
                .map(|output| View::Output { output })
                .collect(),
            Pooling::PerSlice => (0..tally.n_test())
                .flat_map(|test_point| {
                    (0..tally.n_outputs()).map(move |output| View::Slice { test_point, output })
                })
                .collect(),
        }
    };
    let slice_bins = cfg.bins.map(|b| b.min(tally.n_ranks()));
    let assess_all = |pooling: Pooling, alpha: f64| -> Result<Vec<UniformityReport>> {
        let c = DiagnosticsConfig {
            alpha,
            bins: slice_bins,
            mc_reps: cfg.mc_reps,
        };
        views(pooling)
            .into_iter()
            .map(|v| assess(tally, v, &c, seed))
            .collect()
    };
    let k = views(pooling).len() as f64;
    let chosen = assess_all(pooling, cfg.alpha / k)?;
    let verdict = if chosen.iter().any(|r| r.verdict == Verdict::Fail) {
        Verdict::Fail
    } else if chosen.iter().any(|r| r.verdict == Verdict::Inconclusive) {
        Verdict::Inconclusive
    } else {
        Verdict::Pass
    };
    let pick = |mode: Pooling| -> Result<Vec<UniformityReport>> {
        if mode == pooling {
            Ok(chosen.clone())
        } else {
            assess_all(mode, cfg.alpha)
        }
    };
    Ok(SbcReport {
        verdict,
        verdict_pooling: pooling,
        n_trials,
        n_completed: tally.n_completed(),
        failed_trials: tally.failed_trials().to_vec(),
        pooled: pick(Pooling::Single)?.remove(0),
        outputs: pick(Pooling::PerOutput)?,
        slices: pick(Pooling::PerSlice)?,
    })
}

fn report_lines(r: &UniformityReport) -> Vec<String> {
    vec![
        format!(
            "chi2 = {:.3} (dof {}), p = {:.4}, Monte Carlo p = {:.4}",
            r.chi2_stat, r.dof, r.p_value, r.p_value_mc
        ),
        format!(
            "valley score = {}, verdict = {:?}",
            r.valley_score
                .map_or("undefined".to_string(), |v| format!("{v:.3}")),
            r.verdict
        ),
    ]
}

fn pooled_counts(tally: &RankTally, bins: usize) -> Result<Vec<u64>> {
    rebin(&pool_tally(tally, Pooling::Single)[0], bins)
}

fn output_counts(tally: &RankTally, output: usize, bins: usize) -> Result<Vec<u64>> {
    rebin(&pool_tally(tally, Pooling::PerOutput)[output], bins)
}

fn config_value(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::from_str(&to_json(cfg)).unwrap_or(serde_json::Value::Null)
}

/// Tally, reports and SVGs for one SBC run, written with `prefix`.
fn write_sbc_artifacts(
    w: &mut RunWriter,
    prefix: &str,
    title: &str,
    tally: &RankTally,
    report: &SbcReport,
) -> Result<()> {
    w.write(&format!("{prefix}tally.csv"), &tally_csv(tally))?;
    w.write(&format!("{prefix}report.json"), &to_json_pretty(report)?)?;
    let notes = Annotations {
        title: format!("{title}: pooled ranks"),
        lines: report_lines(&report.pooled),
    };
    w.write(
        &format!("{prefix}histogram_pooled.svg"),
        &render_histogram(&pooled_counts(tally, report.pooled.bins)?, &notes)?,
    )?;
    if tally.n_outputs() > 1 {
        for (i, r) in report.outputs.iter().enumerate() {
            let notes = Annotations {
                title: format!("{title}: output {i}"),
                lines: report_lines(r),
            };
            w.write(
                &format!("{prefix}histogram_output_{i}.svg"),
                &render_histogram(&output_counts(tally, i, r.bins)?, &notes)?,
            )?;
        }
    }
    Ok(())
}

fn sbc_run(model: &GpModel, sbc: &SbcConfig, threads: Option<usize>) -> Result<RankTally> {
    with_threads(threads.unwrap_or(0), || run_sbc(model, sbc))
}

/// Runs plain SBC for a config and assesses it, without writing anything.
pub fn sbc_from_config(
    cfg: &ExperimentConfig,
    threads: Option<usize>,
) -> Result<(RankTally, SbcReport)> {
    let model = cfg.model()?;
    let sbc = cfg.sbc_config()?;
    let tally = sbc_run(&model, &sbc, threads)?;
    let report = sbc_report(
        &tally,
        sbc.n_trials,
        &cfg.diagnostics,
        cfg.sbc.pooling,
        sbc.base_seed,
    )?;
    Ok((tally, report))
}

pub fn cmd_sbc(cfg: &ExperimentConfig, out: &Path, threads: Option<usize>) -> Result<i32> {
    cfg.model()?;
    cfg.sbc_config()?;
    let mut w = RunWriter::create(out)?;
    let (tally, report) = sbc_from_config(cfg, threads)?;
    write_sbc_artifacts(&mut w, "", "GP-SBC", &tally, &report)?;
    w.finish("sbc", cfg.sbc.base_seed, threads, config_value(cfg))?;
    println!(
        "sbc: verdict {:?} (pooled Monte Carlo p = {:.4})",
        report.verdict, report.pooled.p_value_mc
    );
    Ok(verdict_code(report.verdict))
}

/// Summary written by `demo-bug`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemoReport {
    pub fault: FaultSpec,
    pub faulted_verdict: Verdict,
    pub unfaulted_verdict: Verdict,
    pub fault_detected: bool,
}

/// Rejects demo configs whose two arms cannot differ.
pub fn check_demo_arms(cfg: &ExperimentConfig) -> Result<FaultSpec> {
    let fault = cfg.model.fault.clone().ok_or_else(|| {
        Error::config(
            "model.fault",
            "arms indistinguishable: demo-bug needs a fault",
        )
    })?;
    if fault == FaultSpec::TransposedMixingMatrix {
        let asymmetric = match &cfg.model.kernel {
            KernelSpec::LinearCoregionalization { .. } => cfg.model.kernel.has_asymmetric_mixing(),
            _ => false,
        };
        if !asymmetric {
            return Err(Error::config(
                "model.fault",
                "fault is a no-op for symmetric W",
            ));
        }
    }
    Ok(fault)
}

pub fn cmd_demo_bug(cfg: &ExperimentConfig, out: &Path, threads: Option<usize>) -> Result<i32> {
    let fault = check_demo_arms(cfg)?;
    let faulted = cfg.model()?;
    let unfaulted = faulted.with_fault(None)?;
    let sbc = cfg.sbc_config()?;
    let mut w = RunWriter::create(out)?;

    let tally_f = sbc_run(&faulted, &sbc, threads)?;
    let tally_u = sbc_run(&unfaulted, &sbc, threads)?;
    let report_f = sbc_report(
        &tally_f,
        sbc.n_trials,
        &cfg.diagnostics,
        cfg.sbc.pooling,
        sbc.base_seed,
    )?;
    let report_u = sbc_report(
        &tally_u,
        sbc.n_trials,
        &cfg.diagnostics,
        cfg.sbc.pooling,
        sbc.base_seed,
    )?;
    write_sbc_artifacts(&mut w, "faulted_", "Faulted", &tally_f, &report_f)?;
    write_sbc_artifacts(&mut w, "unfaulted_", "Unfaulted", &tally_u, &report_u)?;

    let left = pooled_counts(&tally_f, report_f.pooled.bins)?;
    let right = pooled_counts(&tally_u, report_u.pooled.bins)?;
    let notes_l = Annotations {
        title: "Before fix (faulted)".into(),
        lines: report_lines(&report_f.pooled),
    };
    let notes_r = Annotations {
        title: "After fix (unfaulted)".into(),
        lines: report_lines(&report_u.pooled),
    };
    w.write(
        "demo.svg",
        &render_side_by_side((&left, &notes_l), (&right, &notes_r))?,
    )?;

    let detected = report_f.verdict == Verdict::Fail && report_u.verdict == Verdict::Pass;
    let summary = DemoReport {
        fault,
        faulted_verdict: report_f.verdict,
        unfaulted_verdict: report_u.verdict,
        fault_detected: detected,
    };
    w.write("demo.json", &to_json_pretty(&summary)?)?;
    w.finish("demo-bug", sbc.base_seed, threads, config_value(cfg))?;
    println!(
        "demo-bug: faulted {:?}, unfaulted {:?}; fault {}",
        report_f.verdict,
        report_u.verdict,
        if detected { "detected" } else { "not detected" }
    );
    Ok(if detected { EXIT_PASS } else { EXIT_FAIL })
}

/// Loads the data named by a marg-check config and runs the check without
/// writing anything.
pub fn marg_check_from_config(
    cfg: &ExperimentConfig,
    threads: Option<usize>,
) -> Result<MargCheckReport> {
    let m = &cfg.marg_check;
    let source = m
        .data
        .as_ref()
        .ok_or_else(|| Error::config("marg_check.data", "required for marg-check"))?;
    let prior = m
        .hyper_prior
        .as_ref()
        .ok_or_else(|| Error::config("marg_check.hyper_prior", "required for marg-check"))?;
    let data = load_training_data(source)?;
    let template = cfg.model()?;
    if template.output_dim() != 1 || data.y.ncols() != 1 {
        return Err(Error::config(
            "model",
            "marg-check needs a single-output model and one y column",
        ));
    }
    let mut sbc_cfg = cfg.clone();
    sbc_cfg.sbc.train_inputs = Some(Points::from_inputs(&data.x));
    let sbc = sbc_cfg.sbc_config()?;
    let settings = cfg.marg_settings()?;
    with_threads(threads.unwrap_or(0), || {
        run_marg_check(&template, &data.y, prior, &sbc, &settings)
    })
}

pub fn cmd_marg_check(cfg: &ExperimentConfig, out: &Path, threads: Option<usize>) -> Result<i32> {
    cfg.model()?;
    cfg.marg_settings()?;
    let mut w = RunWriter::create(out)?;
    let report = marg_check_from_config(cfg, threads)?;
    let dim = cfg.model.kernel.input_dim();
    let seed = cfg.sbc.base_seed;

    w.write("tally.csv", &tally_csv(&report.tally))?;
    w.write("report.json", &to_json_pretty(&report)?)?;
    w.write(
        "theta_trace.csv",
        &theta_trace_csv(&report.per_trial, &theta_names(dim)),
    )?;
    let mut lines = report_lines(&report.uniformity);
    lines.push(format!(
        "valley threshold {:.3}, marg-check verdict {:?}",
        report.valley_threshold, report.verdict
    ));
    let notes = Annotations {
        title: "Marginalisation check: pooled ranks".into(),
        lines,
    };
    w.write(
        "histogram_pooled.svg",
        &render_histogram(
            &pooled_counts(&report.tally, report.uniformity.bins)?,
            &notes,
        )?,
    )?;
    w.finish("marg-check", seed, threads, config_value(cfg))?;
    println!("marg-check: verdict {:?}", report.verdict);
    Ok(report.verdict.exit_code())
}
