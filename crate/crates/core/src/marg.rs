//! Checking whether Type-II maximum likelihood is an adequate stand-in for
//! marginalising the hyperparameters.
//!
//! A model is first fitted to real data. The fitted model then plays the
//! prior in GP-SBC: each trial simulates data from it, refits the
//! hyperparameters from an initialization drawn from the hyperparameter
//! prior, and ranks the prior function values among samples from the
//! refitted posterior. Overconfident plug-in posteriors show up as a valley.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    assess, null_valley_quantile, DiagnosticsConfig, UniformityReport, Verdict, View,
};
use crate::error::{Error, Result};
use crate::kernel::InputPoints;
use crate::model::{
    log_marginal_likelihood, log_marginal_likelihood_value, sample_posterior, GpModel, Inference,
};
use crate::rng::{domain, stream, trial_stream};
use crate::sbc::{run_trials, RankTally, SbcConfig, TrialDraw, TrialPipeline};

pub const DEFAULT_VALLEY_THRESHOLD: f64 = 1.2;

/// Log-normal prior on one positive hyperparameter: `log θ ~ N(mu, sigma²)`.
/// `sigma = 0` is a point mass at `exp(mu)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogNormal {
    pub mu: f64,
    pub sigma: f64,
}

/// Independent log-normal priors ordered `[σ_f², ℓ_1 … ℓ_d, σ²]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperPrior {
    pub components: Vec<LogNormal>,
}

impl HyperPrior {
    pub fn new(components: Vec<LogNormal>) -> Result<Self> {
        let prior = HyperPrior { components };
        prior.validate()?;
        Ok(prior)
    }

    /// Same `sigma` for every component, centred on `center` (log scale).
    pub fn centered(center: &[f64], sigma: f64) -> Result<Self> {
        Self::new(center.iter().map(|&mu| LogNormal { mu, sigma }).collect())
    }

    pub fn point_mass(center: &[f64]) -> Result<Self> {
        Self::centered(center, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::config("hyper_prior", "needs at least one component"));
        }
        for (i, c) in self.components.iter().enumerate() {
            if !c.mu.is_finite() {
                return Err(Error::config(
                    format!("hyper_prior.components[{i}].mu"),
                    "must be finite",
                ));
            }
            if !(c.sigma.is_finite() && c.sigma >= 0.0) {
                return Err(Error::config(
                    format!("hyper_prior.components[{i}].sigma"),
                    "must be finite and >= 0",
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

/// One draw on the log scale.
pub fn sample_log_hyper_prior<R: Rng + ?Sized>(prior: &HyperPrior, rng: &mut R) -> Vec<f64> {
    prior
        .components
        .iter()
        .map(|c| {
            let z: f64 = rng.sample(StandardNormal);
            c.mu + c.sigma * z
        })
        .collect()
}

/// One draw of the (positive) hyperparameters.
pub fn sample_hyper_prior<R: Rng + ?Sized>(prior: &HyperPrior, rng: &mut R) -> Vec<f64> {
    sample_log_hyper_prior(prior, rng)
        .into_iter()
        .map(f64::exp)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Armijo sufficient-increase factor.
    pub armijo_slope: f64,
    /// Step contraction per backtrack.
    pub contraction: f64,
    pub max_backtracks: usize,
    /// Iterates the Armijo reference looks back over; 1 is monotone.
    pub nonmonotone_window: usize,
    /// Starts for the prologue fit on real data.
    pub restarts: usize,
    /// Starts per trial refit.
    pub trial_restarts: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iterations: 500,
            gradient_tolerance: 1e-6,
            armijo_slope: 1e-4,
            contraction: 0.5,
            max_backtracks: 60,
            nonmonotone_window: 10,
            restarts: 5,
            trial_restarts: 1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gradient_tolerance.is_finite() && self.gradient_tolerance > 0.0) {
            return Err(Error::config(
                "optimizer.gradient_tolerance",
                "must be finite and > 0",
            ));
        }
        if !(self.armijo_slope > 0.0 && self.armijo_slope < 1.0) {
            return Err(Error::config(
                "optimizer.armijo_slope",
                "must lie in (0, 1)",
            ));
        }
        if !(self.contraction > 0.0 && self.contraction < 1.0) {
            return Err(Error::config("optimizer.contraction", "must lie in (0, 1)"));
        }
        if self.restarts == 0 {
            return Err(Error::config("optimizer.restarts", "must be ≥ 1"));
        }
        if self.trial_restarts == 0 {
            return Err(Error::config("optimizer.trial_restarts", "must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Type2FitResult {
    /// Log-scale hyperparameters of the best start.
    pub theta_hat: Vec<f64>,
    pub final_lml: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Starts that produced a finite objective.
    pub restarts_used: usize,
    /// Objective at each start's initialization (`None` if not finite).
    pub init_lml: Vec<Option<f64>>,
}

struct Ascent {
    theta: Vec<f64>,
    value: f64,
    iterations: usize,
    converged: bool,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient ascent from one start. Every line search begins at the short
/// Barzilai–Borwein step `sᵀy / yᵀy` and backtracks until the Armijo
/// condition holds against the lowest objective of the last
/// `nonmonotone_window` iterates. Every iterate therefore stays at or above
/// the starting value.
fn ascend(objective: &Objective<'_>, init: &[f64], cfg: &OptimizerConfig) -> Result<Ascent> {
    let (mut value, mut gradient) = objective.value_and_gradient(init)?;
    let mut theta = init.to_vec();
    let mut recent = std::collections::VecDeque::from([value]);
    let mut step = 1.0 / max_abs(&gradient).max(1.0);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iterations {
        if max_abs(&gradient) < cfg.gradient_tolerance {
            converged = true;
            break;
        }
        let reference = recent.iter().copied().fold(f64::INFINITY, f64::min);
        let slope = dot(&gradient, &gradient);
        let mut t = step;
        let mut accepted = None;
        for attempt in 0..=cfg.max_backtracks {
            let candidate: Vec<f64> = theta
                .iter()
                .zip(&gradient)
                .map(|(x, g)| x + t * g)
                .collect();
            // the first trial step is usually accepted, so fetch its gradient too
            let eval = if attempt == 0 {
                objective
                    .value_and_gradient(&candidate)
                    .map(|(v, g)| (v, Some(g)))
            } else {
                objective.value(&candidate).map(|v| (v, None))
            };
            if let Ok((v, g)) = eval {
                if v >= reference + cfg.armijo_slope * t * slope {
                    accepted = Some((candidate, v, g));
                    break;
                }
            }
            t *= cfg.contraction;
        }
        let Some((candidate, v, g)) = accepted else {
            break;
        };
        let g = match g {
            Some(g) => g,
            None => match objective.value_and_gradient(&candidate) {
                Ok((_, g)) => g,
                Err(_) => break,
            },
        };
        let s: Vec<f64> = candidate.iter().zip(&theta).map(|(a, b)| a - b).collect();
        // curvature of -L along s
        let y: Vec<f64> = gradient.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        step = if sy > 0.0 { sy / dot(&y, &y) } else { t * 2.0 };
        theta = candidate;
        value = v;
        gradient = g;
        recent.push_back(value);
        if recent.len() > cfg.nonmonotone_window.max(1) {
            recent.pop_front();
        }
        iterations += 1;
    }
    if !converged && max_abs(&gradient) < cfg.gradient_tolerance {
        converged = true;
    }
    Ok(Ascent {
        theta,
        value,
        iterations,
        converged,
    })
}

struct Objective<'a> {
    template: &'a GpModel,
    train: &'a InputPoints,
    y: &'a DMatrix<f64>,
}

impl Objective<'_> {
    fn value(&self, theta: &[f64]) -> Result<f64> {
        let model = self.template.with_log_hyperparameters(theta)?;
        log_marginal_likelihood_value(&model, self.train, self.y)
    }

    fn value_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let model = self.template.with_log_hyperparameters(theta)?;
        let ev = log_marginal_likelihood(&model, self.train, self.y)?;
        Ok((ev.value, ev.gradient))
    }
}

/// Type-II maximum likelihood over log-hyperparameters, one ascent per
/// start in `inits`; the best final objective wins.
pub fn fit_type2(
    template: &GpModel,
    train: &InputPoints,
    y: &DMatrix<f64>,
    inits: &[Vec<f64>],
    cfg: &OptimizerConfig,
) -> Result<Type2FitResult> {
    cfg.validate()?;
    if *template.inference() != Inference::Exact {
        return Err(Error::InvalidModel(
            "Type-II fitting needs exact inference".into(),
        ));
    }
    if inits.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one initialization".into(),
        ));
    }
    let objective = Objective { template, train, y };
    let mut best: Option<Ascent> = None;
    let mut restarts_used = 0;
    let mut init_lml = Vec::with_capacity(inits.len());
    for init in inits {
        init_lml.push(objective.value(init).ok());
        let Ok(run) = ascend(&objective, init, cfg) else {
            continue;
        };
        if !run.value.is_finite() {
            continue;
        }
        restarts_used += 1;
        if best.as_ref().is_none_or(|b| run.value > b.value) {
            best = Some(run);
        }
    }
    let best =
        best.ok_or_else(|| Error::FitFailed(format!("all {} starts diverged", inits.len())))?;
    Ok(Type2FitResult {
        theta_hat: best.theta,
        final_lml: best.value,
        converged: best.converged,
        iterations: best.iterations,
        restarts_used,
        init_lml,
    })
}

/// Outcome of the marginalisation check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MargVerdict {
    MarginalisationNeeded,
    Type2Adequate,
    Inconclusive,
}

impl MargVerdict {
    pub fn exit_code(&self) -> i32 {
        match self {
            MargVerdict::Type2Adequate => 0,
            MargVerdict::MarginalisationNeeded => 2,
            MargVerdict::Inconclusive => 3,
        }
    }
}

/// Per-trial refit record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFit {
    pub trial_index: usize,
    /// `None` for failed trials.
    pub theta: Option<Vec<f64>>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MargCheckReport {
    pub prologue: Type2FitResult,
    pub tally: RankTally,
    pub uniformity: UniformityReport,
    pub per_trial: Vec<TrialFit>,
    /// Threshold actually applied: the configured one, raised to the null
    /// 95th percentile of the valley score when that is larger.
    pub valley_threshold: f64,
    pub configured_valley_threshold: f64,
    pub null_valley_q95: f64,
    pub verdict: MargVerdict,
}

/// Settings for [`run_marg_check`] beyond the data and prior.
#[derive(Debug, Clone, PartialEq)]
pub struct MargCheckSettings {
    pub optimizer: OptimizerConfig,
    pub diagnostics: DiagnosticsConfig,
    pub valley_threshold: f64,
}

impl Default for MargCheckSettings {
    fn default() -> Self {
        MargCheckSettings {
            optimizer: OptimizerConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            valley_threshold: DEFAULT_VALLEY_THRESHOLD,
        }
    }
}

fn draw_inits(
    prior: &HyperPrior,
    count: usize,
    base_seed: u64,
    dom: u64,
    index: u64,
) -> Vec<Vec<f64>> {
    let mut rng = stream(base_seed, dom, index);
    (0..count)
        .map(|_| sample_log_hyper_prior(prior, &mut rng))
        .collect()
}

/// The full check. `template` fixes the model class (single-output SE,
/// exact inference); its hyperparameters are replaced by the fitted ones.
/// `sbc.train` must be the inputs of `y_real`.
pub fn run_marg_check(
    template: &GpModel,
    y_real: &DMatrix<f64>,
    hyper_prior: &HyperPrior,
    sbc: &SbcConfig,
    settings: &MargCheckSettings,
) -> Result<MargCheckReport> {
    sbc.validate()?;
    hyper_prior.validate()?;
    settings.optimizer.validate()?;
    if y_real.nrows() == 0 {
        return Err(Error::InvalidArgument("real observations are empty".into()));
    }
    let n_theta = template.log_hyperparameters()?.len();
    if hyper_prior.len() != n_theta {
        return Err(Error::config(
            "hyper_prior.components",
            format!("needs {n_theta} entries (signal variance, lengthscales, noise)"),
        ));
    }
    let train = &sbc.train;

    let prologue_inits = draw_inits(
        hyper_prior,
        settings.optimizer.restarts,
        sbc.base_seed,
        domain::PROLOGUE,
        0,
    );
    let prologue = fit_type2(
        template,
        train,
        y_real,
        &prologue_inits,
        &settings.optimizer,
    )?;
    let fitted = template.with_log_hyperparameters(&prologue.theta_hat)?;
    let simulator = TrialPipeline::new(&fitted, sbc)?;

    let trial_cfg = OptimizerConfig {
        restarts: settings.optimizer.trial_restarts,
        ..settings.optimizer.clone()
    };
    let fits: std::sync::Mutex<Vec<TrialFit>> = std::sync::Mutex::new(Vec::new());
    let trial = |t: usize| -> Result<Vec<usize>> {
        let mut rng = trial_stream(sbc.base_seed, t as u64);
        let (f, f_star, y) = simulator.simulate(&mut rng)?;
        let inits = draw_inits(
            hyper_prior,
            trial_cfg.restarts,
            sbc.base_seed,
            domain::HYPER_INIT,
            t as u64,
        );
        let outcome = fit_type2(template, train, &y, &inits, &trial_cfg).and_then(|fit| {
            let model = template.with_log_hyperparameters(&fit.theta_hat)?;
            let post = model.predictor(train, &sbc.test)?.posterior(&y)?;
            Ok((fit, post))
        });
        let (fit, post) = match outcome {
            Ok(v) => v,
            Err(e) => {
                fits.lock().expect("fit log").push(TrialFit {
                    trial_index: t,
                    theta: None,
                    converged: false,
                    iterations: 0,
                });
                return Err(e);
            }
        };
        fits.lock().expect("fit log").push(TrialFit {
            trial_index: t,
            theta: Some(fit.theta_hat.clone()),
            converged: fit.converged,
            iterations: fit.iterations,
        });
        let posterior_samples = sample_posterior(&post, sbc.n_posterior_samples, &mut rng)?;
        let draw = TrialDraw {
            f_tilde: f,
            f_tilde_star: f_star,
            y_tilde: y,
            posterior_samples,
        };
        draw.ranks(&mut rng)
    };
    let tally = run_trials(
        sbc.n_trials,
        sbc.test.len(),
        fitted.output_dim(),
        sbc.n_posterior_samples,
        trial,
    )?;
    let mut per_trial = fits.into_inner().expect("fit log");
    per_trial.sort_by_key(|f| f.trial_index);

    let uniformity = assess(&tally, View::Pooled, &settings.diagnostics, sbc.base_seed)?;
    let null_valley_q95 = null_valley_quantile(&tally, 999, sbc.base_seed)?;
    let valley_threshold = settings.valley_threshold.max(null_valley_q95);
    let verdict = marg_verdict(&uniformity, valley_threshold);
    Ok(MargCheckReport {
        prologue,
        tally,
        uniformity,
        per_trial,
        valley_threshold,
        configured_valley_threshold: settings.valley_threshold,
        null_valley_q95,
        verdict,
    })
}

/// `marginalisation_needed` iff uniformity fails with a valley above the
/// threshold; `inconclusive` when uniformity is inconclusive.
pub fn marg_verdict(uniformity: &UniformityReport, valley_threshold: f64) -> MargVerdict {
    match uniformity.verdict {
        Verdict::Inconclusive => MargVerdict::Inconclusive,
        Verdict::Fail
            if uniformity
                .valley_score
                .is_some_and(|v| v > valley_threshold) =>
        {
            MargVerdict::MarginalisationNeeded
        }
        _ => MargVerdict::Type2Adequate,
    }
}
