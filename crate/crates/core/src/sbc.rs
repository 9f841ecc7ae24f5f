//! The GP-SBC trial loop.
//!
//! Each trial draws one prior function jointly at the training and test
//! inputs, simulates noisy observations, forms the model's posterior at the
//! test inputs, draws `L` posterior samples and ranks the prior value among
//! them for every (test point, output) pair. Trials own their random stream,
//! so the tally does not depend on how trials are scheduled.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::InputPoints;
use crate::model::{
    sample_posterior, simulate_observations, GaussianLikelihood, GpModel, Predictor, PriorSampler,
};
use crate::rng::trial_stream;

pub const DEFAULT_TRIALS: usize = 1000;
pub const DEFAULT_POSTERIOR_SAMPLES: usize = 100;

/// Maximum tolerated fraction of numerically failed trials.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct SbcConfig {
    /// Number of trials `N`.
    pub n_trials: usize,
    /// Posterior samples per trial `L`.
    pub n_posterior_samples: usize,
    pub train: InputPoints,
    pub test: InputPoints,
    pub base_seed: u64,
}

impl SbcConfig {
    pub fn new(
        n_trials: usize,
        n_posterior_samples: usize,
        train: InputPoints,
        test: InputPoints,
        base_seed: u64,
    ) -> Result<Self> {
        let cfg = SbcConfig {
            n_trials,
            n_posterior_samples,
            train,
            test,
            base_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::config("N", "must be ≥ 1"));
        }
        if self.n_posterior_samples == 0 {
            return Err(Error::config("L", "must be ≥ 1"));
        }
        if self.test.is_empty() {
            return Err(Error::config(
                "test_inputs",
                "must contain at least one point",
            ));
        }
        if self.train.dim() != self.test.dim() {
            return Err(Error::config(
                "test_inputs",
                "must share the training input dimension",
            ));
        }
        Ok(())
    }

    /// 8 equispaced training points on `[0, 1]`, test points at
    /// `0.125·k + 0.0625` for `k = 0..4`.
    pub fn default_geometry(base_seed: u64) -> Self {
        SbcConfig {
            n_trials: DEFAULT_TRIALS,
            n_posterior_samples: DEFAULT_POSTERIOR_SAMPLES,
            train: default_train_inputs(),
            test: default_test_inputs(),
            base_seed,
        }
    }
}

pub fn default_train_inputs() -> InputPoints {
    InputPoints::equispaced(8, 0.0, 1.0).expect("finite grid")
}

pub fn default_test_inputs() -> InputPoints {
    let xs: Vec<f64> = (0..4).map(|k| 0.125 * k as f64 + 0.0625).collect();
    InputPoints::from_scalars(&xs).expect("finite grid")
}

/// Rank counts, one histogram of `L + 1` bins per (test point, output).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankTally {
    n_test: usize,
    n_outputs: usize,
    n_ranks: usize,
    counts: Vec<u64>,
    n_completed: usize,
    failed_trials: Vec<usize>,
}

impl RankTally {
    pub fn new(n_test: usize, n_outputs: usize, n_posterior_samples: usize) -> Self {
        let n_ranks = n_posterior_samples + 1;
        RankTally {
            n_test,
            n_outputs,
            n_ranks,
            counts: vec![0; n_test * n_outputs * n_ranks],
            n_completed: 0,
            failed_trials: Vec::new(),
        }
    }

    pub fn n_test(&self) -> usize {
        self.n_test
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    /// `L + 1`.
    pub fn n_ranks(&self) -> usize {
        self.n_ranks
    }

    pub fn n_slices(&self) -> usize {
        self.n_test * self.n_outputs
    }

    pub fn n_completed(&self) -> usize {
        self.n_completed
    }

    pub fn failed_trials(&self) -> &[usize] {
        &self.failed_trials
    }

    fn offset(&self, test_point: usize, output: usize) -> usize {
        (test_point * self.n_outputs + output) * self.n_ranks
    }

    /// Histogram for one (test point, output) pair.
    pub fn slice(&self, test_point: usize, output: usize) -> &[u64] {
        let o = self.offset(test_point, output);
        &self.counts[o..o + self.n_ranks]
    }

    pub fn count(&self, test_point: usize, output: usize, rank: usize) -> u64 {
        self.slice(test_point, output)[rank]
    }

    /// Adds one completed trial. `ranks` is indexed `test_point · p + output`.
    pub fn record(&mut self, ranks: &[usize]) -> Result<()> {
        if ranks.len() != self.n_slices() {
            return Err(Error::DimensionMismatch(format!(
                "trial produced {} ranks, tally has {} slices",
                ranks.len(),
                self.n_slices()
            )));
        }
        if let Some(r) = ranks.iter().find(|r| **r >= self.n_ranks) {
            return Err(Error::InvalidArgument(format!(
                "rank {r} outside 0..={}",
                self.n_ranks - 1
            )));
        }
        for (s, r) in ranks.iter().enumerate() {
            self.counts[s * self.n_ranks + r] += 1;
        }
        self.n_completed += 1;
        Ok(())
    }

    pub fn record_failure(&mut self, trial_index: usize) {
        self.failed_trials.push(trial_index);
    }

    /// The tally restricted to one (test point, output) pair.
    pub fn slice_tally(&self, test_point: usize, output: usize) -> RankTally {
        RankTally {
            n_test: 1,
            n_outputs: 1,
            n_ranks: self.n_ranks,
            counts: self.slice(test_point, output).to_vec(),
            n_completed: self.n_completed,
            failed_trials: self.failed_trials.clone(),
        }
    }

    /// The tally restricted to one output.
    pub fn output_tally(&self, output: usize) -> RankTally {
        let counts = (0..self.n_test)
            .flat_map(|k| self.slice(k, output).iter().copied())
            .collect();
        RankTally {
            n_test: self.n_test,
            n_outputs: 1,
            n_ranks: self.n_ranks,
            counts,
            n_completed: self.n_completed,
            failed_trials: self.failed_trials.clone(),
        }
    }

    /// Builds a tally from raw counts, checking count conservation.
    pub fn from_counts(
        n_test: usize,
        n_outputs: usize,
        n_ranks: usize,
        counts: Vec<u64>,
        n_completed: usize,
    ) -> Result<Self> {
        if n_ranks < 2 || counts.len() != n_test * n_outputs * n_ranks {
            return Err(Error::DimensionMismatch(
                "tally counts do not match its shape".into(),
            ));
        }
        let tally = RankTally {
            n_test,
            n_outputs,
            n_ranks,
            counts,
            n_completed,
            failed_trials: Vec::new(),
        };
        for k in 0..n_test {
            for i in 0..n_outputs {
                if tally.slice(k, i).iter().sum::<u64>() != n_completed as u64 {
                    return Err(Error::InvalidArgument(format!(
                        "slice ({k}, {i}) does not sum to {n_completed}"
                    )));
                }
            }
        }
        Ok(tally)
    }
}

/// One trial's draws.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDraw {
    /// `n × p`
    pub f_tilde: DMatrix<f64>,
    /// `m × p`
    pub f_tilde_star: DMatrix<f64>,
    /// `n × p`
    pub y_tilde: DMatrix<f64>,
    /// `L × (m·p)`, output-major columns.
    pub posterior_samples: DMatrix<f64>,
}

impl TrialDraw {
    /// Rank of each prior test value among its posterior samples, indexed
    /// `test_point · p + output`.
    pub fn ranks<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<usize>> {
        let (m, p) = self.f_tilde_star.shape();
        let mut ranks = Vec::with_capacity(m * p);
        let mut column = Vec::with_capacity(self.posterior_samples.nrows());
        for k in 0..m {
            for i in 0..p {
                column.clear();
                column.extend(self.posterior_samples.column(i * m + k).iter().copied());
                ranks.push(compute_rank(self.f_tilde_star[(k, i)], &column, rng)?);
            }
        }
        Ok(ranks)
    }
}

/// `#{j : posterior[j] < prior} + U`, with `U` uniform on `{0, …, ties}`.
pub fn compute_rank<R: Rng + ?Sized>(
    prior_value: f64,
    posterior_values: &[f64],
    rng: &mut R,
) -> Result<usize> {
    if posterior_values.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one posterior value".into(),
        ));
    }
    if !prior_value.is_finite() || posterior_values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rank inputs".into()));
    }
    let mut below = 0;
    let mut ties = 0;
    for v in posterior_values {
        if *v < prior_value {
            below += 1;
        } else if *v == prior_value {
            ties += 1;
        }
    }
    let u = if ties > 0 {
        rng.random_range(0..=ties)
    } else {
        0
    };
    Ok(below + u)
}

/// The per-trial pipeline with everything data-independent precomputed.
#[derive(Debug, Clone)]
pub struct TrialPipeline {
    sampler: PriorSampler,
    predictor: Predictor,
    likelihood: GaussianLikelihood,
    n_posterior_samples: usize,
}

impl TrialPipeline {
    pub fn new(model: &GpModel, config: &SbcConfig) -> Result<Self> {
        config.validate()?;
        Ok(TrialPipeline {
            sampler: model.prior_sampler(&config.train, &config.test)?,
            predictor: model.predictor(&config.train, &config.test)?,
            likelihood: model.likelihood().clone(),
            n_posterior_samples: config.n_posterior_samples,
        })
    }

    /// Prior function and simulated observations.
    pub fn simulate<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let (f_tilde, f_tilde_star) = self.sampler.sample(rng);
        let y_tilde = simulate_observations(&f_tilde, &self.likelihood, rng)?;
        Ok((f_tilde, f_tilde_star, y_tilde))
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TrialDraw> {
        let (f_tilde, f_tilde_star, y_tilde) = self.simulate(rng)?;
        let post = self.predictor.posterior(&y_tilde)?;
        let posterior_samples = sample_posterior(&post, self.n_posterior_samples, rng)?;
        Ok(TrialDraw {
            f_tilde,
            f_tilde_star,
            y_tilde,
            posterior_samples,
        })
    }

    pub fn ranks(&self, base_seed: u64, trial_index: usize) -> Result<Vec<usize>> {
        let mut rng = trial_stream(base_seed, trial_index as u64);
        let draw = self.draw(&mut rng)?;
        draw.ranks(&mut rng)
    }
}

/// Ranks for a single trial.
pub fn run_trial(model: &GpModel, config: &SbcConfig, trial_index: usize) -> Result<Vec<usize>> {
    TrialPipeline::new(model, config)?.ranks(config.base_seed, trial_index)
}

/// Runs `n_trials` independent trials on the current rayon pool and merges
/// them into a tally. Failed trials are recorded and skipped; more than 1%
/// failures aborts the run.
pub fn run_trials<F>(
    n_trials: usize,
    n_test: usize,
    n_outputs: usize,
    n_posterior_samples: usize,
    trial: F,
) -> Result<RankTally>
where
    F: Fn(usize) -> Result<Vec<usize>> + Sync,
{
    let results: Vec<Result<Vec<usize>>> = (0..n_trials).into_par_iter().map(&trial).collect();
    let mut tally = RankTally::new(n_test, n_outputs, n_posterior_samples);
    for (t, result) in results.into_iter().enumerate() {
        match result.and_then(|ranks| tally.record(&ranks)) {
            Ok(()) => {}
            Err(_) => tally.record_failure(t),
        }
    }
    let failed = tally.failed_trials.len();
    if failed as f64 > MAX_FAILURE_FRACTION * n_trials as f64 {
        return Err(Error::TooManyFailures {
            failed,
            total: n_trials,
            limit: (MAX_FAILURE_FRACTION * n_trials as f64).floor() as usize,
            indices: tally.failed_trials,
        });
    }
    Ok(tally)
}

/// GP-SBC: one rank histogram per (test point, output).
pub fn run_sbc(model: &GpModel, config: &SbcConfig) -> Result<RankTally> {
    let pipeline = TrialPipeline::new(model, config)?;
    run_trials(
        config.n_trials,
        config.test.len(),
        model.output_dim(),
        config.n_posterior_samples,
        |t| pipeline.ranks(config.base_seed, t),
    )
}

/// [`run_sbc`] on a dedicated pool of `threads` workers.
pub fn run_sbc_with_threads(
    model: &GpModel,
    config: &SbcConfig,
    threads: usize,
) -> Result<RankTally> {
    with_threads(threads, || run_sbc(model, config))
}

/// Runs `f` inside a rayon pool of `threads` workers (`0` = rayon default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build thread pool: {e}")))?;
    pool.install(f)
}

/// How slices are combined into histograms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// One histogram per (test point, output).
    PerSlice,
    /// One histogram per output, summed over test points.
    PerOutput,
    /// One histogram summed over everything.
    Single,
}

/// Pooled histograms, each with `L + 1` bins.
pub fn pool_tally(tally: &RankTally, mode: Pooling) -> Vec<Vec<u64>> {
    let b = tally.n_ranks;
    let sum_slices = |slices: &mut dyn Iterator<Item = (usize, usize)>| {
        let mut acc = vec![0u64; b];
        for (k, i) in slices {
            for (a, c) in acc.iter_mut().zip(tally.slice(k, i)) {
                *a += c;
            }
        }
        acc
    };
    match mode {
        Pooling::PerSlice => (0..tally.n_test)
            .flat_map(|k| (0..tally.n_outputs).map(move |i| (k, i)))
            .map(|(k, i)| tally.slice(k, i).to_vec())
            .collect(),
        Pooling::PerOutput => (0..tally.n_outputs)
            .map(|i| sum_slices(&mut (0..tally.n_test).map(|k| (k, i))))
            .collect(),
        Pooling::Single => vec![sum_slices(
            &mut (0..tally.n_test).flat_map(|k| (0..tally.n_outputs).map(move |i| (k, i))),
        )],
    }
}

/// Number of (trial, slice) contributions behind each pooled histogram.
pub fn pooled_weights(tally: &RankTally, mode: Pooling) -> Vec<usize> {
    let n = tally.n_completed;
    match mode {
        Pooling::PerSlice => vec![n; tally.n_slices()],
        Pooling::PerOutput => vec![n * tally.n_test; tally.n_outputs],
        Pooling::Single => vec![n * tally.n_slices()],
    }
}
