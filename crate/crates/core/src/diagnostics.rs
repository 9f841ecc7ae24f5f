//! Uniformity checks for rank histograms.
//!
//! Pooled histograms mix ranks from the same trial, so their Monte Carlo
//! p-value is the one the verdict rests on; the analytic χ² p-value is exact
//! only for a single (test point, output) slice.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{domain, stream};
use crate::sbc::{pool_tally, pooled_weights, Pooling, RankTally};
use crate::special::chi2_sf;

pub const DEFAULT_ALPHA: f64 = 0.01;
pub const DEFAULT_MC_REPS: usize = 1999;

/// χ² goodness of fit against the discrete uniform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub stat: f64,
    pub dof: usize,
    pub p_value: f64,
}

fn chi_square_stat(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts
        .iter()
        .map(|&o| {
            let diff = o as f64 - expected;
            diff * diff
        })
        .sum::<f64>()
        / expected
}

pub fn chi_square_uniformity(counts: &[u64]) -> Result<ChiSquare> {
    if counts.len() < 2 {
        return Err(Error::InvalidArgument("χ² needs at least two bins".into()));
    }
    if counts.iter().sum::<u64>() == 0 {
        return Err(Error::InvalidArgument(
            "χ² needs a nonzero total count".into(),
        ));
    }
    let stat = chi_square_stat(counts);
    let dof = counts.len() - 1;
    Ok(ChiSquare {
        stat,
        dof,
        p_value: chi2_sf(stat, dof as f64),
    })
}

/// Merges `L + 1` rank bins into `bins` bins: rank `r` goes to
/// `⌊r · bins / (L + 1)⌋`.
pub fn rebin(counts: &[u64], bins: usize) -> Result<Vec<u64>> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 bins, got {bins}"
        )));
    }
    if bins > counts.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot spread {} ranks over {bins} bins",
            counts.len()
        )));
    }
    let mut out = vec![0u64; bins];
    for (r, c) in counts.iter().enumerate() {
        out[r * bins / counts.len()] += c;
    }
    Ok(out)
}

/// Monte Carlo p-value of `stat_fn` under iid uniform ranks.
///
/// The observed statistic is the sum of `stat_fn` over the pooled
/// histograms. Each null replicate regenerates those histograms from the
/// same number of iid uniform ranks and pools them the same way. Returns
/// `(1 + #{null ≥ observed}) / (mc_reps + 1)`.
pub fn mc_calibrated_pvalue<R, F>(
    tally: &RankTally,
    pooling: Pooling,
    stat_fn: F,
    mc_reps: usize,
    rng: &mut R,
) -> Result<f64>
where
    R: Rng + ?Sized,
    F: Fn(&[u64]) -> f64,
{
    if mc_reps == 0 {
        return Err(Error::InvalidArgument("mc_reps must be positive".into()));
    }
    let observed: f64 = pool_tally(tally, pooling).iter().map(|h| stat_fn(h)).sum();
    let weights = pooled_weights(tally, pooling);
    let n_ranks = tally.n_ranks();
    let tol = 1e-9 * observed.abs().max(1.0);
    let mut hist = vec![0u64; n_ranks];
    let mut exceed = 0usize;
    for _ in 0..mc_reps {
        let mut null = 0.0;
        for &w in &weights {
            hist.iter_mut().for_each(|h| *h = 0);
            for _ in 0..w {
                hist[rng.random_range(0..n_ranks)] += 1;
            }
            null += stat_fn(&hist);
        }
        if null >= observed - tol {
            exceed += 1;
        }
    }
    Ok((1 + exceed) as f64 / (mc_reps + 1) as f64)
}

/// Number of rank values at which the observed ECDF leaves a simultaneous
/// `1 - alpha` envelope built from `mc_reps` iid uniform histograms with the
/// same total.
///
/// The envelope is a global rank envelope: every null curve gets its most
/// extreme pointwise two-sided rank p-value, and the `alpha` quantile of
/// those extremes is the pointwise threshold.
pub fn ecdf_band_check<R: Rng + ?Sized>(
    counts: &[u64],
    alpha: f64,
    mc_reps: usize,
    rng: &mut R,
) -> Result<usize> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 0.5), got {alpha}"
        )));
    }
    if counts.len() < 2 {
        return Err(Error::InvalidArgument(
            "ECDF band needs at least two bins".into(),
        ));
    }
    if mc_reps < 2 {
        return Err(Error::InvalidArgument(
            "ECDF band needs at least two null draws".into(),
        ));
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "ECDF band needs a nonzero total count".into(),
        ));
    }
    let nb = counts.len();
    let points = nb - 1; // the last ECDF value is always 1
    let cumulative = |h: &[u64]| -> Vec<u64> {
        h.iter()
            .take(points)
            .scan(0u64, |acc, c| {
                *acc += c;
                Some(*acc)
            })
            .collect()
    };

    let mut hist = vec![0u64; nb];
    let mut curves = Vec::with_capacity(mc_reps);
    for _ in 0..mc_reps {
        hist.iter_mut().for_each(|h| *h = 0);
        for _ in 0..total {
            hist[rng.random_range(0..nb)] += 1;
        }
        curves.push(cumulative(&hist));
    }
    let columns: Vec<Vec<u64>> = (0..points)
        .map(|b| {
            let mut col: Vec<u64> = curves.iter().map(|c| c[b]).collect();
            col.sort_unstable();
            col
        })
        .collect();
    let reps = mc_reps as f64;
    // (#null ≤ v, #null ≥ v)
    let tails = |b: usize, v: u64| -> (usize, usize) {
        let col = &columns[b];
        let le = col.partition_point(|x| *x <= v);
        let lt = col.partition_point(|x| *x < v);
        (le, col.len() - lt)
    };

    let mut extremes: Vec<f64> = curves
        .iter()
        .map(|c| {
            (0..points)
                .map(|b| {
                    let (le, ge) = tails(b, c[b]);
                    (2.0 * le.min(ge) as f64 / reps).min(1.0)
                })
                .fold(1.0, f64::min)
        })
        .collect();
    extremes.sort_by(f64::total_cmp);
    let threshold = extremes[((alpha * reps).floor() as usize).min(mc_reps - 1)];

    let observed = cumulative(counts);
    Ok((0..points)
        .filter(|&b| {
            let (le, ge) = tails(b, observed[b]);
            let p = (2.0 * (le.min(ge) + 1) as f64 / (reps + 1.0)).min(1.0);
            p < threshold
        })
        .count())
}

/// Index sets behind [`valley_score`]: `(outer, central_start, central_len)`.
/// The outer band is the first and last `outer` bins; the central band is
/// centred, with its width adjusted so it is symmetric.
pub fn valley_bands(n_bins: usize) -> Result<(usize, usize, usize)> {
    if n_bins < 3 {
        return Err(Error::InvalidArgument(format!(
            "valley score needs at least 3 bins, got {n_bins}"
        )));
    }
    let outer = ((0.1 * n_bins as f64).round() as usize).max(1);
    let mut central = ((0.2 * n_bins as f64).round() as usize).max(1);
    if (n_bins - central) % 2 == 1 {
        central += 1;
    }
    let start = (n_bins - central) / 2;
    if start < outer {
        return Err(Error::InvalidArgument(format!(
            "{n_bins} bins are too few to separate the bands"
        )));
    }
    Ok((outer, start, central))
}

/// Mean count in the outer 10% of bins (each side) over the mean count in
/// the central 20%. About 1 when uniform, above 1 for a valley, below 1 for
/// a hump. `+∞` when the central band is empty.
pub fn valley_score(counts: &[u64]) -> Result<f64> {
    let (outer, start, central) = valley_bands(counts.len())?;
    if counts.iter().sum::<u64>() == 0 {
        return Err(Error::InvalidArgument(
            "valley score needs a nonzero total count".into(),
        ));
    }
    let outer_sum: u64 = counts[..outer]
        .iter()
        .chain(&counts[counts.len() - outer..])
        .sum();
    let central_sum: u64 = counts[start..start + central].iter().sum();
    if central_sum == 0 {
        return Ok(f64::INFINITY);
    }
    let outer_mean = outer_sum as f64 / (2 * outer) as f64;
    let central_mean = central_sum as f64 / central as f64;
    Ok(outer_mean / central_mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub alpha: f64,
    /// χ² bins; `None` means one bin per rank (`L + 1`).
    pub bins: Option<usize>,
    pub mc_reps: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            alpha: DEFAULT_ALPHA,
            bins: None,
            mc_reps: DEFAULT_MC_REPS,
        }
    }
}

impl DiagnosticsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(Error::config("diagnostics.alpha", "must lie in (0, 0.5)"));
        }
        if let Some(b) = self.bins {
            if b < 2 {
                return Err(Error::config("diagnostics.bins", "must be >= 2"));
            }
        }
        if self.mc_reps < 999 {
            return Err(Error::config("diagnostics.mc_reps", "must be >= 999"));
        }
        Ok(())
    }
}

/// Which histogram of a tally a report describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum View {
    Slice { test_point: usize, output: usize },
    Output { output: usize },
    Pooled,
}

impl View {
    fn stream_index(&self, n_outputs: usize) -> u64 {
        match *self {
            View::Pooled => 0,
            View::Output { output } => 1 + output as u64,
            View::Slice { test_point, output } => {
                (1 + n_outputs + test_point * n_outputs + output) as u64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformityReport {
    pub view: View,
    pub total: u64,
    pub bins: usize,
    pub chi2_stat: f64,
    pub dof: usize,
    pub p_value: f64,
    pub p_value_mc: f64,
    pub mc_reps: usize,
    pub alpha: f64,
    pub band_violations: usize,
    /// `None` when the central band is empty.
    pub valley_score: Option<f64>,
    pub failed_trials: usize,
    pub verdict: Verdict,
}

/// All uniformity diagnostics for one view of a tally. Monte Carlo draws use
/// streams keyed by `seed` and the view, so reports are reproducible.
pub fn assess(
    tally: &RankTally,
    view: View,
    cfg: &DiagnosticsConfig,
    seed: u64,
) -> Result<UniformityReport> {
    cfg.validate()?;
    let sub = match view {
        View::Pooled => tally.clone(),
        View::Output { output } if output < tally.n_outputs() => tally.output_tally(output),
        View::Slice { test_point, output }
            if test_point < tally.n_test() && output < tally.n_outputs() =>
        {
            tally.slice_tally(test_point, output)
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "view {view:?} is outside the tally"
            )))
        }
    };
    let counts = pool_tally(&sub, Pooling::Single).remove(0);
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "no completed trials to assess".into(),
        ));
    }
    let bins = cfg.bins.unwrap_or(counts.len());
    let chi = chi_square_uniformity(&rebin(&counts, bins)?)?;
    let idx = view.stream_index(tally.n_outputs());
    let mut mc_rng = stream(seed, domain::MC_NULL, idx);
    let p_value_mc = mc_calibrated_pvalue(
        &sub,
        Pooling::Single,
        |h| {
            rebin(h, bins)
                .map(|b| chi_square_stat(&b))
                .unwrap_or(f64::NAN)
        },
        cfg.mc_reps,
        &mut mc_rng,
    )?;
    let mut band_rng = stream(seed, domain::ECDF_BAND, idx);
    let band_violations = ecdf_band_check(&counts, cfg.alpha, cfg.mc_reps, &mut band_rng)?;
    let valley = valley_score(&counts).ok().filter(|v| v.is_finite());
    let failed_trials = tally.failed_trials().len();
    let verdict = if p_value_mc < cfg.alpha {
        Verdict::Fail
    } else if valley.is_none() || failed_trials > 0 {
        Verdict::Inconclusive
    } else {
        Verdict::Pass
    };
    Ok(UniformityReport {
        view,
        total,
        bins,
        chi2_stat: chi.stat,
        dof: chi.dof,
        p_value: chi.p_value,
        p_value_mc,
        mc_reps: cfg.mc_reps,
        alpha: cfg.alpha,
        band_violations,
        valley_score: valley,
        failed_trials,
        verdict,
    })
}

/// Pooled-histogram p-value only; the fast path used by repeated experiments.
pub fn pooled_pvalue_mc(tally: &RankTally, cfg: &DiagnosticsConfig, seed: u64) -> Result<f64> {
    let bins = cfg.bins.unwrap_or(tally.n_ranks());
    let mut rng = stream(
        seed,
        domain::MC_NULL,
        View::Pooled.stream_index(tally.n_outputs()),
    );
    mc_calibrated_pvalue(
        tally,
        Pooling::Single,
        |h| {
            rebin(h, bins)
                .map(|b| chi_square_stat(&b))
                .unwrap_or(f64::NAN)
        },
        cfg.mc_reps,
        &mut rng,
    )
}

/// 95th percentile of the pooled valley score under iid uniform ranks with
/// the tally's shape.
pub fn null_valley_quantile(tally: &RankTally, reps: usize, seed: u64) -> Result<f64> {
    let n_ranks = tally.n_ranks();
    let w = tally.n_completed() * tally.n_slices();
    if w == 0 || reps == 0 {
        return Err(Error::InvalidArgument(
            "null valley quantile needs counts and reps".into(),
        ));
    }
    let mut rng = stream(seed, domain::MC_NULL, u64::MAX);
    let mut hist = vec![0u64; n_ranks];
    let mut scores = Vec::with_capacity(reps);
    for _ in 0..reps {
        hist.iter_mut().for_each(|h| *h = 0);
        for _ in 0..w {
            hist[rng.random_range(0..n_ranks)] += 1;
        }
        scores.push(valley_score(&hist)?);
    }
    scores.sort_by(f64::total_cmp);
    Ok(scores[((0.95 * reps as f64).ceil() as usize).min(reps) - 1])
}
