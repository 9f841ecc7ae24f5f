//! Output artifacts: CSV tallies, JSON reports, SVG histograms and the run
//! manifest. Everything except the manifest timestamps is a pure function of
//! its inputs, so reruns are byte-identical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::marg::TrialFit;
use crate::sbc::RankTally;
use crate::special::ln_gamma;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Writes `bytes` to `dir/name` through a temporary file and a rename.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, &target)?;
    Ok(target)
}

pub fn tally_csv(tally: &RankTally) -> String {
    let mut out = String::from("test_point_index,output_index,rank,count\n");
    for k in 0..tally.n_test() {
        for i in 0..tally.n_outputs() {
            for (r, c) in tally.slice(k, i).iter().enumerate() {
                let _ = writeln!(out, "{k},{i},{r},{c}");
            }
        }
    }
    out
}

/// One row per trial: `trial_index,converged,iterations,theta_1..theta_k`
/// (log scale). Failed trials leave the theta columns empty.
pub fn theta_trace_csv(fits: &[TrialFit], names: &[String]) -> String {
    let mut out = String::from("trial_index,converged,iterations");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for f in fits {
        let _ = write!(out, "{},{},{}", f.trial_index, f.converged, f.iterations);
        match &f.theta {
            Some(theta) => {
                for v in theta {
                    let _ = write!(out, ",{v:e}");
                }
            }
            None => out.push_str(&",".repeat(names.len())),
        }
        out.push('\n');
    }
    out
}

/// Column names for a log-hyperparameter vector of a `d`-input SE model.
pub fn theta_names(d: usize) -> Vec<String> {
    let mut names = vec!["log_signal_variance".to_string()];
    names.extend((1..=d).map(|j| format!("log_lengthscale_{j}")));
    names.push("log_noise_variance".into());
    names
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s =
        serde_json::to_string_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileChecksum {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub base_seed: u64,
    pub threads: Option<usize>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub config: serde_json::Value,
    pub files: Vec<FileChecksum>,
}

pub fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Collects files for one run directory and writes the manifest last.
pub struct RunWriter {
    dir: PathBuf,
    files: Vec<FileChecksum>,
    started_unix_ms: u128,
}

impl RunWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let probe = dir.join(".gp-sbc-write-probe");
        std::fs::write(&probe, b"")?;
        std::fs::remove_file(&probe)?;
        Ok(RunWriter {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            started_unix_ms: unix_ms(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        write_atomic(&self.dir, name, contents.as_bytes())?;
        self.files.retain(|f| f.file != name);
        self.files.push(FileChecksum {
            file: name.into(),
            sha256: sha256_hex(contents.as_bytes()),
        });
        Ok(())
    }

    pub fn finish(
        mut self,
        command: &str,
        base_seed: u64,
        threads: Option<usize>,
        config: serde_json::Value,
    ) -> Result<RunManifest> {
        self.files.sort_by(|a, b| a.file.cmp(&b.file));
        let manifest = RunManifest {
            tool: "gp-sbc".into(),
            tool_version: TOOL_VERSION.into(),
            command: command.into(),
            base_seed,
            threads,
            started_unix_ms: self.started_unix_ms,
            finished_unix_ms: unix_ms(),
            config,
            files: self.files,
        };
        write_atomic(
            &self.dir,
            "manifest.json",
            to_json_pretty(&manifest)?.as_bytes(),
        )?;
        Ok(manifest)
    }
}

/// Text drawn above a histogram panel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Annotations {
    pub title: String,
    pub lines: Vec<String>,
}

/// Central `1 - tail` interval of `Binomial(n, p)`.
pub fn binomial_interval(n: u64, p: f64, tail: f64) -> (u64, u64) {
    if n == 0 {
        return (0, 0);
    }
    if p <= 0.0 {
        return (0, 0);
    }
    if p >= 1.0 {
        return (n, n);
    }
    let nf = n as f64;
    let ln_norm = ln_gamma(nf + 1.0);
    let pmf = |k: u64| {
        let kf = k as f64;
        (ln_norm - ln_gamma(kf + 1.0) - ln_gamma(nf - kf + 1.0)
            + kf * p.ln()
            + (nf - kf) * (1.0 - p).ln())
        .exp()
    };
    let half = tail / 2.0;
    let mut cdf = 0.0;
    let mut lo = None;
    for k in 0..=n {
        cdf += pmf(k);
        if lo.is_none() && cdf >= half {
            lo = Some(k);
        }
        if cdf >= 1.0 - half {
            return (lo.unwrap_or(k), k);
        }
    }
    (lo.unwrap_or(0), n)
}

const PANEL_W: f64 = 480.0;
const PANEL_H: f64 = 320.0;
const MARGIN_L: f64 = 48.0;
const MARGIN_R: f64 = 12.0;
const MARGIN_T: f64 = 56.0;
const MARGIN_B: f64 = 32.0;

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn panel(counts: &[u64], notes: &Annotations, x0: f64) -> String {
    let bins = counts.len();
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / bins.max(1) as f64;
    let (band_lo, band_hi) = binomial_interval(total, 1.0 / bins.max(1) as f64, 0.01);
    let top = counts
        .iter()
        .copied()
        .max()
        .unwrap_or(0)
        .max(band_hi)
        .max(1) as f64
        * 1.05;
    let plot_w = PANEL_W - MARGIN_L - MARGIN_R;
    let plot_h = PANEL_H - MARGIN_T - MARGIN_B;
    let y_of = |v: f64| MARGIN_T + plot_h * (1.0 - v / top);
    let bar_w = plot_w / bins.max(1) as f64;

    let mut s = String::new();
    let _ = writeln!(s, "<g transform=\"translate({},0)\">", f6(x0));
    let _ = writeln!(
        s,
        "<text font-family=\"sans-serif\" font-size=\"14\" x=\"{}\" y=\"18\">{}</text>",
        f6(MARGIN_L),
        escape(&notes.title)
    );
    for (i, line) in notes.lines.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text font-family=\"sans-serif\" font-size=\"11\" x=\"{}\" y=\"{}\">{}</text>",
            f6(MARGIN_L),
            f6(33.0 + 12.0 * i as f64),
            escape(line)
        );
    }
    let _ = writeln!(
        s,
        "<rect fill=\"#cccccc\" fill-opacity=\"0.5\" height=\"{}\" width=\"{}\" x=\"{}\" y=\"{}\"/>",
        f6(y_of(band_lo as f64) - y_of(band_hi as f64)),
        f6(plot_w),
        f6(MARGIN_L),
        f6(y_of(band_hi as f64))
    );
    for (i, &c) in counts.iter().enumerate() {
        let y = y_of(c as f64);
        let _ = writeln!(
            s,
            "<rect class=\"bar\" fill=\"#4c72b0\" height=\"{}\" width=\"{}\" x=\"{}\" y=\"{}\"/>",
            f6(MARGIN_T + plot_h - y),
            f6(bar_w),
            f6(MARGIN_L + bar_w * i as f64),
            f6(y)
        );
    }
    let y_ref = y_of(expected);
    let _ = writeln!(
        s,
        "<line class=\"reference\" stroke=\"#c44e52\" stroke-width=\"1.5\" x1=\"{}\" x2=\"{}\" y1=\"{}\" y2=\"{}\"/>",
        f6(MARGIN_L),
        f6(MARGIN_L + plot_w),
        f6(y_ref),
        f6(y_ref)
    );
    let _ = writeln!(
        s,
        "<line stroke=\"#000000\" stroke-width=\"1\" x1=\"{}\" x2=\"{}\" y1=\"{}\" y2=\"{}\"/>",
        f6(MARGIN_L),
        f6(MARGIN_L + plot_w),
        f6(MARGIN_T + plot_h),
        f6(MARGIN_T + plot_h)
    );
    let _ = writeln!(
        s,
        "<text font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\" x=\"{}\" y=\"{}\">rank bin (0 to {})</text>",
        f6(MARGIN_L + plot_w / 2.0),
        f6(PANEL_H - 8.0),
        bins.saturating_sub(1)
    );
    let _ = writeln!(
        s,
        "<text font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\" x=\"{}\" y=\"{}\">{}</text>",
        f6(MARGIN_L - 4.0),
        f6(y_ref + 3.0),
        f6(expected)
    );
    s.push_str("</g>\n");
    s
}

fn document(width: f64, body: &str) -> String {
    format!(
        "<svg height=\"{}\" viewBox=\"0 0 {} {}\" width=\"{}\" xmlns=\"http://www.w3.org/2000/svg\">\n\
         <rect fill=\"#ffffff\" height=\"{}\" width=\"{}\" x=\"0\" y=\"0\"/>\n{body}</svg>\n",
        f6(PANEL_H),
        f6(width),
        f6(PANEL_H),
        f6(width),
        f6(PANEL_H),
        f6(width)
    )
}

/// Rank histogram with the uniform reference line and its 99% per-bin band.
pub fn render_histogram(counts: &[u64], notes: &Annotations) -> Result<String> {
    if counts.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot render an empty histogram".into(),
        ));
    }
    Ok(document(PANEL_W, &panel(counts, notes, 0.0)))
}

/// Two histograms next to each other.
pub fn render_side_by_side(
    left: (&[u64], &Annotations),
    right: (&[u64], &Annotations),
) -> Result<String> {
    if left.0.is_empty() || right.0.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot render an empty histogram".into(),
        ));
    }
    let body = panel(left.0, left.1, 0.0) + &panel(right.0, right.1, PANEL_W);
    Ok(document(2.0 * PANEL_W, &body))
}
