//! Experiment configuration (JSON).
//!
//! Every section is optional; missing keys take the documented defaults and
//! unknown keys are rejected. [`parse_config`] returns a fully validated
//! config with defaults made explicit, so serializing it and parsing again
//! gives the same value.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::diagnostics::DiagnosticsConfig;
use crate::error::{Error, Result};
use crate::kernel::{InputPoints, KernelSpec};
use crate::marg::{HyperPrior, MargCheckSettings, OptimizerConfig, DEFAULT_VALLEY_THRESHOLD};
use crate::model::{FaultSpec, GaussianLikelihood, GpModel, Inference};
use crate::sbc::{
    default_test_inputs, default_train_inputs, Pooling, SbcConfig, DEFAULT_POSTERIOR_SAMPLES,
    DEFAULT_TRIALS,
};

pub const DEFAULT_INDUCING_POINTS: usize = 5;

/// A list of input points, either one row per point or bare scalars for
/// one-dimensional inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Points {
    Scalars(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

impl Points {
    pub fn from_inputs(points: &InputPoints) -> Self {
        if points.dim() == 1 {
            Points::Scalars(points.matrix().column(0).iter().copied().collect())
        } else {
            Points::Rows(points.to_rows())
        }
    }

    pub fn to_inputs(&self, key: &str) -> Result<InputPoints> {
        let parsed = match self {
            Points::Scalars(xs) => InputPoints::from_scalars(xs),
            Points::Rows(rows) => InputPoints::from_rows(rows),
        };
        parsed.map_err(|e| Error::config(key, e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InferenceConfig {
    Exact,
    /// `inducing` defaults to 5 equispaced points on `[0, 1]`.
    Sparse {
        #[serde(default)]
        inducing: Option<Points>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kernel: KernelSpec,
    pub likelihood: GaussianLikelihood,
    pub inference: InferenceConfig,
    pub fault: Option<FaultSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kernel: KernelSpec::squared_exponential(1.0, vec![0.5]),
            likelihood: GaussianLikelihood {
                noise_variance: vec![0.1],
            },
            inference: InferenceConfig::Exact,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SbcSection {
    #[serde(rename = "N")]
    pub n_trials: usize,
    #[serde(rename = "L")]
    pub n_posterior_samples: usize,
    /// Training inputs `X`; ignored by marg-check, which takes them from
    /// the data.
    #[serde(rename = "X")]
    pub train_inputs: Option<Points>,
    /// Test inputs `X*`.
    #[serde(rename = "Xstar")]
    pub test_inputs: Option<Points>,
    pub base_seed: u64,
    /// Histogram pooling reported alongside the per-slice reports.
    pub pooling: Pooling,
}

impl Default for SbcSection {
    fn default() -> Self {
        SbcSection {
            n_trials: DEFAULT_TRIALS,
            n_posterior_samples: DEFAULT_POSTERIOR_SAMPLES,
            train_inputs: None,
            test_inputs: None,
            base_seed: 0,
            pooling: Pooling::Single,
        }
    }
}

/// Real observations for marg-check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// `x` one row (or scalar) per point, `y` one row (or scalar) per point.
    Inline { x: Points, y: Points },
    /// CSV with header `x_1..x_d,y_1..y_p`. Relative paths resolve against
    /// the config file's directory.
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MargSection {
    pub hyper_prior: Option<HyperPrior>,
    pub optimizer: OptimizerConfig,
    pub valley_threshold: f64,
    pub data: Option<DataSource>,
}

impl Default for MargSection {
    fn default() -> Self {
        MargSection {
            hyper_prior: None,
            optimizer: OptimizerConfig::default(),
            valley_threshold: DEFAULT_VALLEY_THRESHOLD,
            data: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub sbc: SbcSection,
    pub diagnostics: DiagnosticsConfig,
    pub marg_check: MargSection,
    pub output_dir: Option<PathBuf>,
}

fn keyed(key: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Config {
            key: inner,
            constraint,
        } => Error::config(format!("{key}.{inner}"), constraint),
        other => Error::config(key, other.to_string()),
    }
}

impl ExperimentConfig {
    /// Checks every invariant and fills defaulted point sets in.
    pub fn validate(&mut self) -> Result<()> {
        if self.sbc.train_inputs.is_none() {
            self.sbc.train_inputs = Some(Points::from_inputs(&default_train_inputs()));
        }
        if self.sbc.test_inputs.is_none() {
            self.sbc.test_inputs = Some(Points::from_inputs(&default_test_inputs()));
        }
        if let InferenceConfig::Sparse { inducing } = &mut self.model.inference {
            if inducing.is_none() {
                let dim = self.model.kernel.input_dim();
                let grid = InputPoints::equispaced(DEFAULT_INDUCING_POINTS, 0.0, 1.0)?;
                *inducing = Some(if dim == 1 {
                    Points::from_inputs(&grid)
                } else {
                    Points::Rows(
                        grid.to_rows()
                            .into_iter()
                            .map(|r| vec![r[0]; dim])
                            .collect(),
                    )
                });
            }
        }
        self.model()?;
        self.sbc_config()?;
        self.diagnostics.validate()?;
        self.marg_settings()?;
        if let Some(prior) = &self.marg_check.hyper_prior {
            prior.validate().map_err(keyed("marg_check"))?;
        }
        Ok(())
    }

    pub fn model(&self) -> Result<GpModel> {
        let m = &self.model;
        m.kernel.validate().map_err(keyed("model.kernel"))?;
        m.likelihood.validate().map_err(keyed("model.likelihood"))?;
        if let Some(f) = &m.fault {
            f.validate().map_err(keyed("model.fault"))?;
        }
        let inference = match &m.inference {
            InferenceConfig::Exact => Inference::Exact,
            InferenceConfig::Sparse { inducing } => {
                let pts = match inducing {
                    Some(p) => p.to_inputs("model.inference.inducing")?,
                    None => InputPoints::equispaced(DEFAULT_INDUCING_POINTS, 0.0, 1.0)?,
                };
                Inference::Sparse { inducing: pts }
            }
        };
        GpModel::new(
            m.kernel.clone(),
            m.likelihood.clone(),
            inference,
            m.fault.clone(),
        )
        .map_err(keyed("model"))
    }

    pub fn sbc_config(&self) -> Result<SbcConfig> {
        let s = &self.sbc;
        let train = match &s.train_inputs {
            Some(p) => p.to_inputs("sbc.X")?,
            None => default_train_inputs(),
        };
        let test = match &s.test_inputs {
            Some(p) => p.to_inputs("sbc.Xstar")?,
            None => default_test_inputs(),
        };
        let cfg = SbcConfig {
            n_trials: s.n_trials,
            n_posterior_samples: s.n_posterior_samples,
            train,
            test,
            base_seed: s.base_seed,
        };
        cfg.validate().map_err(keyed("sbc"))?;
        let dim = self.model.kernel.input_dim();
        if cfg.train.dim() != dim {
            return Err(Error::config(
                "sbc.X",
                format!("points must have dimension {dim}"),
            ));
        }
        if cfg.test.dim() != dim {
            return Err(Error::config(
                "sbc.Xstar",
                format!("points must have dimension {dim}"),
            ));
        }
        Ok(cfg)
    }

    pub fn marg_settings(&self) -> Result<MargCheckSettings> {
        let m = &self.marg_check;
        m.optimizer.validate().map_err(keyed("marg_check"))?;
        if !(m.valley_threshold.is_finite() && m.valley_threshold > 0.0) {
            return Err(Error::config(
                "marg_check.valley_threshold",
                "must be finite and > 0",
            ));
        }
        Ok(MargCheckSettings {
            optimizer: m.optimizer.clone(),
            diagnostics: self.diagnostics.clone(),
            valley_threshold: m.valley_threshold,
        })
    }
}

/// Parses and validates a JSON config.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut de = serde_json::Deserializer::from_str(text);
    let parsed: std::result::Result<ExperimentConfig, _> =
        serde_path_to_error::deserialize(&mut de);
    let mut cfg = match parsed {
        Ok(cfg) => cfg,
        Err(e) => {
            let path = e.path().to_string();
            let inner = e.into_inner();
            return Err(match inner.classify() {
                serde_json::error::Category::Syntax | serde_json::error::Category::Eof => {
                    Error::ConfigSyntax {
                        line: inner.line(),
                        column: inner.column(),
                        message: inner.to_string(),
                    }
                }
                _ => Error::config(
                    if path == "." { "<root>".into() } else { path },
                    inner.to_string(),
                ),
            });
        }
    };
    de.end().map_err(|e| Error::ConfigSyntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = parse_config(&text)?;
    if let Some(DataSource::Csv(p)) = &mut cfg.marg_check.data {
        if p.is_relative() {
            if let Some(dir) = path.parent() {
                *p = dir.join(&*p);
            }
        }
    }
    Ok(cfg)
}

pub fn to_json(cfg: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}

/// Training data for marg-check: inputs and an `n × p` observation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub x: InputPoints,
    pub y: DMatrix<f64>,
}

pub fn load_training_data(source: &DataSource) -> Result<TrainingData> {
    match source {
        DataSource::Inline { x, y } => {
            let x = x.to_inputs("marg_check.data.inline.x")?;
            let y = y.to_inputs("marg_check.data.inline.y")?;
            if x.len() != y.len() {
                return Err(Error::config(
                    "marg_check.data.inline.y",
                    format!("has {} rows but x has {}", y.len(), x.len()),
                ));
            }
            Ok(TrainingData {
                x,
                y: y.matrix().clone(),
            })
        }
        DataSource::Csv(path) => {
            let text = std::fs::read_to_string(path)?;
            parse_training_csv(&text, &path.display().to_string())
        }
    }
}

/// Parses `x_1..x_d,y_1..y_p` CSV text.
pub fn parse_training_csv(text: &str, source: &str) -> Result<TrainingData> {
    let data_err = |location: String, message: String| Error::Data { location, message };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(data_err(source.into(), "missing header row".into()));
    };
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let d = names.iter().take_while(|n| n.starts_with("x_")).count();
    let p = names.len() - d;
    for (i, name) in names.iter().enumerate() {
        let expected = if i < d {
            format!("x_{}", i + 1)
        } else {
            format!("y_{}", i - d + 1)
        };
        if *name != expected {
            return Err(data_err(
                format!("{source}, header column {}", i + 1),
                format!("expected `{expected}`, found `{name}`"),
            ));
        }
    }
    if d == 0 || p == 0 {
        return Err(data_err(
            format!("{source}, header"),
            "need at least one x_ column and one y_ column".into(),
        ));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (line_no, line) in lines {
        let row = line_no + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + p {
            return Err(data_err(
                format!("{source}, row {row}"),
                format!("expected {} fields, found {}", d + p, fields.len()),
            ));
        }
        for (i, f) in fields.iter().enumerate() {
            let v: f64 = f
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| {
                    data_err(
                        format!("{source}, row {row}, column {}", names[i]),
                        format!("`{f}` is not a finite number"),
                    )
                })?;
            if i < d {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
    }
    let n = xs.len() / d;
    if n == 0 {
        return Err(data_err(source.into(), "no data rows".into()));
    }
    Ok(TrainingData {
        x: InputPoints::new(DMatrix::from_row_slice(n, d, &xs))?,
        y: DMatrix::from_row_slice(n, p, &ys),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = parse_config("{}").unwrap();
        assert_eq!(cfg.sbc.n_trials, 1000);
        assert_eq!(cfg.sbc.n_posterior_samples, 100);
        assert_eq!(cfg.sbc_config().unwrap().train.len(), 8);
        assert_eq!(cfg.sbc_config().unwrap().test.len(), 4);
        assert_eq!(cfg.diagnostics, DiagnosticsConfig::default());
    }

    #[test]
    fn zero_posterior_samples_names_key() {
        let err = parse_config(r#"{"sbc":{"L":0}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config { .. }));
        assert!(msg.contains("L") && msg.contains("≥ 1"), "{msg}");
    }

    #[test]
    fn unknown_key_rejected_with_path() {
        match parse_config(r#"{"sbc":{"N":10,"bogus":1}}"#).unwrap_err() {
            Error::Config { key, constraint } => {
                assert!(key.contains("sbc"), "{key}");
                assert!(constraint.contains("bogus"));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn syntax_error_has_position() {
        match parse_config("{\n  \"sbc\": {\"N\": 10,,}\n}").unwrap_err() {
            Error::ConfigSyntax { line, column, .. } => {
                assert_eq!(line, 2);
                assert!(column > 0);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let text = r#"{"model":{"kernel":{"type":"linear_coregionalization",
            "latent_kernels":[{"type":"squared_exponential","signal_variance":1.0,"lengthscales":[0.5]},
                              {"type":"squared_exponential","signal_variance":1.0,"lengthscales":[0.3]}],
            "mixing":[[1.0,0.0],[0.5,1.0]]},
            "likelihood":{"noise_variance":[0.1,0.2]},
            "inference":{"type":"sparse"},
            "fault":{"type":"scaled_posterior_variance","factor":0.25}},
            "sbc":{"N":20,"L":10,"base_seed":7},
            "diagnostics":{"alpha":0.05,"bins":11,"mc_reps":999}}"#;
        let a = parse_config(text).unwrap();
        let b = parse_config(&to_json(&a)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_rows_and_errors() {
        let data = parse_training_csv("x_1,y_1\n0.0,1.5\n0.5,-0.25\n", "t.csv").unwrap();
        assert_eq!(data.x.len(), 2);
        assert_eq!(data.y[(1, 0)], -0.25);
        let err = parse_training_csv("x_1,y_1\n0.0,abc\n", "t.csv").unwrap_err();
        assert!(
            err.to_string().contains("row 2") && err.to_string().contains("y_1"),
            "{err}"
        );
        let err = parse_training_csv("x_1,z\n0.0,1\n", "t.csv").unwrap_err();
        assert!(err.to_string().contains("y_1"), "{err}");
        assert!(parse_training_csv("", "t.csv").is_err());
    }
}
