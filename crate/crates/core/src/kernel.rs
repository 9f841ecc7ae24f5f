//! Covariance functions.
//!
//! Multi-output covariance matrices use output-major ordering: row index
//! `output * n + point`. Single-output kernels are the `p = 1` case.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A set of input locations, one row per point.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPoints {
    values: DMatrix<f64>,
}

impl InputPoints {
    /// Wraps an `n × d` matrix. Zero rows are allowed (an empty design);
    /// zero columns are not.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "input points need at least one input dimension".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input points".into()));
        }
        Ok(InputPoints { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch(
                "input rows have differing lengths".into(),
            ));
        }
        Self::new(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
    }

    /// One-dimensional points.
    pub fn from_scalars(xs: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_column_slice(xs.len(), 1, xs))
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(DMatrix::zeros(0, dim))
    }

    /// `n` equispaced points on `[lo, hi]` in one dimension (`n = 1` gives `lo`).
    pub fn equispaced(n: usize, lo: f64, hi: f64) -> Result<Self> {
        let xs: Vec<f64> = (0..n)
            .map(|i| {
                if n == 1 {
                    lo
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect();
        Self::from_scalars(&xs)
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|i| self.values.row(i).iter().copied().collect())
            .collect()
    }

    /// Stacks `self` above `other`.
    pub fn concat(&self, other: &InputPoints) -> Result<InputPoints> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch(format!(
                "cannot stack inputs of dimension {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        let (n, m) = (self.len(), other.len());
        let values = DMatrix::from_fn(n + m, self.dim(), |i, j| {
            if i < n {
                self.values[(i, j)]
            } else {
                other.values[(i - n, j)]
            }
        });
        Ok(InputPoints { values })
    }

    /// Adds `shift` to every coordinate of every point.
    pub fn translated(&self, shift: &[f64]) -> Result<InputPoints> {
        if shift.len() != self.dim() {
            return Err(Error::DimensionMismatch("translation vector length".into()));
        }
        let mut values = self.values.clone();
        for (j, s) in shift.iter().enumerate() {
            values.column_mut(j).add_scalar_mut(*s);
        }
        Self::new(values)
    }
}

/// Declarative description of a covariance function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// `σ² exp(-½ Σ_j (x_j - x'_j)² / ℓ_j²)`, one lengthscale per input dimension.
    SquaredExponential {
        signal_variance: f64,
        lengthscales: Vec<f64>,
    },
    /// `q` independent latent processes mixed by a `p × q` matrix `W`
    /// (stored row-major, one inner vector per output).
    LinearCoregionalization {
        latent_kernels: Vec<KernelSpec>,
        mixing: Vec<Vec<f64>>,
    },
    Sum {
        terms: Vec<KernelSpec>,
    },
}

impl KernelSpec {
    pub fn squared_exponential(signal_variance: f64, lengthscales: Vec<f64>) -> Self {
        KernelSpec::SquaredExponential {
            signal_variance,
            lengthscales,
        }
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::SquaredExponential {
                signal_variance,
                lengthscales,
            } => {
                if !(signal_variance.is_finite() && *signal_variance > 0.0) {
                    return Err(Error::InvalidKernel(format!(
                        "signal_variance must be finite and > 0, got {signal_variance}"
                    )));
                }
                if lengthscales.is_empty() {
                    return Err(Error::InvalidKernel("lengthscales must be nonempty".into()));
                }
                if let Some(l) = lengthscales.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
                    return Err(Error::InvalidKernel(format!(
                        "every lengthscale must be finite and > 0, got {l}"
                    )));
                }
                Ok(())
            }
            KernelSpec::LinearCoregionalization {
                latent_kernels,
                mixing,
            } => {
                if latent_kernels.is_empty() {
                    return Err(Error::InvalidKernel(
                        "coregionalization needs at least one latent kernel".into(),
                    ));
                }
                for k in latent_kernels {
                    if k.contains_coregionalization() {
                        return Err(Error::InvalidKernel(
                            "nested linear coregionalization is not supported".into(),
                        ));
                    }
                    k.validate()?;
                }
                let d = latent_kernels[0].input_dim();
                if latent_kernels.iter().any(|k| k.input_dim() != d) {
                    return Err(Error::InvalidKernel(
                        "latent kernels disagree on input dimension".into(),
                    ));
                }
                let q = latent_kernels.len();
                if mixing.is_empty() {
                    return Err(Error::InvalidKernel(
                        "mixing matrix needs at least one row".into(),
                    ));
                }
                for (i, row) in mixing.iter().enumerate() {
                    if row.len() != q {
                        return Err(Error::InvalidKernel(format!(
                            "mixing row {i} has {} entries, expected {q} (one per latent kernel)",
                            row.len()
                        )));
                    }
                    if row.iter().any(|w| !w.is_finite()) {
                        return Err(Error::InvalidKernel(format!(
                            "mixing row {i} has a non-finite entry"
                        )));
                    }
                    if row.iter().all(|w| *w == 0.0) {
                        return Err(Error::InvalidKernel(format!("mixing row {i} is all zero")));
                    }
                }
                Ok(())
            }
            KernelSpec::Sum { terms } => {
                if terms.is_empty() {
                    return Err(Error::InvalidKernel("sum needs at least one term".into()));
                }
                for t in terms {
                    t.validate()?;
                }
                let (d, p) = (terms[0].input_dim(), terms[0].output_dim());
                if terms
                    .iter()
                    .any(|t| t.input_dim() != d || t.output_dim() != p)
                {
                    return Err(Error::InvalidKernel(
                        "sum terms disagree on input or output dimension".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    fn contains_coregionalization(&self) -> bool {
        match self {
            KernelSpec::SquaredExponential { .. } => false,
            KernelSpec::LinearCoregionalization { .. } => true,
            KernelSpec::Sum { terms } => terms.iter().any(KernelSpec::contains_coregionalization),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            KernelSpec::SquaredExponential { lengthscales, .. } => lengthscales.len(),
            KernelSpec::LinearCoregionalization { latent_kernels, .. } => {
                latent_kernels.first().map_or(0, KernelSpec::input_dim)
            }
            KernelSpec::Sum { terms } => terms.first().map_or(0, KernelSpec::input_dim),
        }
    }

    /// Number of outputs `p`.
    pub fn output_dim(&self) -> usize {
        match self {
            KernelSpec::SquaredExponential { .. } => 1,
            KernelSpec::LinearCoregionalization { mixing, .. } => mixing.len(),
            KernelSpec::Sum { terms } => terms.first().map_or(1, KernelSpec::output_dim),
        }
    }

    /// The same kernel with every mixing matrix replaced by its transpose.
    /// Only defined when each mixing matrix is square.
    pub fn with_transposed_mixing(&self) -> Result<KernelSpec> {
        match self {
            KernelSpec::SquaredExponential { .. } => Ok(self.clone()),
            KernelSpec::LinearCoregionalization {
                latent_kernels,
                mixing,
            } => {
                let p = mixing.len();
                if mixing.iter().any(|r| r.len() != p) {
                    return Err(Error::InvalidFault(
                        "transposed mixing requires a square mixing matrix".into(),
                    ));
                }
                let transposed = (0..p)
                    .map(|i| (0..p).map(|j| mixing[j][i]).collect())
                    .collect();
                Ok(KernelSpec::LinearCoregionalization {
                    latent_kernels: latent_kernels.clone(),
                    mixing: transposed,
                })
            }
            KernelSpec::Sum { terms } => Ok(KernelSpec::Sum {
                terms: terms
                    .iter()
                    .map(KernelSpec::with_transposed_mixing)
                    .collect::<Result<_>>()?,
            }),
        }
    }

    /// True when some mixing matrix is non-square or differs from its transpose.
    pub fn has_asymmetric_mixing(&self) -> bool {
        match self {
            KernelSpec::SquaredExponential { .. } => false,
            KernelSpec::LinearCoregionalization { mixing, .. } => {
                let p = mixing.len();
                mixing.iter().any(|r| r.len() != p)
                    || (0..p).any(|i| (0..p).any(|j| mixing[i][j] != mixing[j][i]))
            }
            KernelSpec::Sum { terms } => terms.iter().any(KernelSpec::has_asymmetric_mixing),
        }
    }
}

/// Cross-covariance between `a` and `b`: `(n_a·p) × (n_b·p)`, output-major.
pub fn eval_kernel(spec: &KernelSpec, a: &InputPoints, b: &InputPoints) -> Result<DMatrix<f64>> {
    let d = spec.input_dim();
    if a.dim() != d || b.dim() != d {
        return Err(Error::DimensionMismatch(format!(
            "kernel expects input dimension {d}, got {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(eval_unchecked(spec, a.matrix(), b.matrix()))
}

fn eval_unchecked(spec: &KernelSpec, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    match spec {
        KernelSpec::SquaredExponential {
            signal_variance,
            lengthscales,
        } => squared_exponential(*signal_variance, lengthscales, a, b),
        KernelSpec::LinearCoregionalization {
            latent_kernels,
            mixing,
        } => {
            let (na, nb, p) = (a.nrows(), b.nrows(), mixing.len());
            let mut out = DMatrix::zeros(na * p, nb * p);
            for (q, latent) in latent_kernels.iter().enumerate() {
                let kq = eval_unchecked(latent, a, b);
                for i in 0..p {
                    for i2 in 0..p {
                        let w = mixing[i][q] * mixing[i2][q];
                        if w == 0.0 {
                            continue;
                        }
                        let mut block = out.view_mut((i * na, i2 * nb), (na, nb));
                        block += &kq * w;
                    }
                }
            }
            out
        }
        KernelSpec::Sum { terms } => {
            let mut iter = terms.iter();
            let mut out = eval_unchecked(iter.next().expect("validated sum is nonempty"), a, b);
            for t in iter {
                out += eval_unchecked(t, a, b);
            }
            out
        }
    }
}

fn squared_exponential(
    signal_variance: f64,
    lengthscales: &[f64],
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> DMatrix<f64> {
    let inv: Vec<f64> = lengthscales.iter().map(|l| 1.0 / l).collect();
    let entry = |i: usize, j: usize| {
        let sq: f64 = inv
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let diff = (a[(i, k)] - b[(j, k)]) * s;
                diff * diff
            })
            .sum();
        signal_variance * (-0.5 * sq).exp()
    };
    if std::ptr::eq(a, b) {
        let n = a.nrows();
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let v = entry(i, j);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        return out;
    }
    DMatrix::from_fn(a.nrows(), b.nrows(), entry)
}
