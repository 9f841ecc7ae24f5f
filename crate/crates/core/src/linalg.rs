//! Dense factorizations and Gaussian sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Default first nonzero rung of the jitter ladder.
pub const DEFAULT_JITTER: f64 = 1e-8;

/// Number of nonzero rungs: `base · 10^k` for `k = 0..JITTER_RUNGS`.
pub const JITTER_RUNGS: i32 = 7;

const SYMMETRY_RTOL: f64 = 1e-12;

/// A symmetric covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix {
    values: DMatrix<f64>,
    jitter_applied: f64,
}

impl CovMatrix {
    /// Accepts a square matrix that is symmetric to within `1e-12` relative
    /// to its largest entry, and stores its exact symmetrization.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "covariance must be square, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariance matrix".into()));
        }
        let scale = values.amax().max(f64::MIN_POSITIVE);
        let n = values.nrows();
        for j in 0..n {
            for i in (j + 1)..n {
                if (values[(i, j)] - values[(j, i)]).abs() > SYMMETRY_RTOL * scale {
                    return Err(Error::InvalidArgument(format!(
                        "covariance is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let values = (&values + values.transpose()) * 0.5;
        Ok(CovMatrix {
            values,
            jitter_applied: 0.0,
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn jitter_applied(&self) -> f64 {
        self.jitter_applied
    }

    pub(crate) fn with_jitter_applied(mut self, jitter: f64) -> Self {
        self.jitter_applied = jitter;
        self
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }
}

/// Lower Cholesky factor of `m + jitter_used · I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    pub lower: DMatrix<f64>,
    pub jitter_used: f64,
}

/// Plain Cholesky factorization; `None` if a pivot is not strictly positive.
/// Only the lower triangle of `a` is read.
pub fn cholesky(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut l = a.clone();
    let data = l.as_mut_slice();
    for k in 0..n {
        let pivot = data[k * n + k];
        if !pivot.is_finite() || pivot <= 0.0 {
            return None;
        }
        let root = pivot.sqrt();
        data[k * n + k] = root;
        for v in &mut data[k * n + k + 1..(k + 1) * n] {
            *v /= root;
        }
        let (done, rest) = data.split_at_mut((k + 1) * n);
        let col_k = &done[k * n..];
        for (offset, col_j) in rest.chunks_exact_mut(n).enumerate() {
            let j = k + 1 + offset;
            let ljk = col_k[j];
            if ljk == 0.0 {
                continue;
            }
            for (dst, src) in col_j[j..].iter_mut().zip(&col_k[j..]) {
                *dst -= src * ljk;
            }
        }
    }
    for j in 1..n {
        for i in 0..j {
            l[(i, j)] = 0.0;
        }
    }
    Some(l)
}

/// Cholesky factorization with jitter escalation. Tries no jitter first, then
/// `base_jitter · 10^k` for `k = 0..7`, returning the first success.
pub fn cholesky_with_jitter(m: &CovMatrix, base_jitter: f64) -> Result<CholeskyFactor> {
    if !(base_jitter.is_finite() && base_jitter > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "base jitter must be finite and > 0, got {base_jitter}"
        )));
    }
    let ladder: Vec<f64> = std::iter::once(0.0)
        .chain((0..JITTER_RUNGS).map(|k| base_jitter * 10f64.powi(k)))
        .collect();
    let mut attempted = Vec::with_capacity(ladder.len());
    for &jitter in &ladder {
        attempted.push(jitter);
        let factor = if jitter == 0.0 {
            cholesky(m.values())
        } else {
            let mut shifted = m.values().clone();
            for i in 0..shifted.nrows() {
                shifted[(i, i)] += jitter;
            }
            cholesky(&shifted)
        };
        if let Some(lower) = factor {
            return Ok(CholeskyFactor {
                lower,
                jitter_used: jitter,
            });
        }
    }
    Err(Error::NotPositiveDefinite { ladder: attempted })
}

/// Which system a triangular solve addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriangularSide {
    /// `G x = b`
    Lower,
    /// `Gᵀ x = b`
    LowerTranspose,
}

/// Forward or back substitution against a lower-triangular factor.
pub fn triangular_solve(
    factor: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
    side: TriangularSide,
) -> Result<DMatrix<f64>> {
    let n = factor.nrows();
    if !factor.is_square() || rhs.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "triangular solve: factor {}x{}, rhs {}x{}",
            factor.nrows(),
            factor.ncols(),
            rhs.nrows(),
            rhs.ncols()
        )));
    }
    if let Some(index) = (0..n).find(|&i| factor[(i, i)] == 0.0) {
        return Err(Error::SingularTriangular { index });
    }
    let mut x = rhs.clone();
    let g = factor.as_slice();
    for col in x.as_mut_slice().chunks_exact_mut(n.max(1)) {
        match side {
            TriangularSide::Lower => {
                for j in 0..n {
                    let xj = col[j] / g[j * n + j];
                    col[j] = xj;
                    if xj != 0.0 {
                        for (dst, gij) in
                            col[j + 1..].iter_mut().zip(&g[j * n + j + 1..(j + 1) * n])
                        {
                            *dst -= gij * xj;
                        }
                    }
                }
            }
            TriangularSide::LowerTranspose => {
                for j in (0..n).rev() {
                    let dot: f64 = col[j + 1..]
                        .iter()
                        .zip(&g[j * n + j + 1..(j + 1) * n])
                        .map(|(a, b)| a * b)
                        .sum();
                    col[j] = (col[j] - dot) / g[j * n + j];
                }
            }
        }
    }
    Ok(x)
}

/// Inverse of a lower-triangular matrix by recursive 2×2 blocking, so the
/// bulk of the work is matrix products.
pub fn lower_triangular_inverse(factor: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = factor.nrows();
    if n <= 48 {
        return triangular_solve(factor, &DMatrix::identity(n, n), TriangularSide::Lower);
    }
    let m = n / 2;
    let a_inv = lower_triangular_inverse(&factor.view((0, 0), (m, m)).into_owned())?;
    let c_inv = lower_triangular_inverse(&factor.view((m, m), (n - m, n - m)).into_owned())?;
    let b = factor.view((m, 0), (n - m, m)).into_owned();
    let mut inv = DMatrix::zeros(n, n);
    inv.view_mut((m, 0), (n - m, m))
        .copy_from(&(-(&c_inv * (&b * &a_inv))));
    inv.view_mut((0, 0), (m, m)).copy_from(&a_inv);
    inv.view_mut((m, m), (n - m, n - m)).copy_from(&c_inv);
    Ok(inv)
}

/// `(G Gᵀ)⁻¹` from a lower-triangular factor `G`.
pub fn cholesky_inverse(factor: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let h = lower_triangular_inverse(factor)?;
    Ok(h.transpose() * &h)
}

/// `count` draws of `mean + G z`, one per row. Each draw consumes `dim`
/// standard normals in order, so draws concatenate across calls.
pub fn mvn_sample<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    chol_lower: &DMatrix<f64>,
    rng: &mut R,
    count: usize,
) -> Result<DMatrix<f64>> {
    let dim = mean.len();
    if chol_lower.nrows() != dim || chol_lower.ncols() != dim {
        return Err(Error::DimensionMismatch(format!(
            "mean has length {dim} but factor is {}x{}",
            chol_lower.nrows(),
            chol_lower.ncols()
        )));
    }
    let mut out = DMatrix::zeros(count, dim);
    let mut z = DVector::<f64>::zeros(dim);
    for r in 0..count {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for i in 0..dim {
            let mut acc = mean[i];
            for k in 0..=i {
                acc += chol_lower[(i, k)] * z[k];
            }
            out[(r, i)] = acc;
        }
    }
    Ok(out)
}
