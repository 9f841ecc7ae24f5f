//! Gaussian process models under test.
//!
//! A [`GpModel`] is a zero-mean GP prior with a Gaussian likelihood and either
//! exact or sparse inference. The sparse flavor is the closed-form optimal
//! variational posterior for a Gaussian likelihood (inducing values at fixed
//! inputs, no ELBO loop). For a linear coregionalization kernel the inducing
//! variables are the latent processes at the inducing inputs, mixed through
//! `W` into the outputs.
//!
//! Planted faults live here too. Each [`FaultSpec`] acts at exactly one stage
//! of the predictive computation (see [`FaultStage`]).

use std::borrow::Cow;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{eval_kernel, InputPoints, KernelSpec};
use crate::linalg::{
    cholesky, cholesky_inverse, cholesky_with_jitter, mvn_sample, triangular_solve, CovMatrix,
    TriangularSide, DEFAULT_JITTER,
};

/// Floor applied to predictive variances that a fault drives non-positive.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Independent Gaussian observation noise, one variance per output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianLikelihood {
    pub noise_variance: Vec<f64>,
}

impl GaussianLikelihood {
    pub fn new(noise_variance: Vec<f64>) -> Result<Self> {
        let lik = GaussianLikelihood { noise_variance };
        lik.validate()?;
        Ok(lik)
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_variance.is_empty() {
            return Err(Error::InvalidModel(
                "noise_variance must have one entry per output".into(),
            ));
        }
        if let Some(v) = self
            .noise_variance
            .iter()
            .find(|v| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::InvalidModel(format!(
                "noise variances must be finite and > 0, got {v}"
            )));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.noise_variance.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Inference {
    Exact,
    Sparse { inducing: InputPoints },
}

/// A planted defect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultSpec {
    /// The predictive covariance leaves out the noise it should account for:
    /// the mean uses the noisy solve, the covariance does not.
    NoNoiseInPredictiveVariance,
    /// The posterior's kernel uses `Wᵀ` in place of `W`.
    TransposedMixingMatrix,
    /// The solve against the observations uses `Gᵀ` where `G` belongs, so
    /// the predictive mean is wrong while the covariance is untouched.
    WrongTriangularSide,
    /// The predictive covariance is multiplied by `factor`.
    ScaledPosteriorVariance { factor: f64 },
    /// The predictive mean is shifted by `offset`.
    ShiftedPosteriorMean { offset: f64 },
}

/// Pipeline stage at which a fault acts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultStage {
    Kernel,
    Solve,
    Output,
}

impl FaultSpec {
    pub fn stage(&self) -> FaultStage {
        match self {
            FaultSpec::TransposedMixingMatrix => FaultStage::Kernel,
            FaultSpec::NoNoiseInPredictiveVariance | FaultSpec::WrongTriangularSide => {
                FaultStage::Solve
            }
            FaultSpec::ScaledPosteriorVariance { .. } | FaultSpec::ShiftedPosteriorMean { .. } => {
                FaultStage::Output
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FaultSpec::ScaledPosteriorVariance { factor } => {
                if !(factor.is_finite() && *factor > 0.0) || *factor == 1.0 {
                    return Err(Error::InvalidFault(format!(
                        "variance factor must be finite, > 0 and != 1, got {factor}"
                    )));
                }
            }
            FaultSpec::ShiftedPosteriorMean { offset } if !offset.is_finite() || *offset == 0.0 => {
                return Err(Error::InvalidFault(format!(
                    "mean offset must be finite and != 0, got {offset}"
                )));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Zero-mean GP prior, Gaussian likelihood, inference flavor and optional fault.
#[derive(Debug, Clone, PartialEq)]
pub struct GpModel {
    kernel: KernelSpec,
    likelihood: GaussianLikelihood,
    inference: Inference,
    fault: Option<FaultSpec>,
}

impl GpModel {
    pub fn new(
        kernel: KernelSpec,
        likelihood: GaussianLikelihood,
        inference: Inference,
        fault: Option<FaultSpec>,
    ) -> Result<Self> {
        kernel.validate()?;
        likelihood.validate()?;
        if kernel.output_dim() != likelihood.output_dim() {
            return Err(Error::InvalidModel(format!(
                "kernel has {} outputs but likelihood has {} noise variances",
                kernel.output_dim(),
                likelihood.output_dim()
            )));
        }
        if let Inference::Sparse { inducing } = &inference {
            if inducing.is_empty() {
                return Err(Error::InvalidModel(
                    "sparse inference needs at least one inducing point".into(),
                ));
            }
            if inducing.dim() != kernel.input_dim() {
                return Err(Error::InvalidModel(format!(
                    "inducing points have dimension {}, kernel expects {}",
                    inducing.dim(),
                    kernel.input_dim()
                )));
            }
        }
        if let Some(f) = &fault {
            f.validate()?;
            if *f == FaultSpec::TransposedMixingMatrix {
                kernel.with_transposed_mixing()?;
                if !matches!(
                    kernel,
                    KernelSpec::LinearCoregionalization { .. } | KernelSpec::Sum { .. }
                ) {
                    return Err(Error::InvalidFault(
                        "transposed mixing needs a coregionalization kernel".into(),
                    ));
                }
            }
        }
        Ok(GpModel {
            kernel,
            likelihood,
            inference,
            fault,
        })
    }

    /// Exact GPR without a fault.
    pub fn exact(kernel: KernelSpec, likelihood: GaussianLikelihood) -> Result<Self> {
        Self::new(kernel, likelihood, Inference::Exact, None)
    }

    pub fn with_fault(&self, fault: Option<FaultSpec>) -> Result<Self> {
        Self::new(
            self.kernel.clone(),
            self.likelihood.clone(),
            self.inference.clone(),
            fault,
        )
    }

    pub fn with_inference(&self, inference: Inference) -> Result<Self> {
        Self::new(
            self.kernel.clone(),
            self.likelihood.clone(),
            inference,
            self.fault.clone(),
        )
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn likelihood(&self) -> &GaussianLikelihood {
        &self.likelihood
    }

    pub fn inference(&self) -> &Inference {
        &self.inference
    }

    pub fn fault(&self) -> Option<&FaultSpec> {
        self.fault.as_ref()
    }

    pub fn output_dim(&self) -> usize {
        self.kernel.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.kernel.input_dim()
    }

    fn fault_at(&self, stage: FaultStage) -> Option<&FaultSpec> {
        self.fault.as_ref().filter(|f| f.stage() == stage)
    }

    /// Kernel used by the posterior computation. Differs from the prior
    /// kernel only under [`FaultSpec::TransposedMixingMatrix`].
    fn posterior_kernel(&self) -> Result<Cow<'_, KernelSpec>> {
        match self.fault_at(FaultStage::Kernel) {
            Some(FaultSpec::TransposedMixingMatrix) => {
                Ok(Cow::Owned(self.kernel.with_transposed_mixing()?))
            }
            _ => Ok(Cow::Borrowed(&self.kernel)),
        }
    }

    fn data_solve_side(&self) -> TriangularSide {
        match self.fault_at(FaultStage::Solve) {
            Some(FaultSpec::WrongTriangularSide) => TriangularSide::LowerTranspose,
            _ => TriangularSide::Lower,
        }
    }

    fn omits_predictive_noise(&self) -> bool {
        matches!(
            self.fault_at(FaultStage::Solve),
            Some(FaultSpec::NoNoiseInPredictiveVariance)
        )
    }

    /// Noise variances laid out output-major over `n` points.
    fn noise_diagonal(&self, n: usize) -> DVector<f64> {
        let p = self.output_dim();
        DVector::from_fn(n * p, |k, _| self.likelihood.noise_variance[k / n.max(1)])
    }

    fn check_inputs(&self, x: &InputPoints, label: &str) -> Result<()> {
        if x.dim() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "{label} has dimension {}, model expects {}",
                x.dim(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Precomputes the joint prior factor over `train ∪ test`.
    pub fn prior_sampler(&self, train: &InputPoints, test: &InputPoints) -> Result<PriorSampler> {
        self.check_inputs(train, "training inputs")?;
        self.check_inputs(test, "test inputs")?;
        let all = train.concat(test)?;
        // Repeated locations are evaluated once so the same function gives
        // identical values wherever an input recurs.
        let mut unique_rows: Vec<usize> = Vec::new();
        let mut slot = Vec::with_capacity(all.len());
        for i in 0..all.len() {
            let row = all.matrix().row(i);
            match unique_rows.iter().position(|&u| all.matrix().row(u) == row) {
                Some(s) => slot.push(s),
                None => {
                    slot.push(unique_rows.len());
                    unique_rows.push(i);
                }
            }
        }
        let unique = InputPoints::new(all.matrix().select_rows(&unique_rows))?;
        let k = CovMatrix::new(eval_kernel(&self.kernel, &unique, &unique)?)?;
        let factor = cholesky_with_jitter(&k, DEFAULT_JITTER)?;
        Ok(PriorSampler {
            n_train: train.len(),
            n_test: test.len(),
            n_unique: unique.len(),
            n_outputs: self.output_dim(),
            slot,
            lower: factor.lower,
        })
    }

    /// Precomputes everything in the predictive law that does not depend on
    /// the observations.
    pub fn predictor(&self, train: &InputPoints, test: &InputPoints) -> Result<Predictor> {
        self.check_inputs(train, "training inputs")?;
        self.check_inputs(test, "test inputs")?;
        match &self.inference {
            Inference::Exact => self.exact_predictor(train, test),
            Inference::Sparse { inducing } => self.sparse_predictor(train, test, inducing),
        }
    }

    fn exact_predictor(&self, train: &InputPoints, test: &InputPoints) -> Result<Predictor> {
        let kern = self.posterior_kernel()?;
        let n = train.len();
        let side = self.data_solve_side();

        let k_train = eval_kernel(&kern, train, train)?;
        let mut k_noisy = k_train.clone();
        for (i, s) in self.noise_diagonal(n).iter().enumerate() {
            k_noisy[(i, i)] += s;
        }
        let g = cholesky_with_jitter(&CovMatrix::new(k_noisy)?, DEFAULT_JITTER)?.lower;
        let k_cross = eval_kernel(&kern, train, test)?;
        let k_test = eval_kernel(&kern, test, test)?;

        let v = triangular_solve(&g, &k_cross, TriangularSide::Lower)?;
        let (cov, clamped) = if self.omits_predictive_noise() {
            let g0 = cholesky_with_jitter(&CovMatrix::new(k_train)?, DEFAULT_JITTER)?.lower;
            let v0 = triangular_solve(&g0, &k_cross, TriangularSide::Lower)?;
            clamp_diagonal(&k_test - v0.transpose() * &v0)
        } else {
            (&k_test - v.transpose() * &v, 0)
        };
        Ok(Predictor {
            n_train: n,
            n_test: test.len(),
            n_outputs: self.output_dim(),
            fault: self.fault_at(FaultStage::Output).cloned(),
            template: PosteriorGaussian::new(
                DVector::zeros(cov.nrows()),
                cov,
                test.len(),
                self.output_dim(),
            )?
            .with_clamped(clamped),
            kind: PredictorKind::Exact { g, v, side },
        })
    }

    fn sparse_predictor(
        &self,
        train: &InputPoints,
        test: &InputPoints,
        inducing: &InputPoints,
    ) -> Result<Predictor> {
        let kern = self.posterior_kernel()?;
        let n = train.len();
        let side = self.data_solve_side();

        let (k_uu, k_uf, k_us) = inducing_covariances(&kern, inducing, train, test)?;
        let k_test = eval_kernel(&kern, test, test)?;
        let g_uu = cholesky_with_jitter(&CovMatrix::new(k_uu)?, DEFAULT_JITTER)?.lower;

        // A = G_uu⁻¹ K_uf, B = I + A Λ⁻¹ Aᵀ
        let a = triangular_solve(&g_uu, &k_uf, TriangularSide::Lower)?;
        let inv_noise = self.noise_diagonal(n).map(|s| 1.0 / s);
        let mut a_scaled = a.clone();
        for (j, w) in inv_noise.iter().enumerate() {
            a_scaled.column_mut(j).scale_mut(*w);
        }
        let mut b = &a_scaled * a.transpose();
        for i in 0..b.nrows() {
            b[(i, i)] += 1.0;
        }
        let g_b = cholesky_with_jitter(&CovMatrix::new(b)?, DEFAULT_JITTER)?.lower;

        let t1 = triangular_solve(&g_uu, &k_us, TriangularSide::Lower)?;
        let t2 = triangular_solve(&g_b, &t1, TriangularSide::Lower)?;
        let nystrom = &k_test - t1.transpose() * &t1;
        let (cov, clamped) = if self.omits_predictive_noise() {
            clamp_diagonal(nystrom)
        } else {
            (nystrom + t2.transpose() * &t2, 0)
        };
        Ok(Predictor {
            n_train: n,
            n_test: test.len(),
            n_outputs: self.output_dim(),
            fault: self.fault_at(FaultStage::Output).cloned(),
            template: PosteriorGaussian::new(
                DVector::zeros(cov.nrows()),
                cov,
                test.len(),
                self.output_dim(),
            )?
            .with_clamped(clamped),
            kind: PredictorKind::Sparse {
                a_scaled,
                g_b,
                t2,
                side,
            },
        })
    }

    /// Log-scale hyperparameters `[log σ², log ℓ_1 … log ℓ_d, log noise]` of a
    /// single-output squared-exponential model.
    pub fn log_hyperparameters(&self) -> Result<Vec<f64>> {
        let (sf2, ls, noise) = self.se_parts()?;
        let mut theta = Vec::with_capacity(ls.len() + 2);
        theta.push(sf2.ln());
        theta.extend(ls.iter().map(|l| l.ln()));
        theta.push(noise.ln());
        Ok(theta)
    }

    /// The same model with hyperparameters replaced by `exp(theta)`.
    pub fn with_log_hyperparameters(&self, theta: &[f64]) -> Result<GpModel> {
        let (_, ls, _) = self.se_parts()?;
        if theta.len() != ls.len() + 2 {
            return Err(Error::DimensionMismatch(format!(
                "expected {} log-hyperparameters, got {}",
                ls.len() + 2,
                theta.len()
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("log-hyperparameters".into()));
        }
        let d = ls.len();
        let kernel = KernelSpec::squared_exponential(
            theta[0].exp(),
            theta[1..=d].iter().map(|t| t.exp()).collect(),
        );
        let likelihood = GaussianLikelihood::new(vec![theta[d + 1].exp()])?;
        Self::new(
            kernel,
            likelihood,
            self.inference.clone(),
            self.fault.clone(),
        )
    }

    fn se_parts(&self) -> Result<(f64, &[f64], f64)> {
        match &self.kernel {
            KernelSpec::SquaredExponential {
                signal_variance,
                lengthscales,
            } => Ok((
                *signal_variance,
                lengthscales,
                self.likelihood.noise_variance[0],
            )),
            _ => Err(Error::Unsupported(
                "hyperparameter vectors are defined for single-output squared-exponential models"
                    .into(),
            )),
        }
    }
}

fn clamp_diagonal(mut cov: DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let mut clamped = 0;
    for i in 0..cov.nrows() {
        if cov[(i, i)] < VARIANCE_FLOOR {
            cov[(i, i)] = VARIANCE_FLOOR;
            clamped += 1;
        }
    }
    (cov, clamped)
}

/// `(K_uu, K_uf, K_u*)` for the inducing variables of `kern`.
fn inducing_covariances(
    kern: &KernelSpec,
    z: &InputPoints,
    train: &InputPoints,
    test: &InputPoints,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    match kern {
        KernelSpec::LinearCoregionalization {
            latent_kernels,
            mixing,
        } => {
            // u = (g_1(Z), …, g_q(Z)); cov(g_q(z), f_i(x)) = W[i,q] k_q(z, x)
            let (nz, q, p) = (z.len(), latent_kernels.len(), mixing.len());
            let mut k_uu = DMatrix::zeros(nz * q, nz * q);
            let mut k_uf = DMatrix::zeros(nz * q, train.len() * p);
            let mut k_us = DMatrix::zeros(nz * q, test.len() * p);
            for (l, latent) in latent_kernels.iter().enumerate() {
                k_uu.view_mut((l * nz, l * nz), (nz, nz))
                    .copy_from(&eval_kernel(latent, z, z)?);
                let kf = eval_kernel(latent, z, train)?;
                let ks = eval_kernel(latent, z, test)?;
                for (i, row) in mixing.iter().enumerate() {
                    let w = row[l];
                    k_uf.view_mut((l * nz, i * train.len()), (nz, train.len()))
                        .copy_from(&(&kf * w));
                    k_us.view_mut((l * nz, i * test.len()), (nz, test.len()))
                        .copy_from(&(&ks * w));
                }
            }
            Ok((k_uu, k_uf, k_us))
        }
        _ => Ok((
            eval_kernel(kern, z, z)?,
            eval_kernel(kern, z, train)?,
            eval_kernel(kern, z, test)?,
        )),
    }
}

/// Cached joint prior factor over training and test inputs.
#[derive(Debug, Clone)]
pub struct PriorSampler {
    n_train: usize,
    n_test: usize,
    n_unique: usize,
    n_outputs: usize,
    slot: Vec<usize>,
    lower: DMatrix<f64>,
}

impl PriorSampler {
    /// Draws one function jointly at both input sets:
    /// `(f̃: n × p, f̃_*: m × p)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (DMatrix<f64>, DMatrix<f64>) {
        let dim = self.n_unique * self.n_outputs;
        let draw = mvn_sample(&DVector::zeros(dim), &self.lower, rng, 1)
            .expect("prior factor matches its own dimension");
        let value =
            |point: usize, output: usize| draw[(0, output * self.n_unique + self.slot[point])];
        let f_train = DMatrix::from_fn(self.n_train, self.n_outputs, value);
        let f_test = DMatrix::from_fn(self.n_test, self.n_outputs, |k, i| {
            value(self.n_train + k, i)
        });
        (f_train, f_test)
    }
}

/// Draws one prior function at `train` and `test` jointly.
pub fn sample_prior_joint<R: Rng + ?Sized>(
    model: &GpModel,
    train: &InputPoints,
    test: &InputPoints,
    rng: &mut R,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    Ok(model.prior_sampler(train, test)?.sample(rng))
}

/// `ỹ = f̃ + ε`, noise drawn output by output, point by point.
pub fn simulate_observations<R: Rng + ?Sized>(
    f_tilde: &DMatrix<f64>,
    likelihood: &GaussianLikelihood,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if f_tilde.ncols() != likelihood.output_dim() {
        return Err(Error::DimensionMismatch(format!(
            "function values have {} outputs, likelihood has {}",
            f_tilde.ncols(),
            likelihood.output_dim()
        )));
    }
    let mut y = f_tilde.clone();
    for (i, s2) in likelihood.noise_variance.iter().enumerate() {
        let sd = s2.sqrt();
        for v in y.column_mut(i).iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += sd * z;
        }
    }
    Ok(y)
}

/// Gaussian predictive law at the test points, output-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGaussian {
    mean: DVector<f64>,
    cov: CovMatrix,
    chol: DMatrix<f64>,
    n_test: usize,
    n_outputs: usize,
    clamped: usize,
}

impl PosteriorGaussian {
    /// Factors `cov` with the jitter ladder. An all-zero covariance is a point
    /// mass and gets a zero factor.
    pub fn new(
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        n_test: usize,
        n_outputs: usize,
    ) -> Result<Self> {
        if mean.len() != n_test * n_outputs || cov.nrows() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "posterior over {n_test} points × {n_outputs} outputs needs mean/cov of size {}",
                n_test * n_outputs
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior mean".into()));
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        let cov = CovMatrix::new(sym)?;
        let (chol, jitter) = if cov.values().iter().all(|v| *v == 0.0) {
            (DMatrix::zeros(cov.dim(), cov.dim()), 0.0)
        } else {
            let f = cholesky_with_jitter(&cov, DEFAULT_JITTER)?;
            (f.lower, f.jitter_used)
        };
        Ok(PosteriorGaussian {
            mean,
            cov: cov.with_jitter_applied(jitter),
            chol,
            n_test,
            n_outputs,
            clamped: 0,
        })
    }

    fn with_clamped(mut self, clamped: usize) -> Self {
        self.clamped = clamped;
        self
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &CovMatrix {
        &self.cov
    }

    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn n_test(&self) -> usize {
        self.n_test
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    /// Number of predictive variances a fault pushed below the floor.
    pub fn clamped_variances(&self) -> usize {
        self.clamped
    }

    /// Marginal variances, output-major.
    pub fn variances(&self) -> DVector<f64> {
        self.cov.values().diagonal()
    }
}

/// Data-independent part of a model's predictive law at fixed inputs.
#[derive(Debug, Clone)]
pub struct Predictor {
    n_train: usize,
    n_test: usize,
    n_outputs: usize,
    fault: Option<FaultSpec>,
    template: PosteriorGaussian,
    kind: PredictorKind,
}

#[derive(Debug, Clone)]
enum PredictorKind {
    Exact {
        g: DMatrix<f64>,
        v: DMatrix<f64>,
        side: TriangularSide,
    },
    Sparse {
        a_scaled: DMatrix<f64>,
        g_b: DMatrix<f64>,
        t2: DMatrix<f64>,
        side: TriangularSide,
    },
}

impl Predictor {
    /// Posterior given observations `y` (`n × p`).
    pub fn posterior(&self, y: &DMatrix<f64>) -> Result<PosteriorGaussian> {
        if y.nrows() != self.n_train || y.ncols() != self.n_outputs {
            return Err(Error::DimensionMismatch(format!(
                "observations are {}x{}, expected {}x{}",
                y.nrows(),
                y.ncols(),
                self.n_train,
                self.n_outputs
            )));
        }
        // Column-major storage of an n × p matrix is the output-major vector.
        let y_flat = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
        let mean = match &self.kind {
            PredictorKind::Exact { g, v, side } => {
                let alpha = triangular_solve(g, &y_flat, *side)?;
                v.transpose() * alpha
            }
            PredictorKind::Sparse {
                a_scaled,
                g_b,
                t2,
                side,
            } => {
                let c = triangular_solve(g_b, &(a_scaled * &y_flat), *side)?;
                t2.transpose() * c
            }
        };
        let mut post = self.template.clone();
        post.mean = mean.column(0).into_owned();
        if post.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior mean".into()));
        }
        match &self.fault {
            Some(f) => apply_fault(post, f),
            None => Ok(post),
        }
    }

    pub fn n_test(&self) -> usize {
        self.n_test
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }
}

/// Exact GPR predictive law at `test` given `(train, y)`.
pub fn exact_posterior(
    model: &GpModel,
    train: &InputPoints,
    y: &DMatrix<f64>,
    test: &InputPoints,
) -> Result<PosteriorGaussian> {
    if model.inference != Inference::Exact {
        return Err(Error::InvalidModel(
            "exact_posterior needs exact inference".into(),
        ));
    }
    model.predictor(train, test)?.posterior(y)
}

/// Optimal sparse variational predictive law at `test` given `(train, y)`.
pub fn sparse_posterior(
    model: &GpModel,
    train: &InputPoints,
    y: &DMatrix<f64>,
    test: &InputPoints,
) -> Result<PosteriorGaussian> {
    if !matches!(model.inference, Inference::Sparse { .. }) {
        return Err(Error::InvalidModel(
            "sparse_posterior needs sparse inference".into(),
        ));
    }
    model.predictor(train, test)?.posterior(y)
}

/// `count` independent draws, one per row, `count × (m·p)`.
pub fn sample_posterior<R: Rng + ?Sized>(
    post: &PosteriorGaussian,
    count: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    mvn_sample(&post.mean, &post.chol, rng, count)
}

/// Applies an output-stage fault. Faults that act upstream (kernel or solve
/// stage) were already applied while the posterior was computed, so they
/// pass through unchanged; every model carries at most one fault.
pub fn apply_fault(mut post: PosteriorGaussian, fault: &FaultSpec) -> Result<PosteriorGaussian> {
    fault.validate()?;
    match fault {
        FaultSpec::ScaledPosteriorVariance { factor } => {
            let jitter = post.cov.jitter_applied() * factor;
            post.cov = CovMatrix::new(post.cov.values() * *factor)?.with_jitter_applied(jitter);
            post.chol *= factor.sqrt();
        }
        FaultSpec::ShiftedPosteriorMean { offset } => {
            post.mean.add_scalar_mut(*offset);
        }
        FaultSpec::NoNoiseInPredictiveVariance
        | FaultSpec::TransposedMixingMatrix
        | FaultSpec::WrongTriangularSide => {}
    }
    Ok(post)
}

/// Log evidence and its gradient with respect to the log-hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Log marginal likelihood of a single-output squared-exponential model:
/// `-½ yᵀ(K+σ²I)⁻¹y - ½ log|K+σ²I| - (n/2) log 2π`, with its analytic
/// gradient with respect to `[log σ_f², log ℓ_1 … log ℓ_d, log σ²]`.
pub fn log_marginal_likelihood(
    model: &GpModel,
    train: &InputPoints,
    y: &DMatrix<f64>,
) -> Result<Evidence> {
    evidence(model, train, y, true)
}

/// Value of [`log_marginal_likelihood`] without the gradient.
pub fn log_marginal_likelihood_value(
    model: &GpModel,
    train: &InputPoints,
    y: &DMatrix<f64>,
) -> Result<f64> {
    evidence(model, train, y, false).map(|e| e.value)
}

fn evidence(
    model: &GpModel,
    train: &InputPoints,
    y: &DMatrix<f64>,
    with_gradient: bool,
) -> Result<Evidence> {
    if model.inference != Inference::Exact {
        return Err(Error::InvalidModel(
            "log marginal likelihood needs exact inference".into(),
        ));
    }
    let (_, lengthscales, noise) = model.se_parts()?;
    model.check_inputs(train, "training inputs")?;
    let n = train.len();
    if y.nrows() != n || y.ncols() != 1 {
        return Err(Error::DimensionMismatch(format!(
            "observations are {}x{}, expected {n}x1",
            y.nrows(),
            y.ncols()
        )));
    }
    let k_f = eval_kernel(&model.kernel, train, train)?;
    let mut k_y = k_f.clone();
    for i in 0..n {
        k_y[(i, i)] += noise;
    }
    let g = cholesky(&k_y).ok_or(Error::NotPositiveDefinite { ladder: vec![0.0] })?;
    let z = triangular_solve(&g, y, TriangularSide::Lower)?;
    let alpha = triangular_solve(&g, &z, TriangularSide::LowerTranspose)?;
    let log_det: f64 = g.diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let value = -0.5 * z.norm_squared() - 0.5 * log_det - 0.5 * n as f64 * (2.0 * PI).ln();
    if !with_gradient {
        if !value.is_finite() {
            return Err(Error::NonFinite("log marginal likelihood".into()));
        }
        return Ok(Evidence {
            value,
            gradient: Vec::new(),
        });
    }

    let k_inv = cholesky_inverse(&g)?;
    // ∂L/∂θ = ½ tr((ααᵀ − K⁻¹) ∂K/∂θ); every term is symmetric, so sum the
    // lower triangle and count off-diagonal entries twice
    let x = train.matrix();
    let d = lengthscales.len();
    let mut gradient = vec![0.0; d + 2];
    let mut trace = 0.0;
    for j in 0..n {
        for i in j..n {
            let w = alpha[i] * alpha[j] - k_inv[(i, j)];
            if i == j {
                trace += w;
            }
            let weight = if i == j { 1.0 } else { 2.0 };
            let wk = weight * w * k_f[(i, j)];
            gradient[0] += wk;
            for (c, l) in lengthscales.iter().enumerate() {
                let diff = (x[(i, c)] - x[(j, c)]) / l;
                gradient[1 + c] += wk * diff * diff;
            }
        }
    }
    gradient[d + 1] = noise * trace;
    for gr in gradient.iter_mut() {
        *gr *= 0.5;
    }
    if !value.is_finite() || gradient.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("log marginal likelihood".into()));
    }
    Ok(Evidence { value, gradient })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::trial_stream;
    use approx::assert_relative_eq;

    fn se_model(noise: f64) -> GpModel {
        GpModel::exact(
            KernelSpec::squared_exponential(1.0, vec![0.5]),
            GaussianLikelihood::new(vec![noise]).unwrap(),
        )
        .unwrap()
    }

    fn pts(xs: &[f64]) -> InputPoints {
        InputPoints::from_scalars(xs).unwrap()
    }

    fn lmc(mixing: Vec<Vec<f64>>, inference: Inference, fault: Option<FaultSpec>) -> GpModel {
        GpModel::new(
            KernelSpec::LinearCoregionalization {
                latent_kernels: vec![
                    KernelSpec::squared_exponential(1.0, vec![0.5]),
                    KernelSpec::squared_exponential(0.7, vec![0.3]),
                ],
                mixing,
            },
            GaussianLikelihood::new(vec![0.1, 0.2]).unwrap(),
            inference,
            fault,
        )
        .unwrap()
    }

    #[test]
    fn empty_test_set_gives_zero_rows() {
        let m = se_model(0.1);
        let mut rng = trial_stream(0, 0);
        let (f, fs) = sample_prior_joint(
            &m,
            &pts(&[0.0, 0.5]),
            &InputPoints::empty(1).unwrap(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(f.shape(), (2, 1));
        assert_eq!(fs.shape(), (0, 1));
    }

    #[test]
    fn same_inputs_give_same_function_values() {
        let m = se_model(0.1);
        let x = pts(&[0.1, 0.4, 0.8]);
        let mut rng = trial_stream(3, 1);
        let (f, fs) = sample_prior_joint(&m, &x, &x, &mut rng).unwrap();
        assert_eq!(f, fs);
    }

    #[test]
    fn near_zero_noise_interpolates() {
        let m = se_model(1e-12);
        let x = pts(&[0.0, 0.3, 0.6, 0.9]);
        let y = DMatrix::from_column_slice(4, 1, &[0.2, -0.4, 1.1, 0.5]);
        let post = exact_posterior(&m, &x, &y, &pts(&[0.3, 0.9])).unwrap();
        assert!((post.mean()[0] + 0.4).abs() < 1e-4);
        assert!((post.mean()[1] - 0.5).abs() < 1e-4);
        assert!(post.variances().iter().all(|v| *v < 1e-4));
    }

    #[test]
    fn far_test_points_revert_to_prior() {
        let m = se_model(0.1);
        let x = pts(&[0.0, 0.3, 0.6]);
        let y = DMatrix::from_column_slice(3, 1, &[1.0, -1.0, 2.0]);
        let post = exact_posterior(&m, &x, &y, &pts(&[50.0])).unwrap();
        assert!(post.mean()[0].abs() < 1e-6);
        assert!((post.variances()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lone_inducing_point_interpolates() {
        let m = se_model(1e-10)
            .with_inference(Inference::Sparse {
                inducing: pts(&[0.4]),
            })
            .unwrap();
        let y = DMatrix::from_column_slice(1, 1, &[0.7]);
        let post = sparse_posterior(&m, &pts(&[0.4]), &y, &pts(&[0.4])).unwrap();
        assert!((post.mean()[0] - 0.7).abs() < 1e-6);
        assert!(post.variances()[0] < 1e-6);
    }

    #[test]
    fn zero_covariance_samples_equal_mean() {
        let post = PosteriorGaussian::new(
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::zeros(2, 2),
            2,
            1,
        )
        .unwrap();
        let mut rng = trial_stream(1, 1);
        let s = sample_posterior(&post, 7, &mut rng).unwrap();
        assert_eq!(s.shape(), (7, 2));
        assert!(s.row_iter().all(|r| r[0] == 1.0 && r[1] == 2.0));
        assert_eq!(
            sample_posterior(&post, 1, &mut rng).unwrap().shape(),
            (1, 2)
        );
    }

    #[test]
    fn scaled_and_shifted_faults() {
        let post = PosteriorGaussian::new(
            DVector::from_vec(vec![0.5, -0.5]),
            DMatrix::identity(2, 2),
            2,
            1,
        )
        .unwrap();
        let scaled = apply_fault(
            post.clone(),
            &FaultSpec::ScaledPosteriorVariance { factor: 0.25 },
        )
        .unwrap();
        assert_eq!(scaled.cov().values(), &(DMatrix::identity(2, 2) * 0.25));
        assert_eq!(scaled.mean(), post.mean());
        let shifted = apply_fault(
            post.clone(),
            &FaultSpec::ShiftedPosteriorMean { offset: 1.0 },
        )
        .unwrap();
        assert_eq!(shifted.mean(), &DVector::from_vec(vec![1.5, 0.5]));
        assert_eq!(shifted.cov(), post.cov());
    }

    #[test]
    fn degenerate_faults_rejected() {
        assert!(FaultSpec::ScaledPosteriorVariance { factor: 1.0 }
            .validate()
            .is_err());
        assert!(FaultSpec::ShiftedPosteriorMean { offset: 0.0 }
            .validate()
            .is_err());
        let err = se_model(0.1).with_fault(Some(FaultSpec::TransposedMixingMatrix));
        assert!(matches!(err, Err(Error::InvalidFault(_))));
    }

    #[test]
    fn transposed_mixing_changes_the_posterior() {
        let w = vec![vec![1.0, 0.6], vec![-0.2, 0.9]];
        let clean = lmc(w.clone(), Inference::Exact, None);
        let faulty = lmc(w, Inference::Exact, Some(FaultSpec::TransposedMixingMatrix));
        let x = pts(&[0.0, 0.25, 0.5, 0.75, 1.0]);
        let xs = pts(&[0.1, 0.6]);
        let mut rng = trial_stream(5, 0);
        let (f, _) = sample_prior_joint(&clean, &x, &xs, &mut rng).unwrap();
        let y = simulate_observations(&f, clean.likelihood(), &mut rng).unwrap();
        let a = exact_posterior(&clean, &x, &y, &xs).unwrap();
        let b = exact_posterior(&faulty, &x, &y, &xs).unwrap();
        let gap = (a.mean() - b.mean())
            .amax()
            .max((a.cov().values() - b.cov().values()).amax());
        assert!(gap > 0.0);
    }

    #[test]
    fn wrong_side_and_missing_noise_change_the_posterior() {
        let x = pts(&[0.0, 0.2, 0.5, 0.9]);
        let xs = pts(&[0.3, 0.7]);
        let y = DMatrix::from_column_slice(4, 1, &[0.3, 0.1, -0.6, 0.4]);
        let clean = exact_posterior(&se_model(0.1), &x, &y, &xs).unwrap();
        let wrong = se_model(0.1)
            .with_fault(Some(FaultSpec::WrongTriangularSide))
            .unwrap();
        let wrong = exact_posterior(&wrong, &x, &y, &xs).unwrap();
        assert!((clean.mean() - wrong.mean()).amax() > 1e-3);
        let no_noise = se_model(0.1)
            .with_fault(Some(FaultSpec::NoNoiseInPredictiveVariance))
            .unwrap();
        let no_noise = exact_posterior(&no_noise, &x, &y, &xs).unwrap();
        assert_eq!(clean.mean(), no_noise.mean());
        for i in 0..2 {
            assert!(no_noise.variances()[i] < clean.variances()[i]);
        }
    }

    #[test]
    fn sparse_missing_noise_clamps_at_inducing_points() {
        let m = se_model(0.1)
            .with_inference(Inference::Sparse {
                inducing: pts(&[0.2, 0.7]),
            })
            .unwrap()
            .with_fault(Some(FaultSpec::NoNoiseInPredictiveVariance))
            .unwrap();
        let y = DMatrix::from_column_slice(3, 1, &[0.1, 0.2, 0.3]);
        let post = sparse_posterior(&m, &pts(&[0.0, 0.5, 1.0]), &y, &pts(&[0.2, 0.7])).unwrap();
        assert_eq!(post.clamped_variances(), 2);
        assert!(post.variances().iter().all(|v| *v >= VARIANCE_FLOOR));
    }

    #[test]
    fn identity_mixing_decouples_outputs() {
        let m = lmc(vec![vec![1.0, 0.0], vec![0.0, 1.0]], Inference::Exact, None);
        let x = pts(&[0.0, 0.3, 0.7]);
        let xs = pts(&[0.5]);
        let y = DMatrix::from_row_slice(3, 2, &[0.1, 1.0, 0.2, -1.0, 0.3, 0.5]);
        let mut y2 = y.clone();
        y2.column_mut(1).add_scalar_mut(3.0);
        let a = exact_posterior(&m, &x, &y, &xs).unwrap();
        let b = exact_posterior(&m, &x, &y2, &xs).unwrap();
        assert!((a.mean()[0] - b.mean()[0]).abs() < 1e-10);
        assert!((a.mean()[1] - b.mean()[1]).abs() > 0.1);
    }

    #[test]
    fn evidence_of_single_zero_observation() {
        let m = GpModel::exact(
            KernelSpec::squared_exponential(0.5, vec![1.0]),
            GaussianLikelihood::new(vec![0.5]).unwrap(),
        )
        .unwrap();
        let ev = log_marginal_likelihood(&m, &pts(&[0.0]), &DMatrix::zeros(1, 1)).unwrap();
        assert_relative_eq!(ev.value, -0.5 * (2.0 * PI).ln(), epsilon = 1e-14);
        assert_relative_eq!(ev.value, -0.918_938_533_204_672_7, epsilon = 1e-14);
    }

    #[test]
    fn hyperparameter_round_trip() {
        let m = se_model(0.1);
        let theta = m.log_hyperparameters().unwrap();
        assert_eq!(theta.len(), 3);
        let back = m.with_log_hyperparameters(&theta).unwrap();
        assert_relative_eq!(back.log_hyperparameters().unwrap()[2], 0.1f64.ln());
    }
}
