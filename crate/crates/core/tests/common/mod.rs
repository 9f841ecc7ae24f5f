#![allow(dead_code)]

use gp_sbc::kernel::{InputPoints, KernelSpec};
use gp_sbc::model::{GaussianLikelihood, GpModel, Inference};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Covariance written out from the textbook formulas, independent of the
/// library's kernel code. Output-major ordering.
pub fn oracle_cov(spec: &KernelSpec, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    fn se(sf2: f64, ls: &[f64], x: &[f64], y: &[f64]) -> f64 {
        let r2: f64 = x
            .iter()
            .zip(y)
            .zip(ls)
            .map(|((u, v), l)| ((u - v) / l).powi(2))
            .sum();
        sf2 * (-0.5 * r2).exp()
    }
    let row = |m: &DMatrix<f64>, i: usize| -> Vec<f64> { m.row(i).iter().copied().collect() };
    match spec {
        KernelSpec::SquaredExponential {
            signal_variance,
            lengthscales,
        } => DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
            se(*signal_variance, lengthscales, &row(a, i), &row(b, j))
        }),
        KernelSpec::Sum { terms } => {
            terms
                .iter()
                .map(|t| oracle_cov(t, a, b))
                .fold(DMatrix::zeros(0, 0), |acc, m| {
                    if acc.is_empty() {
                        m
                    } else {
                        acc + m
                    }
                })
        }
        KernelSpec::LinearCoregionalization {
            latent_kernels,
            mixing,
        } => {
            let (na, nb, p) = (a.nrows(), b.nrows(), mixing.len());
            let latents: Vec<DMatrix<f64>> =
                latent_kernels.iter().map(|k| oracle_cov(k, a, b)).collect();
            DMatrix::from_fn(na * p, nb * p, |r, c| {
                let (i, x) = (r / na, r % na);
                let (i2, x2) = (c / nb, c % nb);
                latents
                    .iter()
                    .enumerate()
                    .map(|(q, k)| mixing[i][q] * mixing[i2][q] * k[(x, x2)])
                    .sum()
            })
        }
    }
}

/// Posterior of `f(X*)` by conditioning the joint Gaussian with an LU solve.
pub fn oracle_posterior(
    spec: &KernelSpec,
    noise: &[f64],
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    xs: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mut kxx = oracle_cov(spec, x, x);
    for (i, s2) in noise.iter().enumerate() {
        for j in 0..n {
            kxx[(i * n + j, i * n + j)] += s2;
        }
    }
    let kxs = oracle_cov(spec, x, xs);
    let kss = oracle_cov(spec, xs, xs);
    let lu = kxx.lu();
    let y_vec = DVector::from_column_slice(y.as_slice());
    let a = lu.solve(&y_vec).expect("nonsingular");
    let b = lu.solve(&kxs).expect("nonsingular");
    (kxs.transpose() * a, kss - kxs.transpose() * b)
}

pub fn random_points<R: Rng>(rng: &mut R, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| rng.random_range(0.0..1.0))
}

pub fn random_se<R: Rng>(rng: &mut R, d: usize) -> KernelSpec {
    KernelSpec::squared_exponential(
        rng.random_range(0.3..3.0),
        (0..d).map(|_| rng.random_range(0.2..1.5)).collect(),
    )
}

/// SE kernel, or a two-output coregionalization with random mixing.
pub fn random_kernel<R: Rng>(rng: &mut R, d: usize) -> KernelSpec {
    if rng.random_bool(0.5) {
        random_se(rng, d)
    } else {
        KernelSpec::LinearCoregionalization {
            latent_kernels: vec![random_se(rng, d), random_se(rng, d)],
            mixing: (0..2)
                .map(|_| (0..2).map(|_| rng.random_range(0.2..1.5)).collect())
                .collect(),
        }
    }
}

pub fn model(kernel: KernelSpec, noise: Vec<f64>, inference: Inference) -> GpModel {
    GpModel::new(
        kernel,
        GaussianLikelihood::new(noise).unwrap(),
        inference,
        None,
    )
    .unwrap()
}

pub fn se_model(sf2: f64, ls: f64, noise: f64) -> GpModel {
    model(
        KernelSpec::squared_exponential(sf2, vec![ls]),
        vec![noise],
        Inference::Exact,
    )
}

/// Two-output model with identity mixing and identical SE latents.
pub fn identity_lmc(inference: Inference) -> GpModel {
    let latent = KernelSpec::squared_exponential(1.0, vec![0.5]);
    model(
        KernelSpec::LinearCoregionalization {
            latent_kernels: vec![latent.clone(), latent],
            mixing: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        },
        vec![0.1, 0.1],
        inference,
    )
}

pub fn default_inducing() -> InputPoints {
    InputPoints::equispaced(5, 0.0, 1.0).unwrap()
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn max_abs_diff_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Central finite-difference gradient of `f` at `theta`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    (0..theta.len())
        .map(|i| {
            let mut up = theta.to_vec();
            let mut down = theta.to_vec();
            up[i] += h;
            down[i] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

/// Observations drawn from an SE GP at `x`, for marg-check scenarios.
pub fn se_data(seed: u64, x: &InputPoints, sf2: f64, ls: f64, noise: f64) -> DMatrix<f64> {
    use rand_distr::StandardNormal;
    let mut r = rng(seed);
    let spec = KernelSpec::squared_exponential(sf2, vec![ls]);
    let mut k = oracle_cov(&spec, x.matrix(), x.matrix());
    for i in 0..x.len() {
        k[(i, i)] += noise + 1e-10;
    }
    let g = k.cholesky().expect("positive definite").l();
    let z = DVector::from_fn(x.len(), |_, _| r.sample::<f64, _>(StandardNormal));
    let y = g * z;
    DMatrix::from_column_slice(x.len(), 1, y.as_slice())
}
