//! Stationary kernels, kernel-matrix construction, and exact GP draws.
//!
//! The Gaussian (squared-exponential) kernel is the one the spectral
//! approximation in [`crate::rff`] is derived for; the square-root-absolute
//! and absolute variants exist only so the simulation harness can generate
//! data under a misspecified kernel.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed set of kernel forms. Per-exposure distances are weighted by
/// `theta` and summed before exponentiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    /// exp(-sum theta_m (x_mi - x_mj)^2)
    GaussianSquared,
    /// exp(-sum theta_m sqrt(|x_mi - x_mj|))
    SqrtAbsolute,
    /// exp(-sum theta_m |x_mi - x_mj|)
    Absolute,
}

impl KernelKind {
    fn coordinate_distance(self, diff: f64) -> f64 {
        match self {
            KernelKind::GaussianSquared => diff * diff,
            KernelKind::SqrtAbsolute => diff.abs().sqrt(),
            KernelKind::Absolute => diff.abs(),
        }
    }
}

/// Kernel hyperparameters: per-exposure inverse length-scales and the
/// marginal variance.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    /// theta_m >= 0, one per exposure.
    pub theta: DVector<f64>,
    /// tau^2 > 0.
    pub tau2: f64,
}

impl KernelParams {
    pub fn new(theta: DVector<f64>, tau2: f64) -> Result<Self> {
        if theta.iter().any(|&t| !(t >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "theta must be nonnegative, got {:?}",
                theta.as_slice()
            )));
        }
        if !(tau2 > 0.0) {
            return Err(Error::InvalidArgument(format!("tau2 must be positive, got {tau2}")));
        }
        Ok(Self { theta, tau2 })
    }
}

/// Kernel correlation between two exposure profiles. Always in (0, 1],
/// exactly 1 at zero distance.
pub fn kernel_value(
    xi: &DVector<f64>,
    xj: &DVector<f64>,
    params: &KernelParams,
    kind: KernelKind,
) -> Result<f64> {
    if xi.len() != xj.len() {
        return Err(Error::DimensionMismatch {
            context: "kernel_value profiles",
            expected: xi.len(),
            actual: xj.len(),
        });
    }
    if xi.len() != params.theta.len() {
        return Err(Error::DimensionMismatch {
            context: "kernel_value theta",
            expected: xi.len(),
            actual: params.theta.len(),
        });
    }
    let mut sum = 0.0;
    for m in 0..xi.len() {
        sum += params.theta[m] * kind.coordinate_distance(xi[m] - xj[m]);
    }
    Ok((-sum).exp())
}

/// Kernel matrix with entry (i, j) = kernel_value(row i, row j). Symmetric
/// with unit diagonal. Rows of `x` are exposure profiles.
pub fn kernel_matrix(x: &DMatrix<f64>, params: &KernelParams, kind: KernelKind) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    if x.ncols() != params.theta.len() {
        return Err(Error::DimensionMismatch {
            context: "kernel_matrix theta",
            expected: x.ncols(),
            actual: params.theta.len(),
        });
    }
    let mut k = DMatrix::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut sum = 0.0;
            for m in 0..x.ncols() {
                sum += params.theta[m] * kind.coordinate_distance(x[(i, m)] - x[(j, m)]);
            }
            let v = (-sum).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Initial jitter is relative to the mean diagonal; escalation stops at an
/// absolute scale of 1e-4 times the mean diagonal.
const JITTER_START_REL: f64 = 1e-10;
const JITTER_MAX_REL: f64 = 1e-4;

/// Cholesky of a symmetric PSD matrix, adding `jitter * mean_diag` to the
/// diagonal and escalating x10 on failure. Shared by GP sampling and the
/// exact-GP oracle.
pub fn cholesky_with_jitter(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mean_diag = a.diagonal().sum() / n as f64;
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol.unpack());
    }
    let mut jitter = JITTER_START_REL * mean_diag;
    let max_jitter = JITTER_MAX_REL * mean_diag;
    while jitter <= max_jitter {
        let mut aj = a.clone();
        for i in 0..n {
            aj[(i, i)] += jitter;
        }
        if let Some(chol) = aj.cholesky() {
            return Ok(chol.unpack());
        }
        jitter *= 10.0;
    }
    Err(Error::FactorizationFailed { final_jitter: max_jitter })
}

/// Mean-zero multivariate normal draw with covariance `tau2 * K`.
///
/// `k` must be symmetric with unit diagonal. A zero `tau2` short-circuits to
/// the zero vector (the covariance is degenerate but well-defined).
pub fn sample_gp<R: Rng>(k: &DMatrix<f64>, tau2: f64, rng: &mut R) -> Result<DVector<f64>> {
    let n = k.nrows();
    if tau2 == 0.0 {
        return Ok(DVector::zeros(n));
    }
    let l = cholesky_with_jitter(k)?;
    let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    Ok(l * z * tau2.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(theta: &[f64]) -> KernelParams {
        KernelParams::new(DVector::from_row_slice(theta), 1.0).unwrap()
    }

    #[test]
    fn identical_points_give_one() {
        let x = DVector::from_row_slice(&[1.3, -0.7]);
        for kind in [KernelKind::GaussianSquared, KernelKind::SqrtAbsolute, KernelKind::Absolute] {
            let v = kernel_value(&x, &x, &params(&[2.0, 0.5]), kind).unwrap();
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn zero_theta_gives_one() {
        let xi = DVector::from_row_slice(&[5.0, -2.0]);
        let xj = DVector::from_row_slice(&[-1.0, 9.0]);
        let v = kernel_value(&xi, &xj, &params(&[0.0, 0.0]), KernelKind::GaussianSquared).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn gaussian_unit_distance() {
        // exp(-1) for theta = 1, |xi - xj| = 1
        let xi = DVector::from_row_slice(&[0.0]);
        let xj = DVector::from_row_slice(&[1.0]);
        let v = kernel_value(&xi, &xj, &params(&[1.0]), KernelKind::GaussianSquared).unwrap();
        assert_relative_eq!(v, (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let xi = DVector::from_row_slice(&[0.0, 1.0]);
        let xj = DVector::from_row_slice(&[0.0]);
        let err = kernel_value(&xi, &xj, &params(&[1.0, 1.0]), KernelKind::Absolute).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 2, actual: 1, .. }));
    }

    #[test]
    fn matrix_single_row() {
        let x = DMatrix::from_row_slice(1, 2, &[0.3, -0.4]);
        let k = kernel_matrix(&x, &params(&[1.0, 1.0]), KernelKind::GaussianSquared).unwrap();
        assert_eq!(k, DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn matrix_identical_rows() {
        let x = DMatrix::from_row_slice(2, 2, &[0.3, -0.4, 0.3, -0.4]);
        let k = kernel_matrix(&x, &params(&[1.0, 2.0]), KernelKind::Absolute).unwrap();
        assert_eq!(k, DMatrix::from_element(2, 2, 1.0));
    }

    #[test]
    fn matrix_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = DMatrix::from_fn(3, 2, |_, _| StandardNormal.sample(&mut rng));
        let k = kernel_matrix(&x, &params(&[0.5, 0.5]), KernelKind::GaussianSquared).unwrap();
        assert_eq!(k, k.transpose());
        let eig = k.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-8));
    }

    #[test]
    fn gaussian_kernel_psd_random_instances() {
        // PSD up to n = 50 across several seeds and thetas
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 10 + (seed as usize) * 10;
            let x = DMatrix::from_fn(n, 3, |_, _| StandardNormal.sample(&mut rng));
            let theta = DVector::from_fn(3, |_, _| rng.gen::<f64>() * 2.0);
            let p = KernelParams::new(theta, 1.0).unwrap();
            let k = kernel_matrix(&x, &p, KernelKind::GaussianSquared).unwrap();
            let eig = k.symmetric_eigen();
            assert!(
                eig.eigenvalues.iter().all(|&e| e >= -1e-8),
                "negative eigenvalue at n={n}"
            );
        }
    }

    #[test]
    fn sample_gp_zero_tau2() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = DMatrix::identity(4, 4);
        let h = sample_gp(&k, 0.0, &mut rng).unwrap();
        assert_eq!(h, DVector::zeros(4));
    }

    #[test]
    fn sample_gp_identity_variances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = DMatrix::identity(3, 3);
        let reps = 10_000;
        let mut sums = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for _ in 0..reps {
            let h = sample_gp(&k, 1.0, &mut rng).unwrap();
            for i in 0..3 {
                sums[i] += h[i];
                sq[i] += h[i] * h[i];
            }
        }
        for i in 0..3 {
            let mean = sums[i] / reps as f64;
            let var = sq[i] / reps as f64 - mean * mean;
            assert!((var - 1.0).abs() < 0.05, "component {i} variance {var}");
        }
    }

    #[test]
    fn sample_gp_correlated_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut k = DMatrix::from_element(3, 3, 0.9);
        k.fill_diagonal(1.0);
        let reps = 10_000;
        let (mut s0, mut s1, mut s01, mut q0, mut q1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..reps {
            let h = sample_gp(&k, 1.0, &mut rng).unwrap();
            s0 += h[0];
            s1 += h[1];
            s01 += h[0] * h[1];
            q0 += h[0] * h[0];
            q1 += h[1] * h[1];
        }
        let n = reps as f64;
        let (m0, m1) = (s0 / n, s1 / n);
        let cov = s01 / n - m0 * m1;
        let v0 = q0 / n - m0 * m0;
        let v1 = q1 / n - m1 * m1;
        let corr = cov / (v0 * v1).sqrt();
        assert!((corr - 0.9).abs() < 0.02, "empirical correlation {corr}");
    }

    #[test]
    fn sample_gp_covariance_converges() {
        // empirical covariance within 3 MC standard errors of tau2 * K
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(4, 2, |_, _| StandardNormal.sample(&mut rng));
        let p = KernelParams::new(DVector::from_row_slice(&[0.3, 0.6]), 2.0).unwrap();
        let k = kernel_matrix(&x, &p, KernelKind::GaussianSquared).unwrap();
        let reps = 10_000;
        let mut acc = DMatrix::zeros(4, 4);
        for _ in 0..reps {
            let h = sample_gp(&k, p.tau2, &mut rng).unwrap();
            acc += &h * h.transpose();
        }
        let emp = acc / reps as f64;
        for i in 0..4 {
            for j in 0..4 {
                let target = p.tau2 * k[(i, j)];
                // Var(h_i h_j) = tau2^2 (K_ii K_jj + K_ij^2)
                let se = (p.tau2 * p.tau2 * (k[(i, i)] * k[(j, j)] + k[(i, j)] * k[(i, j)])
                    / reps as f64)
                    .sqrt();
                assert!(
                    (emp[(i, j)] - target).abs() < 3.0 * se,
                    "entry ({i},{j}): {} vs {target}, se {se}",
                    emp[(i, j)]
                );
            }
        }
    }

    #[test]
    fn jitter_rescues_singular_matrix() {
        // two identical rows make K exactly singular
        let x = DMatrix::from_row_slice(3, 1, &[0.5, 0.5, -1.0]);
        let p = params(&[1.0]);
        let k = kernel_matrix(&x, &p, KernelKind::GaussianSquared).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = sample_gp(&k, 1.0, &mut rng).unwrap();
        assert!(h.iter().all(|v| v.is_finite()));
    }

    proptest! {
        #[test]
        fn kernel_value_symmetric(
            a in proptest::collection::vec(-5.0f64..5.0, 3),
            b in proptest::collection::vec(-5.0f64..5.0, 3),
            t in proptest::collection::vec(0.0f64..3.0, 3),
        ) {
            let xi = DVector::from_vec(a);
            let xj = DVector::from_vec(b);
            let p = KernelParams::new(DVector::from_vec(t), 1.0).unwrap();
            for kind in [KernelKind::GaussianSquared, KernelKind::SqrtAbsolute, KernelKind::Absolute] {
                let v1 = kernel_value(&xi, &xj, &p, kind).unwrap();
                let v2 = kernel_value(&xj, &xi, &p, kind).unwrap();
                prop_assert_eq!(v1, v2);
            }
        }

        #[test]
        fn kernel_value_monotone_in_distance(
            base in proptest::collection::vec(-3.0f64..3.0, 2),
            d1 in 0.0f64..2.0,
            extra in 0.01f64..2.0,
            t in proptest::collection::vec(0.01f64..2.0, 2),
        ) {
            let xi = DVector::from_vec(base.clone());
            let mut near = base.clone();
            near[0] += d1;
            let mut far = base;
            far[0] += d1 + extra;
            let p = KernelParams::new(DVector::from_vec(t), 1.0).unwrap();
            for kind in [KernelKind::GaussianSquared, KernelKind::SqrtAbsolute, KernelKind::Absolute] {
                let vn = kernel_value(&xi, &DVector::from_vec(near.clone()), &p, kind).unwrap();
                let vf = kernel_value(&xi, &DVector::from_vec(far.clone()), &p, kind).unwrap();
                prop_assert!(vf <= vn + 1e-15);
            }
        }
    }
}
