//! Exact Gaussian-process reference fit at small n.
//!
//! Conditions on fixed hyperparameters (theta, tau^2, sigma^2) and solves
//! the dense GP conditional; used as the brute-force standard the RFF
//! approximation is judged against.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::{cholesky_with_jitter, kernel_matrix, KernelKind, KernelParams};

/// Dense-factorization guard; the oracle is not meant for larger problems.
const MAX_ORACLE_N: usize = 5_000;

/// Conditional mean and pointwise variances of h given the residual.
#[derive(Debug, Clone)]
pub struct GpFit {
    pub h_mean: DVector<f64>,
    pub h_cov_diag: DVector<f64>,
}

/// Exact GP conditional at fixed hyperparameters.
///
/// h_mean = tau^2 K (tau^2 K + sigma^2 I)^-1 resid;
/// h_cov_diag = diag(tau^2 K - tau^2 K (tau^2 K + sigma^2 I)^-1 tau^2 K).
/// `resid` is Y - Z gamma at fixed gamma.
pub fn gp_posterior(
    x: &DMatrix<f64>,
    resid: &DVector<f64>,
    params: &KernelParams,
    sigma2: f64,
    kind: KernelKind,
) -> Result<GpFit> {
    let n = x.nrows();
    if n > MAX_ORACLE_N {
        return Err(Error::InvalidArgument(format!(
            "oracle limited to n <= {MAX_ORACLE_N}, got {n}"
        )));
    }
    if resid.len() != n {
        return Err(Error::DimensionMismatch {
            context: "gp_posterior resid",
            expected: n,
            actual: resid.len(),
        });
    }
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma2 must be positive, got {sigma2}"
        )));
    }
    let k = kernel_matrix(x, params, kind)?;
    let c = &k * params.tau2;
    let mut a = c.clone();
    for i in 0..n {
        a[(i, i)] += sigma2;
    }
    let l = cholesky_with_jitter(&a)?;

    // alpha = A^-1 resid via the two triangular solves.
    let solve = |rhs: &DVector<f64>| -> DVector<f64> {
        let mut v = rhs.clone();
        l.solve_lower_triangular_mut(&mut v);
        l.transpose().solve_upper_triangular_mut(&mut v);
        v
    };
    let alpha = solve(resid);
    let h_mean = &c * &alpha;

    // diag(C - C A^-1 C): column k of A^-1 C solved one at a time.
    let mut h_cov_diag = DVector::zeros(n);
    for col in 0..n {
        let ck = c.column(col).into_owned();
        let s = solve(&ck);
        h_cov_diag[col] = c[(col, col)] - ck.dot(&s);
    }
    if h_cov_diag.iter().any(|&v| v < -1e-10 * params.tau2) {
        return Err(Error::NonFinite("gp_posterior conditional variance"));
    }
    Ok(GpFit { h_mean, h_cov_diag })
}

/// Root mean squared error between an estimate and the truth.
pub fn rmse(estimate: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            context: "rmse",
            expected: truth.len(),
            actual: estimate.len(),
        });
    }
    let n = estimate.len() as f64;
    let ss = estimate
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>();
    Ok((ss / n).sqrt())
}
