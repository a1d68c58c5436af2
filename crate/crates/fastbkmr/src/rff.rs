//! Random Fourier feature machinery.
//!
//! Frequencies are drawn from the Gaussian kernel's spectral density
//! N(0, diag(2 theta)); the surface is a trigonometric basis expansion
//! h(x) = sum_j a_j cos(omega_j . x) + b_j sin(omega_j . x). The classical
//! 1/sqrt(J) amplitude scaling is absorbed into Var(a_j) = tau^2 / J.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// J x M matrix whose rows are the sampled frequencies omega_j.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencySet {
    pub omega: DMatrix<f64>,
}

impl FrequencySet {
    pub fn new(omega: DMatrix<f64>) -> Result<Self> {
        if omega.nrows() == 0 {
            return Err(Error::InvalidArgument("frequency set must have J >= 1".into()));
        }
        Ok(Self { omega })
    }

    pub fn num_frequencies(&self) -> usize {
        self.omega.nrows()
    }

    pub fn num_exposures(&self) -> usize {
        self.omega.ncols()
    }
}

/// Random-effect coefficients paired with a [`FrequencySet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Amplitudes {
    pub a: DVector<f64>,
    pub b: DVector<f64>,
}

impl Amplitudes {
    pub fn zeros(j: usize) -> Self {
        Self { a: DVector::zeros(j), b: DVector::zeros(j) }
    }
}

/// Draw J frequencies from N(0, diag(2 theta_1, ..., 2 theta_M)).
///
/// theta_m = 0 degenerates that coordinate to exactly zero, dropping the
/// exposure from the surface.
pub fn sample_frequencies<R: Rng>(theta: &DVector<f64>, j: usize, rng: &mut R) -> Result<FrequencySet> {
    if j == 0 {
        return Err(Error::InvalidArgument("J must be >= 1".into()));
    }
    if theta.iter().any(|&t| !(t >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "theta must be nonnegative, got {:?}",
            theta.as_slice()
        )));
    }
    let sd: Vec<f64> = theta.iter().map(|&t| (2.0 * t).sqrt()).collect();
    let omega = DMatrix::from_fn(j, theta.len(), |_, m| {
        let z: f64 = StandardNormal.sample(rng);
        sd[m] * z
    });
    FrequencySet::new(omega)
}

/// n x 2J basis matrix: columns 1..J are cos(omega_j . x_i), columns
/// J+1..2J are sin(omega_j . x_i).
///
/// The dot products are computed once per (i, j) and shared by the cos and
/// sin halves, keeping the two blocks bit-consistent.
pub fn basis_matrix(x: &DMatrix<f64>, freqs: &FrequencySet) -> Result<DMatrix<f64>> {
    if x.ncols() != freqs.num_exposures() {
        return Err(Error::DimensionMismatch {
            context: "basis_matrix exposures",
            expected: freqs.num_exposures(),
            actual: x.ncols(),
        });
    }
    let n = x.nrows();
    let j = freqs.num_frequencies();
    // args[(i, j)] = omega_j . x_i
    let args = x * freqs.omega.transpose();
    let mut basis = DMatrix::zeros(n, 2 * j);
    for c in 0..j {
        for r in 0..n {
            let (s, cv) = args[(r, c)].sin_cos();
            basis[(r, c)] = cv;
            basis[(r, j + c)] = s;
        }
    }
    Ok(basis)
}

/// Evaluate the surface h at the rows of `x`:
/// h(x_i) = sum_j a_j cos(omega_j . x_i) + b_j sin(omega_j . x_i).
pub fn evaluate_h(x: &DMatrix<f64>, freqs: &FrequencySet, amps: &Amplitudes) -> Result<DVector<f64>> {
    let j = freqs.num_frequencies();
    if amps.a.len() != j || amps.b.len() != j {
        return Err(Error::DimensionMismatch {
            context: "evaluate_h amplitudes",
            expected: j,
            actual: amps.a.len(),
        });
    }
    let basis = basis_matrix(x, freqs)?;
    Ok(evaluate_h_with_basis(&basis, amps))
}

/// Same surface evaluation given a pre-built basis matrix. The sampler uses
/// this to reuse the basis cached for the current frequency set.
pub fn evaluate_h_with_basis(basis: &DMatrix<f64>, amps: &Amplitudes) -> DVector<f64> {
    let j = amps.a.len();
    let n = basis.nrows();
    let mut h = DVector::zeros(n);
    for c in 0..j {
        let (ac, bc) = (amps.a[c], amps.b[c]);
        for r in 0..n {
            h[r] += ac * basis[(r, c)] + bc * basis[(r, j + c)];
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{kernel_value, KernelKind, KernelParams};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_theta_gives_zero_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let theta = DVector::zeros(3);
        let f = sample_frequencies(&theta, 10, &mut rng).unwrap();
        assert!(f.omega.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn j_zero_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let theta = DVector::from_row_slice(&[1.0]);
        assert!(sample_frequencies(&theta, 0, &mut rng).is_err());
    }

    #[test]
    fn frequency_variance_matches_spectral_density() {
        // Sigma = diag(2 theta): theta = 0.5 -> unit variance
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = DVector::from_row_slice(&[0.5]);
        let f = sample_frequencies(&theta, 100_000, &mut rng).unwrap();
        let col = f.omega.column(0);
        let mean = col.sum() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
        assert!((var - 1.0).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn frequency_variances_two_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = DVector::from_row_slice(&[1.0, 4.0]);
        let f = sample_frequencies(&theta, 100_000, &mut rng).unwrap();
        for (m, expect) in [(0usize, 2.0f64), (1, 8.0)] {
            let col = f.omega.column(m);
            let mean = col.sum() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
            assert!((var / expect - 1.0).abs() < 0.02, "col {m} variance {var}");
        }
    }

    #[test]
    fn zero_frequencies_basis() {
        let f = FrequencySet::new(DMatrix::zeros(3, 2)).unwrap();
        let x = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        let b = basis_matrix(&x, &f).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(b[(r, c)], 1.0);
                assert_eq!(b[(r, 3 + c)], 0.0);
            }
        }
    }

    #[test]
    fn origin_point_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = sample_frequencies(&DVector::from_row_slice(&[1.0, 2.0]), 4, &mut rng).unwrap();
        let x = DMatrix::zeros(1, 2);
        let b = basis_matrix(&x, &f).unwrap();
        for c in 0..4 {
            assert_eq!(b[(0, c)], 1.0);
            assert_eq!(b[(0, 4 + c)], 0.0);
        }
    }

    #[test]
    fn quarter_period_basis() {
        // omega . x = pi/2: cos -> 0, sin -> 1
        let f = FrequencySet::new(DMatrix::from_row_slice(1, 2, &[std::f64::consts::PI, 0.0])).unwrap();
        let x = DMatrix::from_row_slice(1, 2, &[0.5, 123.0]);
        let b = basis_matrix(&x, &f).unwrap();
        assert!(b[(0, 0)].abs() < 1e-12);
        assert_relative_eq!(b[(0, 1)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn basis_entries_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = sample_frequencies(&DVector::from_row_slice(&[2.0, 3.0]), 8, &mut rng).unwrap();
        let x = DMatrix::from_fn(20, 2, |_, _| StandardNormal.sample(&mut rng));
        let b = basis_matrix(&x, &f).unwrap();
        assert!(b.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn evaluate_h_zero_amplitudes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = sample_frequencies(&DVector::from_row_slice(&[1.0]), 3, &mut rng).unwrap();
        let x = DMatrix::from_row_slice(2, 1, &[0.1, -0.2]);
        let h = evaluate_h(&x, &f, &Amplitudes::zeros(3)).unwrap();
        assert_eq!(h, DVector::zeros(2));
    }

    #[test]
    fn evaluate_h_constant_surface() {
        // omega = 0: h = a_1 everywhere
        let f = FrequencySet::new(DMatrix::zeros(1, 2)).unwrap();
        let amps = Amplitudes {
            a: DVector::from_row_slice(&[3.0]),
            b: DVector::from_row_slice(&[7.0]),
        };
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, -1.0, 5.0, 2.0]);
        let h = evaluate_h(&x, &f, &amps).unwrap();
        assert_eq!(h, DVector::from_element(3, 3.0));
    }

    #[test]
    fn evaluate_h_matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = sample_frequencies(&DVector::from_row_slice(&[1.0, 0.5]), 5, &mut rng).unwrap();
        let x = DMatrix::from_fn(7, 2, |_, _| StandardNormal.sample(&mut rng));
        let amps = Amplitudes {
            a: DVector::from_fn(5, |_, _| StandardNormal.sample(&mut rng)),
            b: DVector::from_fn(5, |_, _| StandardNormal.sample(&mut rng)),
        };
        let h = evaluate_h(&x, &f, &amps).unwrap();
        // independent oracle: dense product basis * concat(a, b)
        let basis = basis_matrix(&x, &f).unwrap();
        let mut coef = DVector::zeros(10);
        coef.rows_mut(0, 5).copy_from(&amps.a);
        coef.rows_mut(5, 5).copy_from(&amps.b);
        let oracle = basis * coef;
        for i in 0..7 {
            assert_relative_eq!(h[i], oracle[i], epsilon = 1e-12);
        }
    }

    /// Induced covariance given one frequency draw, marginal over (a, b):
    /// (tau2 / J) sum_j cos(omega_j . (x_i - x_k)).
    fn induced_cov(freqs: &FrequencySet, xi: &DVector<f64>, xk: &DVector<f64>, tau2: f64) -> f64 {
        let j = freqs.num_frequencies();
        let delta = xi - xk;
        let mut s = 0.0;
        for r in 0..j {
            let arg: f64 = freqs.omega.row(r).transpose().dot(&delta);
            s += arg.cos();
        }
        tau2 * s / j as f64
    }

    #[test]
    fn induced_covariance_has_kernel_expectation() {
        // MAD of the replicate-mean induced covariance from tau2*K < 0.05 tau2,
        // and the J = 2000 MC variance is strictly below the J = 50 one.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tau2 = 1.7;
        let m = 2;
        let npts = 10;
        let theta = DVector::from_row_slice(&[0.8, 0.4]);
        let x = DMatrix::from_fn(npts, m, |_, _| StandardNormal.sample(&mut rng));
        let params = KernelParams::new(theta.clone(), tau2).unwrap();

        let reps = 500;
        let mut stats = Vec::new();
        for j in [2000usize, 50] {
            let mut mean = DMatrix::<f64>::zeros(npts, npts);
            let mut sq = DMatrix::<f64>::zeros(npts, npts);
            for _ in 0..reps {
                let f = sample_frequencies(&theta, j, &mut rng).unwrap();
                for i in 0..npts {
                    for k in 0..npts {
                        let c = induced_cov(&f, &x.row(i).transpose(), &x.row(k).transpose(), tau2);
                        mean[(i, k)] += c;
                        sq[(i, k)] += c * c;
                    }
                }
            }
            mean /= reps as f64;
            let mut mad = 0.0;
            let mut var_total = 0.0;
            for i in 0..npts {
                for k in 0..npts {
                    let target = tau2
                        * kernel_value(
                            &x.row(i).transpose(),
                            &x.row(k).transpose(),
                            &params,
                            KernelKind::GaussianSquared,
                        )
                        .unwrap();
                    mad += (mean[(i, k)] - target).abs();
                    var_total += sq[(i, k)] / reps as f64 - mean[(i, k)] * mean[(i, k)];
                }
            }
            mad /= (npts * npts) as f64;
            stats.push((j, mad, var_total));
        }
        let (_, mad_2000, var_2000) = stats[0];
        let (_, _, var_50) = stats[1];
        assert!(mad_2000 < 0.05 * tau2, "MAD at J=2000: {mad_2000}");
        assert!(var_2000 < var_50, "variance did not decrease with J: {var_2000} vs {var_50}");
    }

    proptest! {
        #[test]
        fn evaluate_h_linear_in_amplitudes(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = sample_frequencies(&DVector::from_row_slice(&[1.0, 2.0]), 4, &mut rng).unwrap();
            let x = DMatrix::from_fn(5, 2, |_, _| StandardNormal.sample(&mut rng));
            let amps = Amplitudes {
                a: DVector::from_fn(4, |_, _| StandardNormal.sample(&mut rng)),
                b: DVector::from_fn(4, |_, _| StandardNormal.sample(&mut rng)),
            };
            let doubled = Amplitudes { a: &amps.a * 2.0, b: &amps.b * 2.0 };
            let h1 = evaluate_h(&x, &f, &amps).unwrap();
            let h2 = evaluate_h(&x, &f, &doubled).unwrap();
            for i in 0..5 {
                prop_assert_eq!(h2[i], 2.0 * h1[i]);
            }
        }
    }
}
