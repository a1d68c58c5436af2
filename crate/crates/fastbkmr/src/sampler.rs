//! The Fast BKMR MCMC engine.
//!
//! Each iteration performs, in order: inverse-Gamma Gibbs updates for the
//! kernel parameters theta, an HMC block update of the regression
//! coefficients (gamma, a, b), an HMC block update of the frequencies
//! omega, Gibbs updates for tau^2 and sigma^2, and finally records the
//! fitted surface h. Step sizes are tuned toward a 65-85% acceptance rate
//! every `tune_interval` iterations during burn-in; the retained sample is
//! the second half of the chain.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rff::{basis_matrix, evaluate_h_with_basis, sample_frequencies, Amplitudes, FrequencySet};
use crate::simulation::Dataset;

/// Prior hyperparameters. The inverse-Gamma shape/rate default to 0.001;
/// the Gaussian prior on gamma uses a large variance as a numerically flat
/// improper-prior stand-in.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Priors {
    pub sigma_gamma2: f64,
    pub ig_shape: f64,
    pub ig_rate: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Self { sigma_gamma2: 1e6, ig_shape: 0.001, ig_rate: 0.001 }
    }
}

/// Which full conditional the theta Gibbs step draws from.
///
/// `ConjugatePerDimension` is the exact Gibbs kernel for
/// omega_jm ~ N(0, 2 theta_m): IG(shape + J/2, rate + sum_j omega_jm^2 / 4)
/// per dimension. `Verbatim` uses a single shared rate term
/// rate + sum_j |omega_j|^2 / 2 for every dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaUpdate {
    ConjugatePerDimension,
    Verbatim,
}

impl Default for ThetaUpdate {
    fn default() -> Self {
        ThetaUpdate::ConjugatePerDimension
    }
}

/// HMC tuning knobs for the two block updates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HmcConfig {
    /// Initial step size for the (gamma, a, b) block.
    pub e_beta: f64,
    /// Initial step size for the omega block.
    pub e_omega: f64,
    /// Leapfrog steps per proposal.
    pub l_steps: usize,
    /// Multiplicative tuning rate in [0, 1].
    pub e_t: f64,
    /// Acceptance is checked every this many iterations during burn-in.
    pub tune_interval: usize,
    pub accept_low: f64,
    pub accept_high: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            e_beta: 0.01,
            e_omega: 0.01,
            l_steps: 10,
            e_t: 0.1,
            tune_interval: 200,
            accept_low: 0.65,
            accept_high: 0.85,
        }
    }
}

/// All sampled parameters at one MCMC iteration.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub gamma: DVector<f64>,
    pub amps: Amplitudes,
    pub freqs: FrequencySet,
    pub theta: DVector<f64>,
    pub tau2: f64,
    pub sigma2: f64,
}

/// One retained draw: the model state plus the fitted surface at the
/// training rows.
#[derive(Debug, Clone)]
pub struct Draw {
    pub state: ModelState,
    pub h: DVector<f64>,
}

/// Proposal/acceptance counters for one HMC block.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct BlockStats {
    pub proposals: usize,
    pub accepted: usize,
    pub divergences: usize,
}

impl BlockStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }
}

/// Retained post-burn-in draws plus chain diagnostics.
#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    pub draws: Vec<Draw>,
    /// Iteration index where burn-in ends (first retained iteration).
    pub burn_in: usize,
    /// Post-burn-in counters for the coefficient block.
    pub theta_block: BlockStats,
    /// Post-burn-in counters for the frequency block.
    pub omega_block: BlockStats,
    pub final_e_beta: f64,
    pub final_e_omega: f64,
    pub warnings: Vec<String>,
}

impl PosteriorSamples {
    pub fn num_draws(&self) -> usize {
        self.draws.len()
    }

    /// Posterior mean of the fitted surface at the training rows.
    pub fn posterior_mean_h(&self) -> DVector<f64> {
        let n = self.draws[0].h.len();
        let mut acc = DVector::zeros(n);
        for d in &self.draws {
            acc += &d.h;
        }
        acc / self.draws.len() as f64
    }
}

/// Everything `run_chain` needs beyond the data.
#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub j: usize,
    /// Total iterations; must be even so the halves split cleanly.
    pub k_total: usize,
    pub priors: Priors,
    pub hmc: HmcConfig,
    pub theta_update: ThetaUpdate,
    /// Initial kernel parameters; defaults to 1 / (2 Var(x_m)) per exposure.
    pub theta0: Option<DVector<f64>>,
    /// Initial frequencies (J x M); defaults to a draw from N(0, diag(2 theta0)).
    /// Useful for warm starts, e.g. frequencies taken from a pilot fit with a
    /// smaller basis.
    pub omega0: Option<DMatrix<f64>>,
    pub seed: u64,
}

/// Default theta initialization: unit length-scale on standardized
/// exposures, i.e. theta_m = 1 / (2 Var(x_m)), clamped away from zero.
pub fn default_theta0(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_fn(x.ncols(), |m, _| {
        let col = x.column(m);
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if var > 0.0 {
            (1.0 / (2.0 * var)).max(1e-8)
        } else {
            1e-8
        }
    })
}

/// [Z | cos | sin] design matrix for the coefficient block.
pub fn build_design(z: &DMatrix<f64>, basis: &DMatrix<f64>) -> DMatrix<f64> {
    let n = z.nrows();
    let mut b = DMatrix::zeros(n, z.ncols() + basis.ncols());
    b.view_mut((0, 0), (n, z.ncols())).copy_from(z);
    b.view_mut((0, z.ncols()), (n, basis.ncols())).copy_from(basis);
    b
}

/// Diagonal of S^{-1}: 1/sigma_gamma2 for the P gamma entries, J/tau2 for
/// the 2J amplitude entries.
pub fn s_inv_diag(p: usize, j: usize, sigma_gamma2: f64, tau2: f64) -> DVector<f64> {
    let mut d = DVector::zeros(p + 2 * j);
    for i in 0..p {
        d[i] = 1.0 / sigma_gamma2;
    }
    for i in p..(p + 2 * j) {
        d[i] = j as f64 / tau2;
    }
    d
}

fn pack_theta_block(state: &ModelState) -> DVector<f64> {
    let p = state.gamma.len();
    let j = state.amps.a.len();
    let mut v = DVector::zeros(p + 2 * j);
    v.rows_mut(0, p).copy_from(&state.gamma);
    v.rows_mut(p, j).copy_from(&state.amps.a);
    v.rows_mut(p + j, j).copy_from(&state.amps.b);
    v
}

fn unpack_theta_block(v: &DVector<f64>, p: usize, j: usize) -> (DVector<f64>, Amplitudes) {
    let gamma = v.rows(0, p).into_owned();
    let a = v.rows(p, j).into_owned();
    let b = v.rows(p + j, j).into_owned();
    (gamma, Amplitudes { a, b })
}

// ---------------------------------------------------------------------------
// Block log-densities and gradients
// ---------------------------------------------------------------------------

/// Coefficient-block target at fixed (omega, tau2, sigma2):
/// L(Theta) = -(1/2 sigma^2) |Y - B Theta|^2 - (1/2) Theta' S^{-1} Theta.
pub struct ThetaBlockTarget<'a> {
    pub design: &'a DMatrix<f64>,
    pub y: &'a DVector<f64>,
    pub sigma2: f64,
    pub s_inv: DVector<f64>,
}

impl ThetaBlockTarget<'_> {
    pub fn log_density(&self, pos: &DVector<f64>) -> f64 {
        let resid = self.y - self.design * pos;
        let penalty: f64 = pos.iter().zip(self.s_inv.iter()).map(|(t, s)| t * t * s).sum();
        -resid.norm_squared() / (2.0 * self.sigma2) - 0.5 * penalty
    }

    pub fn grad(&self, pos: &DVector<f64>) -> DVector<f64> {
        let resid = self.y - self.design * pos;
        let mut g = self.design.transpose() * resid / self.sigma2;
        for i in 0..g.len() {
            g[i] -= self.s_inv[i] * pos[i];
        }
        g
    }
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma2 must be positive, got {sigma2}")));
    }
    Ok(())
}

// The public per-state wrappers rebuild the design; the chain caches it.
fn theta_block_design(state: &ModelState, data: &Dataset, priors: &Priors) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_sigma2(state.sigma2)?;
    let basis = basis_matrix(&data.x, &state.freqs)?;
    let design = build_design(&data.z, &basis);
    let s_inv = s_inv_diag(data.z.ncols(), state.freqs.num_frequencies(), priors.sigma_gamma2, state.tau2);
    Ok((design, s_inv))
}

/// Coefficient-block log-density at the state's own position.
pub fn log_density_theta_block(state: &ModelState, data: &Dataset, priors: &Priors) -> Result<f64> {
    let (design, s_inv) = theta_block_design(state, data, priors)?;
    let target = ThetaBlockTarget { design: &design, y: &data.y, sigma2: state.sigma2, s_inv };
    Ok(target.log_density(&pack_theta_block(state)))
}

/// Analytic gradient of [`log_density_theta_block`] with respect to
/// (gamma, a, b).
pub fn grad_theta_block(state: &ModelState, data: &Dataset, priors: &Priors) -> Result<DVector<f64>> {
    let (design, s_inv) = theta_block_design(state, data, priors)?;
    let target = ThetaBlockTarget { design: &design, y: &data.y, sigma2: state.sigma2, s_inv };
    Ok(target.grad(&pack_theta_block(state)))
}

/// Frequency-block target at fixed (gamma, a, b, theta, sigma2). The
/// position is the J x M frequency matrix flattened row-major.
pub struct OmegaBlockTarget<'a> {
    pub x: &'a DMatrix<f64>,
    /// Y - Z gamma, fixed within the block.
    pub y_minus_zg: DVector<f64>,
    pub amps: &'a Amplitudes,
    /// 1 / (2 theta_m) per exposure.
    pub sigma_inv: DVector<f64>,
    pub sigma2: f64,
}

impl OmegaBlockTarget<'_> {
    fn dims(&self) -> (usize, usize, usize) {
        (self.x.nrows(), self.amps.a.len(), self.x.ncols())
    }

    fn unflatten(&self, pos: &DVector<f64>) -> DMatrix<f64> {
        let (_, j, m) = self.dims();
        DMatrix::from_fn(j, m, |r, c| pos[r * m + c])
    }

    pub fn log_density(&self, pos: &DVector<f64>) -> f64 {
        let (n, j, m) = self.dims();
        let omega = self.unflatten(pos);
        let args = self.x * omega.transpose();
        let mut resid = self.y_minus_zg.clone();
        for c in 0..j {
            let (ac, bc) = (self.amps.a[c], self.amps.b[c]);
            for r in 0..n {
                let (s, cv) = args[(r, c)].sin_cos();
                resid[r] -= ac * cv + bc * s;
            }
        }
        let mut penalty = 0.0;
        for r in 0..j {
            for c in 0..m {
                penalty += omega[(r, c)] * omega[(r, c)] * self.sigma_inv[c];
            }
        }
        -resid.norm_squared() / (2.0 * self.sigma2) - 0.5 * penalty
    }

    pub fn grad(&self, pos: &DVector<f64>) -> DVector<f64> {
        let (n, j, m) = self.dims();
        let omega = self.unflatten(pos);
        let args = self.x * omega.transpose();
        // residual R and D = B_sin * a - B_cos * b (columnwise)
        let mut resid = self.y_minus_zg.clone();
        let mut d = DMatrix::zeros(n, j);
        for c in 0..j {
            let (ac, bc) = (self.amps.a[c], self.amps.b[c]);
            for r in 0..n {
                let (s, cv) = args[(r, c)].sin_cos();
                resid[r] -= ac * cv + bc * s;
                d[(r, c)] = s * ac - cv * bc;
            }
        }
        // grad_jm = -(1/sigma2) sum_i D_ij R_i x_im - omega_jm / (2 theta_m)
        let mut xr = self.x.clone();
        for r in 0..n {
            let s = resid[r];
            for c in 0..m {
                xr[(r, c)] *= s;
            }
        }
        let data_term = d.transpose() * xr;
        let mut g = DVector::zeros(j * m);
        for r in 0..j {
            for c in 0..m {
                g[r * m + c] =
                    -data_term[(r, c)] / self.sigma2 - omega[(r, c)] * self.sigma_inv[c];
            }
        }
        g
    }
}

fn omega_block_target<'a>(state: &'a ModelState, data: &'a Dataset) -> Result<OmegaBlockTarget<'a>> {
    check_sigma2(state.sigma2)?;
    let m = state.theta.len();
    let mut sigma_inv = DVector::zeros(m);
    for c in 0..m {
        if state.theta[c] == 0.0 {
            if state.freqs.omega.column(c).iter().any(|&v| v != 0.0) {
                return Err(Error::DegenerateSpectralDensity { index: c });
            }
            sigma_inv[c] = 0.0;
        } else {
            sigma_inv[c] = 1.0 / (2.0 * state.theta[c]);
        }
    }
    Ok(OmegaBlockTarget {
        x: &data.x,
        y_minus_zg: &data.y - &data.z * &state.gamma,
        amps: &state.amps,
        sigma_inv,
        sigma2: state.sigma2,
    })
}

fn flatten_omega(omega: &DMatrix<f64>) -> DVector<f64> {
    let (j, m) = (omega.nrows(), omega.ncols());
    DVector::from_fn(j * m, |i, _| omega[(i / m, i % m)])
}

/// Frequency-block log-density at the state's own frequencies.
pub fn log_density_omega_block(state: &ModelState, data: &Dataset, _priors: &Priors) -> Result<f64> {
    let target = omega_block_target(state, data)?;
    Ok(target.log_density(&flatten_omega(&state.freqs.omega)))
}

/// Analytic gradient of [`log_density_omega_block`] as a J x M matrix.
pub fn grad_omega_block(state: &ModelState, data: &Dataset, _priors: &Priors) -> Result<DMatrix<f64>> {
    let target = omega_block_target(state, data)?;
    let g = target.grad(&flatten_omega(&state.freqs.omega));
    let (j, m) = (state.freqs.num_frequencies(), state.freqs.num_exposures());
    Ok(DMatrix::from_fn(j, m, |r, c| g[r * m + c]))
}

// ---------------------------------------------------------------------------
// Leapfrog / HMC
// ---------------------------------------------------------------------------

/// Half-kick / drift / half-kick leapfrog integrator, `n_steps` times.
///
/// Errors with the step index if the gradient or position goes non-finite.
pub fn leapfrog<G>(
    position: &DVector<f64>,
    momentum: &DVector<f64>,
    e: f64,
    n_steps: usize,
    grad: G,
) -> Result<(DVector<f64>, DVector<f64>)>
where
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut q = position.clone();
    let mut r = momentum.clone();
    let check = |v: &DVector<f64>, what: &'static str, step: usize| -> Result<()> {
        if v.iter().any(|x| !x.is_finite()) {
            Err(Error::LeapfrogDivergence { step, what })
        } else {
            Ok(())
        }
    };
    for step in 0..n_steps {
        let g = grad(&q);
        check(&g, "gradient", step)?;
        r += g * (e / 2.0);
        q += &r * e;
        check(&q, "position", step)?;
        let g = grad(&q);
        check(&g, "gradient", step)?;
        r += g * (e / 2.0);
    }
    Ok((q, r))
}

/// Outcome of one HMC proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HmcOutcome {
    Accepted,
    Rejected,
    /// Non-finite trajectory; counted separately from ordinary rejections.
    Divergent,
}

/// One HMC update of a block: leapfrog proposal with momentum negation and
/// Metropolis acceptance.
pub fn hmc_update<LD, G, R>(
    block: &DVector<f64>,
    log_density: LD,
    grad: G,
    e: f64,
    l: usize,
    rng: &mut R,
) -> (DVector<f64>, HmcOutcome)
where
    LD: Fn(&DVector<f64>) -> f64,
    G: Fn(&DVector<f64>) -> DVector<f64>,
    R: Rng,
{
    let momentum = DVector::from_fn(block.len(), |_, _| StandardNormal.sample(rng));
    let u: f64 = rng.gen();
    let (proposal, new_momentum) = match leapfrog(block, &momentum, e, l, &grad) {
        Ok(qr) => qr,
        Err(_) => return (block.clone(), HmcOutcome::Divergent),
    };
    let current_energy = log_density(block) - 0.5 * momentum.norm_squared();
    let proposal_energy = log_density(&proposal) - 0.5 * new_momentum.norm_squared();
    if !proposal_energy.is_finite() {
        return (block.clone(), HmcOutcome::Divergent);
    }
    let log_alpha = proposal_energy - current_energy;
    if log_alpha >= 0.0 || u.ln() < log_alpha {
        // momentum is negated on acceptance; it is discarded afterwards
        (proposal, HmcOutcome::Accepted)
    } else {
        (block.clone(), HmcOutcome::Rejected)
    }
}

/// Step-size adjustment rule: grow by (1 + e_t) above the band, shrink by
/// (1 - e_t) below it, otherwise leave unchanged.
pub fn tune_step_size(e: f64, acceptance_rate: f64, e_t: f64, band: (f64, f64)) -> f64 {
    let (low, high) = band;
    if acceptance_rate > high {
        e * (1.0 + e_t)
    } else if acceptance_rate < low {
        e * (1.0 - e_t)
    } else {
        e
    }
}

// ---------------------------------------------------------------------------
// Gibbs conjugate updates
// ---------------------------------------------------------------------------

fn sample_inverse_gamma<R: Rng>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    // 1 / Gamma(shape, rate) with rand_distr's (shape, scale) convention
    let g = Gamma::new(shape, 1.0 / rate).expect("valid gamma parameters");
    1.0 / g.sample(rng)
}

/// (shape, rate) of each theta_m full conditional; exposed so tests can
/// verify parameters rather than draws.
pub fn theta_full_conditional(
    freqs: &FrequencySet,
    priors: &Priors,
    mode: ThetaUpdate,
) -> Vec<(f64, f64)> {
    let j = freqs.num_frequencies() as f64;
    let shape = priors.ig_shape + j / 2.0;
    match mode {
        ThetaUpdate::ConjugatePerDimension => (0..freqs.num_exposures())
            .map(|m| {
                let ss: f64 = freqs.omega.column(m).iter().map(|v| v * v).sum();
                (shape, priors.ig_rate + 0.25 * ss)
            })
            .collect(),
        ThetaUpdate::Verbatim => {
            let ss: f64 = freqs.omega.iter().map(|v| v * v).sum();
            let rate = priors.ig_rate + 0.5 * ss;
            vec![(shape, rate); freqs.num_exposures()]
        }
    }
}

/// Gibbs draw of theta from its inverse-Gamma full conditionals.
pub fn gibbs_theta<R: Rng>(
    freqs: &FrequencySet,
    priors: &Priors,
    mode: ThetaUpdate,
    rng: &mut R,
) -> DVector<f64> {
    let params = theta_full_conditional(freqs, priors, mode);
    DVector::from_fn(params.len(), |m, _| {
        let (shape, rate) = params[m];
        sample_inverse_gamma(shape, rate, rng)
    })
}

/// (shape, rate) of the tau^2/J full conditional.
pub fn tau2_full_conditional(amps: &Amplitudes, priors: &Priors) -> (f64, f64) {
    let j = amps.a.len() as f64;
    let ss: f64 = amps.a.iter().chain(amps.b.iter()).map(|v| v * v).sum();
    (priors.ig_shape + j, priors.ig_rate + 0.5 * ss)
}

/// Gibbs draw of tau^2: tau^2/J from its inverse-Gamma full conditional,
/// rescaled by J.
pub fn gibbs_tau2<R: Rng>(amps: &Amplitudes, j: usize, priors: &Priors, rng: &mut R) -> f64 {
    let (shape, rate) = tau2_full_conditional(amps, priors);
    j as f64 * sample_inverse_gamma(shape, rate, rng)
}

/// (shape, rate) of the sigma^2 full conditional.
pub fn sigma2_full_conditional(residuals: &DVector<f64>, priors: &Priors) -> (f64, f64) {
    let n = residuals.len() as f64;
    (priors.ig_shape + n / 2.0, priors.ig_rate + 0.5 * residuals.norm_squared())
}

/// Gibbs draw of sigma^2 from its inverse-Gamma full conditional.
pub fn gibbs_sigma2<R: Rng>(residuals: &DVector<f64>, priors: &Priors, rng: &mut R) -> f64 {
    let (shape, rate) = sigma2_full_conditional(residuals, priors);
    sample_inverse_gamma(shape, rate, rng)
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Ridge-penalized least-squares initialization.
///
/// Frequencies are sampled from the spectral density at `theta0`; the
/// coefficients solve the penalized normal equations with penalty
/// diag(1/sigma_gamma2, ..., J/tau2_0, ...); sigma2_0 is the residual mean
/// square and tau2_0 = Var(Y) - sigma2_0, floored at 0.1 Var(Y).
pub fn initialize<R: Rng>(
    data: &Dataset,
    theta0: &DVector<f64>,
    j: usize,
    priors: &Priors,
    rng: &mut R,
) -> Result<ModelState> {
    let theta0 = DVector::from_fn(theta0.len(), |m, _| theta0[m].max(1e-8));
    let freqs = sample_frequencies(&theta0, j, rng)?;
    initialize_with_frequencies(data, &theta0, freqs, priors)
}

/// Like [`initialize`] but with the initial frequencies supplied by the
/// caller (warm start) instead of drawn from the spectral density.
pub fn initialize_with_frequencies(
    data: &Dataset,
    theta0: &DVector<f64>,
    freqs: FrequencySet,
    priors: &Priors,
) -> Result<ModelState> {
    let n = data.y.len();
    let p = data.z.ncols();
    let j = freqs.omega.nrows();
    if freqs.omega.ncols() != data.x.ncols() {
        return Err(Error::DimensionMismatch {
            context: "initial frequency columns",
            expected: data.x.ncols(),
            actual: freqs.omega.ncols(),
        });
    }
    let theta0 = DVector::from_fn(theta0.len(), |m, _| theta0[m].max(1e-8));
    let basis = basis_matrix(&data.x, &freqs)?;
    let design = build_design(&data.z, &basis);

    let y_mean = data.y.sum() / n as f64;
    let var_y = data.y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>() / n as f64;
    let var_y = if var_y > 0.0 { var_y } else { 1.0 };

    // Solve the penalized normal equations, starting from a provisional
    // 50/50 variance split and refining (sigma^2, tau^2) from the residuals
    // so the final penalty weights match the fitted noise level.
    let gram = design.transpose() * &design;
    let rhs = design.transpose() * &data.y;
    let mut sigma2_0 = 0.5 * var_y;
    let mut tau2_0 = (0.5 * var_y).max(0.1 * var_y);
    let mut coef = DVector::zeros(p + 2 * j);
    for _ in 0..2 {
        let s_inv = s_inv_diag(p, j, priors.sigma_gamma2, tau2_0);
        // (B'B + sigma2 S^{-1}) Theta = B'Y
        let mut normal = gram.clone();
        for i in 0..(p + 2 * j) {
            normal[(i, i)] += sigma2_0 * s_inv[i];
        }
        let chol = normal
            .cholesky()
            .ok_or(Error::FactorizationFailed { final_jitter: 0.0 })?;
        coef = chol.solve(&rhs);
        let resid = &data.y - &design * &coef;
        sigma2_0 = (resid.norm_squared() / n as f64).max(1e-300);
        tau2_0 = (var_y - sigma2_0).max(0.1 * var_y);
    }

    let (gamma, amps) = unpack_theta_block(&coef, p, j);
    Ok(ModelState { gamma, amps, freqs, theta: theta0, tau2: tau2_0, sigma2: sigma2_0 })
}

// ---------------------------------------------------------------------------
// The chain
// ---------------------------------------------------------------------------

/// Run the full Gibbs/HMC chain and return the retained second half.
pub fn run_chain(data: &Dataset, config: &ChainConfig) -> Result<PosteriorSamples> {
    if config.k_total == 0 || config.k_total % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "total iterations must be even and positive, got {}",
            config.k_total
        )));
    }
    if config.j == 0 {
        return Err(Error::InvalidArgument("J must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let theta0 = config.theta0.clone().unwrap_or_else(|| default_theta0(&data.x));
    if theta0.len() != data.x.ncols() {
        return Err(Error::DimensionMismatch {
            context: "run_chain theta0",
            expected: data.x.ncols(),
            actual: theta0.len(),
        });
    }
    let priors = config.priors;
    let mut state = match &config.omega0 {
        Some(freqs) => {
            if freqs.nrows() != config.j {
                return Err(Error::DimensionMismatch {
                    context: "run_chain omega0 rows",
                    expected: config.j,
                    actual: freqs.nrows(),
                });
            }
            initialize_with_frequencies(data, &theta0, FrequencySet::new(freqs.clone())?, &priors)?
        }
        None => initialize(data, &theta0, config.j, &priors, &mut rng)?,
    };

    let p = data.z.ncols();
    let j = config.j;
    let m = data.x.ncols();
    let k_total = config.k_total;
    let burn_in = k_total / 2;
    let hmc = config.hmc;

    let mut basis = basis_matrix(&data.x, &state.freqs)?;
    let mut design = build_design(&data.z, &basis);

    let mut e_beta = hmc.e_beta;
    let mut e_omega = hmc.e_omega;
    let mut interval_theta = BlockStats::default();
    let mut interval_omega = BlockStats::default();
    let mut post_theta = BlockStats::default();
    let mut post_omega = BlockStats::default();
    let mut warnings = Vec::new();
    let mut draws = Vec::with_capacity(k_total - burn_in);

    for iter in 0..k_total {
        // 1. theta | omega
        state.theta = gibbs_theta(&state.freqs, &priors, config.theta_update, &mut rng);

        // 2. (gamma, a, b) block via HMC
        {
            let target = ThetaBlockTarget {
                design: &design,
                y: &data.y,
                sigma2: state.sigma2,
                s_inv: s_inv_diag(p, j, priors.sigma_gamma2, state.tau2),
            };
            let pos = pack_theta_block(&state);
            let (new_pos, outcome) = hmc_update(
                &pos,
                |q| target.log_density(q),
                |q| target.grad(q),
                e_beta,
                hmc.l_steps,
                &mut rng,
            );
            record_outcome(&mut interval_theta, outcome);
            if iter >= burn_in {
                record_outcome(&mut post_theta, outcome);
            }
            if outcome == HmcOutcome::Accepted {
                let (gamma, amps) = unpack_theta_block(&new_pos, p, j);
                state.gamma = gamma;
                state.amps = amps;
            }
        }

        // 3. omega block via HMC
        {
            let target = omega_block_target(&state, data)?;
            let pos = flatten_omega(&state.freqs.omega);
            let (new_pos, outcome) = hmc_update(
                &pos,
                |q| target.log_density(q),
                |q| target.grad(q),
                e_omega,
                hmc.l_steps,
                &mut rng,
            );
            record_outcome(&mut interval_omega, outcome);
            if iter >= burn_in {
                record_outcome(&mut post_omega, outcome);
            }
            if outcome == HmcOutcome::Accepted {
                state.freqs =
                    FrequencySet::new(DMatrix::from_fn(j, m, |r, c| new_pos[r * m + c]))?;
                basis = basis_matrix(&data.x, &state.freqs)?;
                design = build_design(&data.z, &basis);
            }
        }

        // 4. tau^2 | a, b
        state.tau2 = gibbs_tau2(&state.amps, j, &priors, &mut rng);

        // 5. sigma^2 | residuals
        let h = evaluate_h_with_basis(&basis, &state.amps);
        let resid = &data.y - &data.z * &state.gamma - &h;
        state.sigma2 = gibbs_sigma2(&resid, &priors, &mut rng);

        // 6. record
        if iter >= burn_in {
            draws.push(Draw { state: state.clone(), h });
        }

        // step-size tuning, burn-in only
        if (iter + 1) % hmc.tune_interval == 0 {
            if interval_theta.divergences * 2 > hmc.tune_interval
                || interval_omega.divergences * 2 > hmc.tune_interval
            {
                warnings.push(format!(
                    "iteration {}: more than half of the last {} proposals diverged (theta block {}, omega block {})",
                    iter + 1,
                    hmc.tune_interval,
                    interval_theta.divergences,
                    interval_omega.divergences
                ));
            }
            if iter < burn_in {
                e_beta = tune_step_size(
                    e_beta,
                    interval_theta.acceptance_rate(),
                    hmc.e_t,
                    (hmc.accept_low, hmc.accept_high),
                );
                e_omega = tune_step_size(
                    e_omega,
                    interval_omega.acceptance_rate(),
                    hmc.e_t,
                    (hmc.accept_low, hmc.accept_high),
                );
            }
            interval_theta = BlockStats::default();
            interval_omega = BlockStats::default();
        }
    }

    Ok(PosteriorSamples {
        draws,
        burn_in,
        theta_block: post_theta,
        omega_block: post_omega,
        final_e_beta: e_beta,
        final_e_omega: e_omega,
        warnings,
    })
}

fn record_outcome(stats: &mut BlockStats, outcome: HmcOutcome) {
    stats.proposals += 1;
    match outcome {
        HmcOutcome::Accepted => stats.accepted += 1,
        HmcOutcome::Divergent => stats.divergences += 1,
        HmcOutcome::Rejected => {}
    }
}
