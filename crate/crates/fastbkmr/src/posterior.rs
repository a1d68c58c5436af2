//! Posterior summarization: surface prediction, percentile-contrast
//! effects, exposure-response curves, and WAIC.
//!
//! All summaries are deterministic functions of the retained draws; no
//! fresh randomness is introduced. Effects are reported as contrasts
//! against an explicit reference profile because the level of h is absorbed
//! by the intercept.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rff::evaluate_h;
use crate::sampler::PosteriorSamples;
use crate::simulation::Dataset;

/// Posterior mean difference with an equal-tailed 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

/// A univariate exposure-response curve; estimates are contrasts against
/// the first grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseCurve {
    pub grid: Vec<f64>,
    pub estimates: Vec<EffectEstimate>,
    pub fixed_profile: String,
}

/// A bivariate exposure-response surface on a percentile-spaced grid;
/// estimates[i][j] pairs grid1[i] with grid2[j], referenced to the
/// (25th, 25th) percentile corner.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BivariateSurface {
    pub percentiles: Vec<f64>,
    pub grid1: Vec<f64>,
    pub grid2: Vec<f64>,
    pub estimates: Vec<Vec<EffectEstimate>>,
    pub fixed_profile: String,
}

/// Reference percentile for bivariate surfaces.
const SURFACE_REF_PCT: f64 = 25.0;
/// Percentile span of the bivariate grid.
const SURFACE_PCT_RANGE: (f64, f64) = (5.0, 95.0);

/// Median-unbiased (Hyndman-Fan type 8) empirical quantile of an ascending
/// slice; `p` in [0, 1].
pub fn quantile_of(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty slice");
    let h = ((n as f64 + 1.0 / 3.0) * p + 1.0 / 3.0).clamp(1.0, n as f64);
    let k = h.floor() as usize;
    let g = h - k as f64;
    if k >= n {
        sorted[n - 1]
    } else {
        sorted[k - 1] + g * (sorted[k] - sorted[k - 1])
    }
}

/// Upper quantile computed by mirrored interpolation from the top of the
/// slice, so that for negated data it is the exact negation of
/// [`lower_tail`]. This makes overall_effect antisymmetry exact.
fn upper_tail(sorted: &[f64], tail_p: f64) -> f64 {
    let n = sorted.len();
    let h = ((n as f64 + 1.0 / 3.0) * tail_p + 1.0 / 3.0).clamp(1.0, n as f64);
    let k = h.floor() as usize;
    let g = h - k as f64;
    if k >= n {
        sorted[0]
    } else {
        sorted[n - k] - g * (sorted[n - k] - sorted[n - k - 1])
    }
}

fn lower_tail(sorted: &[f64], tail_p: f64) -> f64 {
    quantile_of(sorted, tail_p)
}

/// Mean and equal-tailed 95% interval of per-draw contrasts.
fn summarize_contrasts(diffs: &[f64]) -> EffectEstimate {
    let mut sorted = diffs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let point = diffs.iter().sum::<f64>() / diffs.len() as f64;
    EffectEstimate {
        point,
        lower: lower_tail(&sorted, 0.025),
        upper: upper_tail(&sorted, 0.025),
    }
}

/// Empirical percentile (0-100 scale) of one column of the training
/// exposures.
pub fn column_percentile(x: &DMatrix<f64>, col: usize, pct: f64) -> f64 {
    let mut v: Vec<f64> = x.column(col).iter().cloned().collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    quantile_of(&v, pct / 100.0)
}

fn check_percentile(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 100.0) {
        return Err(Error::PercentileOutOfRange(p));
    }
    Ok(())
}

/// Evaluate the fitted surface at new points for every retained draw.
///
/// Returns a q x (retained draws) matrix; column d is Eq.-style basis
/// evaluation with draw d's frequencies and amplitudes (no linear solve).
/// On the training rows this reproduces the stored per-draw h bitwise.
pub fn predict_h(samples: &PosteriorSamples, x_new: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if samples.draws.is_empty() {
        return Err(Error::InvalidArgument("no retained draws".into()));
    }
    let q = x_new.nrows();
    let k = samples.draws.len();
    let mut out = DMatrix::zeros(q, k);
    for (c, draw) in samples.draws.iter().enumerate() {
        let h = evaluate_h(x_new, &draw.state.freqs, &draw.state.amps)?;
        out.set_column(c, &h);
    }
    Ok(out)
}

/// Build a single-row exposure profile with every exposure at its `pct`-th
/// percentile.
fn percentile_profile(x: &DMatrix<f64>, pct: f64) -> DMatrix<f64> {
    DMatrix::from_fn(1, x.ncols(), |_, c| column_percentile(x, c, pct))
}

/// Posterior contrast in h when all exposures move together from the
/// `p_ref`-th to the `p`-th percentile profile.
pub fn overall_effect(
    samples: &PosteriorSamples,
    x: &DMatrix<f64>,
    p: f64,
    p_ref: f64,
) -> Result<EffectEstimate> {
    check_percentile(p)?;
    check_percentile(p_ref)?;
    let mut profiles = DMatrix::zeros(2, x.ncols());
    profiles.row_mut(0).copy_from(&percentile_profile(x, p).row(0));
    profiles.row_mut(1).copy_from(&percentile_profile(x, p_ref).row(0));
    let h = predict_h(samples, &profiles)?;
    let diffs: Vec<f64> = (0..h.ncols()).map(|d| h[(0, d)] - h[(1, d)]).collect();
    Ok(summarize_contrasts(&diffs))
}

fn linspace(lo: f64, hi: f64, len: usize) -> Vec<f64> {
    if len <= 1 || lo == hi {
        return vec![lo];
    }
    (0..len)
        .map(|i| lo + (hi - lo) * i as f64 / (len - 1) as f64)
        .collect()
}

/// Univariate exposure-response curve for exposure `m`.
///
/// Co-exposures are fixed at their `co_percentile`-th percentiles; the grid
/// spans the observed x_m among training rows whose co-exposures all lie
/// inside their (P-5)th..(P+5)th percentile window. Estimates are contrasts
/// against the first grid point.
pub fn univariate_response(
    samples: &PosteriorSamples,
    x: &DMatrix<f64>,
    m: usize,
    co_percentile: f64,
    grid_size: usize,
) -> Result<ResponseCurve> {
    check_percentile(co_percentile)?;
    if m >= x.ncols() {
        return Err(Error::InvalidArgument(format!(
            "exposure index {m} out of range for {} exposures",
            x.ncols()
        )));
    }
    if grid_size == 0 {
        return Err(Error::InvalidArgument("grid_size must be >= 1".into()));
    }
    let low_pct = (co_percentile - 5.0).max(0.0);
    let high_pct = (co_percentile + 5.0).min(100.0);
    let windows: Vec<(f64, f64)> = (0..x.ncols())
        .map(|c| {
            (
                column_percentile(x, c, low_pct),
                column_percentile(x, c, high_pct),
            )
        })
        .collect();
    let mut observed: Vec<f64> = (0..x.nrows())
        .filter(|&r| {
            (0..x.ncols()).all(|c| {
                c == m || (x[(r, c)] >= windows[c].0 && x[(r, c)] <= windows[c].1)
            })
        })
        .map(|r| x[(r, m)])
        .collect();
    if observed.is_empty() {
        return Err(Error::EmptyPercentileWindow { low_pct, high_pct });
    }
    observed.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let grid = linspace(observed[0], observed[observed.len() - 1], grid_size);

    let base = percentile_profile(x, co_percentile);
    let mut profiles = DMatrix::zeros(grid.len(), x.ncols());
    for (r, &g) in grid.iter().enumerate() {
        profiles.row_mut(r).copy_from(&base.row(0));
        profiles[(r, m)] = g;
    }
    let h = predict_h(samples, &profiles)?;
    let estimates = (0..grid.len())
        .map(|r| {
            let diffs: Vec<f64> = (0..h.ncols()).map(|d| h[(r, d)] - h[(0, d)]).collect();
            summarize_contrasts(&diffs)
        })
        .collect();
    Ok(ResponseCurve {
        grid,
        estimates,
        fixed_profile: format!("co-exposures at their {co_percentile}th percentiles"),
    })
}

/// Bivariate exposure-response surface for exposures `m1` and `m2` on a
/// percentile-spaced grid (5th..95th), referenced per draw to the
/// (25th, 25th) percentile corner; remaining exposures fixed at
/// `fixed_percentile`.
pub fn bivariate_surface(
    samples: &PosteriorSamples,
    x: &DMatrix<f64>,
    m1: usize,
    m2: usize,
    fixed_percentile: f64,
    grid_size: usize,
) -> Result<BivariateSurface> {
    check_percentile(fixed_percentile)?;
    if m1 == m2 {
        return Err(Error::InvalidArgument(format!(
            "bivariate surface requires two distinct exposures, got {m1} twice"
        )));
    }
    if m1 >= x.ncols() || m2 >= x.ncols() {
        return Err(Error::InvalidArgument(format!(
            "exposure index out of range for {} exposures",
            x.ncols()
        )));
    }
    if grid_size == 0 {
        return Err(Error::InvalidArgument("grid_size must be >= 1".into()));
    }
    let percentiles = linspace(SURFACE_PCT_RANGE.0, SURFACE_PCT_RANGE.1, grid_size);
    let grid1: Vec<f64> = percentiles.iter().map(|&p| column_percentile(x, m1, p)).collect();
    let grid2: Vec<f64> = percentiles.iter().map(|&p| column_percentile(x, m2, p)).collect();
    let ref1 = column_percentile(x, m1, SURFACE_REF_PCT);
    let ref2 = column_percentile(x, m2, SURFACE_REF_PCT);

    let base = percentile_profile(x, fixed_percentile);
    let g = percentiles.len();
    // g*g cells plus the reference profile as the final row
    let mut profiles = DMatrix::zeros(g * g + 1, x.ncols());
    for i in 0..g {
        for jj in 0..g {
            let r = i * g + jj;
            profiles.row_mut(r).copy_from(&base.row(0));
            profiles[(r, m1)] = grid1[i];
            profiles[(r, m2)] = grid2[jj];
        }
    }
    let r_ref = g * g;
    profiles.row_mut(r_ref).copy_from(&base.row(0));
    profiles[(r_ref, m1)] = ref1;
    profiles[(r_ref, m2)] = ref2;

    let h = predict_h(samples, &profiles)?;
    let estimates = (0..g)
        .map(|i| {
            (0..g)
                .map(|jj| {
                    let r = i * g + jj;
                    let diffs: Vec<f64> =
                        (0..h.ncols()).map(|d| h[(r, d)] - h[(r_ref, d)]).collect();
                    summarize_contrasts(&diffs)
                })
                .collect()
        })
        .collect();
    Ok(BivariateSurface {
        percentiles,
        grid1,
        grid2,
        estimates,
        fixed_profile: format!("other exposures at their {fixed_percentile}th percentiles"),
    })
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Watanabe-Akaike information criterion, -2(lppd - p_WAIC).
///
/// The pointwise predictive density uses each draw's own sigma^2 and fitted
/// training surface; the effective-parameter term uses the population
/// variance of the pointwise log densities so duplicating draws leaves the
/// value unchanged.
pub fn waic(samples: &PosteriorSamples, data: &Dataset) -> Result<f64> {
    let k = samples.draws.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "waic requires at least 2 retained draws, got {k}"
        )));
    }
    let n = data.y.len();
    let p = data.z.ncols();
    let mut lppd = 0.0;
    let mut p_waic = 0.0;
    let mut ld = vec![0.0; k];
    for i in 0..n {
        for (d, draw) in samples.draws.iter().enumerate() {
            if draw.h.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "waic fitted h",
                    expected: n,
                    actual: draw.h.len(),
                });
            }
            let mut mu = draw.h[i];
            for c in 0..p {
                mu += data.z[(i, c)] * draw.state.gamma[c];
            }
            let s2 = draw.state.sigma2;
            let resid = data.y[i] - mu;
            ld[d] = -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - resid * resid / (2.0 * s2);
        }
        lppd += log_sum_exp(&ld) - (k as f64).ln();
        let mean = ld.iter().sum::<f64>() / k as f64;
        p_waic += ld.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
    }
    let out = -2.0 * (lppd - p_waic);
    if !out.is_finite() {
        return Err(Error::NonFinite("waic"));
    }
    Ok(out)
}
