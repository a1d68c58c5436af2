//! Configuration, CSV ingestion, the on-disk samples format, and summary
//! table writers.
//!
//! The samples file is self-describing: a single JSON header line followed
//! by one space-separated record per retained draw, each value printed with
//! Rust's shortest round-trip float formatting so a re-read reproduces the
//! in-memory draws bitwise. Files are written atomically (temp + rename).

use std::fs;
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posterior::{BivariateSurface, EffectEstimate, ResponseCurve};
use crate::rff::{Amplitudes, FrequencySet};
use crate::sampler::{
    BlockStats, ChainConfig, Draw, HmcConfig, ModelState, PosteriorSamples, Priors, ThetaUpdate,
};
use crate::simulation::{Dataset, ResultRow};

/// All run parameters with documented defaults; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Number of random Fourier features.
    pub j: usize,
    /// Total MCMC iterations; the second half is retained.
    pub k: usize,
    /// RNG seed; the CLI --seed flag overrides it and one of the two is
    /// mandatory for fit/simulate.
    pub seed: Option<u64>,
    pub e_beta: f64,
    pub e_omega: f64,
    pub l_steps: usize,
    pub e_t: f64,
    pub tune_interval: usize,
    pub accept_low: f64,
    pub accept_high: f64,
    pub sigma_gamma2: f64,
    pub ig_shape: f64,
    pub ig_rate: f64,
    pub theta_update: ThetaUpdate,
    /// Initial kernel weights; defaults to 1/(2 Var(x_m)) when absent.
    pub theta0: Option<Vec<f64>>,
    /// Divide each exposure column by its sample SD at ingestion.
    pub standardize: bool,
    /// Grid points per axis for response curves and surfaces.
    pub grid_size: usize,
    pub outcome: Option<String>,
    pub exposures: Vec<String>,
    pub confounders: Vec<String>,
    /// Percentiles contrasted against `ref_percentile` by `summarize`.
    pub effect_percentiles: Vec<f64>,
    pub ref_percentile: f64,
    /// Co-exposure percentile for univariate curves.
    pub co_percentile: f64,
    /// Exposure pair (0-based) for the bivariate surface; defaults to the
    /// first two exposures.
    pub bivariate_pair: Option<(usize, usize)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hmc = HmcConfig::default();
        let priors = Priors::default();
        Self {
            j: 20,
            k: 1000,
            seed: None,
            e_beta: hmc.e_beta,
            e_omega: hmc.e_omega,
            l_steps: hmc.l_steps,
            e_t: hmc.e_t,
            tune_interval: hmc.tune_interval,
            accept_low: hmc.accept_low,
            accept_high: hmc.accept_high,
            sigma_gamma2: priors.sigma_gamma2,
            ig_shape: priors.ig_shape,
            ig_rate: priors.ig_rate,
            theta_update: ThetaUpdate::default(),
            theta0: None,
            standardize: true,
            grid_size: 50,
            outcome: None,
            exposures: Vec::new(),
            confounders: Vec::new(),
            effect_percentiles: vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0],
            ref_percentile: 25.0,
            co_percentile: 50.0,
            bivariate_pair: None,
        }
    }
}

impl RunConfig {
    pub fn hmc(&self) -> HmcConfig {
        HmcConfig {
            e_beta: self.e_beta,
            e_omega: self.e_omega,
            l_steps: self.l_steps,
            e_t: self.e_t,
            tune_interval: self.tune_interval,
            accept_low: self.accept_low,
            accept_high: self.accept_high,
        }
    }

    pub fn priors(&self) -> Priors {
        Priors {
            sigma_gamma2: self.sigma_gamma2,
            ig_shape: self.ig_shape,
            ig_rate: self.ig_rate,
        }
    }

    pub fn chain_config(&self, seed: u64) -> ChainConfig {
        ChainConfig {
            j: self.j,
            k_total: self.k,
            priors: self.priors(),
            hmc: self.hmc(),
            theta_update: self.theta_update,
            theta0: self.theta0.as_ref().map(|v| DVector::from_row_slice(v)),
            omega0: None,
            seed,
        }
    }

    pub fn column_spec(&self) -> Result<ColumnSpec> {
        let outcome = self
            .outcome
            .clone()
            .ok_or_else(|| Error::Config("missing 'outcome' column name".into()))?;
        if self.exposures.is_empty() {
            return Err(Error::Config("at least one exposure column is required".into()));
        }
        let spec = ColumnSpec {
            outcome,
            exposures: self.exposures.clone(),
            confounders: self.confounders.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Parse a TOML config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Named columns selecting the outcome, exposures, and confounders.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub outcome: String,
    pub exposures: Vec<String>,
    pub confounders: Vec<String>,
}

impl ColumnSpec {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for name in std::iter::once(&self.outcome)
            .chain(self.exposures.iter())
            .chain(self.confounders.iter())
        {
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!(
                    "column '{name}' appears more than once in the column spec"
                )));
            }
        }
        Ok(())
    }
}

/// A parsed dataset plus ingestion byproducts.
#[derive(Debug, Clone)]
pub struct IngestedData {
    pub data: Dataset,
    /// Per-exposure sample SDs when standardization was applied.
    pub exposure_sds: Option<Vec<f64>>,
    /// Rows dropped because a selected cell was missing.
    pub dropped_rows: usize,
}

/// Read the named columns of a headered CSV file. Rows with a missing value
/// in any selected column are dropped and counted; non-numeric cells are
/// errors.
fn read_columns(path: &Path, names: &[&str]) -> Result<(Vec<Vec<f64>>, usize)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut indices = Vec::with_capacity(names.len());
    for &name in names {
        let idx = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
        indices.push(idx);
    }
    let mut rows = Vec::new();
    let mut dropped = 0usize;
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(indices.len());
        let mut missing = false;
        for (&idx, &name) in indices.iter().zip(names.iter()) {
            let cell = record.get(idx).unwrap_or("").trim();
            if cell.is_empty() || cell.eq_ignore_ascii_case("na") {
                missing = true;
                break;
            }
            match cell.parse::<f64>() {
                Ok(v) => row.push(v),
                Err(_) => {
                    return Err(Error::NonNumericCell {
                        row: row_idx + 2, // 1-based, counting the header line
                        column: name.to_string(),
                        value: cell.to_string(),
                    });
                }
            }
        }
        if missing {
            dropped += 1;
        } else {
            rows.push(row);
        }
    }
    Ok((rows, dropped))
}

fn sample_sd(values: impl Iterator<Item = f64> + Clone, n: usize) -> f64 {
    let mean = values.clone().sum::<f64>() / n as f64;
    let ss = values.map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (ss / (n - 1).max(1) as f64).sqrt()
}

/// Load a dataset from CSV. With `standardize`, each exposure column is
/// divided by its sample standard deviation (no centering) and the
/// constants are returned for prediction-time reuse.
pub fn ingest_csv(path: &Path, colspec: &ColumnSpec, standardize: bool) -> Result<IngestedData> {
    colspec.validate()?;
    let names: Vec<&str> = std::iter::once(colspec.outcome.as_str())
        .chain(colspec.exposures.iter().map(|s| s.as_str()))
        .chain(colspec.confounders.iter().map(|s| s.as_str()))
        .collect();
    let (rows, dropped_rows) = read_columns(path, &names)?;
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "no usable rows in {} after dropping {dropped_rows} incomplete rows",
            path.display()
        )));
    }
    let n = rows.len();
    let m = colspec.exposures.len();
    let p = colspec.confounders.len();
    let y = DVector::from_fn(n, |i, _| rows[i][0]);
    let mut x = DMatrix::from_fn(n, m, |i, c| rows[i][1 + c]);
    let z = DMatrix::from_fn(n, p, |i, c| rows[i][1 + m + c]);

    let exposure_sds = if standardize {
        let mut sds = Vec::with_capacity(m);
        for c in 0..m {
            let sd = sample_sd(x.column(c).iter().cloned(), n);
            if !(sd > 0.0) {
                return Err(Error::ZeroVariance(colspec.exposures[c].clone()));
            }
            sds.push(sd);
        }
        standardize_with(&mut x, &sds)?;
        Some(sds)
    } else {
        None
    };
    Ok(IngestedData {
        data: Dataset { y, x, z, h_true: None, gamma_true: None },
        exposure_sds,
        dropped_rows,
    })
}

/// Read only exposure columns (for prediction on new data).
pub fn ingest_exposures(path: &Path, exposures: &[String]) -> Result<(DMatrix<f64>, usize)> {
    let names: Vec<&str> = exposures.iter().map(|s| s.as_str()).collect();
    let (rows, dropped) = read_columns(path, &names)?;
    if rows.is_empty() {
        return Err(Error::Config(format!("no usable rows in {}", path.display())));
    }
    let x = DMatrix::from_fn(rows.len(), exposures.len(), |i, c| rows[i][c]);
    Ok((x, dropped))
}

/// Divide each exposure column by its stored standardization constant.
pub fn standardize_with(x: &mut DMatrix<f64>, sds: &[f64]) -> Result<()> {
    if sds.len() != x.ncols() {
        return Err(Error::DimensionMismatch {
            context: "standardization constants",
            expected: x.ncols(),
            actual: sds.len(),
        });
    }
    for c in 0..x.ncols() {
        let sd = sds[c];
        for r in 0..x.nrows() {
            x[(r, c)] /= sd;
        }
    }
    Ok(())
}

/// Samples-file format version.
pub const SAMPLES_FORMAT_VERSION: u32 = 1;

/// The JSON header line of a samples file; everything needed to rerun the
/// fit bit-identically and to interpret the draw records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplesHeader {
    pub format_version: u32,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub j: usize,
    pub k_total: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub outcome: Option<String>,
    pub exposures: Vec<String>,
    pub confounders: Vec<String>,
    pub standardize: bool,
    pub exposure_sds: Option<Vec<f64>>,
    pub theta_block: BlockStats,
    pub omega_block: BlockStats,
    pub final_e_beta: f64,
    pub final_e_omega: f64,
    pub warnings: Vec<String>,
    pub config: RunConfig,
}

impl SamplesHeader {
    /// Values per draw record: gamma, a, b, omega (row-major), theta,
    /// tau2, sigma2, h.
    fn record_len(&self) -> usize {
        self.p + 2 * self.j + self.j * self.m + self.m + 2 + self.n
    }
}

/// Write bytes atomically: temp file in the target directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn push_values<'a>(out: &mut String, values: impl Iterator<Item = &'a f64>) {
    for v in values {
        if !out.is_empty() && !out.ends_with('\n') {
            out.push(' ');
        }
        out.push_str(&format!("{v}"));
    }
}

/// Serialize header + draws to the samples format.
pub fn samples_to_bytes(header: &SamplesHeader, samples: &PosteriorSamples) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string(header)
        .map_err(|e| Error::SamplesFile(format!("header serialization: {e}")))?;
    text.push('\n');
    for draw in &samples.draws {
        let start = text.len();
        push_values(&mut text, draw.state.gamma.iter());
        push_values(&mut text, draw.state.amps.a.iter());
        push_values(&mut text, draw.state.amps.b.iter());
        for r in 0..header.j {
            for c in 0..header.m {
                push_values(&mut text, std::iter::once(&draw.state.freqs.omega[(r, c)]));
            }
        }
        push_values(&mut text, draw.state.theta.iter());
        push_values(&mut text, [draw.state.tau2, draw.state.sigma2].iter());
        push_values(&mut text, draw.h.iter());
        debug_assert_eq!(
            text[start..].split(' ').count(),
            header.record_len(),
            "draw record length"
        );
        text.push('\n');
    }
    Ok(text.into_bytes())
}

/// Write a samples file atomically.
pub fn write_samples(path: &Path, header: &SamplesHeader, samples: &PosteriorSamples) -> Result<()> {
    atomic_write(path, &samples_to_bytes(header, samples)?)
}

/// Read a samples file back into memory.
pub fn read_samples(path: &Path) -> Result<(SamplesHeader, PosteriorSamples)> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::SamplesFile("empty samples file".into()))??;
    let header: SamplesHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::SamplesFile(format!("header parse: {e}")))?;
    if header.format_version != SAMPLES_FORMAT_VERSION {
        return Err(Error::SamplesFile(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let mut draws = Vec::new();
    for (line_idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split(' ')
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| {
                    Error::SamplesFile(format!(
                        "non-numeric token '{tok}' in draw record {}",
                        line_idx + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != header.record_len() {
            return Err(Error::SamplesFile(format!(
                "draw record {} has {} values, expected {}",
                line_idx + 1,
                values.len(),
                header.record_len()
            )));
        }
        let (p, j, m, n) = (header.p, header.j, header.m, header.n);
        let mut at = 0usize;
        let mut take = |len: usize| {
            let slice = &values[at..at + len];
            at += len;
            slice.to_vec()
        };
        let gamma = DVector::from_vec(take(p));
        let a = DVector::from_vec(take(j));
        let b = DVector::from_vec(take(j));
        let omega_flat = take(j * m);
        let omega = DMatrix::from_fn(j, m, |r, c| omega_flat[r * m + c]);
        let theta = DVector::from_vec(take(m));
        let tau2 = take(1)[0];
        let sigma2 = take(1)[0];
        let h = DVector::from_vec(take(n));
        draws.push(Draw {
            state: ModelState {
                gamma,
                amps: Amplitudes { a, b },
                freqs: FrequencySet::new(omega)
                    .map_err(|e| Error::SamplesFile(format!("draw record {}: {e}", line_idx + 1)))?,
                theta,
                tau2,
                sigma2,
            },
            h,
        });
    }
    if draws.is_empty() {
        return Err(Error::SamplesFile("samples file contains no draws".into()));
    }
    let samples = PosteriorSamples {
        draws,
        burn_in: header.burn_in,
        theta_block: header.theta_block,
        omega_block: header.omega_block,
        final_e_beta: header.final_e_beta,
        final_e_omega: header.final_e_omega,
        warnings: header.warnings.clone(),
    };
    Ok((header, samples))
}

// ---------------------------------------------------------------------------
// Summary table writers (CSV)
// ---------------------------------------------------------------------------

fn csv_line(fields: &[String]) -> String {
    let mut line = fields.join(",");
    line.push('\n');
    line
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Overall-effect table: one row per contrasted percentile.
pub fn write_overall_effects_csv(
    path: &Path,
    rows: &[(f64, EffectEstimate)],
    ref_percentile: f64,
) -> Result<()> {
    let mut text = String::from("percentile,ref_percentile,point,lower,upper\n");
    for (pct, e) in rows {
        text.push_str(&csv_line(&[
            fmt(*pct),
            fmt(ref_percentile),
            fmt(e.point),
            fmt(e.lower),
            fmt(e.upper),
        ]));
    }
    atomic_write(path, text.as_bytes())
}

/// Univariate response curve table.
pub fn write_curve_csv(path: &Path, exposure: &str, curve: &ResponseCurve) -> Result<()> {
    let mut text = String::from("exposure,value,point,lower,upper,fixed_profile\n");
    for (g, e) in curve.grid.iter().zip(curve.estimates.iter()) {
        text.push_str(&csv_line(&[
            exposure.to_string(),
            fmt(*g),
            fmt(e.point),
            fmt(e.lower),
            fmt(e.upper),
            format!("\"{}\"", curve.fixed_profile),
        ]));
    }
    atomic_write(path, text.as_bytes())
}

/// Bivariate surface in long format.
pub fn write_surface_csv(
    path: &Path,
    exposure1: &str,
    exposure2: &str,
    surface: &BivariateSurface,
) -> Result<()> {
    let mut text = String::from(
        "exposure1,exposure2,percentile1,percentile2,value1,value2,point,lower,upper\n",
    );
    for (i, row) in surface.estimates.iter().enumerate() {
        for (jj, e) in row.iter().enumerate() {
            text.push_str(&csv_line(&[
                exposure1.to_string(),
                exposure2.to_string(),
                fmt(surface.percentiles[i]),
                fmt(surface.percentiles[jj]),
                fmt(surface.grid1[i]),
                fmt(surface.grid2[jj]),
                fmt(e.point),
                fmt(e.lower),
                fmt(e.upper),
            ]));
        }
    }
    atomic_write(path, text.as_bytes())
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

/// Experiment results table. The `seconds` column is wall-clock time and is
/// the only nondeterministic column.
pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut text = String::from(
        "spec_index,n,m,correlation,kernel_kind,h_source,holdout_fraction,j,replicate,rmse_in,rmse_out,seconds,accept_theta_block,accept_omega_block,error\n",
    );
    for r in rows {
        text.push_str(&csv_line(&[
            r.spec_index.to_string(),
            r.n.to_string(),
            r.m.to_string(),
            format!("{:?}", r.correlation),
            format!("{:?}", r.kernel_kind),
            format!("{:?}", r.h_source),
            fmt(r.holdout_fraction),
            r.j.to_string(),
            r.replicate.to_string(),
            opt(r.rmse_in),
            opt(r.rmse_out),
            fmt(r.seconds),
            opt(r.accept_theta_block),
            opt(r.accept_omega_block),
            r.error
                .as_ref()
                .map(|e| format!("\"{}\"", e.replace('"', "'")))
                .unwrap_or_default(),
        ]));
    }
    atomic_write(path, text.as_bytes())
}

/// WAIC-scan table; the smallest WAIC row is flagged.
pub fn write_waic_csv(path: &Path, rows: &[(usize, f64)]) -> Result<()> {
    let best = rows
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).unwrap())
        .map(|(i, _)| i);
    let mut text = String::from("j,waic,best\n");
    for (i, (j, w)) in rows.iter().enumerate() {
        text.push_str(&csv_line(&[
            j.to_string(),
            fmt(*w),
            if Some(i) == best { "1".into() } else { "0".into() },
        ]));
    }
    atomic_write(path, text.as_bytes())
}
