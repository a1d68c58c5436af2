use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("Cholesky factorization failed after jitter escalation (final jitter {final_jitter:e})")]
    FactorizationFailed { final_jitter: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("omega-block density undefined: theta[{index}] = 0 with nonzero frequency component")]
    DegenerateSpectralDensity { index: usize },

    #[error("leapfrog diverged at step {step}: non-finite {what}")]
    LeapfrogDivergence { step: usize, what: &'static str },

    #[error("correlation calibration failed after {iterations} iterations: achieved off-diagonal IQR [{achieved_low:.4}, {achieved_high:.4}], target [{target_low}, {target_high}]")]
    CalibrationFailed {
        iterations: usize,
        achieved_low: f64,
        achieved_high: f64,
        target_low: f64,
        target_high: f64,
    },

    #[error("no training rows with all co-exposures inside their {low_pct}th-{high_pct}th percentile window")]
    EmptyPercentileWindow { low_pct: f64, high_pct: f64 },

    #[error("percentile {0} outside (0, 100)")]
    PercentileOutOfRange(f64),

    #[error("missing column '{0}' in input file")]
    MissingColumn(String),

    #[error("non-numeric value '{value}' at row {row}, column '{column}'")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("exposure column '{0}' has zero variance; cannot standardize")]
    ZeroVariance(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("samples file error: {0}")]
    SamplesFile(String),

    #[error("non-finite result in {0}")]
    NonFinite(&'static str),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// CLI exit code class: 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::PercentileOutOfRange(_) => 1,
            Error::MissingColumn(_)
            | Error::NonNumericCell { .. }
            | Error::ZeroVariance(_)
            | Error::DimensionMismatch { .. }
            | Error::SamplesFile(_)
            | Error::Io(_)
            | Error::Csv(_) => 2,
            Error::FactorizationFailed { .. }
            | Error::LeapfrogDivergence { .. }
            | Error::DegenerateSpectralDensity { .. }
            | Error::CalibrationFailed { .. }
            | Error::EmptyPercentileWindow { .. }
            | Error::NonFinite(_) => 3,
        }
    }

    /// Machine-parseable one-line error class prefix for the CLI.
    pub fn class(&self) -> &'static str {
        match self.exit_code() {
            1 => "config",
            2 => "data",
            _ => "numeric",
        }
    }
}
