//! Fast BKMR: Bayesian kernel machine regression with supervised random
//! Fourier features.
//!
//! The exposure-response surface is a Gaussian-process random effect whose
//! kernel is approximated by a trigonometric basis with frequencies sampled
//! from the kernel's spectral density. The resulting linear mixed-effect
//! model is fitted with a Gibbs/HMC sampler; frequencies are themselves
//! updated from the data, so the basis adapts to the response surface.
//!
//! Modules:
//! - [`kernels`]: stationary kernels, kernel matrices, exact GP draws
//! - [`rff`]: frequency sampling and trigonometric basis machinery
//! - [`sampler`]: the MCMC engine (Gibbs conjugate updates + two HMC blocks)
//! - [`oracle`]: exact small-n GP reference computations
//! - [`posterior`]: exposure-response summaries and WAIC
//! - [`simulation`]: synthetic-data scenarios and the experiment harness
//! - [`io`]: CSV ingestion, config, and on-disk sample/summary formats

pub mod error;
pub mod io;
pub mod kernels;
pub mod oracle;
pub mod posterior;
pub mod rff;
pub mod sampler;
pub mod simulation;

pub use error::{Error, Result};
