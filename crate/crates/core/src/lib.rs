//! Denoising of two-dimensional photoemission-style spectra.
//!
//! The crate covers the full pipeline: synthetic ground-truth spectra,
//! Poisson counting noise with detector blur, a residual convolutional
//! denoiser trained on a mixed MAE/MS-SSIM objective, and the line-shape
//! analysis used to judge the result.

pub mod analysis;
pub mod config;
pub mod error;
pub mod io;
pub mod loss;
pub mod nn;
pub mod noise;
pub mod rng;
pub mod spectrum;
pub mod study;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use spectrum::{normalize_to_probability, AxisInfo, ProbabilityMap, SignedMap, Spectrum};
