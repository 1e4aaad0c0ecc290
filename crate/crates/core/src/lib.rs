//! Physics-based video dehazing at desk scale.
//!
//! The crate provides:
//! - a minimal reverse-mode autodiff tensor engine ([`autodiff`]),
//! - the atmospheric scattering model and a hazy-video synthesizer ([`haze`]),
//! - memory-based physical prior guidance ([`prior`]),
//! - multi-range temporal alignment and aggregation ([`multirange`]),
//! - the training losses ([`losses`]) and the assembled model ([`model`]),
//! - a toy trainer with checkpoints ([`train`]),
//! - PSNR/SSIM evaluation ([`metrics`]) and file formats ([`io`]).

pub mod autodiff;
pub mod error;
pub mod haze;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod multirange;
pub mod prior;
pub mod rng;
pub mod train;

pub use autodiff::{grad_check, grad_check_multi, Tape, Tensor};
pub use error::{DehazeError, Result};
