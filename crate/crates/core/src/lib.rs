//! Underwater image restoration with wavelet-domain conditional diffusion.
//!
//! The low-frequency band of a degraded image is restored by a conditional
//! denoising diffusion model whose intermediate samples are color-corrected
//! at every reverse step, while the high-frequency bands are refined in a
//! single forward pass by cross-subband attention and dilated convolutions.

pub mod checkpoint;
pub mod csdr;
pub mod data_io;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod gcc;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod plane;
pub mod quality;
pub mod synthetic;
pub mod wavelet;

pub use error::{Error, Result};
