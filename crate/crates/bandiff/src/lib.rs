//! Multi-band diffusion audio decoding.
//!
//! The pipeline splits audio into mel-spaced frequency bands, trains one
//! small denoising diffusion model per band on EQ-flattened data, and
//! decodes discrete conditioning tokens back to waveforms by running the
//! reverse diffusion per band, merging, and undoing the EQ. A mel-spectral
//! SNR metric scores reconstructions.

pub mod conditioner;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod eq;
pub mod error;
pub mod filterbank;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod signal;
pub mod wav;

pub use error::{Error, Result};
