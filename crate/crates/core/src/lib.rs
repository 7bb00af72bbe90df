//! Spiking state-space speech enhancement.
//!
//! STFT magnitudes are encoded to a latent sequence, passed through a stack
//! of spiking S4 layers (state-space convolution, affine emission, LIF
//! neurons, affine decoder, shortcut) and decoded to a bounded magnitude
//! mask. The masked spectrum is inverted back to a waveform.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dsp;
pub mod error;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod profile;
pub mod registry;
pub mod snn;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorClass, Result};
