//! Interpretable convolutional front-end for raw waveforms.
//!
//! Kernels are sinc band-pass prototypes shaped by generalized cosine
//! windows, so every convolution channel has a readable center frequency
//! and bandwidth. The crate covers the differentiable front-end, a small
//! dense classifier head, training (RAdam + one-cycle schedule), WAV
//! ingest with resampling, synthetic benchmark data, cross-validation,
//! and frequency-response export for inspecting what the filters learned.

pub mod error;
pub mod firconv;
pub mod frontend;
pub mod harness;
pub mod nn;
pub mod windows;

pub use error::{Error, Result};
