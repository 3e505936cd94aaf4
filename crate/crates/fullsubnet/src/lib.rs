//! Full-band/sub-band fusion speech enhancement.
//!
//! This crate implements a single-channel denoiser built around a compressed
//! complex-ratio-mask estimator: a full-band recurrent model that sees the
//! whole magnitude spectrum per frame, feeding a sub-band recurrent model that
//! processes every frequency independently (one frequency plus its neighbors,
//! concatenated with the full-band model's output for that frequency).
//!
//! The main pieces:
//!
//! - [`dsp`] — STFT analysis/synthesis front end (Hann window, weighted
//!   overlap-add, perfect reconstruction).
//! - [`nncore`] — dense numeric core: stacked LSTM layers, linear heads,
//!   backpropagation through time, Adam, and a finite-difference gradient
//!   oracle. SIMD-accelerated on x86-64 where available.
//! - [`mask`] — complex ideal ratio mask computation, tanh compression and
//!   its inverse, mask application.
//! - [`features`] — full-band/sub-band input construction and mean
//!   normalization.
//! - [`model`] — the fusion network, the pure full-band and pure sub-band
//!   baselines, parameter counting and weight serialization.
//! - [`data`] — desk-scale synthesis: harmonic-tone sources, noise, synthetic
//!   room impulse responses, SNR-controlled dynamic mixing.
//! - [`train`] — masked MSE loss on the compressed mask, training loop,
//!   validation.
//! - [`stream`] — sample-in/sample-out real-time engine with cumulative or
//!   offline normalization and a per-frame latency benchmark.
//! - [`metrics`] — SI-SDR and evaluation reports.
//! - [`wav`] — 16 kHz mono WAV I/O.

pub mod data;
pub mod dsp;
pub mod features;
pub mod nncore;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod stream;
pub mod train;
pub mod wav;

mod error;

pub use error::{Error, Result};

/// Sample rate the whole pipeline is specified for.
pub const SAMPLE_RATE: u32 = 16_000;
