//! Desk-scale simulator and library for energy- and spectrum-efficient
//! federated learning with multi-bit over-the-air aggregation.
//!
//! The crate trains small models across simulated clients, pushes the
//! quantized updates through a Rayleigh-faded multi-access channel (either as
//! a closed-form statistical operator or as a full symbol-level QAM/ADC
//! path), accounts communication and computation energy per round, and
//! jointly optimizes the local-iteration count and the transmission
//! probability of the power-control policy.
//!
//! Modules:
//! - [`learnkit`]: tiny learners (linear, logistic, one-hidden-layer MLP),
//!   synthetic data, non-IID partitioning.
//! - [`quantizer`]: unbiased stochastic uniform quantization with a
//!   round-wide common scale.
//! - [`channel`]: Rayleigh fading, threshold power control, over-the-air
//!   aggregation and its variance law.
//! - [`modem`]: symbol-level fidelity layer (MASK/QAM mapping, superposition,
//!   ADC sampling, aggregate decoding).
//! - [`fl`]: the federated training loop and baselines.
//! - [`energy`]: communication/computation energy models and the exponential
//!   integral they require.
//! - [`convergence`]: convergence-bound evaluation and round-count model
//!   fitting.
//! - [`jcp`]: joint local-computing / transmission-probability controller.
//! - [`config`] and [`runner`]: experiment configuration and task execution
//!   behind the CLI.

pub mod channel;
pub mod config;
pub mod convergence;
pub mod energy;
pub mod error;
pub mod fl;
pub mod jcp;
pub mod learnkit;
pub mod modem;
pub mod quantizer;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
