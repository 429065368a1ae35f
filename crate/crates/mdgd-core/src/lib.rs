//! Desk-scale training laboratory for modality-decoupled gradient descent
//! (MDGD) on a toy visual-prefix sequence model.
//!
//! The crate provides, bottom-up:
//!
//! - [`tensor`] — dense row-major `f64` arrays with deterministic kernels;
//! - [`rng`] — a seekable counter-based random stream (SplitMix64);
//! - [`spectral`] — singular-value spectra and effective rank;
//! - [`autograd`] — tape-based reverse-mode differentiation over named
//!   parameters;
//! - [`model`] — the toy multimodal model: visual adapter + causal
//!   transformer over `[visual; instruction; answer]` tokens;
//! - [`data`] — the procedural multimodal task generator;
//! - [`optim`] — the MDGD optimizer family (alignment loss, drift
//!   gradients, orthogonalization, projection, gradient masking) and the
//!   training loop;
//! - [`diagnostics`] — effective-rank reports, representation dumps,
//!   scoring, and run comparison;
//! - [`io`] — run configs and the binary tensor container used for
//!   checkpoints and datasets.
//!
//! Everything is deterministic: a `(config, seed)` pair fully determines
//! every computed byte, with or without the `parallel` feature.

pub mod autograd;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod model;
pub mod optim;
mod par;
pub mod presets;
pub mod rng;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::Tensor;
