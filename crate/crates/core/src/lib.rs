// SPDX-License-Identifier: Apache-2.0

//! Countermeasure heads and analysis tooling over frozen SSL activations.
//!
//! The crate works on precomputed per-layer activations of a self-supervised
//! speech encoder and provides:
//!
//! - [`actstore`]: the activation tensor, manifest and score file formats.
//! - [`synthgen`]: a synthetic activation generator with a closed-form EER oracle.
//! - [`heads`]: mean-pooling and multi-head factorized attentive pooling (MHFA)
//!   heads with analytic gradients.
//! - [`trainer`]: segment sampling, Adam and the epoch loop with
//!   min-validation-loss checkpoint selection.
//! - [`evalkit`]: capped full-utterance scoring, EER, layer sweeps and
//!   best-single-layer selection.
//! - [`fusekit`]: Cllr, logistic-regression calibration and score fusion.

pub mod actstore;
pub mod digest;
pub mod error;
pub mod evalkit;
pub mod fusekit;
pub mod heads;
pub mod seeds;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
