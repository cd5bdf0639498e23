//! Post-hoc ensembling of frozen base-model predictions.
//!
//! The crate is `no_std` (it needs `alloc`) and covers:
//!
//! - [`nn`]: a small dense-network engine with exact gradients and Adam,
//! - [`data`]: prediction cubes, labels and meta-dataset validation,
//! - [`synth`]: synthetic meta-dataset generators,
//! - [`metrics`]: NLL, error rate, binary AUC, MSE, normalization and ambiguity,
//! - [`baselines`]: constant-weight and selection ensemblers,
//! - [`neural`]: the neural ensembler (stacking and model-averaging modes)
//!   trained with base-model dropout.
//!
//! File formats, run records and the command line live in the `ensemblekit` crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod baselines;
pub mod data;
pub mod error;
pub mod metrics;
pub mod neural;
pub mod nn;
pub mod synth;

mod math;

pub use error::{Error, Result};
