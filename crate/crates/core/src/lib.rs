//! Masked collaborative contrast for single-stage weakly supervised semantic
//! segmentation, at toy scale.
//!
//! The crate is split along the training pipeline:
//!
//! * [`numerics`]: tensors, reverse-mode differentiation, gradient checks.
//! * [`encoder`]: a small vision transformer whose attention keys can be masked.
//! * [`masking`]: block-structured random key masks.
//! * [`pseudo`]: class activation maps, reliable pseudo labels, affinity
//!   labels and positive/negative verdicts for masked views.
//! * [`losses`]: every term of the training objective.
//! * [`harness`]: synthetic data, the training loop, evaluation, sweeps
//!   and file formats used by the `mcc` binary.

pub mod encoder;
pub mod error;
pub mod harness;
pub mod losses;
pub mod masking;
pub mod numerics;
pub mod pseudo;

pub use error::{Error, Result};
