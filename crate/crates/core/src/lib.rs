//! Query-budgeted black-box face-paste attacks.
//!
//! Candidate images are rendered by pasting a (masked, scaled, rotated) target
//! face into a source image, scored through an [`oracle::Oracle`], and the paste
//! parameters are searched with Gaussian-process Bayesian optimization. An
//! SSIM-constrained PGD attack against the differentiable simulated recognizer
//! is included for comparison.

// Negated float comparisons are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod bayesopt;
pub mod error;
pub mod masks;
pub mod oracle;
pub mod pgd;
pub mod raster;
pub mod runner;
pub mod similarity;
pub mod toy;

pub use error::{Error, Result};
