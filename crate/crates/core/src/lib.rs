//! Desk-scale self-supervised adversarial training.
//!
//! A small dense-tensor autodiff core, an MLP encoder, kNN classification
//! over a frozen feature library, two feature-space attacks, supervised and
//! contrastive training loops, and an evaluation harness.

// Argument checks are written `!(x > 0.0)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod baselines;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod knn;
pub mod rng;
pub mod sat;
pub mod tensor;

pub use error::{Error, Result};
