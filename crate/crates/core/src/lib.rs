//! Group-equivariant convolutional networks with differentially private
//! training.
//!
//! The crate is organised bottom-up: [`groups`] and [`steerable`] provide the
//! symmetry machinery, [`tensor`] and [`autodiff`] a small per-sample
//! reverse-mode engine, [`layers`] the equivariant building blocks and the
//! ResNet-9 builder, [`dp`] and [`accountant`] the private optimizer and its
//! privacy ledger, and [`metrics`] the sparsity and calibration measures.

pub mod error;
pub mod groups;
pub mod steerable;
pub mod tensor;
pub mod autodiff;
pub mod layers;
pub mod dp;
pub mod accountant;
pub mod metrics;

pub use error::{Error, Result};
