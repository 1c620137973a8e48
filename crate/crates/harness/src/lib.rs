//! Run harness for equivariant DP-SGD: configuration, datasets,
//! augmentation, the training loop, evaluation, checkpoints, equivariance
//! audits and the `equidp` command line.

pub mod audit;
pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod train;

pub use error::{HarnessError, Result};
