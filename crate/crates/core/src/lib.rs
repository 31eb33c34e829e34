//! Hardness-aware deep metric learning at desk scale.
//!
//! An MLP metric model is trained with triplet or N-pair losses on both the
//! original tuples and synthetic tuples whose negatives have been pulled
//! towards the anchor in embedding space and decoded back to feature space
//! by a jointly trained generator.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod embedding;
pub mod data;
pub mod error;
pub mod eval;
pub mod generator;
pub mod metric;
pub mod numgrad;
pub mod optim;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use numgrad::Matrix;
