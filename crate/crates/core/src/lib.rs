//! Tree-gated mixture density estimation.
//!
//! A soft decision tree produces the mixture weights, one small MLP per leaf
//! produces a single Gaussian from time-invariant features only, and
//! [`inference_cache`] precomputes those leaf outputs per entity so serving
//! only evaluates the tree.

// `!(x > 0.0)` is used on purpose so NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod inference_cache;
pub mod leaf_mdn;
pub mod mixture;
pub mod numerics;
pub mod soft_tree;
pub mod training;

pub use error::{Error, Result};
pub use mixture::{FeatureVector, MixtureDensity, Model, ModelKind};
