//! Sparse mixture-of-experts radiance fields.
//!
//! A bank of dense voxel-grid experts at increasing resolutions is combined
//! by a trainable gate that routes every ray sample to its top-k experts.
//! Training minimizes a photometric loss plus a resolution-weighted
//! load-balancing term that steers points toward cheaper experts.

// Negated comparisons are how validation rejects NaN along with out-of-range
// values; per-channel loops read better indexed.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod expert;
pub mod gate;
pub mod grid;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod mlp;
pub mod moe;
pub mod optim;
pub mod real;
pub mod renderer;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
