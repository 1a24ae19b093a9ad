//! Anisotropic wavelet frames: dilation geometry, generators, Gram
//! matrices, dual frames and molecular norms.

// `!(x > 0.0)` is how NaN gets rejected alongside the out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calderon;
pub mod dual_optimizer;
pub mod embedding;
pub mod error;
pub mod frame_ops;
pub mod generators;
pub mod geometry;
pub mod lattice;
pub mod molecular;
pub mod par;
pub mod quadrature;
pub mod stats;

pub use error::{Error, Result};
