//! Filter-group decomposition of convolutional networks.
//!
//! A regular `k×k` convolution with weight matrix `W` ((c_in·k²)×c_out) is
//! split into `c_in / n` row blocks; each block is truncated to rank `n` by
//! SVD. The left factors form a block-diagonal group convolution `D`
//! (`c_in / n` groups of `n` channels), the right factors a pointwise
//! convolution `P`, so that `W ≈ D·P` at a cost of `n / c_out + 1 / k²` of
//! the original.
//!
//! Modules:
//! - [`linalg`]: matrix product, im2col, SVD, least squares
//! - [`model`]: layer graph, forward pass, FLOPs, model files
//! - [`decompose`]: the block-SVD split into `(D, P)`
//! - [`reconstruct`]: least-squares response correction merged into `P`
//! - [`schedule`]: per-stage rank plans (Constant / Half / Quarter)
//! - [`degeneracy`]: rank formulas, spectral energy curves, correlations

pub mod decompose;
pub mod degeneracy;
mod error;
pub mod linalg;
pub mod model;
pub mod par;
pub mod reconstruct;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Shape3};
