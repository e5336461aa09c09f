//! Dense numerical kernels shared by every other module.

mod im2col;
mod lstsq;
mod matrix;
pub mod qr;
mod svd;

pub use im2col::{conv_out_dim, im2col, im2col_channels};
pub use lstsq::{solve_least_squares, LeastSquares};
pub use matrix::{matmul, Matrix};
pub use svd::{numerical_rank, singular_values, svd, Svd};
