use super::Matrix;
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Output extent of a sliding window along one axis.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if k == 0 || stride == 0 {
        return Err(Error::shape(format!("kernel {k} / stride {stride} must be positive")));
    }
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::shape(format!(
            "window {k} larger than padded extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Unfold `k×k` sliding windows into rows.
///
/// Row `y_out * W_out + x_out` holds one window. Column ordering is
/// channel-major, then kernel row, then kernel column:
/// `col = c * k² + ky * k + kx`. Padding is zero.
pub fn im2col(input: &FeatureMap, k: usize, stride: usize, pad: usize) -> Result<Matrix> {
    im2col_channels(input, 0, input.shape().c, k, stride, pad)
}

/// [`im2col`] restricted to channels `c0..c1` (one convolution group).
pub fn im2col_channels(
    input: &FeatureMap,
    c0: usize,
    c1: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Matrix> {
    let shape = input.shape();
    if c0 >= c1 || c1 > shape.c {
        return Err(Error::shape(format!(
            "channel range {c0}..{c1} outside 0..{}",
            shape.c
        )));
    }
    let h_out = conv_out_dim(shape.h, k, stride, pad)?;
    let w_out = conv_out_dim(shape.w, k, stride, pad)?;
    let cols = (c1 - c0) * k * k;
    let mut out = Matrix::zeros(h_out * w_out, cols);
    let (h, w) = (shape.h as isize, shape.w as isize);
    for oy in 0..h_out {
        for ox in 0..w_out {
            let row = out.row_mut(oy * w_out + ox);
            let y0 = (oy * stride) as isize - pad as isize;
            let x0 = (ox * stride) as isize - pad as isize;
            let mut idx = 0;
            for c in c0..c1 {
                let plane = input.channel(c);
                for ky in 0..k as isize {
                    let y = y0 + ky;
                    for kx in 0..k as isize {
                        let x = x0 + kx;
                        if y >= 0 && y < h && x >= 0 && x < w {
                            row[idx] = plane[(y * w + x) as usize];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}
