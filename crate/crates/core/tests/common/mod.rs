#![allow(dead_code)]

use fgroup_core::linalg::Matrix;
use fgroup_core::model::ConvWeights;
use fgroup_core::{FeatureMap, Shape3};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_na(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
}

/// Singular values from nalgebra, descending.
pub fn oracle_singular_values(m: &Matrix) -> Vec<f64> {
    let mut s: Vec<f64> = to_na(m).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

/// Direct nested-loop convolution straight from the definition.
pub fn direct_conv(c: &ConvWeights, x: &FeatureMap) -> FeatureMap {
    let s = x.shape();
    let oh = (s.h + 2 * c.pad - c.k) / c.stride + 1;
    let ow = (s.w + 2 * c.pad - c.k) / c.stride + 1;
    let w = c.weights().unwrap();
    let ipg = c.c_in / c.groups;
    let opg = c.c_out / c.groups;
    FeatureMap::from_fn(Shape3::new(c.c_out, oh, ow), |o, y, xx| {
        let g = o / opg;
        let mut acc = c.bias.as_ref().map_or(0.0, |b| b[o]);
        for ci in 0..ipg {
            for ky in 0..c.k {
                for kx in 0..c.k {
                    let iy = (y * c.stride + ky) as isize - c.pad as isize;
                    let ix = (xx * c.stride + kx) as isize - c.pad as isize;
                    if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                        continue;
                    }
                    let wv = w[((o * ipg + ci) * c.k + ky) * c.k + kx];
                    acc += wv * x.at(g * ipg + ci, iy as usize, ix as usize);
                }
            }
        }
        acc
    })
}
