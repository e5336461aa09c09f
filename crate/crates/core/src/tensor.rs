use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Channel/height/width extent of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape3 { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// A single C×H×W activation, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    shape: Shape3,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(shape: Shape3) -> Self {
        FeatureMap {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape3, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "feature map {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(FeatureMap { shape, data })
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.c {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    data.push(f(c, y, x));
                }
            }
        }
        FeatureMap { shape, data }
    }

    /// I.i.d. standard normal entries.
    pub fn standard_normal<R: Rng + ?Sized>(shape: Shape3, rng: &mut R) -> Self {
        let data = (0..shape.len()).map(|_| rng.sample(StandardNormal)).collect();
        FeatureMap { shape, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape.h + y) * self.shape.w + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let s = self.shape.spatial();
        &self.data[c * s..(c + 1) * s]
    }

    /// Positions as rows, channels as columns: an (H·W)×C matrix.
    pub fn to_position_major(&self) -> Matrix {
        let s = self.shape.spatial();
        Matrix::from_fn(s, self.shape.c, |p, c| self.data[c * s + p])
    }

    /// Inverse of [`FeatureMap::to_position_major`].
    pub fn from_position_major(m: &Matrix, h: usize, w: usize) -> Result<Self> {
        if m.rows() != h * w {
            return Err(Error::shape(format!(
                "{} rows cannot fill a {h}x{w} map",
                m.rows()
            )));
        }
        let shape = Shape3::new(m.cols(), h, w);
        let s = h * w;
        let mut data = vec![0.0; shape.len()];
        for p in 0..s {
            for (c, &v) in m.row(p).iter().enumerate() {
                data[c * s + p] = v;
            }
        }
        Ok(FeatureMap { shape, data })
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// ‖self − other‖ / ‖other‖.
    pub fn relative_error(&self, reference: &FeatureMap) -> f64 {
        let diff: f64 = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        diff / reference.norm().max(f64::MIN_POSITIVE)
    }
}
