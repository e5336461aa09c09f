//! Least-squares correction of decomposed layers.
//!
//! For each decomposed layer, in network order, a `c_out × c_out` matrix `A`
//! and offset `Δ` are fitted so that the pair's response `Y*` maps onto the
//! original response `Y`:
//!
//! ```text
//! minimize ‖Y − (Y*·A + 1·Δ)‖²_F + λ‖A‖²_F
//! ```
//!
//! `A` is a 1×1 convolution and is folded into the pointwise layer:
//! `P' = P·A`, `b' = Aᵀb + Δ`. The intercept is fitted by centering and is
//! not penalized.
//!
//! In the default asymmetric mode `Y*` comes from the compressed network
//! with all earlier layers already corrected, so upstream error is
//! absorbed as the pass moves forward.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decompose::{group_layer_id, pointwise_layer_id, replace_pointwise};
use crate::error::{Error, Result};
use crate::linalg::{solve_least_squares, Matrix};
use crate::model::forward::forward_to_taps;
use crate::model::{conv_forward, ConvWeights, DecomposedRole, NetworkSpec};
use crate::par;
use crate::tensor::{FeatureMap, Shape3};

pub const CALIBRATION_FORMAT_VERSION: u32 = 1;

/// Inputs used to fit the corrections.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    shape: Shape3,
    samples: Vec<FeatureMap>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CalibrationHeader {
    format_version: u32,
    shape: [usize; 3],
    samples: usize,
    data_file: String,
}

impl CalibrationSet {
    /// `samples` standard-normal inputs drawn from a seeded stream.
    pub fn synthetic(shape: Shape3, samples: usize, seed: u64) -> Result<Self> {
        if samples == 0 {
            return Err(Error::invalid("calibration needs at least one sample"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..samples).map(|_| FeatureMap::standard_normal(shape, &mut rng)).collect();
        Ok(CalibrationSet { shape, samples })
    }

    pub fn from_samples(samples: Vec<FeatureMap>) -> Result<Self> {
        let shape = samples
            .first()
            .ok_or_else(|| Error::invalid("calibration needs at least one sample"))?
            .shape();
        if let Some(bad) = samples.iter().position(|s| s.shape() != shape) {
            return Err(Error::shape(format!(
                "calibration sample {bad} has shape {}, expected {shape}",
                samples[bad].shape()
            )));
        }
        Ok(CalibrationSet { shape, samples })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn samples(&self) -> &[FeatureMap] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn blob_path(header_path: &Path) -> PathBuf {
        header_path.with_extension("bin")
    }

    /// Write a JSON header at `path` and the samples as little-endian
    /// `f32` next to it (same stem, `.bin`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let blob_path = Self::blob_path(path);
        let header = CalibrationHeader {
            format_version: CALIBRATION_FORMAT_VERSION,
            shape: [self.shape.c, self.shape.h, self.shape.w],
            samples: self.len(),
            data_file: blob_path
                .file_name()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::invalid(format!("bad calibration path {}", path.display())))?
                .to_string(),
        };
        let mut blob = Vec::with_capacity(self.len() * self.shape.len() * 4);
        for s in &self.samples {
            for &x in s.as_slice() {
                blob.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        fs::write(path, serde_json::to_string_pretty(&header)? + "\n")?;
        fs::write(blob_path, blob)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let header: CalibrationHeader =
            serde_json::from_str(&text).map_err(|e| Error::format(format!("calibration header: {e}")))?;
        if header.format_version != CALIBRATION_FORMAT_VERSION {
            return Err(Error::format(format!(
                "calibration format_version {} is not supported (expected {CALIBRATION_FORMAT_VERSION})",
                header.format_version
            )));
        }
        let [c, h, w] = header.shape;
        let shape = Shape3::new(c, h, w);
        if shape.is_empty() || header.samples == 0 {
            return Err(Error::format("calibration header: empty shape or no samples"));
        }
        let blob_path = path.with_file_name(&header.data_file);
        let blob = fs::read(&blob_path)?;
        let expected = header.samples * shape.len() * 4;
        if blob.len() != expected {
            return Err(Error::format(format!(
                "calibration data {}: {} bytes, expected {expected}",
                blob_path.display(),
                blob.len()
            )));
        }
        let samples = blob
            .chunks_exact(shape.len() * 4)
            .map(|chunk| {
                let data = chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                    .collect();
                FeatureMap::from_vec(shape, data)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::format(format!("calibration data: {e}")))?;
        Ok(CalibrationSet { shape, samples })
    }
}

/// Ridge strength `λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ridge {
    /// `1e-6 · ‖Y*_c‖²_F / c_out`, with `Y*_c` the centered design.
    Auto,
    Fixed(f64),
}

impl Ridge {
    pub const AUTO_SCALE: f64 = 1e-6;
}

/// Where the approximate response `Y*` is taken from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseMode {
    /// The compressed network, including corrections already applied.
    #[default]
    Asymmetric,
    /// The pair applied to the original network's input to the layer.
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructOptions {
    pub ridge: Ridge,
    pub intercept: bool,
    pub mode: ResponseMode,
    /// Use at most this many evenly spaced spatial positions per sample.
    pub max_positions: Option<usize>,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        ReconstructOptions {
            ridge: Ridge::Auto,
            intercept: true,
            mode: ResponseMode::Asymmetric,
            max_positions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionSolution {
    /// `c_out × c_out`.
    pub a: Matrix,
    /// Length `c_out`.
    pub delta: Vec<f64>,
    pub ridge: f64,
    /// `‖Y − Y*‖_F`.
    pub residual_before: f64,
    /// `‖Y − (Y*·A + Δ)‖_F`.
    pub residual_after: f64,
    /// The fit did not improve on the identity, which was kept instead.
    pub fallback: bool,
    pub rank_deficient: bool,
}

fn column_means(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    let rows = m.rows() as f64;
    out.iter_mut().for_each(|o| *o /= rows);
    out
}

fn centered(m: &Matrix, means: &[f64]) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |r, c| m[(r, c)] - means[c])
}

fn residual(y: &Matrix, y_star: &Matrix, a: &Matrix, delta: &[f64]) -> Result<f64> {
    let fit = y_star.matmul(a)?;
    let mut sum = 0.0;
    for r in 0..y.rows() {
        for c in 0..y.cols() {
            let d = y[(r, c)] - fit[(r, c)] - delta[c];
            sum += d * d;
        }
    }
    Ok(sum.sqrt())
}

/// Fit `A` and `Δ` mapping `y_star` onto `y` (rows are observations).
pub fn solve_reconstruction(
    y_star: &Matrix,
    y: &Matrix,
    ridge: Ridge,
    intercept: bool,
) -> Result<ReconstructionSolution> {
    if y_star.shape() != y.shape() {
        return Err(Error::shape(format!(
            "responses differ in shape: {:?} vs {:?}",
            y_star.shape(),
            y.shape()
        )));
    }
    let c = y.cols();
    let (design, targets, mu_star, mu) = if intercept {
        let (ms, m) = (column_means(y_star), column_means(y));
        (centered(y_star, &ms), centered(y, &m), ms, m)
    } else {
        (y_star.clone(), y.clone(), vec![0.0; c], vec![0.0; c])
    };
    let lambda = match ridge {
        Ridge::Auto => Ridge::AUTO_SCALE * design.frobenius_norm().powi(2) / c as f64,
        Ridge::Fixed(l) => l,
    };
    let ls = solve_least_squares(&design, &targets, lambda)?;
    let a = ls.solution;
    let delta: Vec<f64> = (0..c)
        .map(|j| mu[j] - (0..c).map(|i| mu_star[i] * a[(i, j)]).sum::<f64>())
        .collect();

    let identity = Matrix::identity(c);
    let zeros = vec![0.0; c];
    let residual_before = residual(y, y_star, &identity, &zeros)?;
    let residual_after = residual(y, y_star, &a, &delta)?;
    if !residual_after.is_finite() || residual_after > residual_before {
        log::warn!("reconstruction fit ({residual_after:e}) is worse than identity ({residual_before:e}); keeping identity");
        return Ok(ReconstructionSolution {
            a: identity,
            delta: zeros,
            ridge: lambda,
            residual_before,
            residual_after: residual_before,
            fallback: true,
            rank_deficient: ls.rank_deficient,
        });
    }
    Ok(ReconstructionSolution {
        a,
        delta,
        ridge: lambda,
        residual_before,
        residual_after,
        fallback: false,
        rank_deficient: ls.rank_deficient,
    })
}

/// Fold the correction into a pointwise layer: `P' = P·A`, `b' = Aᵀb + Δ`.
pub fn merge_into_pointwise(p: &ConvWeights, sol: &ReconstructionSolution) -> Result<ConvWeights> {
    if p.k != 1 || p.groups != 1 || sol.a.shape() != (p.c_out, p.c_out) || sol.delta.len() != p.c_out {
        return Err(Error::shape(format!(
            "cannot merge a {:?} correction into a {}→{} k={} layer",
            sol.a.shape(),
            p.c_in,
            p.c_out,
            p.k
        )));
    }
    let merged = p.weight_matrix()?.matmul(&sol.a)?;
    let mut out = ConvWeights::from_weight_matrix(&merged, 1, 1, 0)?;
    let has_offset = sol.delta.iter().any(|d| *d != 0.0);
    out.bias = match (&p.bias, has_offset) {
        (None, false) => None,
        (b, _) => {
            let b = b.clone().unwrap_or_else(|| vec![0.0; p.c_out]);
            Some(
                (0..p.c_out)
                    .map(|j| (0..p.c_out).map(|i| b[i] * sol.a[(i, j)]).sum::<f64>() + sol.delta[j])
                    .collect(),
            )
        }
    };
    Ok(out)
}

/// Per-layer outcome of [`reconstruct_network`].
#[derive(Debug, Clone, Serialize)]
pub struct LayerReconstructionReport {
    pub layer: String,
    pub n: usize,
    pub rows: usize,
    pub ridge: f64,
    pub residual_before: f64,
    pub residual_after: f64,
    /// Residuals divided by `‖Y‖_F`.
    pub relative_before: f64,
    pub relative_after: f64,
    pub fallback: bool,
    pub rank_deficient: bool,
}

fn position_rows(fm: &FeatureMap, max_positions: Option<usize>) -> Matrix {
    let m = fm.to_position_major();
    match max_positions {
        Some(cap) if cap > 0 && cap < m.rows() => {
            let step = m.rows() as f64 / cap as f64;
            let picked: Vec<Matrix> = (0..cap)
                .map(|i| {
                    let r = (i as f64 * step) as usize;
                    m.submatrix(r, r + 1, 0, m.cols())
                })
                .collect();
            Matrix::vstack(&picked).expect("rows share a width")
        }
        _ => m,
    }
}

/// Responses `(Y*, Y)` of decomposed layer `source` over the calibration set.
pub fn collect_responses(
    original: &NetworkSpec,
    compressed: &NetworkSpec,
    source: &str,
    calib: &CalibrationSet,
    opts: &ReconstructOptions,
) -> Result<(Matrix, Matrix)> {
    let point = pointwise_layer_id(source);
    let group = group_layer_id(source);
    let gi = compressed.require(&group)?;
    let pi = compressed.require(&point)?;
    let d = compressed.layers()[gi].as_conv().expect("group layer is a conv").clone();
    let p = compressed.layers()[pi].as_conv().expect("pointwise layer is a conv").clone();
    original.require(source)?;

    let pairs = par::try_map(calib.samples(), |x| -> Result<(Matrix, Matrix)> {
        let orig = forward_to_taps(original, x, &[source])?;
        let tap = &orig.taps[source];
        let y_star = match opts.mode {
            ResponseMode::Asymmetric => forward_to_taps(compressed, x, &[point.as_str()])?.taps[&point]
                .output
                .clone(),
            ResponseMode::Symmetric => conv_forward(&p, &conv_forward(&d, &tap.input)?)?,
        };
        Ok((
            position_rows(&y_star, opts.max_positions),
            position_rows(&tap.output, opts.max_positions),
        ))
    })?;
    let (ys, y): (Vec<Matrix>, Vec<Matrix>) = pairs.into_iter().unzip();
    Ok((Matrix::vstack(&ys)?, Matrix::vstack(&y)?))
}

/// Correct every decomposed layer of `compressed`, front to back.
///
/// `original` must contain each source layer named in the pointwise
/// layers' provenance. Layers are processed strictly in order since each
/// fit depends on the corrections before it.
pub fn reconstruct_network(
    original: &NetworkSpec,
    compressed: &NetworkSpec,
    calib: &CalibrationSet,
    opts: &ReconstructOptions,
) -> Result<(NetworkSpec, Vec<LayerReconstructionReport>)> {
    if calib.shape() != original.input_shape() {
        return Err(Error::shape(format!(
            "calibration shape {} does not match model input {}",
            calib.shape(),
            original.input_shape()
        )));
    }
    let sources: Vec<(String, usize)> = compressed
        .layers()
        .iter()
        .filter_map(|l| match &l.provenance {
            Some(p) if p.role == DecomposedRole::Pointwise => Some((p.source.clone(), p.n)),
            _ => None,
        })
        .collect();
    let mut net = compressed.clone();
    let mut reports = Vec::with_capacity(sources.len());
    for (source, n) in sources {
        let run = || -> Result<(NetworkSpec, LayerReconstructionReport)> {
            let (y_star, y) = collect_responses(original, &net, &source, calib, opts)?;
            let sol = solve_reconstruction(&y_star, &y, opts.ridge, opts.intercept)?;
            let point = pointwise_layer_id(&source);
            let p = net.layer(&point).and_then(|l| l.as_conv()).expect("pointwise layer exists");
            let merged = merge_into_pointwise(p, &sol)?;
            let y_norm = y.frobenius_norm();
            let rel = |r: f64| if y_norm > 0.0 { r / y_norm } else { 0.0 };
            let report = LayerReconstructionReport {
                layer: source.clone(),
                n,
                rows: y.rows(),
                ridge: sol.ridge,
                residual_before: sol.residual_before,
                residual_after: sol.residual_after,
                relative_before: rel(sol.residual_before),
                relative_after: rel(sol.residual_after),
                fallback: sol.fallback,
                rank_deficient: sol.rank_deficient,
            };
            Ok((replace_pointwise(&net, &source, merged)?, report))
        };
        let (next, report) = run().map_err(|e| e.in_layer(&source))?;
        log::info!(
            "{source}: residual {:.4e} -> {:.4e}{}",
            report.relative_before,
            report.relative_after,
            if report.fallback { " (identity kept)" } else { "" }
        );
        net = next;
        reports.push(report);
    }
    Ok((net, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn planted_solution() {
        let y_star = gaussian(200, 4, 1);
        let m = gaussian(4, 4, 2);
        let y = y_star.matmul(&m).unwrap();
        let sol = solve_reconstruction(&y_star, &y, Ridge::Fixed(0.0), false).unwrap();
        assert!(sol.a.sub(&m).unwrap().max_abs() < 1e-8);
        assert!(sol.residual_after < 1e-9);
        assert!(!sol.fallback);
    }

    #[test]
    fn planted_offset() {
        let y_star = gaussian(300, 3, 3);
        let m = gaussian(3, 3, 4);
        let offset = [1.5, -2.0, 0.25];
        let fit = y_star.matmul(&m).unwrap();
        let y = Matrix::from_fn(300, 3, |r, c| fit[(r, c)] + offset[c]);
        let sol = solve_reconstruction(&y_star, &y, Ridge::Fixed(0.0), true).unwrap();
        assert!(sol.a.sub(&m).unwrap().max_abs() < 1e-8);
        for (d, o) in sol.delta.iter().zip(offset) {
            assert!((d - o).abs() < 1e-8);
        }
    }

    #[test]
    fn identity_when_already_exact() {
        let y = gaussian(50, 3, 5);
        let sol = solve_reconstruction(&y, &y, Ridge::Auto, true).unwrap();
        assert!(sol.residual_after <= sol.residual_before);
        assert_eq!(sol.residual_before, 0.0);
    }

    #[test]
    fn merge_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = ConvWeights::random(3, 4, 1, 1, 1, 0, true, &mut rng).unwrap();
        let sol = ReconstructionSolution {
            a: gaussian(4, 4, 7),
            delta: vec![0.1, 0.2, 0.3, 0.4],
            ridge: 0.0,
            residual_before: 0.0,
            residual_after: 0.0,
            fallback: false,
            rank_deficient: false,
        };
        let merged = merge_into_pointwise(&p, &sol).unwrap();
        let x = FeatureMap::standard_normal(Shape3::new(3, 2, 2), &mut rng);
        let lhs = conv_forward(&merged, &x).unwrap().to_position_major();
        let base = conv_forward(&p, &x).unwrap().to_position_major().matmul(&sol.a).unwrap();
        let rhs = Matrix::from_fn(4, 4, |r, c| base[(r, c)] + sol.delta[c]);
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let a = gaussian(5, 2, 8);
        let b = gaussian(5, 3, 9);
        assert!(solve_reconstruction(&a, &b, Ridge::Auto, true).is_err());
    }

    #[test]
    fn calibration_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.json");
        let set = CalibrationSet::synthetic(Shape3::new(2, 3, 3), 4, 11).unwrap();
        set.save(&path).unwrap();
        let back = CalibrationSet::load(&path).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in set.samples().iter().zip(back.samples()) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
        fs::write(dir.path().join("calib.bin"), [0u8; 7]).unwrap();
        assert!(matches!(CalibrationSet::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn synthetic_is_seeded() {
        let s = Shape3::new(1, 2, 2);
        assert_eq!(
            CalibrationSet::synthetic(s, 3, 1).unwrap(),
            CalibrationSet::synthetic(s, 3, 1).unwrap()
        );
        assert_ne!(
            CalibrationSet::synthetic(s, 3, 1).unwrap(),
            CalibrationSet::synthetic(s, 3, 2).unwrap()
        );
        assert!(CalibrationSet::synthetic(s, 0, 1).is_err());
    }

    #[test]
    fn position_cap() {
        let fm = FeatureMap::from_fn(Shape3::new(1, 4, 4), |_, y, x| (y * 4 + x) as f64);
        let m = position_rows(&fm, Some(4));
        assert_eq!(m.shape(), (4, 1));
        assert_eq!(m.column(0), vec![0.0, 4.0, 8.0, 12.0]);
    }
}
