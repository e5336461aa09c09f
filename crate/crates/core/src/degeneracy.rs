//! Rank and spectrum diagnostics.
//!
//! Three ways to spend the same FLOPs on a `k×k` layer are compared:
//!
//! - plain SVD of `W` to `C_d` components (a `k×k` conv to `C_d` channels
//!   followed by a 1×1 conv), with Jacobian rank `C_d`;
//! - a spatial split into `k×1` and `1×k` convs with `C_d'` middle
//!   channels, reaching rank `min(C_d'·k, c_out)`;
//! - the group decomposition at `n`, whose rank stays `min(c_in, c_out)`.
//!
//! Layers are treated as their weight matrices (the linear case), so the
//! Jacobian of a factorized pair is the product of its factors.

use std::io::Write;

use serde::Serialize;

use crate::decompose::GroupDecomposition;
use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, singular_values, svd, Matrix};
use crate::model::{forward_traced, ConvWeights, DecomposedRole, LayerKind, NetworkSpec};
use crate::tensor::FeatureMap;

/// Relative threshold for counting a singular value as nonzero.
pub const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StrategyRankReport {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub n: usize,
    /// Cost of each strategy relative to the original layer.
    pub flops_ratio: f64,
    /// `(c_in·k²·n + c_in·c_out) / (c_in·k² + c_out)`.
    pub c_d: f64,
    /// `(c_in·k²·n + c_in·c_out) / (c_in + c_out)`.
    pub c_d_prime_k: f64,
    /// `min(⌊C_d⌋, c_out)`.
    pub rank_svd: usize,
    /// `min(⌊C_d'·k⌋, c_out)`.
    pub rank_spatial: usize,
    /// `min(c_in, c_out)`.
    pub rank_group: usize,
}

/// Ranks reached by the three strategies at the FLOPs of group size `n`.
///
/// Integer ranks are floored from exact integer arithmetic so a ratio that
/// lands on a whole number is not lost to rounding.
pub fn equal_flops_ranks(c_in: usize, c_out: usize, k: usize, n: usize) -> Result<StrategyRankReport> {
    if c_in == 0 || c_out == 0 || k == 0 {
        return Err(Error::invalid("dimensions must be positive"));
    }
    if n == 0 || n > c_in {
        return Err(Error::invalid(format!("n = {n} must lie in 1..={c_in}")));
    }
    let (ci, co, kk, nn) = (c_in as u128, c_out as u128, (k * k) as u128, n as u128);
    let num = ci * kk * nn + ci * co;
    let den_svd = ci * kk + co;
    let den_spatial = ci + co;
    Ok(StrategyRankReport {
        c_in,
        c_out,
        k,
        n,
        flops_ratio: n as f64 / c_out as f64 + 1.0 / kk as f64,
        c_d: num as f64 / den_svd as f64,
        c_d_prime_k: num as f64 / den_spatial as f64,
        rank_svd: ((num / den_svd) as usize).min(c_out),
        rank_spatial: ((num / den_spatial) as usize).min(c_out),
        rank_group: c_in.min(c_out),
    })
}

/// Whether the cumulative curve is built from `σ²` or from `σ`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyMode {
    #[default]
    Squared,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyCurve {
    pub mode: EnergyMode,
    /// Descending.
    pub singular_values: Vec<f64>,
    /// `Σ_{j≤i} e_j / Σ e`, with `e = σ²` or `σ`.
    pub cumulative_energy: Vec<f64>,
}

impl EnergyCurve {
    pub fn from_singular_values(singular_values: Vec<f64>, mode: EnergyMode) -> Result<Self> {
        if singular_values.is_empty() {
            return Err(Error::invalid("empty spectrum"));
        }
        if singular_values.windows(2).any(|w| w[0] < w[1]) || singular_values.iter().any(|s| s.is_nan() || *s < 0.0) {
            return Err(Error::invalid("singular values must be non-negative and descending"));
        }
        let e: Vec<f64> = singular_values
            .iter()
            .map(|s| match mode {
                EnergyMode::Squared => s * s,
                EnergyMode::Linear => *s,
            })
            .collect();
        let total: f64 = e.iter().sum();
        if total == 0.0 {
            return Err(Error::Numerical("zero matrix has no energy curve".into()));
        }
        let mut acc = 0.0;
        let mut cumulative_energy: Vec<f64> = e
            .iter()
            .map(|x| {
                acc += x;
                acc / total
            })
            .collect();
        *cumulative_energy.last_mut().expect("non-empty") = 1.0;
        Ok(EnergyCurve {
            mode,
            singular_values,
            cumulative_energy,
        })
    }

    pub fn len(&self) -> usize {
        self.singular_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.singular_values.is_empty()
    }

    /// Number of values needed to reach `1 − tol` of the energy.
    pub fn components_to_reach(&self, tol: f64) -> usize {
        self.cumulative_energy
            .iter()
            .position(|&c| c >= 1.0 - tol)
            .map_or(self.len(), |i| i + 1)
    }

    /// Singular values above `rel_tol·σ₁`.
    pub fn nonzero_count(&self, rel_tol: f64) -> usize {
        numerical_rank(&self.singular_values, rel_tol)
    }

    /// CSV with columns `index, sigma, cumulative_energy`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "sigma", "cumulative_energy"])?;
        for (i, (s, c)) in self.singular_values.iter().zip(&self.cumulative_energy).enumerate() {
            w.write_record([i.to_string(), format!("{s:e}"), format!("{c:.17}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn energy_curve(m: &Matrix, mode: EnergyMode) -> Result<EnergyCurve> {
    EnergyCurve::from_singular_values(singular_values(m)?, mode)
}

/// Energy curve of a single convolution's weight matrix.
pub fn jacobian_energy_curve(conv: &ConvWeights, mode: EnergyMode) -> Result<EnergyCurve> {
    energy_curve(&conv.weight_matrix()?, mode)
}

/// Energy curve of `D·P` for a decomposed layer.
pub fn pair_energy_curve(d: &ConvWeights, p: &ConvWeights, mode: EnergyMode) -> Result<EnergyCurve> {
    energy_curve(&d.block_diagonal_matrix()?.matmul(&p.weight_matrix()?)?, mode)
}

pub fn decomposition_energy_curve(dec: &GroupDecomposition, mode: EnergyMode) -> Result<EnergyCurve> {
    pair_energy_curve(&dec.d_layer, &dec.p_layer, mode)
}

/// The plain-SVD strategy at `rank`: `W¹ = U_r Σ_r` and `W² = V_rᵀ`,
/// returned as the product `W¹·W²`.
pub fn svd_strategy_matrix(w: &Matrix, rank: usize) -> Result<Matrix> {
    if rank == 0 {
        return Err(Error::invalid("rank must be at least 1"));
    }
    let s = svd(w)?;
    let r = rank.min(s.singular_values.len());
    let w1 = s.u.leading_columns(r).scale_columns(&s.singular_values[..r]);
    w1.matmul(&s.vt.leading_rows(r))
}

/// Side-by-side comparison of one layer at equal FLOPs.
#[derive(Debug, Clone, Serialize)]
pub struct LayerDegeneracy {
    pub layer: String,
    pub ranks: StrategyRankReport,
    /// Numerical rank of the assembled `D·P`.
    pub measured_rank_group: usize,
    /// Numerical rank of the SVD strategy at `⌊C_d⌋`.
    pub measured_rank_svd: usize,
    pub original: EnergyCurve,
    pub svd_strategy: EnergyCurve,
    pub group: EnergyCurve,
}

/// Compare `original` with its decomposed pair `(d, p)` at group size `n`.
pub fn layer_degeneracy(
    layer: &str,
    original: &ConvWeights,
    d: &ConvWeights,
    p: &ConvWeights,
    n: usize,
    mode: EnergyMode,
) -> Result<LayerDegeneracy> {
    let ranks = equal_flops_ranks(original.c_in, original.c_out, original.k, n)?;
    let w = original.weight_matrix()?;
    let svd_m = svd_strategy_matrix(&w, ranks.rank_svd)?;
    let original_curve = energy_curve(&w, mode)?;
    let svd_strategy = energy_curve(&svd_m, mode)?;
    let group = pair_energy_curve(d, p, mode)?;
    Ok(LayerDegeneracy {
        layer: layer.to_string(),
        ranks,
        measured_rank_group: group.nonzero_count(RANK_TOL),
        measured_rank_svd: svd_strategy.nonzero_count(RANK_TOL),
        original: original_curve,
        svd_strategy,
        group,
    })
}

/// CSV of rank reports, one row per layer and strategy.
pub fn write_rank_csv<W: Write>(rows: &[LayerDegeneracy], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "layer", "strategy", "c_in", "c_out", "k", "n", "flops_ratio", "width", "rank", "measured_rank",
    ])?;
    for r in rows {
        let q = &r.ranks;
        let common = [q.c_in.to_string(), q.c_out.to_string(), q.k.to_string(), q.n.to_string()];
        let entries = [
            ("svd", format!("{}", q.c_d), q.rank_svd, Some(r.measured_rank_svd)),
            ("spatial", format!("{}", q.c_d_prime_k), q.rank_spatial, None),
            ("group", q.n.to_string(), q.rank_group, Some(r.measured_rank_group)),
        ];
        for (strategy, width, rank, measured) in entries {
            let mut rec = vec![r.layer.clone(), strategy.to_string()];
            rec.extend(common.iter().cloned());
            rec.push(format!("{}", q.flops_ratio));
            rec.push(width);
            rec.push(rank.to_string());
            rec.push(measured.map(|m| m.to_string()).unwrap_or_default());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Streaming Pearson correlation between the channels of two signals
/// observed together. Batches are merged with the pairwise update for
/// co-moments, so the result does not depend on how samples are batched
/// beyond rounding.
#[derive(Debug, Clone)]
pub struct CorrelationAccumulator {
    a: usize,
    b: usize,
    count: f64,
    mean_a: Vec<f64>,
    mean_b: Vec<f64>,
    m2_a: Vec<f64>,
    m2_b: Vec<f64>,
    /// `a × b` co-moment.
    cross: Matrix,
}

impl CorrelationAccumulator {
    pub fn new(a: usize, b: usize) -> Result<Self> {
        if a == 0 || b == 0 {
            return Err(Error::invalid("correlation needs at least one channel per side"));
        }
        Ok(CorrelationAccumulator {
            a,
            b,
            count: 0.0,
            mean_a: vec![0.0; a],
            mean_b: vec![0.0; b],
            m2_a: vec![0.0; a],
            m2_b: vec![0.0; b],
            cross: Matrix::zeros(a, b),
        })
    }

    /// Add observations: rows of `x` (`· × a`) pair with rows of `y` (`· × b`).
    pub fn push(&mut self, x: &Matrix, y: &Matrix) -> Result<()> {
        if x.cols() != self.a || y.cols() != self.b || x.rows() != y.rows() {
            return Err(Error::shape(format!(
                "correlation batch {:?} / {:?}, expected (·, {}) / (·, {})",
                x.shape(),
                y.shape(),
                self.a,
                self.b
            )));
        }
        let m = x.rows() as f64;
        let mean = |z: &Matrix| -> Vec<f64> {
            let mut out = vec![0.0; z.cols()];
            for r in 0..z.rows() {
                for (o, v) in out.iter_mut().zip(z.row(r)) {
                    *o += v;
                }
            }
            out.iter().map(|s| s / m).collect()
        };
        let (ma, mb) = (mean(x), mean(y));
        let xc = Matrix::from_fn(x.rows(), self.a, |r, c| x[(r, c)] - ma[c]);
        let yc = Matrix::from_fn(y.rows(), self.b, |r, c| y[(r, c)] - mb[c]);
        let cross = xc.t_matmul(&yc)?;
        let m2 = |z: &Matrix, c: usize| (0..z.rows()).map(|r| z[(r, c)] * z[(r, c)]).sum::<f64>();

        let n = self.count + m;
        let w = self.count * m / n;
        let da: Vec<f64> = ma.iter().zip(&self.mean_a).map(|(b, a)| b - a).collect();
        let db: Vec<f64> = mb.iter().zip(&self.mean_b).map(|(b, a)| b - a).collect();
        for i in 0..self.a {
            for j in 0..self.b {
                let v = self.cross[(i, j)] + cross[(i, j)] + da[i] * db[j] * w;
                self.cross.as_mut_slice()[i * self.b + j] = v;
            }
        }
        for (i, d) in da.iter().enumerate() {
            self.m2_a[i] += m2(&xc, i) + d * d * w;
            self.mean_a[i] += d * m / n;
        }
        for (j, d) in db.iter().enumerate() {
            self.m2_b[j] += m2(&yc, j) + d * d * w;
            self.mean_b[j] += d * m / n;
        }
        self.count = n;
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.count as usize
    }

    pub fn finish(&self, absolute: bool) -> Result<CorrelationMatrix> {
        if self.count < 2.0 {
            return Err(Error::invalid("correlation needs at least two observations"));
        }
        let flat = |m2: &[f64], mean: &[f64]| -> Vec<bool> {
            m2.iter()
                .zip(mean)
                .map(|(v, mu)| (v / self.count).sqrt() <= 1e-12 * mu.abs().max(1.0))
                .collect()
        };
        let za = flat(&self.m2_a, &self.mean_a);
        let zb = flat(&self.m2_b, &self.mean_b);
        let values = Matrix::from_fn(self.a, self.b, |i, j| {
            if za[i] || zb[j] {
                return 0.0;
            }
            let r = (self.cross[(i, j)] / (self.m2_a[i] * self.m2_b[j]).sqrt()).clamp(-1.0, 1.0);
            if absolute {
                r.abs()
            } else {
                r
            }
        });
        Ok(CorrelationMatrix {
            values,
            zero_variance_rows: (0..self.a).filter(|&i| za[i]).collect(),
            zero_variance_cols: (0..self.b).filter(|&j| zb[j]).collect(),
            samples: self.samples(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    /// Rows: channels of the first signal; columns: the second.
    pub values: Matrix,
    /// Channels with zero variance; their entries are 0.
    pub zero_variance_rows: Vec<usize>,
    pub zero_variance_cols: Vec<usize>,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockStats {
    pub group_size: usize,
    pub in_block_mean: f64,
    pub out_block_mean: f64,
    pub in_block_count: usize,
    pub out_block_count: usize,
}

impl CorrelationMatrix {
    /// Mean entry inside versus outside the block-diagonal mask of
    /// `group_size`-channel groups. Flagged channels are left out.
    pub fn block_stats(&self, group_size: usize) -> Result<BlockStats> {
        let (a, b) = self.values.shape();
        if a != b || group_size == 0 || a % group_size != 0 {
            return Err(Error::shape(format!(
                "block mask of size {group_size} does not fit a {a}×{b} correlation matrix"
            )));
        }
        let (mut si, mut ni, mut so, mut no) = (0.0, 0, 0.0, 0);
        for i in (0..a).filter(|i| !self.zero_variance_rows.contains(i)) {
            for j in (0..b).filter(|j| !self.zero_variance_cols.contains(j)) {
                let v = self.values[(i, j)];
                if i / group_size == j / group_size {
                    si += v;
                    ni += 1;
                } else {
                    so += v;
                    no += 1;
                }
            }
        }
        let mean = |s: f64, c: usize| if c == 0 { f64::NAN } else { s / c as f64 };
        Ok(BlockStats {
            group_size,
            in_block_mean: mean(si, ni),
            out_block_mean: mean(so, no),
            in_block_count: ni,
            out_block_count: no,
        })
    }

    /// Square CSV: header of column indices, one row per row channel.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["channel".to_string()];
        header.extend((0..self.values.cols()).map(|j| j.to_string()));
        w.write_record(&header)?;
        for i in 0..self.values.rows() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.values.row(i).iter().map(|v| format!("{v:.9}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Which map stands for the previous pointwise layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationSite {
    /// The group layer's input, after any activation.
    #[default]
    PostActivation,
    /// The raw output of the preceding pointwise layer.
    PreActivation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorrelationOptions {
    pub absolute: bool,
    pub site: CorrelationSite,
}

impl Default for CorrelationOptions {
    fn default() -> Self {
        CorrelationOptions {
            absolute: true,
            site: CorrelationSite::PostActivation,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FilterCorrelation {
    pub group_layer: String,
    /// Layer whose output forms the rows.
    pub source_layer: String,
    pub matrix: CorrelationMatrix,
    pub stats: BlockStats,
}

/// The nearest pointwise half of a decomposed pair before `group_layer`.
pub fn preceding_pointwise(net: &NetworkSpec, group_layer: &str) -> Option<String> {
    let gi = net.index_of(group_layer)?;
    net.layers()[..gi]
        .iter()
        .rev()
        .find(|l| {
            matches!(l.kind, LayerKind::Conv(_))
                && l.provenance.as_ref().is_some_and(|p| p.role == DecomposedRole::Pointwise)
        })
        .map(|l| l.id.clone())
}

/// Pair each output position of `conv` with the input position at the
/// centre of its receptive field; positions whose centre falls in the
/// padding are dropped.
fn aligned_positions(input: &FeatureMap, output: &FeatureMap, conv: &ConvWeights) -> Result<(Matrix, Matrix)> {
    let (si, so) = (input.shape(), output.shape());
    let x = input.to_position_major();
    let y = output.to_position_major();
    if si.h == so.h && si.w == so.w && conv.stride == 1 && 2 * conv.pad + 1 == conv.k {
        return Ok((x, y));
    }
    let centre = |o: usize, limit: usize| -> Option<usize> {
        (o * conv.stride + conv.k / 2).checked_sub(conv.pad).filter(|&i| i < limit)
    };
    let mut pairs = Vec::new();
    for oy in 0..so.h {
        for ox in 0..so.w {
            if let (Some(iy), Some(ix)) = (centre(oy, si.h), centre(ox, si.w)) {
                pairs.push((iy * si.w + ix, oy * so.w + ox));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::shape("no output position has its centre inside the input"));
    }
    let xr = Matrix::from_fn(pairs.len(), x.cols(), |r, c| x[(pairs[r].0, c)]);
    let yr = Matrix::from_fn(pairs.len(), y.cols(), |r, c| y[(pairs[r].1, c)]);
    Ok((xr, yr))
}

/// Correlation between the channels feeding a group convolution and the
/// channels it produces, over every spatial position of every input.
/// Strided layers compare each output position with the input at the
/// centre of its window.
pub fn filter_correlation<'a>(
    net: &NetworkSpec,
    group_layer: &str,
    inputs: impl IntoIterator<Item = &'a FeatureMap>,
    opts: CorrelationOptions,
) -> Result<FilterCorrelation> {
    let gi = net.require(group_layer)?;
    let conv = net.layers()[gi]
        .as_conv()
        .ok_or_else(|| Error::invalid(format!("`{group_layer}` is not a convolution")))?;
    if conv.c_in != conv.c_out {
        return Err(Error::shape(format!(
            "`{group_layer}` maps {} to {} channels; expected a group layer of a decomposed pair",
            conv.c_in, conv.c_out
        )));
    }
    let source_layer = match opts.site {
        CorrelationSite::PostActivation => group_layer.to_string(),
        CorrelationSite::PreActivation => preceding_pointwise(net, group_layer)
            .ok_or_else(|| Error::invalid(format!("no pointwise layer precedes `{group_layer}`")))?,
    };
    let taps: Vec<&str> = if source_layer == group_layer {
        vec![group_layer]
    } else {
        vec![group_layer, source_layer.as_str()]
    };
    let mut acc = CorrelationAccumulator::new(conv.c_in, conv.c_out)?;
    let mut seen = 0;
    for x in inputs {
        let trace = forward_traced(net, x, &taps)?;
        let g = &trace.taps[group_layer];
        let rows = if source_layer == group_layer {
            &g.input
        } else {
            &trace.taps[&source_layer].output
        };
        let (x_rows, y_rows) = aligned_positions(rows, &g.output, conv)?;
        acc.push(&x_rows, &y_rows)?;
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::invalid("correlation requires calibration inputs"));
    }
    let matrix = acc.finish(opts.absolute)?;
    let stats = matrix.block_stats(conv.in_per_group())?;
    Ok(FilterCorrelation {
        group_layer: group_layer.to_string(),
        source_layer,
        matrix,
        stats,
    })
}
