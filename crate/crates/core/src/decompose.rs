//! Filter-group decomposition of a convolution.
//!
//! The `(c_in·k²) × c_out` weight matrix `W` is cut into `c_in / n`
//! horizontal blocks `W_i` of `n·k²` rows (the rows belonging to `n`
//! consecutive input channels, in im2col order). Each block keeps its top
//! `n` singular triplets, `W_i ≈ (U_n Σ_n) V_nᵀ`; the left factors become
//! the groups of a block-diagonal `k×k` group convolution `D` and the right
//! factors stack into a `1×1` convolution `P`. No nonlinearity sits between
//! the two, so `W ≈ D·P` exactly as matrices.
//!
//! Singular values are absorbed into `D`, leaving `P` with orthonormal
//! rows per block. Stride and padding move to `D`; `P` is stride 1, pad 0
//! and carries the original bias.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};
use crate::model::flops::{divisors, flops_of_layer};
use crate::model::{ConvWeights, DecomposedRole, LayerKind, LayerSpec, NetworkSpec, Provenance};
use crate::par;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecomposeOptions {
    /// Decompose 1×1 convolutions too. Off by default: with `k = 1` the pair
    /// costs `n / c_out + 1` of the original and never saves anything.
    pub force_pointwise: bool,
}

/// The `(D, P)` pair replacing one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupDecomposition {
    pub n: usize,
    /// `c_in → c_in`, `c_in / n` groups, original kernel, stride and pad.
    pub d_layer: ConvWeights,
    /// `c_in → c_out`, 1×1, stride 1, pad 0, original bias.
    pub p_layer: ConvWeights,
    /// Full descending spectrum of each block `W_i`.
    pub block_singular_values: Vec<Vec<f64>>,
    /// Frobenius error `‖W_i − D_i P_iᵀ‖` of each block.
    pub block_errors: Vec<f64>,
    /// `‖W − D·P‖_F` over all blocks.
    pub truncation_error: f64,
}

impl GroupDecomposition {
    pub fn groups(&self) -> usize {
        self.d_layer.groups
    }

    /// Block-diagonal `(c_in·k²) × c_in` matrix of `D`.
    pub fn d_matrix(&self) -> Result<Matrix> {
        self.d_layer.block_diagonal_matrix()
    }

    /// `c_in × c_out` matrix of `P`.
    pub fn p_matrix(&self) -> Result<Matrix> {
        self.p_layer.weight_matrix()
    }

    /// `D·P`, the approximation of `W`.
    pub fn approximation(&self) -> Result<Matrix> {
        self.d_matrix()?.matmul(&self.p_matrix()?)
    }

    /// FLOPs of `D` and `P` for the original layer's output size.
    pub fn flops(&self, out_h: usize, out_w: usize) -> (u64, u64) {
        (
            flops_of_layer(&self.d_layer, out_h, out_w),
            flops_of_layer(&self.p_layer, out_h, out_w),
        )
    }
}

/// Check that `n` splits `c_in` into whole groups.
pub fn check_group_size(c_in: usize, n: usize) -> Result<()> {
    if n == 0 || n > c_in || !c_in.is_multiple_of(n) {
        return Err(Error::invalid(format!(
            "group size n = {n} must divide c_in = {c_in}; valid values: {:?}",
            divisors(c_in)
        )));
    }
    Ok(())
}

/// Split `W` into its `c_in / n` row blocks, each `(n·k²) × c_out`.
pub fn partition_blocks(w: &ConvWeights, n: usize) -> Result<Vec<Matrix>> {
    if w.groups != 1 {
        return Err(Error::invalid(format!(
            "only ungrouped convolutions can be decomposed (groups = {})",
            w.groups
        )));
    }
    check_group_size(w.c_in, n)?;
    let full = w.weight_matrix()?;
    let rows = n * w.k * w.k;
    Ok((0..w.c_in / n)
        .map(|i| full.submatrix(i * rows, (i + 1) * rows, 0, w.c_out))
        .collect())
}

pub fn decompose_layer(w: &ConvWeights, n: usize, opts: DecomposeOptions) -> Result<GroupDecomposition> {
    if w.k == 1 && !opts.force_pointwise {
        return Err(Error::invalid(
            "1x1 convolution: group decomposition saves nothing at k = 1 (force it to decompose anyway)",
        ));
    }
    let blocks = partition_blocks(w, n)?;
    let kk = w.k * w.k;
    let rows = n * kk;
    let groups = w.c_in / n;

    let factored = par::try_map(&blocks, |b| -> Result<(Matrix, Matrix, Vec<f64>, f64)> {
        let s = svd(b)?;
        let keep = n.min(s.singular_values.len());
        let mut d = Matrix::zeros(rows, n);
        d.set_block(0, 0, &s.u.leading_columns(keep).scale_columns(&s.singular_values[..keep]));
        let mut p = Matrix::zeros(n, w.c_out);
        p.set_block(0, 0, &s.vt.leading_rows(keep));
        let tail = s.singular_values[keep..].iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok((d, p, s.singular_values, tail))
    })?;

    let filter = n * kk;
    let mut d_w = vec![0.0; w.c_in * filter];
    let mut p_w = vec![0.0; w.c_out * w.c_in];
    let mut block_singular_values = Vec::with_capacity(groups);
    let mut block_errors = Vec::with_capacity(groups);
    for (i, (d, p, sv, err)) in factored.into_iter().enumerate() {
        for j in 0..n {
            let ch = i * n + j;
            for r in 0..filter {
                d_w[ch * filter + r] = d[(r, j)];
            }
            for o in 0..w.c_out {
                p_w[o * w.c_in + ch] = p[(j, o)];
            }
        }
        block_singular_values.push(sv);
        block_errors.push(err);
    }
    let truncation_error = block_errors.iter().map(|e| e * e).sum::<f64>().sqrt();

    let d_layer = ConvWeights::new(w.c_in, w.c_in, w.k, groups, w.stride, w.pad)?.with_weights(d_w)?;
    let mut p_layer = ConvWeights::new(w.c_in, w.c_out, 1, 1, 1, 0)?.with_weights(p_w)?;
    p_layer.bias = w.bias.clone();

    Ok(GroupDecomposition {
        n,
        d_layer,
        p_layer,
        block_singular_values,
        block_errors,
        truncation_error,
    })
}

/// Rank of the composed Jacobian `D·P` when every factor is full rank:
/// `min(c_in, c_out)`, whatever `n` is.
pub fn decomposed_jacobian_rank(c_in: usize, c_out: usize, _n: usize) -> usize {
    c_in.min(c_out)
}

pub fn group_layer_id(source: &str) -> String {
    format!("{source}.group")
}

pub fn pointwise_layer_id(source: &str) -> String {
    format!("{source}.point")
}

/// Per-layer summary of a network decomposition.
#[derive(Debug, Clone, Serialize)]
pub struct DecomposedLayerReport {
    pub layer: String,
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub groups: usize,
    pub block_errors: Vec<f64>,
    pub truncation_error: f64,
    /// `truncation_error / ‖W‖_F`.
    pub relative_error: f64,
    pub flops_before: u64,
    pub flops_after: u64,
}

/// A decomposed network and the decompositions that produced it.
#[derive(Debug, Clone)]
pub struct DecomposedNetwork {
    pub net: NetworkSpec,
    /// In network order.
    pub layers: Vec<(String, GroupDecomposition)>,
    pub reports: Vec<DecomposedLayerReport>,
}

/// Replace each listed `(layer id, n)` with its `(D, P)` pair.
///
/// Layers are decomposed independently (in parallel with the `parallel`
/// feature). References to a replaced layer are rewired to its pointwise
/// half, so residual joins and branches keep working.
pub fn decompose_network(
    net: &NetworkSpec,
    assignments: &[(String, usize)],
    opts: DecomposeOptions,
) -> Result<DecomposedNetwork> {
    let targets = resolve_targets(net, assignments)?;

    let decomps = par::try_map(&targets, |&(i, n)| {
        let layer = &net.layers()[i];
        let conv = layer.as_conv().expect("checked above");
        decompose_layer(conv, n, opts).map_err(|e| e.in_layer(&layer.id))
    })?;

    let mut layers_out = Vec::new();
    let mut pairs = Vec::new();
    let mut reports = Vec::new();
    let mut next = targets.iter().zip(decomps).peekable();
    for (i, layer) in net.layers().iter().enumerate() {
        match next.peek() {
            Some(((j, _), _)) if *j == i => {
                let ((_, _), dec) = next.next().expect("peeked");
                let conv = layer.as_conv().expect("checked above");
                let out = net.out_shape(i);
                let (fd, fp) = dec.flops(out.h, out.w);
                let norm = conv.weight_matrix()?.frobenius_norm();
                reports.push(DecomposedLayerReport {
                    layer: layer.id.clone(),
                    n: dec.n,
                    c_in: conv.c_in,
                    c_out: conv.c_out,
                    k: conv.k,
                    groups: dec.groups(),
                    block_errors: dec.block_errors.clone(),
                    truncation_error: dec.truncation_error,
                    relative_error: if norm > 0.0 { dec.truncation_error / norm } else { 0.0 },
                    flops_before: flops_of_layer(conv, out.h, out.w),
                    flops_after: fd + fp,
                });
                layers_out.extend(pair_layers(layer, &dec.d_layer, &dec.p_layer, dec.n));
                pairs.push((layer.id.clone(), dec));
            }
            _ => layers_out.push(layer.clone()),
        }
    }
    let renamed: Vec<String> = pairs.iter().map(|(id, _)| id.clone()).collect();
    rewire(&mut layers_out, &renamed);
    Ok(DecomposedNetwork {
        net: net.with_layers(layers_out)?,
        layers: pairs,
        reports,
    })
}

/// Same restructuring as [`decompose_network`] on shapes alone, for
/// networks whose parameters are not materialized.
pub fn restructure_network(
    net: &NetworkSpec,
    assignments: &[(String, usize)],
    opts: DecomposeOptions,
) -> Result<NetworkSpec> {
    let targets = resolve_targets(net, assignments)?;
    let mut layers_out = Vec::new();
    let mut next = targets.iter().peekable();
    for (i, layer) in net.layers().iter().enumerate() {
        match next.peek() {
            Some(&&(j, n)) if j == i => {
                next.next();
                let conv = layer.as_conv().expect("checked above");
                let check = || -> Result<()> {
                    if conv.k == 1 && !opts.force_pointwise {
                        return Err(Error::invalid("1x1 convolution: group decomposition saves nothing at k = 1"));
                    }
                    if conv.groups != 1 {
                        return Err(Error::invalid("only ungrouped convolutions can be decomposed"));
                    }
                    check_group_size(conv.c_in, n)
                };
                check().map_err(|e| e.in_layer(&layer.id))?;
                let d = ConvWeights::new(conv.c_in, conv.c_in, conv.k, conv.c_in / n, conv.stride, conv.pad)?;
                let p = ConvWeights::new(conv.c_in, conv.c_out, 1, 1, 1, 0)?;
                layers_out.extend(pair_layers(layer, &d, &p, n));
            }
            _ => layers_out.push(layer.clone()),
        }
    }
    let renamed: Vec<String> = targets.iter().map(|&(i, _)| net.layers()[i].id.clone()).collect();
    rewire(&mut layers_out, &renamed);
    net.with_layers(layers_out)
}

fn resolve_targets(net: &NetworkSpec, assignments: &[(String, usize)]) -> Result<Vec<(usize, usize)>> {
    let mut targets: Vec<(usize, usize)> = Vec::with_capacity(assignments.len());
    for (id, n) in assignments {
        let i = net.require(id)?;
        if targets.iter().any(|&(j, _)| j == i) {
            return Err(Error::invalid(format!("layer `{id}` listed twice")));
        }
        if net.layers()[i].as_conv().is_none() {
            return Err(Error::invalid(format!("layer `{id}` is not a convolution")));
        }
        targets.push((i, *n));
    }
    targets.sort_unstable();
    Ok(targets)
}

/// Swap the pointwise weights and bias of an already decomposed layer.
pub fn replace_pointwise(net: &NetworkSpec, source: &str, p_layer: ConvWeights) -> Result<NetworkSpec> {
    let id = pointwise_layer_id(source);
    let i = net.require(&id)?;
    let mut layers = net.layers().to_vec();
    match &mut layers[i].kind {
        LayerKind::Conv(c) if c.c_in == p_layer.c_in && c.c_out == p_layer.c_out && p_layer.k == 1 => {
            *c = p_layer;
        }
        _ => return Err(Error::shape(format!("`{id}` does not match the replacement pointwise layer"))),
    }
    net.with_layers(layers)
}

fn pair_layers(original: &LayerSpec, d: &ConvWeights, p: &ConvWeights, n: usize) -> [LayerSpec; 2] {
    let group = LayerSpec {
        id: group_layer_id(&original.id),
        stage: original.stage.clone(),
        input: original.input.clone(),
        kind: LayerKind::Conv(d.clone()),
        provenance: Some(Provenance {
            source: original.id.clone(),
            n,
            role: DecomposedRole::Group,
        }),
    };
    let point = LayerSpec {
        id: pointwise_layer_id(&original.id),
        stage: original.stage.clone(),
        input: None,
        kind: LayerKind::Conv(p.clone()),
        provenance: Some(Provenance {
            source: original.id.clone(),
            n,
            role: DecomposedRole::Pointwise,
        }),
    };
    [group, point]
}

fn rewire(layers: &mut [LayerSpec], renamed: &[String]) {
    let remap = |s: &mut String| {
        if renamed.contains(s) {
            *s = pointwise_layer_id(s);
        }
    };
    for l in layers.iter_mut() {
        if let Some(src) = l.input.as_mut() {
            remap(src);
        }
        if let LayerKind::Add { source } = &mut l.kind {
            remap(source);
        }
    }
}
