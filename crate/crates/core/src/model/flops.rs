//! FLOPs accounting.
//!
//! Convention: two operations per multiply-accumulate; bias, activations,
//! pooling, channel affines and residual adds are free. Under this
//! convention ResNet-34 at 224×224 counts 7.33 GFLOPs.

use serde::Serialize;

use super::graph::NetworkSpec;
use super::layer::{ConvWeights, FcWeights, LayerKind};
use crate::error::{Error, Result};
use crate::tensor::Shape3;

/// `2 · (c_in / groups) · k² · c_out · out_h · out_w`.
pub fn flops_of_layer(conv: &ConvWeights, out_h: usize, out_w: usize) -> u64 {
    2 * (conv.in_per_group() as u64)
        * (conv.k * conv.k) as u64
        * conv.c_out as u64
        * out_h as u64
        * out_w as u64
}

pub fn fc_flops(fc: &FcWeights) -> u64 {
    2 * fc.in_features as u64 * fc.out_features as u64
}

/// FLOPs of layer `i` in `net`.
pub fn layer_flops(net: &NetworkSpec, i: usize) -> u64 {
    let out = net.out_shape(i);
    match &net.layers()[i].kind {
        LayerKind::Conv(c) => flops_of_layer(c, out.h, out.w),
        LayerKind::Fc(f) => fc_flops(f),
        _ => 0,
    }
}

pub fn network_flops(net: &NetworkSpec) -> u64 {
    (0..net.len()).map(|i| layer_flops(net, i)).sum()
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerFlops {
    pub id: String,
    pub kind: &'static str,
    pub stage: String,
    pub input: Shape3,
    pub output: Shape3,
    pub flops: u64,
}

pub fn flops_table(net: &NetworkSpec) -> Vec<LayerFlops> {
    net.layers()
        .iter()
        .enumerate()
        .map(|(i, l)| LayerFlops {
            id: l.id.clone(),
            kind: l.kind.name(),
            stage: l.stage.clone(),
            input: net.in_shape(i),
            output: net.out_shape(i),
            flops: layer_flops(net, i),
        })
        .collect()
}

/// Cost of a decomposed layer relative to the original,
/// `n / c_out + 1 / k²`, also kept as the exact fraction
/// `(n·k² + c_out) / (c_out·k²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecomposedRatio {
    pub ratio: f64,
    pub numerator: u64,
    pub denominator: u64,
    /// False when the pair costs at least as much as the original layer.
    pub compresses: bool,
}

pub fn flops_ratio_decomposed(c_in: usize, c_out: usize, k: usize, n: usize) -> Result<DecomposedRatio> {
    if c_in == 0 || c_out == 0 || k == 0 {
        return Err(Error::invalid("dimensions must be positive"));
    }
    if n == 0 || n > c_in || !c_in.is_multiple_of(n) {
        return Err(Error::invalid(format!(
            "n = {n} must divide c_in = {c_in} (valid: {:?})",
            divisors(c_in)
        )));
    }
    let kk = (k * k) as u64;
    let numerator = n as u64 * kk + c_out as u64;
    let denominator = c_out as u64 * kk;
    Ok(DecomposedRatio {
        ratio: n as f64 / c_out as f64 + 1.0 / kk as f64,
        numerator,
        denominator,
        compresses: numerator < denominator,
    })
}

/// Divisors of `x` in ascending order.
pub fn divisors(x: usize) -> Vec<usize> {
    (1..=x).filter(|d| x.is_multiple_of(*d)).collect()
}
