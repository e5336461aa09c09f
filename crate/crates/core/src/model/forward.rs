use std::collections::BTreeMap;

use super::graph::{NetworkSpec, Source};
use super::layer::{ChannelAffine, ConvWeights, FcWeights, LayerKind};
use crate::error::{Error, Result};
use crate::linalg::{im2col, im2col_channels, Matrix};
use crate::par;
use crate::tensor::{FeatureMap, Shape3};

/// Input and output of one layer captured during a forward pass.
#[derive(Debug, Clone)]
pub struct Tap {
    pub input: FeatureMap,
    pub output: FeatureMap,
}

impl Tap {
    /// The layer input unfolded into im2col rows for `conv`.
    pub fn patches(&self, conv: &ConvWeights) -> Result<Matrix> {
        im2col(&self.input, conv.k, conv.stride, conv.pad)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Network output, or the last computed activation when the pass stopped
    /// early.
    pub output: FeatureMap,
    pub taps: BTreeMap<String, Tap>,
}

pub fn forward(net: &NetworkSpec, input: &FeatureMap) -> Result<FeatureMap> {
    Ok(run(net, input, &[], false)?.output)
}

/// Forward pass recording the input and output of every layer in `taps`.
pub fn forward_traced(net: &NetworkSpec, input: &FeatureMap, taps: &[&str]) -> Result<ForwardTrace> {
    run(net, input, taps, false)
}

/// Like [`forward_traced`] but stops once every tap has been captured.
pub fn forward_to_taps(net: &NetworkSpec, input: &FeatureMap, taps: &[&str]) -> Result<ForwardTrace> {
    run(net, input, taps, true)
}

/// Independent forward passes over a batch (parallel with the `parallel`
/// feature).
pub fn forward_batch(net: &NetworkSpec, inputs: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
    par::try_map(inputs, |x| forward(net, x))
}

fn run(net: &NetworkSpec, input: &FeatureMap, taps: &[&str], stop_early: bool) -> Result<ForwardTrace> {
    if input.shape() != net.input_shape() {
        return Err(Error::shape(format!(
            "network `{}` expects input {}, got {}",
            net.name(),
            net.input_shape(),
            input.shape()
        )));
    }
    let mut tap_idx = Vec::with_capacity(taps.len());
    for t in taps {
        tap_idx.push(net.require(t)?);
    }
    let stop_at = if stop_early { tap_idx.iter().copied().max() } else { None };

    let last_use = net.last_uses();
    let mut outputs: Vec<Option<FeatureMap>> = vec![None; net.len()];
    let mut captured = BTreeMap::new();
    let mut last = None;

    for (i, layer) in net.layers().iter().enumerate() {
        let x = match net.source(i) {
            Source::NetworkInput => input,
            Source::Layer(j) => outputs[j]
                .as_ref()
                .expect("producer output retained until its last use"),
        };
        let y = apply(&layer.kind, x, net.out_shape(i), |src| {
            if src == super::graph::INPUT_ID {
                Some(input)
            } else {
                net.index_of(src).and_then(|j| outputs[j].as_ref())
            }
        })
        .map_err(|e| e.in_layer(&layer.id))?;

        if tap_idx.contains(&i) {
            captured.insert(
                layer.id.clone(),
                Tap {
                    input: x.clone(),
                    output: y.clone(),
                },
            );
        }
        // Release activations nobody reads any more.
        for j in 0..i {
            if last_use[j] == Some(i) {
                outputs[j] = None;
            }
        }
        if stop_at == Some(i) || i + 1 == net.len() {
            last = Some(y);
            break;
        }
        if last_use[i].is_some() {
            outputs[i] = Some(y);
        }
    }

    Ok(ForwardTrace {
        output: last.expect("at least one layer"),
        taps: captured,
    })
}

fn apply<'a>(
    kind: &LayerKind,
    x: &FeatureMap,
    out_shape: Shape3,
    lookup: impl Fn(&str) -> Option<&'a FeatureMap>,
) -> Result<FeatureMap> {
    match kind {
        LayerKind::Conv(c) => conv_forward(c, x),
        LayerKind::Relu => {
            let data = x.as_slice().iter().map(|v| v.max(0.0)).collect();
            FeatureMap::from_vec(x.shape(), data)
        }
        LayerKind::MaxPool { kernel, stride, pad } => Ok(pool(x, out_shape, *kernel, *stride, *pad, true)),
        LayerKind::AvgPool { kernel, stride, pad } => Ok(pool(x, out_shape, *kernel, *stride, *pad, false)),
        LayerKind::Add { source } => {
            let other = lookup(source)
                .ok_or_else(|| Error::invalid(format!("residual source `{source}` not available")))?;
            let data = x.as_slice().iter().zip(other.as_slice()).map(|(a, b)| a + b).collect();
            FeatureMap::from_vec(x.shape(), data)
        }
        LayerKind::Fc(f) => fc_forward(f, x),
        LayerKind::ChannelAffine(a) => affine_forward(a, x),
    }
}

/// Convolution as per-group im2col + matrix product.
pub fn conv_forward(c: &ConvWeights, x: &FeatureMap) -> Result<FeatureMap> {
    let shape = x.shape();
    if shape.c != c.c_in {
        return Err(Error::shape(format!("conv expects {} channels, got {}", c.c_in, shape.c)));
    }
    let (h_out, w_out) = c.out_dims(shape.h, shape.w)?;
    let positions = h_out * w_out;
    let ipg = c.in_per_group();
    let opg = c.out_per_group();
    let mut out = vec![0.0; c.c_out * positions];

    // Each group writes a disjoint slab of output channels.
    let slabs = par::try_map_range(c.groups, |g| -> Result<Matrix> {
        let cols = im2col_channels(x, g * ipg, (g + 1) * ipg, c.k, c.stride, c.pad)?;
        cols.matmul(&c.group_matrix(g)?)
    })?;
    for (g, y) in slabs.iter().enumerate() {
        for p in 0..positions {
            for (o, &v) in y.row(p).iter().enumerate() {
                out[(g * opg + o) * positions + p] = v;
            }
        }
    }
    if let Some(bias) = &c.bias {
        for (o, b) in bias.iter().enumerate() {
            out[o * positions..(o + 1) * positions]
                .iter_mut()
                .for_each(|v| *v += b);
        }
    }
    FeatureMap::from_vec(Shape3::new(c.c_out, h_out, w_out), out)
}

fn fc_forward(f: &FcWeights, x: &FeatureMap) -> Result<FeatureMap> {
    let w = f
        .weights
        .as_deref()
        .ok_or_else(|| Error::invalid("fc layer has no materialized weights"))?;
    let xs = x.as_slice();
    let out = (0..f.out_features)
        .map(|o| {
            let row = &w[o * f.in_features..(o + 1) * f.in_features];
            let s: f64 = row.iter().zip(xs).map(|(a, b)| a * b).sum();
            s + f.bias.as_ref().map_or(0.0, |b| b[o])
        })
        .collect();
    FeatureMap::from_vec(Shape3::new(f.out_features, 1, 1), out)
}

fn affine_forward(a: &ChannelAffine, x: &FeatureMap) -> Result<FeatureMap> {
    let (scale, shift) = match (&a.scale, &a.shift) {
        (Some(s), Some(t)) => (s, t),
        _ => return Err(Error::invalid("channel_affine has no materialized parameters")),
    };
    let s = x.shape().spatial();
    let mut data = x.as_slice().to_vec();
    for c in 0..a.channels {
        data[c * s..(c + 1) * s]
            .iter_mut()
            .for_each(|v| *v = *v * scale[c] + shift[c]);
    }
    FeatureMap::from_vec(x.shape(), data)
}

/// Max pooling pads with -inf; average pooling counts padded zeros.
fn pool(x: &FeatureMap, out: Shape3, k: usize, stride: usize, pad: usize, max: bool) -> FeatureMap {
    let s = x.shape();
    let (h, w) = (s.h as isize, s.w as isize);
    FeatureMap::from_fn(out, |c, oy, ox| {
        let y0 = (oy * stride) as isize - pad as isize;
        let x0 = (ox * stride) as isize - pad as isize;
        let mut acc = if max { f64::NEG_INFINITY } else { 0.0 };
        for ky in 0..k as isize {
            for kx in 0..k as isize {
                let (y, xx) = (y0 + ky, x0 + kx);
                if y >= 0 && y < h && xx >= 0 && xx < w {
                    let v = x.at(c, y as usize, xx as usize);
                    if max {
                        acc = acc.max(v);
                    } else {
                        acc += v;
                    }
                }
            }
        }
        if max {
            acc
        } else {
            acc / (k * k) as f64
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layer::LayerSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn delta_kernel_is_identity() {
        let c = 3;
        let mut w = vec![0.0; c * c * 9];
        for o in 0..c {
            w[(o * c + o) * 9 + 4] = 1.0;
        }
        let conv = ConvWeights::new(c, c, 3, 1, 1, 1).unwrap().with_weights(w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = FeatureMap::standard_normal(Shape3::new(c, 5, 6), &mut rng);
        assert_eq!(conv_forward(&conv, &x).unwrap(), x);
    }

    #[test]
    fn depthwise_ones() {
        let conv = ConvWeights::new(4, 4, 3, 4, 1, 1)
            .unwrap()
            .with_weights(vec![1.0; 36])
            .unwrap();
        let x = FeatureMap::from_fn(Shape3::new(4, 5, 5), |_, _, _| 1.0);
        let y = conv_forward(&conv, &x).unwrap();
        for c in 0..4 {
            for yy in 1..4 {
                for xx in 1..4 {
                    assert_eq!(y.at(c, yy, xx), 9.0);
                }
            }
            assert_eq!(y.at(c, 0, 0), 4.0);
        }
    }

    #[test]
    fn pooling() {
        let x = FeatureMap::from_fn(Shape3::new(1, 4, 4), |_, y, x| (y * 4 + x) as f64);
        let m = pool(&x, Shape3::new(1, 2, 2), 2, 2, 0, true);
        assert_eq!(m.as_slice(), &[5.0, 7.0, 13.0, 15.0]);
        let a = pool(&x, Shape3::new(1, 1, 1), 4, 1, 0, false);
        assert_eq!(a.as_slice(), &[7.5]);
        let p = pool(&x, Shape3::new(1, 2, 2), 3, 2, 1, true);
        assert_eq!(p.as_slice(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn residual_and_taps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = ConvWeights::random(2, 2, 3, 1, 1, 1, true, &mut rng).unwrap();
        let net = NetworkSpec::new(
            "r",
            Shape3::new(2, 4, 4),
            vec![
                LayerSpec::new("c", LayerKind::Conv(conv.clone())),
                LayerSpec::new("relu", LayerKind::Relu),
                LayerSpec::new("add", LayerKind::Add { source: "input".into() }),
            ],
        )
        .unwrap();
        let x = FeatureMap::standard_normal(Shape3::new(2, 4, 4), &mut rng);
        let trace = forward_traced(&net, &x, &["c"]).unwrap();
        let y = conv_forward(&conv, &x).unwrap();
        assert_eq!(trace.taps["c"].output, y);
        assert_eq!(trace.taps["c"].input, x);
        let expect: Vec<f64> = y.as_slice().iter().zip(x.as_slice()).map(|(a, b)| a.max(0.0) + b).collect();
        assert_eq!(trace.output.as_slice(), expect.as_slice());

        let early = forward_to_taps(&net, &x, &["c"]).unwrap();
        assert_eq!(early.output, y);
    }

    #[test]
    fn input_shape_mismatch() {
        let net = NetworkSpec::new("r", Shape3::new(2, 4, 4), vec![LayerSpec::new("relu", LayerKind::Relu)]).unwrap();
        let x = FeatureMap::zeros(Shape3::new(3, 4, 4));
        assert!(matches!(forward(&net, &x), Err(Error::Shape(_))));
    }

    #[test]
    fn missing_weights_names_layer() {
        let net = NetworkSpec::new(
            "r",
            Shape3::new(2, 4, 4),
            vec![LayerSpec::new(
                "bare",
                LayerKind::Conv(ConvWeights::new(2, 2, 1, 1, 1, 0).unwrap()),
            )],
        )
        .unwrap();
        let err = forward(&net, &FeatureMap::zeros(Shape3::new(2, 4, 4))).unwrap_err();
        assert!(err.to_string().contains("bare"));
    }
}
