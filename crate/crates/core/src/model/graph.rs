use std::collections::HashMap;

use super::layer::{LayerKind, LayerSpec};
use crate::error::{Error, Result};
use crate::linalg::conv_out_dim;
use crate::tensor::Shape3;

/// Reserved id naming the network input as a layer source.
pub const INPUT_ID: &str = "input";

/// Where a layer reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    NetworkInput,
    Layer(usize),
}

/// An ordered, validated feed-forward network.
///
/// Construction checks the DAG (single input, every reference points to an
/// earlier layer), propagates shapes end to end, and fills in missing stage
/// labels. The network is immutable afterwards; transformations build a new one.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    name: String,
    input_shape: Shape3,
    layers: Vec<LayerSpec>,
    sources: Vec<Source>,
    in_shapes: Vec<Shape3>,
    out_shapes: Vec<Shape3>,
    index: HashMap<String, usize>,
}

impl NetworkSpec {
    pub fn new(name: impl Into<String>, input_shape: Shape3, mut layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::format("no layers"));
        }
        if input_shape.is_empty() {
            return Err(Error::shape(format!("input shape {input_shape} is empty")));
        }
        let mut index = HashMap::with_capacity(layers.len());
        let mut sources = Vec::with_capacity(layers.len());
        let mut in_shapes: Vec<Shape3> = Vec::with_capacity(layers.len());
        let mut out_shapes: Vec<Shape3> = Vec::with_capacity(layers.len());

        for (i, layer) in layers.iter().enumerate() {
            if layer.id.is_empty() || layer.id == INPUT_ID {
                return Err(Error::format(format!("layer {i} has reserved or empty id `{}`", layer.id)));
            }
            if index.contains_key(&layer.id) {
                return Err(Error::format(format!("duplicate layer id `{}`", layer.id)));
            }
            let source = match layer.input.as_deref() {
                None if i == 0 => Source::NetworkInput,
                None => Source::Layer(i - 1),
                Some(INPUT_ID) => Source::NetworkInput,
                Some(id) => Source::Layer(*index.get(id).ok_or_else(|| {
                    Error::format(format!("layer `{}` reads from unknown or later layer `{id}`", layer.id))
                })?),
            };
            let in_shape = match source {
                Source::NetworkInput => input_shape,
                Source::Layer(j) => out_shapes[j],
            };
            let out_shape = infer_output(layer, in_shape, &index, &out_shapes, input_shape)
                .map_err(|e| e.in_layer(&layer.id))?;
            index.insert(layer.id.clone(), i);
            sources.push(source);
            in_shapes.push(in_shape);
            out_shapes.push(out_shape);
        }

        for (layer, shape) in layers.iter_mut().zip(&in_shapes) {
            if layer.stage.is_empty() {
                layer.stage = default_stage(*shape);
            }
        }

        Ok(NetworkSpec {
            name: name.into(),
            input_shape,
            layers,
            sources,
            in_shapes,
            out_shapes,
            index,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input_shape
    }

    pub fn output_shape(&self) -> Shape3 {
        *self.out_shapes.last().expect("non-empty")
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.index_of(id).map(|i| &self.layers[i])
    }

    pub fn require(&self, id: &str) -> Result<usize> {
        self.index_of(id)
            .ok_or_else(|| Error::invalid(format!("no layer `{id}` in network `{}`", self.name)))
    }

    pub fn source(&self, i: usize) -> Source {
        self.sources[i]
    }

    pub fn in_shape(&self, i: usize) -> Shape3 {
        self.in_shapes[i]
    }

    pub fn out_shape(&self, i: usize) -> Shape3 {
        self.out_shapes[i]
    }

    /// Whether every parameterized layer carries weights.
    pub fn is_materialized(&self) -> bool {
        self.layers.iter().all(|l| l.kind.is_materialized())
    }

    /// Stage labels in order of first appearance.
    pub fn stages(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for l in &self.layers {
            if !out.contains(&l.stage) {
                out.push(l.stage.clone());
            }
        }
        out
    }

    pub fn into_layers(self) -> Vec<LayerSpec> {
        self.layers
    }

    /// Rebuild with a modified layer list (revalidated).
    pub fn with_layers(&self, layers: Vec<LayerSpec>) -> Result<NetworkSpec> {
        NetworkSpec::new(self.name.clone(), self.input_shape, layers)
    }

    /// Index of the last layer that reads layer `i`'s output, if any.
    pub(crate) fn last_uses(&self) -> Vec<Option<usize>> {
        let mut last = vec![None; self.layers.len()];
        for (j, layer) in self.layers.iter().enumerate() {
            if let Source::Layer(i) = self.sources[j] {
                last[i] = Some(j);
            }
            if let LayerKind::Add { source } = &layer.kind {
                if let Some(&i) = self.index.get(source) {
                    last[i] = Some(j);
                }
            }
        }
        last
    }
}

/// Default stage label: the spatial resolution a layer consumes.
///
/// A downsampling layer (strided conv or pooling) therefore closes the stage
/// of its input resolution and the layers after it open a new one.
pub fn default_stage(input: Shape3) -> String {
    format!("{}x{}", input.h, input.w)
}

fn infer_output(
    layer: &LayerSpec,
    input: Shape3,
    index: &HashMap<String, usize>,
    out_shapes: &[Shape3],
    net_input: Shape3,
) -> Result<Shape3> {
    match &layer.kind {
        LayerKind::Conv(c) => {
            c.validate()?;
            if c.c_in != input.c {
                return Err(Error::shape(format!("conv expects {} input channels, got {input}", c.c_in)));
            }
            let (h, w) = c.out_dims(input.h, input.w)?;
            Ok(Shape3::new(c.c_out, h, w))
        }
        LayerKind::Relu => Ok(input),
        LayerKind::MaxPool { kernel, stride, pad } | LayerKind::AvgPool { kernel, stride, pad } => {
            if *pad * 2 >= *kernel && *pad > 0 {
                return Err(Error::shape(format!("pool pad {pad} too large for kernel {kernel}")));
            }
            Ok(Shape3::new(
                input.c,
                conv_out_dim(input.h, *kernel, *stride, *pad)?,
                conv_out_dim(input.w, *kernel, *stride, *pad)?,
            ))
        }
        LayerKind::Add { source } => {
            let other = if source == INPUT_ID {
                net_input
            } else {
                let j = *index
                    .get(source)
                    .ok_or_else(|| Error::format(format!("add references unknown or later layer `{source}`")))?;
                out_shapes[j]
            };
            if other != input {
                return Err(Error::shape(format!("add joins {input} with {other} from `{source}`")));
            }
            Ok(input)
        }
        LayerKind::Fc(f) => {
            f.validate()?;
            if f.in_features != input.len() {
                return Err(Error::shape(format!(
                    "fc expects {} features, input {input} has {}",
                    f.in_features,
                    input.len()
                )));
            }
            Ok(Shape3::new(f.out_features, 1, 1))
        }
        LayerKind::ChannelAffine(a) => {
            a.validate()?;
            if a.channels != input.c {
                return Err(Error::shape(format!("channel_affine over {} channels, input {input}", a.channels)));
            }
            Ok(input)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layer::{ConvWeights, FcWeights};

    fn conv(id: &str, c_in: usize, c_out: usize, stride: usize) -> LayerSpec {
        LayerSpec::new(id, LayerKind::Conv(ConvWeights::new(c_in, c_out, 3, 1, stride, 1).unwrap()))
    }

    #[test]
    fn propagates_shapes_and_stages() {
        let net = NetworkSpec::new(
            "t",
            Shape3::new(3, 8, 8),
            vec![
                conv("a", 3, 4, 1),
                LayerSpec::new("r", LayerKind::Relu),
                conv("b", 4, 8, 2),
                conv("c", 8, 8, 1),
                LayerSpec::new("fc", LayerKind::Fc(FcWeights::new(8 * 16, 10))),
            ],
        )
        .unwrap();
        assert_eq!(net.out_shape(2), Shape3::new(8, 4, 4));
        assert_eq!(net.output_shape(), Shape3::new(10, 1, 1));
        // The strided conv belongs to the stage of its input resolution.
        assert_eq!(net.layers()[2].stage, "8x8");
        assert_eq!(net.layers()[3].stage, "4x4");
        assert_eq!(net.stages(), vec!["8x8", "4x4"]);
    }

    #[test]
    fn empty_is_rejected() {
        let err = NetworkSpec::new("t", Shape3::new(1, 1, 1), vec![]).unwrap_err();
        assert!(err.to_string().contains("no layers"));
    }

    #[test]
    fn residual_checks() {
        let ok = NetworkSpec::new(
            "t",
            Shape3::new(4, 6, 6),
            vec![
                conv("a", 4, 4, 1),
                conv("b", 4, 4, 1),
                LayerSpec::new("add", LayerKind::Add { source: "input".into() }),
            ],
        );
        assert!(ok.is_ok());
        let bad = NetworkSpec::new(
            "t",
            Shape3::new(4, 6, 6),
            vec![
                conv("a", 4, 4, 2),
                LayerSpec::new("add", LayerKind::Add { source: "input".into() }),
            ],
        )
        .unwrap_err();
        assert!(bad.to_string().contains("`add`"));
        let forward_ref = NetworkSpec::new(
            "t",
            Shape3::new(4, 6, 6),
            vec![
                LayerSpec::new("add", LayerKind::Add { source: "a".into() }),
                conv("a", 4, 4, 1),
            ],
        );
        assert!(forward_ref.is_err());
    }

    #[test]
    fn shape_error_names_layer() {
        let err = NetworkSpec::new("t", Shape3::new(3, 8, 8), vec![conv("first", 3, 4, 1), conv("second", 5, 4, 1)])
            .unwrap_err();
        assert!(err.to_string().contains("second"), "{err}");
    }

    #[test]
    fn duplicate_ids() {
        assert!(NetworkSpec::new("t", Shape3::new(3, 8, 8), vec![conv("a", 3, 3, 1), conv("a", 3, 3, 1)]).is_err());
    }

    #[test]
    fn branch_input() {
        let net = NetworkSpec::new(
            "t",
            Shape3::new(4, 6, 6),
            vec![conv("a", 4, 4, 1), conv("b", 4, 8, 1).input_from("input")],
        )
        .unwrap();
        assert_eq!(net.source(1), Source::NetworkInput);
        assert_eq!(net.last_uses(), vec![None, None]);
    }
}
