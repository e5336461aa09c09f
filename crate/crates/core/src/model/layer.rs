use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{conv_out_dim, Matrix};

/// A (possibly grouped) 2-D convolution.
///
/// Weights are stored filter-major as `[c_out][c_in / groups][k][k]`. They
/// may be absent for architecture-only models, which still support shape
/// inference and FLOPs accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub groups: usize,
    pub stride: usize,
    pub pad: usize,
    pub weights: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

impl ConvWeights {
    /// Shape-only convolution without weights.
    pub fn new(c_in: usize, c_out: usize, k: usize, groups: usize, stride: usize, pad: usize) -> Result<Self> {
        let conv = ConvWeights {
            c_in,
            c_out,
            k,
            groups,
            stride,
            pad,
            weights: None,
            bias: None,
        };
        conv.validate()?;
        Ok(conv)
    }

    /// He-normal weights (std `sqrt(2 / fan_in)`), optionally a small random bias.
    #[allow(clippy::too_many_arguments)]
    pub fn random<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        k: usize,
        groups: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut conv = ConvWeights::new(c_in, c_out, k, groups, stride, pad)?;
        let std = (2.0 / (conv.in_per_group() * k * k) as f64).sqrt();
        conv.weights = Some(
            (0..conv.weight_len())
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        if with_bias {
            conv.bias = Some((0..c_out).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect());
        }
        Ok(conv)
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        self.weights = Some(weights);
        self.validate()?;
        Ok(self)
    }

    pub fn with_bias(mut self, bias: Vec<f64>) -> Result<Self> {
        self.bias = Some(bias);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 || self.k == 0 || self.groups == 0 || self.stride == 0 {
            return Err(Error::shape(format!(
                "conv dims must be positive (c_in {}, c_out {}, k {}, groups {}, stride {})",
                self.c_in, self.c_out, self.k, self.groups, self.stride
            )));
        }
        if !self.c_in.is_multiple_of(self.groups) || !self.c_out.is_multiple_of(self.groups) {
            return Err(Error::shape(format!(
                "groups {} must divide c_in {} and c_out {}",
                self.groups, self.c_in, self.c_out
            )));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.weight_len() {
                return Err(Error::shape(format!(
                    "conv weights need {} values, got {}",
                    self.weight_len(),
                    w.len()
                )));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("non-finite conv weight".into()));
            }
        }
        if let Some(b) = &self.bias {
            if b.len() != self.c_out {
                return Err(Error::shape(format!("bias needs {} values, got {}", self.c_out, b.len())));
            }
        }
        Ok(())
    }

    pub fn in_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.in_per_group() * self.k * self.k
    }

    pub fn weights(&self) -> Result<&[f64]> {
        self.weights
            .as_deref()
            .ok_or_else(|| Error::invalid("convolution has no materialized weights"))
    }

    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            conv_out_dim(h, self.k, self.stride, self.pad)?,
            conv_out_dim(w, self.k, self.stride, self.pad)?,
        ))
    }

    /// Weight matrix of group `g`: rows follow the im2col column ordering
    /// (`c * k² + ky * k + kx` over the group's input channels), columns are
    /// the group's output channels.
    pub fn group_matrix(&self, g: usize) -> Result<Matrix> {
        let w = self.weights()?;
        let ipg = self.in_per_group();
        let opg = self.out_per_group();
        let kk = self.k * self.k;
        let filter = ipg * kk;
        Ok(Matrix::from_fn(filter, opg, |r, o| w[(g * opg + o) * filter + r]))
    }

    /// The full `(c_in·k²) × c_out` matrix of an ungrouped convolution.
    pub fn weight_matrix(&self) -> Result<Matrix> {
        if self.groups != 1 {
            return Err(Error::shape(format!(
                "weight_matrix needs an ungrouped conv (groups = {})",
                self.groups
            )));
        }
        self.group_matrix(0)
    }

    /// Build an ungrouped convolution from its `(c_in·k²) × c_out` matrix.
    pub fn from_weight_matrix(m: &Matrix, k: usize, stride: usize, pad: usize) -> Result<Self> {
        let kk = k * k;
        if kk == 0 || !m.rows().is_multiple_of(kk) {
            return Err(Error::shape(format!("{} rows is not a multiple of k² = {kk}", m.rows())));
        }
        let c_in = m.rows() / kk;
        let c_out = m.cols();
        let filter = c_in * kk;
        let mut w = vec![0.0; c_out * filter];
        for o in 0..c_out {
            for r in 0..filter {
                w[o * filter + r] = m[(r, o)];
            }
        }
        ConvWeights::new(c_in, c_out, k, 1, stride, pad)?.with_weights(w)
    }

    /// Block-diagonal `(c_in·k²) × c_out` matrix of a grouped convolution;
    /// off-block entries are exactly zero.
    pub fn block_diagonal_matrix(&self) -> Result<Matrix> {
        let ipg = self.in_per_group();
        let opg = self.out_per_group();
        let kk = self.k * self.k;
        let mut m = Matrix::zeros(self.c_in * kk, self.c_out);
        for g in 0..self.groups {
            m.set_block(g * ipg * kk, g * opg, &self.group_matrix(g)?);
        }
        Ok(m)
    }
}

/// Fully-connected layer over the flattened (channel-major) input.
#[derive(Debug, Clone, PartialEq)]
pub struct FcWeights {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out][in]`
    pub weights: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

impl FcWeights {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        FcWeights {
            in_features,
            out_features,
            weights: None,
            bias: None,
        }
    }

    pub fn random<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let std = (1.0 / in_features as f64).sqrt();
        FcWeights {
            in_features,
            out_features,
            weights: Some(
                (0..in_features * out_features)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            ),
            bias: Some(vec![0.0; out_features]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_features == 0 || self.out_features == 0 {
            return Err(Error::shape("fc features must be positive"));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.in_features * self.out_features {
                return Err(Error::shape(format!(
                    "fc weights need {} values, got {}",
                    self.in_features * self.out_features,
                    w.len()
                )));
            }
        }
        if let Some(b) = &self.bias {
            if b.len() != self.out_features {
                return Err(Error::shape("fc bias length"));
            }
        }
        Ok(())
    }
}

/// Per-channel `y = x * scale + shift`; inference-time batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAffine {
    pub channels: usize,
    pub scale: Option<Vec<f64>>,
    pub shift: Option<Vec<f64>>,
}

impl ChannelAffine {
    pub fn identity(channels: usize) -> Self {
        ChannelAffine {
            channels,
            scale: Some(vec![1.0; channels]),
            shift: Some(vec![0.0; channels]),
        }
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        ChannelAffine {
            channels,
            scale: Some(
                (0..channels)
                    .map(|_| 1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            ),
            shift: Some(
                (0..channels)
                    .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for v in [&self.scale, &self.shift].into_iter().flatten() {
            if v.len() != self.channels {
                return Err(Error::shape("channel_affine parameter length"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv(ConvWeights),
    Relu,
    MaxPool { kernel: usize, stride: usize, pad: usize },
    AvgPool { kernel: usize, stride: usize, pad: usize },
    /// Residual join: elementwise sum of this layer's input and the output
    /// of the named earlier layer.
    Add { source: String },
    Fc(FcWeights),
    ChannelAffine(ChannelAffine),
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv(_) => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::Add { .. } => "add",
            LayerKind::Fc(_) => "fc",
            LayerKind::ChannelAffine(_) => "channel_affine",
        }
    }

    /// Whether weights/parameters are fully materialized.
    pub fn is_materialized(&self) -> bool {
        match self {
            LayerKind::Conv(c) => c.weights.is_some(),
            LayerKind::Fc(f) => f.weights.is_some(),
            LayerKind::ChannelAffine(a) => a.scale.is_some() && a.shift.is_some(),
            _ => true,
        }
    }
}

/// Which half of a decomposed pair a layer is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecomposedRole {
    Group,
    Pointwise,
}

/// Marks a layer produced by decomposing `source` with group size `n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub n: usize,
    pub role: DecomposedRole,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub id: String,
    /// Stage label used by the rank scheduler; empty means "derive it".
    pub stage: String,
    /// Source of this layer's input: `None` is the previous layer (or the
    /// network input for the first layer), `Some("input")` the network
    /// input, otherwise the id of an earlier layer.
    pub input: Option<String>,
    pub kind: LayerKind,
    pub provenance: Option<Provenance>,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            id: id.into(),
            stage: String::new(),
            input: None,
            kind,
            provenance: None,
        }
    }

    pub fn stage(mut self, stage: impl Into<String>) -> Self {
        self.stage = stage.into();
        self
    }

    pub fn input_from(mut self, source: impl Into<String>) -> Self {
        self.input = Some(source.into());
        self
    }

    pub fn as_conv(&self) -> Option<&ConvWeights> {
        match &self.kind {
            LayerKind::Conv(c) => Some(c),
            _ => None,
        }
    }
}
