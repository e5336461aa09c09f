//! Reference architectures and toy networks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::NetworkSpec;
use super::layer::{ChannelAffine, ConvWeights, FcWeights, LayerKind, LayerSpec};
use crate::error::Result;
use crate::tensor::Shape3;

/// How parameters are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Architecture only; no tensors are materialized.
    Shapes,
    /// He-normal convolutions, random affines, seeded.
    Random(u64),
}

struct Builder {
    rng: Option<ChaCha8Rng>,
    layers: Vec<LayerSpec>,
}

impl Builder {
    fn new(init: Init) -> Self {
        Builder {
            rng: match init {
                Init::Shapes => None,
                Init::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
            },
            layers: Vec::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        id: &str,
        stage: &str,
        input: Option<&str>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<()> {
        let conv = match self.rng.as_mut() {
            Some(rng) => ConvWeights::random(c_in, c_out, k, 1, stride, pad, bias, rng)?,
            None => ConvWeights::new(c_in, c_out, k, 1, stride, pad)?,
        };
        let mut l = LayerSpec::new(id, LayerKind::Conv(conv)).stage(stage);
        l.input = input.map(str::to_string);
        self.layers.push(l);
        Ok(())
    }

    fn bn(&mut self, id: &str, stage: &str, channels: usize) {
        let a = match self.rng.as_mut() {
            Some(rng) => ChannelAffine::random(channels, rng),
            None => ChannelAffine {
                channels,
                scale: None,
                shift: None,
            },
        };
        self.layers.push(LayerSpec::new(id, LayerKind::ChannelAffine(a)).stage(stage));
    }

    fn plain(&mut self, id: &str, stage: &str, kind: LayerKind) {
        self.layers.push(LayerSpec::new(id, kind).stage(stage));
    }

    fn fc(&mut self, id: &str, stage: &str, i: usize, o: usize) {
        let fc = match self.rng.as_mut() {
            Some(rng) => FcWeights::random(i, o, rng),
            None => FcWeights::new(i, o),
        };
        self.layers.push(LayerSpec::new(id, LayerKind::Fc(fc)).stage(stage));
    }
}

/// ResNet-34 for 224×224 inputs, batch norm folded to channel affines.
///
/// Stage labels follow the resolution each layer reads: `conv2` covers the
/// 56×56 layers, including the strided first convolution (and projection
/// shortcut) of the next group, which reads 56×56 and writes 28×28.
pub fn resnet34(init: Init) -> Result<NetworkSpec> {
    let mut b = Builder::new(init);
    b.conv("conv1", "conv1", None, 3, 64, 7, 2, 3, false)?;
    b.bn("conv1_bn", "conv1", 64);
    b.plain("conv1_relu", "conv1", LayerKind::Relu);
    b.plain(
        "pool1",
        "conv1",
        LayerKind::MaxPool {
            kernel: 3,
            stride: 2,
            pad: 1,
        },
    );

    let groups = [(2, 64, 3), (3, 128, 4), (4, 256, 6), (5, 512, 3)];
    let mut block_in = "pool1".to_string();
    let mut c_in = 64;
    for (gi, &(g, width, blocks)) in groups.iter().enumerate() {
        let here = format!("conv{g}");
        let prev = if gi == 0 { here.clone() } else { format!("conv{}", g - 1) };
        for blk in 1..=blocks {
            let name = format!("conv{g}_{blk}");
            let downsample = c_in != width;
            let stride = if downsample { 2 } else { 1 };
            // The first block of a group reads the previous resolution.
            let entry_stage = if blk == 1 { prev.as_str() } else { here.as_str() };
            let shortcut = if downsample {
                let ds = format!("{name}_ds");
                b.conv(&ds, entry_stage, Some(&block_in), c_in, width, 1, 2, 0, false)?;
                b.bn(&format!("{ds}_bn"), &here, width);
                format!("{ds}_bn")
            } else {
                block_in.clone()
            };
            let a = format!("{name}a");
            b.conv(&a, entry_stage, Some(&block_in), c_in, width, 3, stride, 1, false)?;
            b.bn(&format!("{a}_bn"), &here, width);
            b.plain(&format!("{a}_relu"), &here, LayerKind::Relu);
            let bb = format!("{name}b");
            b.conv(&bb, &here, None, width, width, 3, 1, 1, false)?;
            b.bn(&format!("{bb}_bn"), &here, width);
            b.plain(&format!("{name}_add"), &here, LayerKind::Add { source: shortcut });
            let out = format!("{name}_relu");
            b.plain(&out, &here, LayerKind::Relu);
            block_in = out;
            c_in = width;
        }
    }
    b.plain(
        "pool5",
        "conv5",
        LayerKind::AvgPool {
            kernel: 7,
            stride: 1,
            pad: 0,
        },
    );
    b.fc("fc", "fc", 512, 1000);
    NetworkSpec::new("resnet34", Shape3::new(3, 224, 224), b.layers)
}

/// VGG16 for 224×224 inputs. Stages `conv1`..`conv5` are delimited by the
/// max-pooling layers; the classifier is stage `fc`.
pub fn vgg16(init: Init) -> Result<NetworkSpec> {
    let mut b = Builder::new(init);
    let cfg: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
    let mut c_in = 3;
    for (s, &(width, reps)) in cfg.iter().enumerate() {
        let stage = format!("conv{}", s + 1);
        for r in 1..=reps {
            let id = format!("conv{}_{r}", s + 1);
            b.conv(&id, &stage, None, c_in, width, 3, 1, 1, true)?;
            b.plain(&format!("{id}_relu"), &stage, LayerKind::Relu);
            c_in = width;
        }
        b.plain(
            &format!("pool{}", s + 1),
            &stage,
            LayerKind::MaxPool {
                kernel: 2,
                stride: 2,
                pad: 0,
            },
        );
    }
    b.fc("fc6", "fc", 512 * 7 * 7, 4096);
    b.plain("fc6_relu", "fc", LayerKind::Relu);
    b.fc("fc7", "fc", 4096, 4096);
    b.plain("fc7_relu", "fc", LayerKind::Relu);
    b.fc("fc8", "fc", 4096, 1000);
    NetworkSpec::new("vgg16", Shape3::new(3, 224, 224), b.layers)
}

/// A plain chain of `conv(k, pad = k/2) + bias` layers with ReLU between
/// them (none after the last). Each entry of `convs` is
/// `(c_out, k, stride)`. Stage labels are derived from resolution.
pub fn toy_cnn(input: Shape3, convs: &[(usize, usize, usize)], seed: u64) -> Result<NetworkSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut c_in = input.c;
    for (i, &(c_out, k, stride)) in convs.iter().enumerate() {
        let conv = ConvWeights::random(c_in, c_out, k, 1, stride, k / 2, true, &mut rng)?;
        layers.push(LayerSpec::new(format!("conv{}", i + 1), LayerKind::Conv(conv)));
        if i + 1 < convs.len() {
            layers.push(LayerSpec::new(format!("relu{}", i + 1), LayerKind::Relu));
        }
        c_in = c_out;
    }
    NetworkSpec::new("toy", input, layers)
}
