//! Network representation, execution, FLOPs accounting and serialization.

pub mod flops;
pub mod format;
pub mod forward;
mod graph;
mod layer;
pub mod zoo;

pub use flops::{flops_of_layer, flops_ratio_decomposed, network_flops, DecomposedRatio};
pub use format::{load_model, save_model};
pub use forward::{conv_forward, forward, forward_batch, forward_traced, ForwardTrace, Tap};
pub use graph::{default_stage, NetworkSpec, Source, INPUT_ID};
pub use layer::{ChannelAffine, ConvWeights, DecomposedRole, FcWeights, LayerKind, LayerSpec, Provenance};
