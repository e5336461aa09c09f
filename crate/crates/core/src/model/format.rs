//! On-disk model format.
//!
//! A model is a JSON manifest plus an optional raw weight blob of
//! little-endian `f32` values. Every parameter tensor in the manifest is a
//! [`BlobRef`] (`offset` in bytes, `count` in values) into the blob; a
//! `null` reference marks an architecture-only tensor. See the README for
//! the full field list.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::graph::NetworkSpec;
use super::layer::{ChannelAffine, ConvWeights, FcWeights, LayerKind, LayerSpec, Provenance};
use crate::error::{Error, Result};
use crate::tensor::Shape3;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub offset: u64,
    pub count: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub name: String,
    pub input_shape: [usize; 3],
    /// Blob file name, relative to the manifest's directory.
    #[serde(default)]
    pub weights_file: Option<String>,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    #[serde(flatten)]
    pub op: OpRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OpRecord {
    Conv {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        weight: Option<BlobRef>,
        #[serde(default)]
        bias: Option<BlobRef>,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    Add {
        source: String,
    },
    Fc {
        in_features: usize,
        out_features: usize,
        weight: Option<BlobRef>,
        #[serde(default)]
        bias: Option<BlobRef>,
    },
    ChannelAffine {
        channels: usize,
        scale: Option<BlobRef>,
        shift: Option<BlobRef>,
    },
}

/// Serialize a network to a manifest and the blob bytes it references.
pub fn to_manifest(net: &NetworkSpec, weights_file: Option<&str>) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::new();
    let mut put = |values: &Option<Vec<f64>>| -> Option<BlobRef> {
        values.as_ref().map(|v| {
            let offset = blob.len() as u64;
            for &x in v {
                blob.extend_from_slice(&(x as f32).to_le_bytes());
            }
            BlobRef {
                offset,
                count: v.len() as u64,
            }
        })
    };
    let layers = net
        .layers()
        .iter()
        .map(|l| {
            let op = match &l.kind {
                LayerKind::Conv(c) => OpRecord::Conv {
                    c_in: c.c_in,
                    c_out: c.c_out,
                    kernel: c.k,
                    stride: c.stride,
                    pad: c.pad,
                    groups: c.groups,
                    weight: put(&c.weights),
                    bias: put(&c.bias),
                },
                LayerKind::Relu => OpRecord::Relu,
                LayerKind::MaxPool { kernel, stride, pad } => OpRecord::MaxPool {
                    kernel: *kernel,
                    stride: *stride,
                    pad: *pad,
                },
                LayerKind::AvgPool { kernel, stride, pad } => OpRecord::AvgPool {
                    kernel: *kernel,
                    stride: *stride,
                    pad: *pad,
                },
                LayerKind::Add { source } => OpRecord::Add { source: source.clone() },
                LayerKind::Fc(f) => OpRecord::Fc {
                    in_features: f.in_features,
                    out_features: f.out_features,
                    weight: put(&f.weights),
                    bias: put(&f.bias),
                },
                LayerKind::ChannelAffine(a) => OpRecord::ChannelAffine {
                    channels: a.channels,
                    scale: put(&a.scale),
                    shift: put(&a.shift),
                },
            };
            LayerRecord {
                id: l.id.clone(),
                stage: Some(l.stage.clone()),
                input: l.input.clone(),
                op,
                provenance: l.provenance.clone(),
            }
        })
        .collect();
    let s = net.input_shape();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        name: net.name().to_string(),
        input_shape: [s.c, s.h, s.w],
        weights_file: if blob.is_empty() {
            None
        } else {
            weights_file.map(str::to_string)
        },
        layers,
    };
    (manifest, blob)
}

/// Rebuild a network from a manifest and its blob bytes.
pub fn from_manifest(manifest: &Manifest, blob: Option<&[u8]>) -> Result<NetworkSpec> {
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "field `format_version`: unsupported version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let take = |layer: &str, field: &str, r: &Option<BlobRef>, expect: usize| -> Result<Option<Vec<f64>>> {
        let Some(r) = r else { return Ok(None) };
        if r.count as usize != expect {
            return Err(Error::format(format!(
                "layer `{layer}` field `{field}`: count {} but the layer needs {expect}",
                r.count
            )));
        }
        let bytes = blob.ok_or_else(|| {
            Error::format(format!("layer `{layer}` field `{field}` references a blob but `weights_file` is missing"))
        })?;
        let start = r.offset as usize;
        let end = start + 4 * expect;
        if r.offset % 4 != 0 || end > bytes.len() {
            return Err(Error::format(format!(
                "layer `{layer}` field `{field}`: bytes {start}..{end} outside blob of {} bytes or misaligned",
                bytes.len()
            )));
        }
        Ok(Some(
            bytes[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
        ))
    };

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for rec in &manifest.layers {
        let id = rec.id.as_str();
        let kind = match &rec.op {
            OpRecord::Conv {
                c_in,
                c_out,
                kernel,
                stride,
                pad,
                groups,
                weight,
                bias,
            } => {
                let mut conv = ConvWeights::new(*c_in, *c_out, *kernel, *groups, *stride, *pad)
                    .map_err(|e| Error::format(format!("layer `{id}`: {e}")))?;
                conv.weights = take(id, "weight", weight, conv.weight_len())?;
                conv.bias = take(id, "bias", bias, *c_out)?;
                LayerKind::Conv(conv)
            }
            OpRecord::Relu => LayerKind::Relu,
            OpRecord::MaxPool { kernel, stride, pad } => LayerKind::MaxPool {
                kernel: *kernel,
                stride: *stride,
                pad: *pad,
            },
            OpRecord::AvgPool { kernel, stride, pad } => LayerKind::AvgPool {
                kernel: *kernel,
                stride: *stride,
                pad: *pad,
            },
            OpRecord::Add { source } => LayerKind::Add { source: source.clone() },
            OpRecord::Fc {
                in_features,
                out_features,
                weight,
                bias,
            } => {
                let mut fc = FcWeights::new(*in_features, *out_features);
                fc.weights = take(id, "weight", weight, in_features * out_features)?;
                fc.bias = take(id, "bias", bias, *out_features)?;
                LayerKind::Fc(fc)
            }
            OpRecord::ChannelAffine { channels, scale, shift } => LayerKind::ChannelAffine(ChannelAffine {
                channels: *channels,
                scale: take(id, "scale", scale, *channels)?,
                shift: take(id, "shift", shift, *channels)?,
            }),
        };
        layers.push(LayerSpec {
            id: rec.id.clone(),
            stage: rec.stage.clone().unwrap_or_default(),
            input: rec.input.clone(),
            kind,
            provenance: rec.provenance.clone(),
        });
    }
    let [c, h, w] = manifest.input_shape;
    NetworkSpec::new(manifest.name.clone(), Shape3::new(c, h, w), layers).map_err(|e| match e {
        Error::Format(_) => e,
        other => Error::format(other.to_string()),
    })
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Write `<path>` (manifest) and, when any tensor is materialized, the blob
/// `<path>` with extension `.bin`.
pub fn save_model(net: &NetworkSpec, manifest_path: &Path) -> Result<()> {
    let bin = blob_path(manifest_path);
    let name = bin
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::invalid(format!("bad model path {}", manifest_path.display())))?
        .to_string();
    let (manifest, blob) = to_manifest(net, Some(&name));
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(manifest_path, json)?;
    if !blob.is_empty() {
        fs::write(&bin, blob)?;
    }
    Ok(())
}

pub fn load_model(manifest_path: &Path) -> Result<NetworkSpec> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: {e}", manifest_path.display())))?;
    let blob = match &manifest.weights_file {
        Some(f) => {
            let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
            Some(fs::read(dir.join(f)).map_err(|e| {
                Error::format(format!("field `weights_file`: cannot read `{f}`: {e}"))
            })?)
        }
        None => None,
    };
    from_manifest(&manifest, blob.as_deref())
}
