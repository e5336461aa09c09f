//! Rank schedules: which layers to decompose and with which group size.
//!
//! Group size grows geometrically with depth. The first compressed stage
//! gets `base_n`, the next `base_n·r`, then `base_n·r²`, with `r` equal to
//! 1, 2 or 4 for [`Degree::Constant`], [`Degree::Half`] and
//! [`Degree::Quarter`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decompose::{group_layer_id, pointwise_layer_id};
use crate::error::{Error, Result};
use crate::model::flops::{flops_of_layer, layer_flops, network_flops};
use crate::model::{ConvWeights, NetworkSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degree {
    Constant,
    Half,
    Quarter,
}

impl Degree {
    /// Ratio of `n` between adjacent stages.
    pub fn ratio(self) -> usize {
        match self {
            Degree::Constant => 1,
            Degree::Half => 2,
            Degree::Quarter => 4,
        }
    }

    /// Target `n` for compressed stage `s` (0 = shallowest).
    pub fn stage_n(self, base_n: usize, s: usize) -> usize {
        base_n.saturating_mul(self.ratio().saturating_pow(s as u32))
    }
}

impl fmt::Display for Degree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Degree::Constant => "constant",
            Degree::Half => "half",
            Degree::Quarter => "quarter",
        })
    }
}

impl FromStr for Degree {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "constant" => Ok(Degree::Constant),
            "half" => Ok(Degree::Half),
            "quarter" => Ok(Degree::Quarter),
            _ => Err(Error::plan(format!("unknown degree `{s}` (constant, half, quarter)"))),
        }
    }
}

fn default_true() -> bool {
    true
}

/// Inputs to [`build_plan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRequest {
    pub degree: Degree,
    pub base_n: usize,
    /// Per-stage overrides: `null` skips the stage, a number caps its `n`.
    #[serde(default)]
    pub stage_caps: BTreeMap<String, Option<usize>>,
    /// Layers left untouched.
    #[serde(default)]
    pub skip_layers: Vec<String>,
    /// Leave the first convolution of the network alone.
    #[serde(default = "default_true")]
    pub skip_stem: bool,
    /// Also decompose 1×1 convolutions.
    #[serde(default)]
    pub force_pointwise: bool,
}

impl PlanRequest {
    pub fn new(degree: Degree, base_n: usize) -> Self {
        PlanRequest {
            degree,
            base_n,
            stage_caps: BTreeMap::new(),
            skip_layers: Vec::new(),
            skip_stem: true,
            force_pointwise: false,
        }
    }

    pub fn skip_stage(mut self, stage: impl Into<String>) -> Self {
        self.stage_caps.insert(stage.into(), None);
        self
    }

    pub fn cap_stage(mut self, stage: impl Into<String>, cap: usize) -> Self {
        self.stage_caps.insert(stage.into(), Some(cap));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageAssignment {
    pub stage: String,
    /// `None` when the stage is skipped.
    pub n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerAssignment {
    pub layer: String,
    pub stage: String,
    pub n: usize,
    /// Stage target before clamping to a divisor of `c_in`.
    pub requested_n: usize,
}

impl LayerAssignment {
    pub fn clamped(&self) -> bool {
        self.n != self.requested_n
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedLayer {
    pub layer: String,
    pub reason: String,
}

/// Per-layer group sizes for one network; also the on-disk plan format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub model: String,
    pub degree: Degree,
    pub base_n: usize,
    #[serde(default)]
    pub force_pointwise: bool,
    pub stages: Vec<StageAssignment>,
    pub layers: Vec<LayerAssignment>,
    #[serde(default)]
    pub skipped: Vec<SkippedLayer>,
    pub flops_before: u64,
    pub predicted_flops: u64,
}

impl CompressionPlan {
    /// `(layer, n)` pairs for the decomposer.
    pub fn assignments(&self) -> Vec<(String, usize)> {
        self.layers.iter().map(|a| (a.layer.clone(), a.n)).collect()
    }

    pub fn get(&self, layer: &str) -> Option<usize> {
        self.layers.iter().find(|a| a.layer == layer).map(|a| a.n)
    }

    /// Layers whose stage target was adjusted to fit `c_in`.
    pub fn clamped(&self) -> impl Iterator<Item = &LayerAssignment> {
        self.layers.iter().filter(|a| a.clamped())
    }

    pub fn predicted_reduction(&self) -> f64 {
        if self.flops_before == 0 {
            return 0.0;
        }
        1.0 - self.predicted_flops as f64 / self.flops_before as f64
    }

    /// Check the plan against `net` and refresh the FLOPs fields.
    pub fn validate(&mut self, net: &NetworkSpec) -> Result<()> {
        self.predicted_flops = predict_flops(net, self)?;
        self.flops_before = network_flops(net);
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::plan(format!("invalid plan file: {e}")))
    }
}

/// Largest divisor of `c_in` not above `target` (at least 1).
pub fn clamp_to_divisor(c_in: usize, target: usize) -> usize {
    (1..=target.min(c_in)).rev().find(|d| c_in.is_multiple_of(*d)).unwrap_or(1)
}

fn eligible(conv: &ConvWeights, force_pointwise: bool) -> Option<&'static str> {
    if conv.groups != 1 {
        Some("grouped convolution")
    } else if conv.k == 1 && !force_pointwise {
        Some("1x1 convolution")
    } else {
        None
    }
}

/// Assign a group size to every eligible convolution of `net`.
///
/// Stages are numbered in network order, counting only stages that end up
/// with at least one compressed layer. Adjustments (divisor clamping,
/// caps, skips) are recorded in the plan rather than treated as errors.
pub fn build_plan(net: &NetworkSpec, req: &PlanRequest) -> Result<CompressionPlan> {
    if req.base_n == 0 {
        return Err(Error::plan("base_n must be at least 1"));
    }
    for (stage, cap) in &req.stage_caps {
        if !net.stages().iter().any(|s| s == stage) {
            return Err(Error::plan(format!(
                "unknown stage `{stage}` (stages: {})",
                net.stages().join(", ")
            )));
        }
        if *cap == Some(0) {
            return Err(Error::plan(format!("cap for stage `{stage}` must be at least 1")));
        }
    }
    for id in &req.skip_layers {
        net.require(id).map_err(|_| Error::plan(format!("unknown layer `{id}` in skip list")))?;
    }
    let stem = net.layers().iter().position(|l| l.as_conv().is_some());

    let mut skipped = Vec::new();
    let mut candidates: Vec<(usize, &str)> = Vec::new();
    for (i, l) in net.layers().iter().enumerate() {
        let Some(conv) = l.as_conv() else { continue };
        let reason = if req.skip_stem && Some(i) == stem {
            Some("stem convolution")
        } else if req.skip_layers.contains(&l.id) {
            Some("listed in skip_layers")
        } else if matches!(req.stage_caps.get(&l.stage), Some(None)) {
            Some("stage skipped")
        } else {
            eligible(conv, req.force_pointwise)
        };
        match reason {
            Some(r) => skipped.push(SkippedLayer {
                layer: l.id.clone(),
                reason: r.to_string(),
            }),
            None => candidates.push((i, l.stage.as_str())),
        }
    }

    let mut stages = Vec::new();
    let mut stage_n: BTreeMap<&str, usize> = BTreeMap::new();
    let mut s = 0;
    let stage_list = net.stages();
    for stage in &stage_list {
        let n = if candidates.iter().any(|&(_, st)| st == stage) {
            let mut n = req.degree.stage_n(req.base_n, s);
            if let Some(Some(cap)) = req.stage_caps.get(stage) {
                n = n.min(*cap);
            }
            s += 1;
            stage_n.insert(stage.as_str(), n);
            Some(n)
        } else {
            None
        };
        stages.push(StageAssignment {
            stage: stage.clone(),
            n,
        });
    }

    let layers: Vec<LayerAssignment> = candidates
        .iter()
        .map(|&(i, stage)| {
            let l = &net.layers()[i];
            let conv = l.as_conv().expect("candidate is a conv");
            let requested_n = stage_n[stage];
            LayerAssignment {
                layer: l.id.clone(),
                stage: stage.to_string(),
                n: clamp_to_divisor(conv.c_in, requested_n),
                requested_n,
            }
        })
        .collect();
    for a in layers.iter().filter(|a| a.clamped()) {
        log::info!("{}: n = {} clamped to {}", a.layer, a.requested_n, a.n);
    }

    let mut plan = CompressionPlan {
        model: net.name().to_string(),
        degree: req.degree,
        base_n: req.base_n,
        force_pointwise: req.force_pointwise,
        stages,
        layers,
        skipped,
        flops_before: 0,
        predicted_flops: 0,
    };
    plan.validate(net)?;
    Ok(plan)
}

/// FLOPs of `net` after applying `plan`, from shapes alone.
///
/// Uses the same per-layer counter as the decomposed network, so the
/// prediction equals the measured count of the network the decomposer
/// builds.
pub fn predict_flops(net: &NetworkSpec, plan: &CompressionPlan) -> Result<u64> {
    let mut per_layer: BTreeMap<usize, usize> = BTreeMap::new();
    for a in &plan.layers {
        let i = net
            .index_of(&a.layer)
            .ok_or_else(|| Error::plan(format!("plan names unknown layer `{}`", a.layer)))?;
        let l = &net.layers()[i];
        let conv = l
            .as_conv()
            .ok_or_else(|| Error::plan(format!("plan layer `{}` is not a convolution", a.layer)))?;
        if let Some(r) = eligible(conv, plan.force_pointwise) {
            return Err(Error::plan(format!("plan layer `{}` cannot be decomposed: {r}", a.layer)));
        }
        if a.n == 0 || conv.c_in % a.n != 0 {
            return Err(Error::plan(format!(
                "plan layer `{}`: n = {} does not divide c_in = {}",
                a.layer, a.n, conv.c_in
            )));
        }
        if per_layer.insert(i, a.n).is_some() {
            return Err(Error::plan(format!("plan lists `{}` twice", a.layer)));
        }
    }
    let mut total = 0;
    for i in 0..net.len() {
        total += match per_layer.get(&i) {
            Some(&n) => {
                let conv = net.layers()[i].as_conv().expect("checked above");
                let out = net.out_shape(i);
                let (d, p) = pair_shapes(conv, n)?;
                flops_of_layer(&d, out.h, out.w) + flops_of_layer(&p, out.h, out.w)
            }
            None => layer_flops(net, i),
        };
    }
    Ok(total)
}

/// Shape-only `(D, P)` pair for `conv` at group size `n`.
pub fn pair_shapes(conv: &ConvWeights, n: usize) -> Result<(ConvWeights, ConvWeights)> {
    Ok((
        ConvWeights::new(conv.c_in, conv.c_in, conv.k, conv.c_in / n, conv.stride, conv.pad)?,
        ConvWeights::new(conv.c_in, conv.c_out, 1, 1, 1, 0)?,
    ))
}

/// Ids the decomposer gives the pair replacing `layer`.
pub fn pair_ids(layer: &str) -> (String, String) {
    (group_layer_id(layer), pointwise_layer_id(layer))
}

/// A named plan request bundled with the library.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    /// Model the preset was tuned for.
    pub model: String,
    pub description: String,
    /// Reported FLOPs after compression, when the preset targets one.
    #[serde(default)]
    pub target_flops: Option<f64>,
    #[serde(default)]
    pub target_reduction: Option<f64>,
    pub request: PlanRequest,
}

const PRESET_FILES: [&str; 8] = [
    include_str!("../presets/resnet34-A.json"),
    include_str!("../presets/resnet34-B.json"),
    include_str!("../presets/resnet34-C.json"),
    include_str!("../presets/resnet34-D.json"),
    include_str!("../presets/vgg16-A.json"),
    include_str!("../presets/vgg16-B.json"),
    include_str!("../presets/vgg16-C.json"),
    include_str!("../presets/vgg16-D.json"),
];

pub fn presets() -> Vec<Preset> {
    PRESET_FILES
        .iter()
        .map(|text| serde_json::from_str(text).expect("bundled preset parses"))
        .collect()
}

pub fn preset(name: &str) -> Result<Preset> {
    let all = presets();
    all.iter()
        .find(|p| p.name.eq_ignore_ascii_case(name))
        .cloned()
        .ok_or_else(|| {
            let names: Vec<&str> = all.iter().map(|p| p.name.as_str()).collect();
            Error::plan(format!("unknown preset `{name}` (available: {})", names.join(", ")))
        })
}
