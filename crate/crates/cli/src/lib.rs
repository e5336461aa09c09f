//! Commands behind the `fgroup` binary.
//!
//! Each `run_*` function performs one subcommand and returns a serializable
//! report; `main.rs` only parses arguments, prints, and maps errors to exit
//! codes with [`exit_code`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fgroup_core::decompose::{decompose_network, restructure_network, DecomposeOptions};
use fgroup_core::degeneracy::{
    filter_correlation, layer_degeneracy, preceding_pointwise, write_rank_csv, BlockStats, CorrelationOptions, CorrelationSite,
    EnergyMode, LayerDegeneracy, StrategyRankReport,
};
use fgroup_core::model::flops::{flops_table, network_flops, LayerFlops};
use fgroup_core::model::zoo::{self, Init};
use fgroup_core::model::{load_model, save_model, DecomposedRole, NetworkSpec};
use fgroup_core::reconstruct::{
    reconstruct_network, CalibrationSet, LayerReconstructionReport, ReconstructOptions, ResponseMode, Ridge,
};
use fgroup_core::schedule::{build_plan, preset, CompressionPlan, Degree, PlanRequest};
use fgroup_core::{par, Error, Result, Shape3};
use serde::Serialize;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_PLAN: i32 = 4;
pub const EXIT_NUMERICAL: i32 = 5;

pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Format(_) | Error::Json(_) => EXIT_FORMAT,
        Error::Plan(_) => EXIT_PLAN,
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_OTHER,
    }
}

// ---------------------------------------------------------------- inspect

#[derive(Debug, Clone, Serialize)]
pub struct InspectReport {
    pub name: String,
    pub input_shape: Shape3,
    pub materialized: bool,
    pub layers: Vec<LayerFlops>,
    pub total_flops: u64,
}

impl InspectReport {
    /// Plain-text layer table.
    pub fn render(&self) -> String {
        let idw = self.layers.iter().map(|l| l.id.len()).max().unwrap_or(2).max(5);
        let stw = self.layers.iter().map(|l| l.stage.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} (input {}, {})",
            self.name,
            self.input_shape,
            if self.materialized { "weights" } else { "architecture only" }
        );
        let _ = writeln!(
            s,
            "{:<idw$}  {:<14}  {:<stw$}  {:>14}  {:>14}  {:>15}",
            "layer", "kind", "stage", "input", "output", "flops"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<idw$}  {:<14}  {:<stw$}  {:>14}  {:>14}  {:>15}",
                l.id,
                l.kind,
                l.stage,
                l.input.to_string(),
                l.output.to_string(),
                l.flops
            );
        }
        let _ = writeln!(s, "total FLOPs: {} ({:.4e})", self.total_flops, self.total_flops as f64);
        s
    }
}

pub fn run_inspect(model: &Path) -> Result<InspectReport> {
    let net = load_model(model)?;
    Ok(InspectReport {
        name: net.name().to_string(),
        input_shape: net.input_shape(),
        materialized: net.is_materialized(),
        layers: flops_table(&net),
        total_flops: network_flops(&net),
    })
}

// ---------------------------------------------------------------- plan

#[derive(Debug, Clone, PartialEq)]
pub enum PlanSource {
    /// A plan file written by `fgroup plan`.
    File(PathBuf),
    /// A bundled preset by name.
    Preset(String),
    Request(PlanRequest),
}

/// Turn a plan source into a plan validated against `net`.
pub fn resolve_plan(net: &NetworkSpec, source: &PlanSource, force_pointwise: bool) -> Result<CompressionPlan> {
    let from_request = |mut req: PlanRequest| {
        req.force_pointwise |= force_pointwise;
        build_plan(net, &req)
    };
    match source {
        PlanSource::File(path) => {
            let text = fs::read_to_string(path)?;
            let mut plan = CompressionPlan::from_json(&text)?;
            if plan.model != net.name() {
                log::warn!("plan was built for `{}`, applying it to `{}`", plan.model, net.name());
            }
            plan.force_pointwise |= force_pointwise;
            plan.validate(net)?;
            Ok(plan)
        }
        PlanSource::Preset(name) => {
            let p = preset(name)?;
            if p.model != net.name() {
                log::warn!("preset `{}` targets `{}`, model is `{}`", p.name, p.model, net.name());
            }
            from_request(p.request)
        }
        PlanSource::Request(req) => from_request(req.clone()),
    }
}

pub fn run_plan(model: &Path, source: &PlanSource, force_pointwise: bool, out: Option<&Path>) -> Result<CompressionPlan> {
    let net = load_model(model)?;
    let plan = resolve_plan(&net, source, force_pointwise)?;
    if let Some(path) = out {
        fs::write(path, plan.to_json()? + "\n")?;
    }
    Ok(plan)
}

pub fn render_plan(plan: &CompressionPlan) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}: {} schedule, base n = {}", plan.model, plan.degree, plan.base_n);
    for st in &plan.stages {
        let n = st.n.map_or("-".to_string(), |n| n.to_string());
        let _ = writeln!(s, "  stage {:<10} n = {n}", st.stage);
    }
    for a in plan.clamped() {
        let _ = writeln!(s, "  {}: n = {} clamped to {}", a.layer, a.requested_n, a.n);
    }
    let _ = writeln!(
        s,
        "{} layers decomposed, {} skipped; FLOPs {:.4e} -> {:.4e} ({:.2}% reduction)",
        plan.layers.len(),
        plan.skipped.len(),
        plan.flops_before as f64,
        plan.predicted_flops as f64,
        100.0 * plan.predicted_reduction()
    );
    s
}

// ---------------------------------------------------------------- compress

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationSource {
    /// Header JSON plus `.bin` blob.
    File(PathBuf),
    /// Standard-normal inputs from a seeded generator.
    Synthetic { samples: usize, seed: u64 },
}

impl CalibrationSource {
    pub fn load(&self, shape: Shape3) -> Result<CalibrationSet> {
        let set = match self {
            CalibrationSource::File(p) => CalibrationSet::load(p)?,
            CalibrationSource::Synthetic { samples, seed } => CalibrationSet::synthetic(shape, *samples, *seed)?,
        };
        if set.shape() != shape {
            return Err(Error::shape(format!(
                "calibration inputs are {}, model expects {shape}",
                set.shape()
            )));
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressConfig {
    pub model: PathBuf,
    pub plan: PlanSource,
    pub calibration: CalibrationSource,
    pub ridge: Ridge,
    pub intercept: bool,
    pub mode: ResponseMode,
    pub reconstruct: bool,
    pub max_positions: Option<usize>,
    pub force_pointwise: bool,
    pub out_dir: PathBuf,
}

impl CompressConfig {
    pub fn new(model: impl Into<PathBuf>, plan: PlanSource, out_dir: impl Into<PathBuf>) -> Self {
        CompressConfig {
            model: model.into(),
            plan,
            calibration: CalibrationSource::Synthetic { samples: 256, seed: 0 },
            ridge: Ridge::Auto,
            intercept: true,
            mode: ResponseMode::Asymmetric,
            reconstruct: true,
            max_positions: None,
            force_pointwise: false,
            out_dir: out_dir.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CompressedLayerReport {
    pub layer: String,
    pub stage: String,
    pub n: usize,
    pub requested_n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub flops_before: u64,
    pub flops_after: u64,
    /// Absent for architecture-only models.
    pub truncation_error: Option<f64>,
    pub relative_truncation_error: Option<f64>,
    pub reconstruction: Option<LayerReconstructionReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReconstructionSettings {
    pub mode: ResponseMode,
    pub ridge: Ridge,
    pub intercept: bool,
    pub calibration: CalibrationSource,
    pub samples: usize,
    pub max_positions: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompressReport {
    pub model: String,
    pub output: String,
    pub degree: Degree,
    pub base_n: usize,
    pub flops_before: u64,
    pub predicted_flops: u64,
    pub flops_after: u64,
    pub reduction: f64,
    pub reconstruction: Option<ReconstructionSettings>,
    pub layers: Vec<CompressedLayerReport>,
}

pub const MODEL_FILE: &str = "model.json";
pub const PLAN_FILE: &str = "plan.json";
pub const REPORT_FILE: &str = "report.json";

/// Plan, decompose, optionally reconstruct, and write
/// `model.json`/`model.bin`, `plan.json` and `report.json` to `out_dir`.
pub fn run_compress(cfg: &CompressConfig) -> Result<CompressReport> {
    let net = load_model(&cfg.model)?;
    let plan = resolve_plan(&net, &cfg.plan, cfg.force_pointwise)?;
    let opts = DecomposeOptions {
        force_pointwise: plan.force_pointwise,
    };
    let materialized = net.is_materialized();
    if cfg.reconstruct && !materialized {
        return Err(Error::invalid(
            "model has no parameters, so there is nothing to reconstruct; pass --no-reconstruct for an architecture-only result",
        ));
    }

    let assignments = plan.assignments();
    let (mut compressed, decomposed) = if materialized {
        let d = decompose_network(&net, &assignments, opts)?;
        (d.net, Some(d.reports))
    } else {
        (restructure_network(&net, &assignments, opts)?, None)
    };

    let mut recon_reports = Vec::new();
    let mut settings = None;
    if cfg.reconstruct {
        let calib = cfg.calibration.load(net.input_shape())?;
        let ropts = ReconstructOptions {
            ridge: cfg.ridge,
            intercept: cfg.intercept,
            mode: cfg.mode,
            max_positions: cfg.max_positions,
        };
        let (fixed, reports) = reconstruct_network(&net, &compressed, &calib, &ropts)?;
        compressed = fixed;
        recon_reports = reports;
        settings = Some(ReconstructionSettings {
            mode: cfg.mode,
            ridge: cfg.ridge,
            intercept: cfg.intercept,
            calibration: cfg.calibration.clone(),
            samples: calib.len(),
            max_positions: cfg.max_positions,
        });
    }

    let layers = plan
        .layers
        .iter()
        .map(|a| {
            let i = net.index_of(&a.layer).expect("plan validated");
            let conv = net.layers()[i].as_conv().expect("plan validated");
            let d = decomposed
                .as_ref()
                .and_then(|r| r.iter().find(|r| r.layer == a.layer));
            let out = net.out_shape(i);
            let (dl, pl) = fgroup_core::schedule::pair_shapes(conv, a.n)?;
            Ok(CompressedLayerReport {
                layer: a.layer.clone(),
                stage: a.stage.clone(),
                n: a.n,
                requested_n: a.requested_n,
                c_in: conv.c_in,
                c_out: conv.c_out,
                k: conv.k,
                flops_before: fgroup_core::model::flops_of_layer(conv, out.h, out.w),
                flops_after: fgroup_core::model::flops_of_layer(&dl, out.h, out.w)
                    + fgroup_core::model::flops_of_layer(&pl, out.h, out.w),
                truncation_error: d.map(|d| d.truncation_error),
                relative_truncation_error: d.map(|d| d.relative_error),
                reconstruction: recon_reports.iter().find(|r| r.layer == a.layer).cloned(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    fs::create_dir_all(&cfg.out_dir)?;
    save_model(&compressed, &cfg.out_dir.join(MODEL_FILE))?;
    fs::write(cfg.out_dir.join(PLAN_FILE), plan.to_json()? + "\n")?;
    let flops_after = network_flops(&compressed);
    let report = CompressReport {
        model: net.name().to_string(),
        output: MODEL_FILE.to_string(),
        degree: plan.degree,
        base_n: plan.base_n,
        flops_before: plan.flops_before,
        predicted_flops: plan.predicted_flops,
        flops_after,
        reduction: 1.0 - flops_after as f64 / plan.flops_before.max(1) as f64,
        reconstruction: settings,
        layers,
    };
    fs::write(cfg.out_dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

// ---------------------------------------------------------------- analyze

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeConfig {
    pub original: PathBuf,
    pub compressed: PathBuf,
    pub calibration: Option<CalibrationSource>,
    pub correlation: bool,
    pub site: CorrelationSite,
    pub absolute: bool,
    pub energy: EnergyMode,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzedLayer {
    pub layer: String,
    pub n: usize,
    pub ranks: StrategyRankReport,
    pub measured_rank_svd: usize,
    pub measured_rank_group: usize,
    /// Values needed to reach the full energy (tolerance 1e-12).
    pub components_original: usize,
    pub components_svd: usize,
    pub components_group: usize,
    pub energy_files: [String; 3],
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrelationSummary {
    pub group_layer: String,
    pub source_layer: String,
    pub samples: usize,
    pub zero_variance_channels: usize,
    pub stats: BlockStats,
    pub file: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeReport {
    pub energy: EnergyMode,
    pub layers: Vec<AnalyzedLayer>,
    pub correlations: Vec<CorrelationSummary>,
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// Energy curves and rank reports for every decomposed layer, plus
/// correlation matrices when requested. Writes CSVs and `summary.json`.
pub fn run_analyze(cfg: &AnalyzeConfig) -> Result<AnalyzeReport> {
    if cfg.correlation && cfg.calibration.is_none() {
        return Err(Error::invalid(
            "correlation analysis needs calibration inputs (--calib or --calib-samples)",
        ));
    }
    let original = load_model(&cfg.original)?;
    let compressed = load_model(&cfg.compressed)?;
    if !original.is_materialized() || !compressed.is_materialized() {
        return Err(Error::invalid("analysis needs models with parameters"));
    }
    let pairs: Vec<(String, usize)> = compressed
        .layers()
        .iter()
        .filter_map(|l| match &l.provenance {
            Some(p) if p.role == DecomposedRole::Pointwise => Some((p.source.clone(), p.n)),
            _ => None,
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::invalid("compressed model has no decomposed layers"));
    }

    let degeneracy = par::try_map(&pairs, |(source, n)| -> Result<LayerDegeneracy> {
        let run = || {
            let orig = original
                .layer(source)
                .and_then(|l| l.as_conv())
                .ok_or_else(|| Error::invalid("not a convolution of the original model"))?;
            let conv = |id: String| {
                compressed
                    .layer(&id)
                    .and_then(|l| l.as_conv())
                    .ok_or_else(|| Error::invalid(format!("compressed model lacks `{id}`")))
            };
            let (d, p) = (conv(format!("{source}.group"))?, conv(format!("{source}.point"))?);
            layer_degeneracy(source, orig, d, p, *n, cfg.energy)
        };
        run().map_err(|e| e.in_layer(source))
    })?;

    let energy_dir = cfg.out_dir.join("energy");
    fs::create_dir_all(&energy_dir)?;
    let mut layers = Vec::new();
    for d in &degeneracy {
        let stem = file_stem(&d.layer);
        let names = [
            format!("energy/{stem}.original.csv"),
            format!("energy/{stem}.svd.csv"),
            format!("energy/{stem}.group.csv"),
        ];
        for (curve, name) in [&d.original, &d.svd_strategy, &d.group].into_iter().zip(&names) {
            curve.write_csv(fs::File::create(cfg.out_dir.join(name))?)?;
        }
        layers.push(AnalyzedLayer {
            layer: d.layer.clone(),
            n: d.ranks.n,
            ranks: d.ranks,
            measured_rank_svd: d.measured_rank_svd,
            measured_rank_group: d.measured_rank_group,
            components_original: d.original.components_to_reach(1e-12),
            components_svd: d.svd_strategy.components_to_reach(1e-12),
            components_group: d.group.components_to_reach(1e-12),
            energy_files: names,
        });
    }
    write_rank_csv(&degeneracy, fs::File::create(cfg.out_dir.join("ranks.csv"))?)?;

    let mut correlations = Vec::new();
    if cfg.correlation {
        let calib = cfg
            .calibration
            .as_ref()
            .expect("checked above")
            .load(compressed.input_shape())?;
        let corr_dir = cfg.out_dir.join("correlation");
        fs::create_dir_all(&corr_dir)?;
        let opts = CorrelationOptions {
            absolute: cfg.absolute,
            site: cfg.site,
        };
        // Only group layers fed by an earlier pointwise layer have a
        // counterpart to correlate with.
        let groups: Vec<String> = pairs
            .iter()
            .map(|(s, _)| format!("{s}.group"))
            .filter(|g| preceding_pointwise(&compressed, g).is_some())
            .collect();
        let results = par::try_map(&groups, |g| {
            filter_correlation(&compressed, g, calib.samples(), opts).map_err(|e| e.in_layer(g))
        })?;
        for fc in results {
            let file = format!("correlation/{}.csv", file_stem(&fc.group_layer));
            fc.matrix.write_csv(fs::File::create(cfg.out_dir.join(&file))?)?;
            correlations.push(CorrelationSummary {
                group_layer: fc.group_layer,
                source_layer: fc.source_layer,
                samples: fc.matrix.samples,
                zero_variance_channels: fc.matrix.zero_variance_rows.len() + fc.matrix.zero_variance_cols.len(),
                stats: fc.stats,
                file,
            });
        }
    }

    let report = AnalyzeReport {
        energy: cfg.energy,
        layers,
        correlations,
    };
    fs::write(cfg.out_dir.join("summary.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

// ---------------------------------------------------------------- fixtures

/// Four-layer toy whose layers never widen, so `n = c_in` is lossless.
pub fn toy4(seed: u64) -> Result<NetworkSpec> {
    zoo::toy_cnn(Shape3::new(4, 8, 8), &[(4, 3, 1), (4, 3, 2), (4, 3, 1), (3, 3, 1)], seed)
}

/// Three-layer toy used for reconstruction checks.
pub fn toy3(seed: u64) -> Result<NetworkSpec> {
    zoo::toy_cnn(Shape3::new(4, 6, 6), &[(8, 3, 1), (8, 3, 2), (6, 3, 1)], seed)
}

pub fn single_conv(seed: u64) -> Result<NetworkSpec> {
    zoo::toy_cnn(Shape3::new(3, 8, 8), &[(8, 3, 1)], seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Materialize random ResNet-34 / VGG16 parameters (about 87 MB and
    /// 553 MB of `f32`).
    pub random_weights: bool,
    pub calibration_samples: usize,
}

/// Write the toy models, a toy calibration set, and the ResNet-34 and
/// VGG16 manifests. Returns the manifest paths written.
pub fn run_gen_fixtures(cfg: &FixtureConfig) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(&cfg.out_dir)?;
    let init = if cfg.random_weights {
        Init::Random(cfg.seed)
    } else {
        Init::Shapes
    };
    let mut written = Vec::new();
    let mut put = |name: &str, net: NetworkSpec| -> Result<()> {
        let path = cfg.out_dir.join(name);
        save_model(&net, &path)?;
        written.push(path);
        Ok(())
    };
    put("toy4.json", toy4(cfg.seed)?)?;
    put("toy3.json", toy3(cfg.seed.wrapping_add(1))?)?;
    put("single_conv.json", single_conv(cfg.seed.wrapping_add(2))?)?;
    put("resnet34.json", zoo::resnet34(init)?)?;
    put("vgg16.json", zoo::vgg16(init)?)?;
    let calib_path = cfg.out_dir.join("toy3_calib.json");
    CalibrationSet::synthetic(toy3(0)?.input_shape(), cfg.calibration_samples, cfg.seed)?.save(&calib_path)?;
    written.push(calib_path);
    Ok(written)
}
