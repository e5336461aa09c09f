use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fgroup_cli::{
    exit_code, render_plan, run_analyze, run_compress, run_gen_fixtures, run_inspect, run_plan, AnalyzeConfig,
    CalibrationSource, CompressConfig, FixtureConfig, PlanSource,
};
use fgroup_core::degeneracy::{CorrelationSite, EnergyMode};
use fgroup_core::reconstruct::{ResponseMode, Ridge};
use fgroup_core::schedule::{presets, Degree, PlanRequest};
use fgroup_core::{Error, Result};

#[derive(Parser)]
#[command(name = "fgroup", version, about = "Compress convolutional networks by filter-group decomposition")]
struct Cli {
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the layer table with stages, shapes and FLOPs.
    Inspect {
        model: PathBuf,
        /// Emit JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Build a rank plan and optionally write it to a file.
    Plan {
        model: PathBuf,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// List the bundled presets and exit.
        #[arg(long)]
        list_presets: bool,
    },
    /// Decompose, reconstruct and save a model.
    Compress {
        model: PathBuf,
        #[command(flatten)]
        plan: PlanArgs,
        /// Plan file from `fgroup plan`.
        #[arg(long, conflicts_with_all = ["preset", "degree"])]
        plan_file: Option<PathBuf>,
        #[command(flatten)]
        calib: CalibArgs,
        /// Ridge strength, or `auto`.
        #[arg(long, default_value = "auto", value_parser = parse_ridge)]
        ridge: Ridge,
        /// Fit without the per-channel offset.
        #[arg(long)]
        no_intercept: bool,
        /// Take responses from the original network's layer inputs.
        #[arg(long)]
        symmetric: bool,
        /// Skip the least-squares correction.
        #[arg(long)]
        no_reconstruct: bool,
        /// Spatial positions per calibration sample used in the fit.
        #[arg(long)]
        max_positions: Option<usize>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Energy curves, rank reports and filter correlations.
    Analyze {
        original: PathBuf,
        compressed: PathBuf,
        #[command(flatten)]
        calib: CalibArgs,
        /// Also compute inter-layer filter correlations.
        #[arg(long)]
        correlation: bool,
        /// Correlate the raw pointwise output instead of the activated map.
        #[arg(long)]
        pre_activation: bool,
        /// Keep the sign of the correlation.
        #[arg(long)]
        signed: bool,
        /// Build energy curves from singular values instead of their squares.
        #[arg(long)]
        energy_sigma: bool,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Write toy models, a calibration set and reference architectures.
    GenFixtures {
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Materialize random ResNet-34 / VGG16 parameters.
        #[arg(long)]
        random_weights: bool,
        #[arg(long, default_value_t = 256)]
        calib_samples: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DegreeArg {
    Constant,
    Half,
    Quarter,
}

impl From<DegreeArg> for Degree {
    fn from(d: DegreeArg) -> Self {
        match d {
            DegreeArg::Constant => Degree::Constant,
            DegreeArg::Half => Degree::Half,
            DegreeArg::Quarter => Degree::Quarter,
        }
    }
}

#[derive(Args)]
struct PlanArgs {
    /// Bundled preset, e.g. resnet34-A.
    #[arg(long, conflicts_with = "degree")]
    preset: Option<String>,
    #[arg(long, value_enum, requires = "base_n")]
    degree: Option<DegreeArg>,
    /// Group size of the shallowest compressed stage.
    #[arg(long)]
    base_n: Option<usize>,
    /// Stage to leave untouched (repeatable).
    #[arg(long)]
    skip_stage: Vec<String>,
    /// Cap a stage's n, as STAGE=N (repeatable).
    #[arg(long, value_parser = parse_cap)]
    cap_stage: Vec<(String, usize)>,
    /// Layer to leave untouched (repeatable).
    #[arg(long)]
    skip_layer: Vec<String>,
    /// Decompose the first convolution as well.
    #[arg(long)]
    include_stem: bool,
    /// Decompose 1x1 convolutions too.
    #[arg(long = "force-1x1")]
    force_1x1: bool,
}

impl PlanArgs {
    fn source(&self, file: Option<PathBuf>) -> Result<PlanSource> {
        if let Some(f) = file {
            return Ok(PlanSource::File(f));
        }
        if let Some(p) = &self.preset {
            return Ok(PlanSource::Preset(p.clone()));
        }
        let (Some(degree), Some(base_n)) = (self.degree, self.base_n) else {
            return Err(Error::plan("give --preset, --plan-file, or --degree with --base-n"));
        };
        let mut req = PlanRequest::new(degree.into(), base_n);
        for s in &self.skip_stage {
            req = req.skip_stage(s);
        }
        for (s, cap) in &self.cap_stage {
            req = req.cap_stage(s, *cap);
        }
        req.skip_layers = self.skip_layer.clone();
        req.skip_stem = !self.include_stem;
        Ok(PlanSource::Request(req))
    }
}

#[derive(Args)]
struct CalibArgs {
    /// Calibration header file (JSON with a `.bin` blob alongside).
    #[arg(long, conflicts_with = "calib_samples")]
    calib: Option<PathBuf>,
    /// Number of synthetic standard-normal calibration inputs.
    #[arg(long)]
    calib_samples: Option<usize>,
    /// Seed for synthetic calibration.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl CalibArgs {
    fn source(&self) -> Option<CalibrationSource> {
        match (&self.calib, self.calib_samples) {
            (Some(p), _) => Some(CalibrationSource::File(p.clone())),
            (None, Some(samples)) => Some(CalibrationSource::Synthetic { samples, seed: self.seed }),
            (None, None) => None,
        }
    }
}

fn parse_ridge(s: &str) -> std::result::Result<Ridge, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(Ridge::Auto);
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(Ridge::Fixed(v)),
        _ => Err(format!("expected `auto` or a non-negative number, got `{s}`")),
    }
}

fn parse_cap(s: &str) -> std::result::Result<(String, usize), String> {
    let (stage, n) = s.split_once('=').ok_or_else(|| format!("expected STAGE=N, got `{s}`"))?;
    let n = n.parse().map_err(|_| format!("bad cap `{n}`"))?;
    Ok((stage.to_string(), n))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Inspect { model, json } => {
            let report = run_inspect(&model)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.render());
            }
        }
        Command::Plan {
            model,
            plan,
            out,
            list_presets,
        } => {
            if list_presets {
                for p in presets() {
                    println!("{:<12} {:<9} {}", p.name, p.model, p.description);
                }
                return Ok(());
            }
            let source = plan.source(None)?;
            let result = run_plan(&model, &source, plan.force_1x1, out.as_deref())?;
            print!("{}", render_plan(&result));
        }
        Command::Compress {
            model,
            plan,
            plan_file,
            calib,
            ridge,
            no_intercept,
            symmetric,
            no_reconstruct,
            max_positions,
            out,
        } => {
            let mut cfg = CompressConfig::new(model, plan.source(plan_file)?, out);
            if let Some(c) = calib.source() {
                cfg.calibration = c;
            } else {
                cfg.calibration = CalibrationSource::Synthetic {
                    samples: 256,
                    seed: calib.seed,
                };
            }
            cfg.ridge = ridge;
            cfg.intercept = !no_intercept;
            cfg.mode = if symmetric {
                ResponseMode::Symmetric
            } else {
                ResponseMode::Asymmetric
            };
            cfg.reconstruct = !no_reconstruct;
            cfg.max_positions = max_positions;
            cfg.force_pointwise = plan.force_1x1;
            let report = run_compress(&cfg)?;
            println!(
                "{}: {} layers decomposed, FLOPs {:.4e} -> {:.4e} ({:.2}% reduction); wrote {}",
                report.model,
                report.layers.len(),
                report.flops_before as f64,
                report.flops_after as f64,
                100.0 * report.reduction,
                cfg.out_dir.display()
            );
        }
        Command::Analyze {
            original,
            compressed,
            calib,
            correlation,
            pre_activation,
            signed,
            energy_sigma,
            out,
        } => {
            let cfg = AnalyzeConfig {
                original,
                compressed,
                calibration: calib.source(),
                correlation,
                site: if pre_activation {
                    CorrelationSite::PreActivation
                } else {
                    CorrelationSite::PostActivation
                },
                absolute: !signed,
                energy: if energy_sigma {
                    EnergyMode::Linear
                } else {
                    EnergyMode::Squared
                },
                out_dir: out,
            };
            let report = run_analyze(&cfg)?;
            for l in &report.layers {
                println!(
                    "{:<16} n={:<4} rank svd/spatial/group = {}/{}/{} (measured group {})",
                    l.layer, l.n, l.ranks.rank_svd, l.ranks.rank_spatial, l.ranks.rank_group, l.measured_rank_group
                );
            }
            for c in &report.correlations {
                println!(
                    "{:<16} correlation in-block {:.3} vs out-of-block {:.3}",
                    c.group_layer, c.stats.in_block_mean, c.stats.out_block_mean
                );
            }
        }
        Command::GenFixtures {
            out,
            seed,
            random_weights,
            calib_samples,
        } => {
            let cfg = FixtureConfig {
                out_dir: out,
                seed,
                random_weights,
                calibration_samples: calib_samples,
            };
            for p in run_gen_fixtures(&cfg)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
