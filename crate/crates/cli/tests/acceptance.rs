//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one `[PASS]`/`[FAIL]` line; the process exits non-zero
//! if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use fgroup_cli::{run_compress, CalibrationSource, CompressConfig, PlanSource, MODEL_FILE};
use fgroup_core::decompose::{decompose_layer, decompose_network, restructure_network, DecomposeOptions};
use fgroup_core::degeneracy::{decomposition_energy_curve, energy_curve, equal_flops_ranks, svd_strategy_matrix, EnergyMode};
use fgroup_core::linalg::Matrix;
use fgroup_core::model::flops::divisors;
use fgroup_core::model::zoo::{self, Init};
use fgroup_core::model::{conv_forward, flops_of_layer, forward, load_model, network_flops, ConvWeights, NetworkSpec};
use fgroup_core::reconstruct::{
    collect_responses, reconstruct_network, solve_reconstruction, CalibrationSet, ReconstructOptions, Ridge,
};
use fgroup_core::schedule::{build_plan, preset, PlanRequest, Degree};
use fgroup_core::{FeatureMap, Shape3};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn singular_values_desc(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ------------------------------------------------------------------ AC1

fn ac1_flops() -> Outcome {
    let shipped = load_model(&fixture("resnet34.json")).map_err(err)?;
    let start = Instant::now();
    let total = network_flops(&shipped);
    let targets = [("A", 3.98e9), ("B", 2.58e9), ("C", 1.44e9), ("D", 1.11e9)];
    let mut measured = Vec::new();
    for (name, _) in targets {
        let p = preset(&format!("resnet34-{name}")).map_err(err)?;
        let plan = build_plan(&shipped, &p.request).map_err(err)?;
        let net = restructure_network(&shipped, &plan.assignments(), DecomposeOptions::default()).map_err(err)?;
        let f = network_flops(&net);
        ensure(f == plan.predicted_flops, || format!("plan {name}: predicted {} vs counted {f}", plan.predicted_flops))?;
        measured.push(f);
    }
    let elapsed = start.elapsed().as_secs_f64();

    let within = |got: u64, want: f64| (got as f64 / want - 1.0).abs() <= 0.02;
    ensure(within(total, 7.32e9), || format!("total {total:.4e}"))?;
    for ((name, want), got) in targets.iter().zip(&measured) {
        ensure(within(*got, *want), || format!("plan {name}: {:.4e} vs {want:.2e}", *got as f64))?;
    }
    ensure(elapsed < 1.0, || format!("counting took {elapsed:.3}s"))?;

    // Materialized random weights must count the same as the shipped manifest.
    let random = zoo::resnet34(Init::Random(0)).map_err(err)?;
    ensure(network_flops(&random) == total, || "random-weight ResNet-34 counts differently".into())?;

    Ok(format!(
        "total {:.4e}; A-D {}; {:.1} ms",
        total as f64,
        measured.iter().map(|f| format!("{:.4e}", *f as f64)).collect::<Vec<_>>().join(" "),
        elapsed * 1e3
    ))
}

// ------------------------------------------------------------------ AC2

/// Row block `i` of the im2col weight matrix built straight from the
/// `[c_out][c_in][ky][kx]` weight layout.
fn oracle_block(w: &ConvWeights, n: usize, i: usize) -> DMatrix<f64> {
    let (k, c_in) = (w.k, w.c_in);
    let kk = k * k;
    let raw = w.weights().unwrap();
    DMatrix::from_fn(n * kk, w.c_out, |r, o| {
        let c = i * n + r / kk;
        raw[(o * c_in + c) * kk + r % kk]
    })
}

fn ac2_eckart_young() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2002);
    let mut blocks = 0;
    let mut worst = 0.0f64;
    for case in 0..200 {
        let c_in = r.random_range(1..=16usize);
        let c_out = r.random_range(1..=32usize);
        let k = [1usize, 3, 5][r.random_range(0..3)];
        let ds = divisors(c_in);
        let n = ds[r.random_range(0..ds.len())];
        let w = ConvWeights::random(c_in, c_out, k, 1, 1, k / 2, false, &mut r).map_err(err)?;
        let dec = decompose_layer(&w, n, DecomposeOptions { force_pointwise: true }).map_err(err)?;
        for (i, got) in dec.block_errors.iter().enumerate() {
            let block = oracle_block(&w, n, i);
            let s = singular_values_desc(&block);
            let want = s.iter().skip(n).map(|v| v * v).sum::<f64>().sqrt();
            // A block with no discarded spectrum has error at round-off
            // level; measure that against the block norm instead.
            let scale = if want > 1e-6 * block.norm() { want } else { block.norm() };
            let rel = (got - want).abs() / scale;
            worst = worst.max(rel);
            ensure(rel <= 1e-9, || {
                format!("case {case} ({c_in}x{c_out}, k={k}, n={n}) block {i}: {got:e} vs {want:e}")
            })?;
            blocks += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    ensure(elapsed < 30.0, || format!("took {elapsed:.1}s"))?;
    Ok(format!("200 layers, {blocks} blocks, worst relative {worst:.2e}, {elapsed:.2}s"))
}

// ------------------------------------------------------------------ AC3

fn ac3_lossless() -> Outcome {
    let net = load_model(&fixture("toy4.json")).map_err(err)?;
    let plan: Vec<(String, usize)> = net
        .layers()
        .iter()
        .filter_map(|l| l.as_conv().map(|c| (l.id.clone(), c.c_in)))
        .collect();
    ensure(plan.len() == 4, || format!("toy has {} convolutions", plan.len()))?;
    let out = decompose_network(&net, &plan, DecomposeOptions::default()).map_err(err)?;
    let mut r = rng(3003);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = FeatureMap::standard_normal(net.input_shape(), &mut r);
        let a = forward(&net, &x).map_err(err)?;
        let b = forward(&out.net, &x).map_err(err)?;
        worst = worst.max(b.relative_error(&a));
    }
    ensure(worst <= 1e-8, || format!("worst relative error {worst:e}"))?;
    Ok(format!("100 inputs, worst relative error {worst:.2e}"))
}

// ------------------------------------------------------------------ AC4

fn ac4_complexity() -> Outcome {
    let mut r = rng(4004);
    for case in 0..100 {
        let c_in = r.random_range(1..=512usize);
        let c_out = r.random_range(1..=512usize);
        let k = r.random_range(2..=7usize);
        let ds = divisors(c_in);
        let n = ds[r.random_range(0..ds.len())];
        let h = r.random_range(1..=64usize);
        let w = r.random_range(1..=64usize);
        let conv = ConvWeights::new(c_in, c_out, k, 1, 1, k / 2).map_err(err)?;
        let net = single_layer_net(conv, Shape3::new(c_in, h, w))?;
        let out = restructure_network(&net, &[("c".to_string(), n)], DecomposeOptions::default()).map_err(err)?;
        let (before, after) = (network_flops(&net) as u128, network_flops(&out) as u128);
        // after / before == n / c_out + 1 / k², cross-multiplied.
        let (co, kk, nn) = (c_out as u128, (k * k) as u128, n as u128);
        ensure(after * co * kk == before * (nn * kk + co), || {
            format!("case {case} ({c_in},{c_out},k={k},n={n}): {after}/{before}")
        })?;
        let layer = out.layer("c.group").unwrap().as_conv().unwrap();
        let (oh, ow) = layer.out_dims(h, w).map_err(err)?;
        let direct = flops_of_layer(layer, oh, ow) + flops_of_layer(out.layer("c.point").unwrap().as_conv().unwrap(), oh, ow);
        ensure(direct as u128 == after, || format!("case {case}: per-layer sum differs"))?;
    }
    Ok("100 tuples, exact integer identity".into())
}

fn single_layer_net(conv: ConvWeights, input: Shape3) -> Result<NetworkSpec, String> {
    use fgroup_core::model::{LayerKind, LayerSpec};
    NetworkSpec::new("one", input, vec![LayerSpec::new("c", LayerKind::Conv(conv))]).map_err(err)
}

// ------------------------------------------------------------------ AC5

fn ac5_reconstruction() -> Outcome {
    let net = load_model(&fixture("toy3.json")).map_err(err)?;
    let plan: Vec<(String, usize)> = (1..=3).map(|i| (format!("conv{i}"), 1)).collect();
    let compressed = decompose_network(&net, &plan, DecomposeOptions::default()).map_err(err)?.net;
    let calib = CalibrationSet::synthetic(net.input_shape(), 2000, 5005).map_err(err)?;
    let opts = ReconstructOptions::default();
    let (_, reports) = reconstruct_network(&net, &compressed, &calib, &opts).map_err(err)?;
    ensure(reports.len() == 3, || format!("{} layers reconstructed", reports.len()))?;
    for rep in &reports {
        ensure(rep.residual_after <= rep.residual_before, || {
            format!("{}: {:e} > {:e}", rep.layer, rep.residual_after, rep.residual_before)
        })?;
    }

    let (y_star, y) = collect_responses(&net, &compressed, "conv1", &calib, &opts).map_err(err)?;
    let sol = solve_reconstruction(&y_star, &y, Ridge::Fixed(0.0), true).map_err(err)?;
    let center = |m: &Matrix| {
        let mut d = to_na(m);
        for mut col in d.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        d
    };
    let oracle = center(&y_star).pseudo_inverse(1e-12).map_err(err)? * center(&y);
    let diff = (to_na(&sol.a) - &oracle).abs().max();
    ensure(diff <= 1e-8, || format!("A differs from pseudo-inverse by {diff:e}"))?;

    let drops: Vec<String> = reports
        .iter()
        .map(|r| format!("{} {:.3}->{:.3}", r.layer, r.relative_before, r.relative_after))
        .collect();
    Ok(format!("{}; pinv max diff {diff:.1e}", drops.join(", ")))
}

// ------------------------------------------------------------------ AC6

fn ac6_ranks() -> Outcome {
    let mut r = rng(6006);
    let mut strict_svd = 0;
    let mut strict_spatial = 0;
    for _ in 0..500 {
        // The comparison is stated for layers that do not shrink: c_in <= c_out.
        let c_in = r.random_range(1..=512usize);
        let c_out = c_in + r.random_range(0..=512usize);
        let k = [1usize, 3, 5, 7][r.random_range(0..4)];
        let n = r.random_range(1..=c_in);
        let rep = equal_flops_ranks(c_in, c_out, k, n).map_err(err)?;
        ensure(rep.rank_group == c_in.min(c_out), || format!("{rep:?}"))?;
        if n < c_in {
            ensure(rep.rank_svd < rep.rank_group, || format!("R1 not below: {rep:?}"))?;
            strict_svd += 1;
        }
        if n * k * k < c_in {
            ensure(rep.rank_spatial < rep.rank_group, || format!("R2 not below: {rep:?}"))?;
            strict_spatial += 1;
        }
    }

    let mut instantiated = 0;
    while instantiated < 50 {
        let c_in = r.random_range(1..=16usize);
        let c_out = r.random_range(1..=24usize);
        let k = [1usize, 3, 5][r.random_range(0..3)];
        let ds = divisors(c_in);
        let n = ds[r.random_range(0..ds.len())];
        let w = ConvWeights::random(c_in, c_out, k, 1, 1, k / 2, false, &mut r).map_err(err)?;
        let dec = decompose_layer(&w, n, DecomposeOptions { force_pointwise: true }).map_err(err)?;
        let dp = to_na(&dec.d_matrix().map_err(err)?) * to_na(&dec.p_matrix().map_err(err)?);
        let s = singular_values_desc(&dp);
        let rank = s.iter().filter(|v| **v > 1e-8 * s[0]).count();
        ensure(rank == c_in.min(c_out), || format!("({c_in},{c_out},k={k},n={n}): rank {rank}"))?;
        instantiated += 1;
    }
    Ok(format!(
        "500 tuples ({strict_svd} with n<c_in, {strict_spatial} with n<c_in/k^2); 50 D.P ranks = min(c_in,c_out)"
    ))
}

// ------------------------------------------------------------------ AC7

fn direct_conv(c: &ConvWeights, x: &FeatureMap) -> FeatureMap {
    let s = x.shape();
    let oh = (s.h + 2 * c.pad - c.k) / c.stride + 1;
    let ow = (s.w + 2 * c.pad - c.k) / c.stride + 1;
    let w = c.weights().unwrap();
    let ipg = c.c_in / c.groups;
    let opg = c.c_out / c.groups;
    FeatureMap::from_fn(Shape3::new(c.c_out, oh, ow), |o, y, xx| {
        let g = o / opg;
        let mut acc = c.bias.as_ref().map_or(0.0, |b| b[o]);
        for ci in 0..ipg {
            for ky in 0..c.k {
                for kx in 0..c.k {
                    let iy = (y * c.stride + ky) as isize - c.pad as isize;
                    let ix = (xx * c.stride + kx) as isize - c.pad as isize;
                    if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                        continue;
                    }
                    acc += w[((o * ipg + ci) * c.k + ky) * c.k + kx] * x.at(g * ipg + ci, iy as usize, ix as usize);
                }
            }
        }
        acc
    })
}

fn ac7_conv_oracle() -> Outcome {
    let mut r = rng(7007);
    let (mut grouped, mut strided) = (0, 0);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let groups = [1usize, 1, 2, 3, 4][r.random_range(0..5)];
        let c_in = groups * r.random_range(1..=4usize);
        let c_out = groups * r.random_range(1..=4usize);
        let k = [1usize, 2, 3, 5][r.random_range(0..4)];
        let stride = r.random_range(1..=3usize);
        let pad = r.random_range(0..=k / 2 + 1);
        let h = r.random_range(k.max(1)..=9);
        let w = r.random_range(k.max(1)..=9);
        let conv = ConvWeights::random(c_in, c_out, k, groups, stride, pad, true, &mut r).map_err(err)?;
        let x = FeatureMap::standard_normal(Shape3::new(c_in, h, w), &mut r);
        let got = conv_forward(&conv, &x).map_err(err)?;
        let want = direct_conv(&conv, &x);
        ensure(got.shape() == want.shape(), || format!("case {case}: shape {} vs {}", got.shape(), want.shape()))?;
        let d = got.max_abs_diff(&want);
        worst = worst.max(d);
        ensure(d <= 1e-10, || format!("case {case}: max diff {d:e}"))?;
        grouped += usize::from(groups > 1);
        strided += usize::from(stride > 1);
    }
    ensure(grouped > 0 && strided > 0, || "no grouped or strided case drawn".into())?;
    Ok(format!("100 layers ({grouped} grouped, {strided} strided), worst {worst:.1e}"))
}

// ------------------------------------------------------------------ AC8

fn ac8_degeneracy() -> Outcome {
    let mut r = rng(8008);
    for case in 0..20 {
        let c_in = r.random_range(2..=24usize);
        let c_out = c_in + r.random_range(0..=24usize);
        let k = [3usize, 5][r.random_range(0..2)];
        let ds: Vec<usize> = divisors(c_in).into_iter().filter(|d| *d < c_in).collect();
        let n = ds[r.random_range(0..ds.len())];
        let w = ConvWeights::random(c_in, c_out, k, 1, 1, k / 2, false, &mut r).map_err(err)?;
        let ranks = equal_flops_ranks(c_in, c_out, k, n).map_err(err)?;
        let c_d = ranks.rank_svd;
        let svd = energy_curve(&svd_strategy_matrix(&w.weight_matrix().map_err(err)?, c_d).map_err(err)?, EnergyMode::Squared)
            .map_err(err)?;
        // Energy after the first C_d values (position C_d - 1) is complete,
        // and not before.
        ensure(svd.cumulative_energy[c_d - 1] >= 1.0 - 1e-12, || format!("case {case}: svd curve short at C_d = {c_d}"))?;
        if c_d >= 2 {
            ensure(svd.cumulative_energy[c_d - 2] < 1.0 - 1e-9, || format!("case {case}: svd curve saturates early"))?;
        }
        let dec = decompose_layer(&w, n, DecomposeOptions::default()).map_err(err)?;
        let group = decomposition_energy_curve(&dec, EnergyMode::Squared).map_err(err)?;
        let kept = group.nonzero_count(1e-8);
        ensure(kept == c_in.min(c_out), || format!("case {case}: group keeps {kept}, want {}", c_in.min(c_out)))?;
        ensure(kept > c_d, || format!("case {case}: group {kept} not above C_d {c_d}"))?;
    }
    Ok("20 layers: svd saturates at C_d, group keeps min(c_in, c_out)".into())
}

// ------------------------------------------------------------------ AC9

fn ac9_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let run = |dir: &str| {
        let mut cfg = CompressConfig::new(
            fixture("toy3.json"),
            PlanSource::Request(PlanRequest {
                skip_stem: false,
                ..PlanRequest::new(Degree::Half, 1)
            }),
            tmp.path().join(dir),
        );
        cfg.calibration = CalibrationSource::Synthetic { samples: 200, seed: 9 };
        run_compress(&cfg).map_err(err)?;
        let dir = tmp.path().join(dir);
        let read = |name: &str| std::fs::read(dir.join(name)).map_err(err);
        Ok::<_, String>((read(MODEL_FILE)?, read("model.bin")?, read("report.json")?))
    };
    let a = run("a")?;
    let b = run("b")?;
    ensure(a.0 == b.0, || "model.json differs".into())?;
    ensure(a.1 == b.1, || "model.bin differs".into())?;
    ensure(a.2 == b.2, || "report.json differs".into())?;
    Ok(format!("model.json and {} byte weight blob identical", a.1.len()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("AC1", "FLOPs of ResNet-34 and plans A-D", ac1_flops),
        ("AC2", "block truncation error matches SVD oracle", ac2_eckart_young),
        ("AC3", "n = c_in is lossless", ac3_lossless),
        ("AC4", "FLOPs ratio n/c_out + 1/k^2", ac4_complexity),
        ("AC5", "reconstruction never increases residual", ac5_reconstruction),
        ("AC6", "rank comparison and assembled rank", ac6_ranks),
        ("AC7", "im2col convolution matches direct loops", ac7_conv_oracle),
        ("AC8", "energy curves at equal FLOPs", ac8_degeneracy),
        ("AC9", "compress is deterministic", ac9_determinism),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("[PASS] {id} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {id} {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
