mod common;

use common::{oracle_singular_values, rng};
use fgroup_core::decompose::{decompose_layer, decompose_network, partition_blocks, DecomposeOptions};
use fgroup_core::model::flops::{divisors, flops_of_layer};
use fgroup_core::model::{forward, zoo, ConvWeights};
use fgroup_core::{FeatureMap, Shape3};
use proptest::prelude::*;
use rand::Rng;

const FORCE: DecomposeOptions = DecomposeOptions { force_pointwise: true };

fn layer_strategy() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
    (1usize..=16, 1usize..=32, prop::sample::select(vec![1usize, 3, 5]), any::<prop::sample::Index>(), 0u64..1_000_000)
        .prop_map(|(c_in, c_out, k, idx, seed)| {
            let ds = divisors(c_in);
            (c_in, c_out, k, ds[idx.index(ds.len())], seed)
        })
}

fn conv(c_in: usize, c_out: usize, k: usize, seed: u64) -> ConvWeights {
    ConvWeights::random(c_in, c_out, k, 1, 1, k / 2, true, &mut rng(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn block_errors_match_oracle_tails((c_in, c_out, k, n, seed) in layer_strategy()) {
        let w = conv(c_in, c_out, k, seed);
        let dec = decompose_layer(&w, n, FORCE).unwrap();
        for (b, err) in partition_blocks(&w, n).unwrap().iter().zip(&dec.block_errors) {
            let s = oracle_singular_values(b);
            let tail: f64 = s.iter().skip(n).map(|x| x * x).sum::<f64>().sqrt();
            let direct_scale = b.frobenius_norm().max(1e-300);
            prop_assert!((err - tail).abs() <= 1e-9 * tail.max(1e-3 * direct_scale));
        }
        let measured = dec.approximation().unwrap().sub(&w.weight_matrix().unwrap()).unwrap().frobenius_norm();
        prop_assert!((measured - dec.truncation_error).abs() <= 1e-9 * w.weight_matrix().unwrap().frobenius_norm());
    }

    #[test]
    fn d_is_block_diagonal((c_in, c_out, k, n, seed) in layer_strategy()) {
        let w = conv(c_in, c_out, k, seed);
        let dec = decompose_layer(&w, n, FORCE).unwrap();
        let d = dec.d_matrix().unwrap();
        let rows = n * k * k;
        prop_assert_eq!(d.shape(), (c_in * k * k, c_in));
        for r in 0..d.rows() {
            for c in 0..d.cols() {
                if r / rows != c / n {
                    prop_assert_eq!(d[(r, c)], 0.0);
                }
            }
        }
    }

    #[test]
    fn error_shrinks_as_n_grows(c_in in prop::sample::select(vec![4usize, 6, 8, 12, 16]), c_out in 1usize..=24, seed in 0u64..100_000) {
        let w = conv(c_in, c_out, 3, seed);
        let mut prev = f64::INFINITY;
        for n in divisors(c_in) {
            let e = decompose_layer(&w, n, FORCE).unwrap().truncation_error;
            prop_assert!(e <= prev * (1.0 + 1e-12) + 1e-12);
            prev = e;
        }
        if c_out <= c_in {
            prop_assert!(prev <= 1e-10 * w.weight_matrix().unwrap().frobenius_norm());
        }
    }

    #[test]
    fn flops_ratio_identity((c_in, c_out, k, n, seed) in layer_strategy(), h in 1usize..12, w in 1usize..12) {
        let layer = conv(c_in, c_out, k, seed);
        let dec = decompose_layer(&layer, n, FORCE).unwrap();
        let (fd, fp) = dec.flops(h, w);
        let f0 = flops_of_layer(&layer, h, w);
        // (fd + fp) / f0 == (n k² + c_out) / (c_out k²), cross-multiplied.
        let kk = (k * k) as u128;
        prop_assert_eq!((fd + fp) as u128 * c_out as u128 * kk, f0 as u128 * (n as u128 * kk + c_out as u128));
    }
}

#[test]
fn lossless_four_layer_toy() {
    // c_out <= c_in in every layer, so one block at n = c_in keeps the
    // full spectrum.
    let net = zoo::toy_cnn(Shape3::new(4, 8, 8), &[(4, 3, 1), (4, 3, 2), (4, 3, 1), (3, 3, 1)], 21).unwrap();
    let plan: Vec<(String, usize)> = (1..=4).map(|i| (format!("conv{i}"), 4)).collect();
    let out = decompose_network(&net, &plan, DecomposeOptions::default()).unwrap();
    let mut r = rng(22);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = FeatureMap::standard_normal(net.input_shape(), &mut r);
        let a = forward(&net, &x).unwrap();
        let b = forward(&out.net, &x).unwrap();
        worst = worst.max(b.relative_error(&a));
    }
    assert!(worst <= 1e-8, "{worst}");
}

#[test]
fn decomposition_is_deterministic() {
    let mut r = rng(5);
    let c_in = 8 * r.random_range(1..=2);
    let w = conv(c_in, 24, 3, 6);
    let a = decompose_layer(&w, 2, DecomposeOptions::default()).unwrap();
    let b = decompose_layer(&w, 2, DecomposeOptions::default()).unwrap();
    assert_eq!(a, b);
}
