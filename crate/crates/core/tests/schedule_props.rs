mod common;

use fgroup_core::decompose::{decompose_network, DecomposeOptions};
use fgroup_core::model::flops::network_flops;
use fgroup_core::model::zoo::{self, Init};
use fgroup_core::schedule::{build_plan, predict_flops, preset, Degree, PlanRequest};
use fgroup_core::Shape3;
use proptest::prelude::*;

#[test]
fn resnet34_table() {
    let net = zoo::resnet34(Init::Shapes).unwrap();
    let base = network_flops(&net) as f64;
    assert!((base / 7.32e9 - 1.0).abs() <= 0.02);
    for (name, target) in [("resnet34-A", 3.98e9), ("resnet34-B", 2.58e9), ("resnet34-C", 1.44e9), ("resnet34-D", 1.11e9)] {
        let plan = build_plan(&net, &preset(name).unwrap().request).unwrap();
        let f = plan.predicted_flops as f64;
        assert!((f / target - 1.0).abs() <= 0.02, "{name}: {f:e}");
    }
}

#[test]
fn resnet34_c_stage_values() {
    let net = zoo::resnet34(Init::Shapes).unwrap();
    let plan = build_plan(&net, &preset("resnet34-C").unwrap().request).unwrap();
    let ns: Vec<usize> = plan.stages.iter().filter_map(|s| s.n).collect();
    assert_eq!(ns, [1, 4, 16, 64]);
}

#[test]
fn prediction_equals_measurement() {
    let net = zoo::toy_cnn(
        Shape3::new(8, 16, 16),
        &[(8, 3, 1), (16, 3, 2), (16, 3, 1), (32, 3, 2), (32, 1, 1), (32, 3, 1)],
        3,
    )
    .unwrap();
    for degree in [Degree::Constant, Degree::Half, Degree::Quarter] {
        for base in [1, 2, 4] {
            let mut req = PlanRequest::new(degree, base);
            req.skip_stem = false;
            let plan = build_plan(&net, &req).unwrap();
            let out = decompose_network(&net, &plan.assignments(), DecomposeOptions::default()).unwrap();
            assert_eq!(network_flops(&out.net), plan.predicted_flops, "{degree} {base}");
            assert_eq!(predict_flops(&net, &plan).unwrap(), plan.predicted_flops);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn quarter_steps_by_four(base in 1usize..64) {
        let net = zoo::resnet34(Init::Shapes).unwrap();
        let plan = build_plan(&net, &PlanRequest::new(Degree::Quarter, base)).unwrap();
        let ns: Vec<usize> = plan.stages.iter().filter_map(|s| s.n).collect();
        for w in ns.windows(2) {
            prop_assert_eq!(w[1], 4 * w[0]);
        }
        for a in &plan.layers {
            let c_in = net.layer(&a.layer).unwrap().as_conv().unwrap().c_in;
            prop_assert_eq!(c_in % a.n, 0);
            prop_assert!(a.n <= a.requested_n);
        }
    }

    #[test]
    fn degree_orders_flops(base in 1usize..32, vgg in any::<bool>()) {
        let net = if vgg { zoo::vgg16(Init::Shapes) } else { zoo::resnet34(Init::Shapes) }.unwrap();
        let f = |d| build_plan(&net, &PlanRequest::new(d, base)).unwrap().predicted_flops;
        let (c, h, q) = (f(Degree::Constant), f(Degree::Half), f(Degree::Quarter));
        prop_assert!(c <= h && h <= q);
    }
}
