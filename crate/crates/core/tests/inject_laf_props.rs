mod common;

use common::seeded;
use gdneck_core::analysis::{pyramid_dims, random_inputs};
use gdneck_core::autodiff::{forward_eager, Eager};
use gdneck_core::inject_laf::{Inject, InjectLaf, LafMerge};
use gdneck_core::layers::Module;
use gdneck_core::neck::{GdNeck, NeckConfig, Scale};
use gdneck_core::tensor;
use gdneck_core::Activation;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gate_stays_strictly_inside_unit_interval(
        side in 1..=4usize, target in 1..=9usize, spread in 1.0f32..1e3, seed in any::<u64>()
    ) {
        let inj = Inject::new("inj", 2, 3, 2, 1).unwrap();
        let store = inj.specs().unwrap().init(seed);
        let f_inj = seeded(seed ^ 1, [1, 3, side, side], -spread, spread);
        let mut ex = Eager::new(&store);
        let gate = inj.gate(&mut ex, &f_inj, (target, target)).unwrap();
        prop_assert!(gate.data().iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn output_size_follows_local_feature(
        lh in 1..=8usize, lw in 1..=8usize, ih in 1..=8usize, iw in 1..=8usize, seed in any::<u64>()
    ) {
        // both axes must scale the same way
        prop_assume!((ih <= lh && iw <= lw) || (ih >= lh && iw >= lw));
        let inj = Inject::new("inj", 3, 5, 4, 1).unwrap();
        let store = inj.specs().unwrap().init(seed);
        let local = seeded(seed ^ 1, [2, 3, lh, lw], -1.0, 1.0);
        let f_inj = seeded(seed ^ 2, [2, 5, ih, iw], -1.0, 1.0);
        let out = forward_eager(&inj, &[local, f_inj], &store).unwrap();
        prop_assert_eq!(out[0].dims(), [2, 4, lh, lw]);
    }
}

#[test]
fn quarter_size_injection_matches_hand_composition() {
    let inj = Inject::new("inj", 4, 6, 4, 2).unwrap();
    let store = inj.specs().unwrap().init(5);
    let local = seeded(1, [1, 4, 8, 8], -1.0, 1.0);
    let f_inj = seeded(2, [1, 6, 2, 2], -1.0, 1.0);
    let out = forward_eager(&inj, &[local.clone(), f_inj.clone()], &store)
        .unwrap()
        .remove(0);

    let conv = |name: &str, x: &tensor::Tensor, cin: usize, cout: usize| {
        let spec = gdneck_core::ConvSpec::new(cin, cout, 1).with_bias(true);
        let w = store.get(&format!("inj.{name}.weight")).unwrap();
        let b = store.get(&format!("inj.{name}.bias")).unwrap();
        tensor::conv2d(x, w, Some(b), &spec).unwrap()
    };
    let act = tensor::activation(&conv("act", &f_inj, 6, 4), Activation::Sigmoid);
    let act = tensor::bilinear_resize(&act, (8, 8)).unwrap();
    let embed = tensor::bilinear_resize(&conv("global_embed", &f_inj, 6, 4), (8, 8)).unwrap();
    let fused = tensor::add(
        &tensor::mul(&conv("local_embed", &local, 4, 4), &act).unwrap(),
        &embed,
    )
    .unwrap();
    let want = forward_eager(&inj.tail, &[fused], &store)
        .unwrap()
        .remove(0);
    assert!(out.bit_eq(&want));
}

#[test]
fn disabled_laf_is_plain_injection() {
    let inject = Inject::new("inj", 4, 6, 4, 1).unwrap();
    let both = InjectLaf {
        laf: None,
        inject: inject.clone(),
    };
    let store = both.specs().unwrap().init(8);
    let local = seeded(1, [1, 4, 4, 4], -1.0, 1.0);
    let f_inj = seeded(2, [1, 6, 2, 2], -1.0, 1.0);
    let mut ex = Eager::new(&store);
    let a = both.forward(&mut ex, &local, None, None, &f_inj).unwrap();
    let b = inject.forward(&mut ex, &local, &f_inj, (4, 4)).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn s_scale_concat_and_add_variants_build_and_run() {
    let mut params = Vec::new();
    for merge in [LafMerge::Concat, LafMerge::Add] {
        let cfg = NeckConfig {
            laf_merge: merge,
            ..NeckConfig::preset(Scale::S)
        };
        let neck = GdNeck::new("neck", &cfg).unwrap();
        let specs = neck.specs().unwrap();
        let store = specs.init(1);
        let inputs = random_inputs(&pyramid_dims(&cfg, 1, 16).unwrap(), 2);
        let out = forward_eager(&neck, &inputs, &store).unwrap();
        let c = cfg.output_channels();
        for (k, t) in out.iter().enumerate() {
            let [_, _, h, w] = inputs[k + 1].dims();
            assert_eq!(t.dims(), [1, c[k], h, w], "{merge:?} level {k}");
        }
        params.push(specs.count(""));
    }
    assert!(
        params[0] > params[1],
        "concat {} vs add {}",
        params[0],
        params[1]
    );
}

#[test]
fn closed_gate_with_zero_embed_feeds_the_tail_near_zero() {
    let inj = Inject::new("inj", 2, 3, 2, 1).unwrap();
    let mut store = inj.specs().unwrap().init(4);
    for name in [
        "inj.global_embed.weight",
        "inj.global_embed.bias",
        "inj.act.weight",
    ] {
        let d = store.get(name).unwrap().dims();
        store.insert(name, tensor::Tensor::zeros(d));
    }
    store.insert("inj.act.bias", tensor::Tensor::full([1, 1, 1, 2], -30.0));
    let local = seeded(1, [1, 2, 3, 3], -1.0, 1.0);
    let f_inj = seeded(2, [1, 3, 3, 3], -1.0, 1.0);
    let mut ex = Eager::new(&store);
    let fused = inj.att_fuse(&mut ex, &local, &f_inj, (3, 3)).unwrap();
    assert!(fused.data().iter().all(|v| v.abs() < 1e-12));
    let out = inj.forward(&mut ex, &local, &f_inj, (3, 3)).unwrap();
    let zero_in = forward_eager(&inj.tail, &[tensor::Tensor::zeros([1, 2, 3, 3])], &store).unwrap();
    assert!(out.max_abs_diff(&zero_in[0]) < 1e-6);
}
