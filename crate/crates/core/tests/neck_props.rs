mod common;

use common::seeded;
use gdneck_core::analysis::{
    count_flops, path_sensitivity, pyramid_dims, random_inputs, FlopCounter,
};
use gdneck_core::autodiff::{forward_eager, forward_traced, Graph};
use gdneck_core::layers::Module;
use gdneck_core::neck::{
    Detector, GdNeck, NeckConfig, Pafpn, Scale, Toggles, ToyBackbone, ToyHead,
};
use gdneck_core::{tensor, Tensor};
use proptest::prelude::*;

fn expected_dims(cfg: &NeckConfig, dims: &[gdneck_core::Dims]) -> Vec<gdneck_core::Dims> {
    dims[1..]
        .to_vec()
        .into_iter()
        .zip(cfg.output_channels())
        .map(|(d, c)| [d[0], c, d[2], d[3]])
        .collect()
}

#[test]
fn every_preset_and_toggle_keeps_level_shapes() {
    let mut toggles = Toggles::TABLE.to_vec();
    toggles.push(Toggles::NONE);
    for scale in Scale::ALL {
        for &t in &toggles {
            let cfg = NeckConfig::preset(scale).with_toggles(t);
            let neck = GdNeck::new("neck", &cfg).unwrap();
            let specs = neck.specs().unwrap();
            let dims = pyramid_dims(&cfg, 2, 32).unwrap();
            let out = neck.forward(&mut FlopCounter::new(&specs), &dims).unwrap();
            assert_eq!(out, expected_dims(&cfg, &dims), "{scale} {t}");
        }
    }
}

#[test]
fn small_presets_run_eagerly_with_level_shapes() {
    for scale in [Scale::N, Scale::S] {
        for t in Toggles::TABLE {
            let cfg = NeckConfig::preset(scale).with_toggles(t);
            let neck = GdNeck::new("neck", &cfg).unwrap();
            let store = neck.specs().unwrap().init(1);
            let inputs = random_inputs(&pyramid_dims(&cfg, 1, 16).unwrap(), 2);
            let got: Vec<_> = forward_eager(&neck, &inputs, &store)
                .unwrap()
                .iter()
                .map(Tensor::dims)
                .collect();
            let dims: Vec<_> = inputs.iter().map(Tensor::dims).collect();
            assert_eq!(got, expected_dims(&cfg, &dims));
        }
    }
}

#[test]
fn s_scale_example_shapes() {
    let cfg = NeckConfig::preset(Scale::S);
    assert_eq!(cfg.channels, [64, 128, 256, 512]);
    let neck = GdNeck::new("neck", &cfg).unwrap();
    let specs = neck.specs().unwrap();
    let dims = pyramid_dims(&cfg, 1, 80).unwrap();
    assert_eq!(
        dims,
        vec![
            [1, 64, 80, 80],
            [1, 128, 40, 40],
            [1, 256, 20, 20],
            [1, 512, 10, 10]
        ]
    );
    let out = neck.forward(&mut FlopCounter::new(&specs), &dims).unwrap();
    assert_eq!(
        out,
        vec![[1, 128, 40, 40], [1, 256, 20, 20], [1, 512, 10, 10]]
    );
    let pafpn = Pafpn::from_config("pafpn", &cfg).unwrap();
    let pspecs = pafpn.specs().unwrap();
    assert_eq!(
        pafpn
            .forward(&mut FlopCounter::new(&pspecs), &dims)
            .unwrap(),
        out
    );
}

#[test]
fn params_order_follows_components() {
    for scale in Scale::ALL {
        let count = |t: Toggles| {
            let cfg = NeckConfig::preset(scale).with_toggles(t);
            GdNeck::new("neck", &cfg)
                .unwrap()
                .specs()
                .unwrap()
                .count("")
        };
        let low = count(Toggles::TABLE[0]);
        let low_high = count(Toggles::TABLE[3]);
        let full = count(Toggles::FULL);
        assert!(
            full > low_high && low_high > low,
            "{scale}: {full} {low_high} {low}"
        );
    }
}

#[test]
fn laf_adds_flops() {
    for scale in Scale::ALL {
        let flops = |t: Toggles| {
            let cfg = NeckConfig::preset(scale).with_toggles(t);
            let neck = GdNeck::new("neck", &cfg).unwrap();
            count_flops(
                &neck,
                &pyramid_dims(&cfg, 1, 32).unwrap(),
                &neck.specs().unwrap(),
            )
            .unwrap()
            .total
        };
        assert!(flops(Toggles::FULL) > flops(Toggles::TABLE[3]), "{scale}");
    }
}

#[test]
fn pafpn_path_is_severed_by_the_middle_merge_but_gd_path_survives() {
    let cfg = NeckConfig::micro();
    let inputs = random_inputs(&pyramid_dims(&cfg, 1, 16).unwrap(), 3);

    let pafpn = Pafpn::from_config("pafpn", &cfg).unwrap();
    let mut store = pafpn.specs().unwrap().init(4);
    let before = path_sensitivity(&pafpn, &store, &inputs, 3, 0, 9).unwrap();
    assert!(before > 1e-3, "unablated pafpn sensitivity {before}");
    assert!(store.zero_prefix(&pafpn.td4_prefix()) > 0);
    let after = path_sensitivity(&pafpn, &store, &inputs, 3, 0, 9).unwrap();
    assert!(after <= 1e-6, "ablated pafpn sensitivity {after}");

    let neck = GdNeck::new("neck", &cfg).unwrap();
    let mut store = neck.specs().unwrap().init(4);
    let before = path_sensitivity(&neck, &store, &inputs, 3, 0, 9).unwrap();
    assert!(store.zero_prefix("neck.p4.") > 0);
    let after = path_sensitivity(&neck, &store, &inputs, 3, 0, 9).unwrap();
    assert!(
        before > 0.0 && after >= 1e-3 * before,
        "gd {before} -> {after}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn neck_is_deterministic(seed in any::<u64>(), low in any::<bool>(), high in any::<bool>(), laf in any::<bool>()) {
        let cfg = NeckConfig::micro().with_toggles(Toggles { low_gd: low, high_gd: high, laf });
        let neck = GdNeck::new("neck", &cfg).unwrap();
        let inputs = random_inputs(&pyramid_dims(&cfg, 1, 16).unwrap(), seed);
        let a = forward_eager(&neck, &inputs, &neck.specs().unwrap().init(seed)).unwrap();
        let b = forward_eager(&neck, &inputs, &neck.specs().unwrap().init(seed)).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
    }
}

#[test]
fn backbone_strides_and_traced_agreement() {
    let bb = ToyBackbone::new("bb", 3, [4, 6, 8, 10]);
    let store = bb.specs().unwrap().init(5);
    let image = seeded(1, [1, 3, 64, 64], 0.0, 1.0);
    let out = forward_eager(&bb, &[image.clone()], &store).unwrap();
    let dims: Vec<_> = out.iter().map(Tensor::dims).collect();
    assert_eq!(
        dims,
        vec![[1, 4, 16, 16], [1, 6, 8, 8], [1, 8, 4, 4], [1, 10, 2, 2]]
    );
    let traced = forward_traced(&bb, &[image], &store)
        .unwrap()
        .output_tensors();
    assert!(out.iter().zip(&traced).all(|(a, b)| a.bit_eq(b)));
    assert!(forward_eager(&bb, &[seeded(1, [1, 3, 48, 40], 0.0, 1.0)], &store).is_err());
}

#[test]
fn head_matches_manual_convolutions() {
    let head = ToyHead::new("head", &[3, 5, 7], 2);
    let store = head.specs().unwrap().init(6);
    let levels: Vec<Tensor> = [3, 5, 7]
        .iter()
        .enumerate()
        .map(|(k, &c)| seeded(k as u64, [1, c, 4 >> k, 4 >> k], -1.0, 1.0))
        .collect();
    let out = forward_eager(&head, &levels, &store).unwrap();
    assert_eq!(out.len(), 6);
    for (k, x) in levels.iter().enumerate() {
        for (j, conv) in [head.cls(k), head.reg(k)].into_iter().enumerate() {
            let manual = tensor::conv2d(
                x,
                store.get(&conv.weight_name()).unwrap(),
                Some(store.get(&conv.bias_name()).unwrap()),
                &conv.spec,
            )
            .unwrap();
            assert!(out[2 * k + j].bit_eq(&manual));
        }
        assert_eq!(out[2 * k].c(), 2);
        assert_eq!(out[2 * k + 1].c(), 4);
    }
}

#[test]
fn detector_end_to_end_is_deterministic() {
    let cfg = NeckConfig::micro();
    let det = Detector::new(&cfg, 1).unwrap();
    let image = seeded(3, [1, 3, 32, 32], 0.0, 1.0);
    let a = forward_eager(&det, &[image.clone()], &det.specs().unwrap().init(8)).unwrap();
    let b = forward_eager(&det, &[image], &det.specs().unwrap().init(8)).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
}
