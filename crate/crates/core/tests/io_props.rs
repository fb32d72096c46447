use gdneck_core::config::{ConfigDocument, MergeName};
use gdneck_core::weights::{load_weights, save_weights};
use gdneck_core::{ParamStore, Tensor, WeightFormatError};
use proptest::prelude::*;

fn store_strategy() -> impl Strategy<Value = ParamStore> {
    let dims =
        (1..=3usize, 1..=3usize, 1..=4usize, 1..=5usize).prop_map(|(a, b, c, d)| [a, b, c, d]);
    let tensor = dims.prop_flat_map(|d| {
        let n = d.iter().product::<usize>();
        // raw bit patterns, NaN payloads and subnormals included
        proptest::collection::vec(any::<u32>(), n).prop_map(move |bits| {
            Tensor::new(d, bits.into_iter().map(f32::from_bits).collect()).unwrap()
        })
    });
    proptest::collection::btree_map("[a-z][a-z0-9_.]{0,12}", tensor, 0..6)
        .prop_map(|m| m.into_iter().collect())
}

fn bitwise_equal(a: &ParamStore, b: &ParamStore) -> bool {
    a.len() == b.len()
        && a.iter().all(|(k, t)| {
            b.get(k)
                .is_some_and(|u| t.dims() == u.dims() && t.bit_eq(u))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn weight_roundtrip_is_bitwise(store in store_strategy()) {
        let bytes = save_weights(&store);
        let back = load_weights(&bytes).unwrap();
        prop_assert!(bitwise_equal(&store, &back));
        prop_assert_eq!(save_weights(&back), bytes);
    }

    #[test]
    fn truncation_anywhere_is_an_error(store in store_strategy(), cut in any::<prop::sample::Index>()) {
        let bytes = save_weights(&store);
        let at = cut.index(bytes.len());
        let err = load_weights(&bytes[..at]).unwrap_err();
        let is_expected = matches!(err, WeightFormatError::Truncated { .. } | WeightFormatError::BadMagic { .. });
        prop_assert!(is_expected, "{:?}", err);
    }

    #[test]
    fn config_roundtrip_is_identity(
        scale in prop::sample::select(vec!["N", "S", "M", "L", "micro"]),
        laf in any::<Option<bool>>(),
        merge in prop::option::of(prop::sample::select(vec![MergeName::Concat, MergeName::Add])),
        depth in prop::option::of(1..=4usize),
        splits in prop::option::of((1..=64usize, 1..=64usize)),
        iterations in 30..1000usize,
        lr in 0.0f32..1.0,
        seed in 0..=i64::MAX as u64,
        labels in prop::sample::subsequence(vec!["Low", "High", "LAF", "Low+High", "Low+High+LAF"], 1..=5),
    ) {
        let mut doc = ConfigDocument::default();
        doc.model.scale = scale.to_string();
        doc.model.enable_laf = laf;
        doc.model.laf_merge = merge;
        doc.model.repblock_depth = depth;
        doc.model.low_splits = splits.map(|(a, b)| [a, b]);
        doc.bench.iterations = iterations;
        doc.bench.ablations = labels.iter().map(|s| s.to_string()).collect();
        doc.train.lr = lr;
        doc.train.seed = seed;
        let text = doc.to_toml();
        let back = ConfigDocument::parse(&text).unwrap();
        prop_assert_eq!(&back, &doc);
        prop_assert_eq!(back.to_toml(), text);
    }
}

#[test]
fn canonical_bytes_are_stable_across_insertion_order() {
    let t = |v: f32| Tensor::full([1, 1, 2, 3], v);
    let mut a = ParamStore::new();
    a.insert("z", t(1.0));
    a.insert("a", t(2.0));
    let mut b = ParamStore::new();
    b.insert("a", t(2.0));
    b.insert("z", t(1.0));
    assert_eq!(save_weights(&a), save_weights(&b));
    assert_eq!(save_weights(&a), save_weights(&a.clone()));
}

#[test]
fn config_errors_name_key_and_line() {
    for (text, key, line) in [
        (
            "[train]\nsteps = 3\nlearning_rate = 1\n",
            "learning_rate",
            3,
        ),
        ("[model]\nscale = \"S\"\nheads = \"four\"\n", "four", 3),
        ("\n[nope]\n", "nope", 2),
    ] {
        let err = ConfigDocument::parse(text).unwrap_err().to_string();
        assert!(
            err.contains(key) && err.contains(&format!("line {line}")),
            "{err}"
        );
    }
}
