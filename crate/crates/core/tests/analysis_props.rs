use gdneck_core::analysis::{
    analyze_neck, bench_latency, count_flops, count_params, emit_ablation_table, pyramid_dims,
    BenchSettings,
};
use gdneck_core::autodiff::{Exec, Graph};
use gdneck_core::layers::{ConvBn, Module};
use gdneck_core::neck::{GdNeck, NeckConfig, Toggles};
use gdneck_core::params::ParamSpec;
use gdneck_core::repconv::RepConv;
use gdneck_core::{ConvSpec, Result};
use proptest::prelude::*;

#[derive(Clone)]
struct Seq(RepConv, Vec<ConvBn>);

impl Graph for Seq {
    fn forward<E: Exec>(&self, ex: &mut E, inputs: &[E::Value]) -> Result<Vec<E::Value>> {
        let mut x = self.0.forward(ex, &inputs[0])?;
        for layer in &self.1 {
            x = layer.forward(ex, &x)?;
        }
        Ok(vec![x])
    }
}

impl Module for Seq {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.0.param_specs(out);
        self.1.iter().for_each(|l| l.param_specs(out));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flops_add_over_composition(cin in 1..=8usize, mid in 1..=8usize, cout in 1..=8usize, h in 1..=12usize, w in 1..=12usize) {
        let first = RepConv::new("a", cin, mid);
        let second = ConvBn::relu("b", ConvSpec::same(mid, cout, 3));
        let seq = Seq(first.clone(), vec![second.clone()]);
        let specs = seq.specs().unwrap();
        let whole = count_flops(&seq, &[[1, cin, h, w]], &specs).unwrap();
        let a = count_flops(&first, &[[1, cin, h, w]], &specs).unwrap().total;
        let b = count_flops(&second, &[[1, mid, h, w]], &specs).unwrap().total;
        prop_assert_eq!(whole.total, a + b);
        prop_assert_eq!(whole.by_scope.values().sum::<u64>(), whole.total);
    }

    #[test]
    fn params_depend_on_shapes_only(seed_a in any::<u64>(), seed_b in any::<u64>(), cin in 1..=8usize, cout in 1..=8usize) {
        let unit = RepConv::new("r", cin, cout);
        let specs = unit.specs().unwrap();
        let a = specs.init(seed_a);
        let mut b = specs.init(seed_b);
        b.zero_prefix("");
        prop_assert_eq!(count_params(&a, ""), count_params(&b, ""));
        prop_assert_eq!(count_params(&a, ""), specs.count(""));
        prop_assert_eq!(count_params(&a, "r.dense."), specs.count("r.dense."));
    }
}

#[test]
fn closed_form_param_count_and_empty_store() {
    let conv = gdneck_core::layers::Conv::new("c", ConvSpec::same(8, 16, 3).with_bias(true));
    let store = conv.specs().unwrap().init(0);
    assert_eq!(count_params(&store, ""), 8 * 16 * 9 + 16);
    assert_eq!(count_params(&gdneck_core::ParamStore::new(), ""), 0);
}

#[test]
fn ablation_rows_match_direct_counters() {
    let base = NeckConfig::micro();
    let table = emit_ablation_table(&base, &Toggles::TABLE, 16, None).unwrap();
    assert_eq!(table.rows.len(), 5);
    for (row, t) in table.rows.iter().zip(Toggles::TABLE) {
        let cfg = base.clone().with_toggles(t);
        let neck = GdNeck::new("neck", &cfg).unwrap();
        let specs = neck.specs().unwrap();
        assert_eq!(row.name, t.label());
        assert_eq!(row.params, count_params(&specs.init(0), ""));
        assert_eq!(
            row.flops,
            count_flops(&neck, &pyramid_dims(&cfg, 1, 16).unwrap(), &specs)
                .unwrap()
                .total
        );
    }
    let names: Vec<_> = table.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["Low", "High", "LAF", "Low+High", "Low+High+LAF"]);
    assert_eq!(table.json_lines().lines().count(), 5);
    assert_eq!(table.render_text().lines().count(), 7);
}

#[test]
fn single_toggle_gives_one_row_and_empty_list_errors() {
    let table = emit_ablation_table(&NeckConfig::micro(), &[Toggles::FULL], 16, None).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert!(emit_ablation_table(&NeckConfig::micro(), &[], 16, None).is_err());
}

#[test]
fn benchmark_reports_ordered_quantiles() {
    let unit = ConvBn::linear("c", ConvSpec::new(2, 2, 1));
    let store = unit.specs().unwrap().init(0);
    let stats = bench_latency(&unit, &[[1, 2, 4, 4]], &store, 30, 5, 1).unwrap();
    assert_eq!(stats.samples_us.len(), 30);
    assert!(stats.p50_us <= stats.p95_us);
    assert!(bench_latency(&unit, &[[1, 2, 4, 4]], &store, 29, 5, 1).is_err());
    assert!(bench_latency(&unit, &[[1, 2, 4, 4]], &store, 30, 4, 1).is_err());
}

#[test]
fn latency_does_not_drop_when_modules_are_added() {
    let x = [1, 16, 32, 32];
    let one = Seq(RepConv::new("a", 16, 16), vec![]);
    let more = Seq(
        RepConv::new("a", 16, 16),
        (0..3)
            .map(|k| ConvBn::relu(&format!("b{k}"), ConvSpec::same(16, 16, 3)))
            .collect(),
    );
    let store = more.specs().unwrap().init(0);
    let small = bench_latency(&one, &[x], &store, 30, 5, 0).unwrap().p50_us;
    let large = bench_latency(&more, &[x], &store, 30, 5, 0).unwrap().p50_us;
    assert!(large >= 0.9 * small, "{large} vs {small}");
}

#[test]
fn analyzed_row_carries_latency_when_benched() {
    let row = analyze_neck(
        &NeckConfig::micro(),
        8,
        Some(BenchSettings {
            iterations: 30,
            warmup: 5,
            seed: 0,
        }),
    )
    .unwrap();
    assert!(row.lat_p50_us.unwrap() <= row.lat_p95_us.unwrap());
}
