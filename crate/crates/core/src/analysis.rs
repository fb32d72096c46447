//! Parameter counts, FLOP accounting and wall-clock latency.
//!
//! FLOPs are counted by running a graph on [`FlopCounter`], a backend whose
//! values are shapes only, so even the largest presets are counted without
//! allocating activations or weights. Multiply and add count separately.
//!
//! | op | FLOPs |
//! |----|-------|
//! | conv2d | `2 * out_elems * (in / groups) * kh * kw`, plus `out_elems` with bias |
//! | matmul | `2 * b * m * n * k` |
//! | batchnorm | 4 per element |
//! | bilinear resize | 8 per output element |
//! | average pool | 1 per input element in each window |
//! | activation, add, sub, mul, scale, abs | 1 per element |
//! | softmax | 5 per element (max, subtract, exp, sum, divide) |
//! | bce with logits | 6 per element |
//! | sum | 1 per input element |
//! | concat, split, reshape, transpose, identity resize | 0 |

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::{Eager, Exec, Graph};
use crate::error::{config_err, Error, Result};
use crate::layers::Module;
use crate::neck::{GdNeck, NeckConfig, Toggles};
use crate::params::{ParamShapes, ParamStore};
use crate::tensor::{adaptive_window, numel, Activation, ConvSpec, Dims, Tensor};

/// Number of floats in tensors whose name starts with `prefix`.
pub fn count_params(store: &ParamStore, prefix: &str) -> usize {
    store.count(prefix)
}

/// Shape-only backend that tallies FLOPs per innermost scope.
pub struct FlopCounter<'a> {
    shapes: &'a dyn ParamShapes,
    scopes: Vec<String>,
    total: u64,
    by_scope: BTreeMap<String, u64>,
}

impl<'a> FlopCounter<'a> {
    pub fn new(shapes: &'a dyn ParamShapes) -> Self {
        Self {
            shapes,
            scopes: Vec::new(),
            total: 0,
            by_scope: BTreeMap::new(),
        }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn report(self) -> FlopReport {
        FlopReport {
            total: self.total,
            by_scope: self.by_scope,
        }
    }

    fn add_flops(&mut self, n: u64) {
        if n == 0 {
            return;
        }
        self.total += n;
        let key = self.scopes.last().cloned().unwrap_or_default();
        *self.by_scope.entry(key).or_default() += n;
    }

    fn same(&mut self, a: &Dims, b: &Dims, what: &str, per_elem: u64) -> Result<Dims> {
        if a != b {
            return Err(config_err(format!("{what}: shape mismatch {a:?} vs {b:?}")));
        }
        self.add_flops(per_elem * numel(*a) as u64);
        Ok(*a)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FlopReport {
    pub total: u64,
    /// FLOPs per innermost scope name; `""` collects unscoped ops.
    pub by_scope: BTreeMap<String, u64>,
}

impl Exec for FlopCounter<'_> {
    type Value = Dims;

    fn dims(&self, v: &Dims) -> Dims {
        *v
    }

    fn constant(&mut self, t: Tensor) -> Dims {
        t.dims()
    }

    fn param(&mut self, name: &str) -> Result<Dims> {
        self.shapes
            .param_dims(name)
            .ok_or_else(|| config_err(format!("missing parameter {name:?}")))
    }

    fn conv2d(&mut self, x: &Dims, w: &Dims, b: Option<&Dims>, spec: &ConvSpec) -> Result<Dims> {
        spec.validate()?;
        let [n, c, h, wd] = *x;
        if c != spec.in_channels {
            return Err(config_err(format!(
                "conv2d: input has {c} channels, spec expects {}",
                spec.in_channels
            )));
        }
        if *w != spec.weight_dims() {
            return Err(config_err(format!(
                "conv2d: weight dims {w:?}, spec needs {:?}",
                spec.weight_dims()
            )));
        }
        if spec.bias != b.is_some() {
            return Err(config_err("conv2d: bias presence disagrees with spec"));
        }
        let (oh, ow) = spec.output_size(h, wd)?;
        let out = (n * spec.out_channels * oh * ow) as u64;
        let per = (spec.in_channels / spec.groups * spec.kernel.0 * spec.kernel.1) as u64;
        self.add_flops(2 * out * per + if spec.bias { out } else { 0 });
        Ok([n, spec.out_channels, oh, ow])
    }

    fn batchnorm(&mut self, x: &Dims, s: [&Dims; 4], _eps: f32) -> Result<Dims> {
        for d in s {
            if numel(*d) != x[1] {
                return Err(config_err(format!(
                    "batchnorm: stat length {} vs {} channels",
                    numel(*d),
                    x[1]
                )));
            }
        }
        self.add_flops(4 * numel(*x) as u64);
        Ok(*x)
    }

    fn activation(&mut self, x: &Dims, _kind: Activation) -> Result<Dims> {
        self.add_flops(numel(*x) as u64);
        Ok(*x)
    }

    fn avgpool_to(&mut self, x: &Dims, target: (usize, usize)) -> Result<Dims> {
        let [n, c, h, w] = *x;
        let (th, tw) = target;
        if th == 0 || tw == 0 || th > h || tw > w {
            return Err(config_err(format!(
                "avgpool_to: target {th}x{tw} invalid for input {h}x{w}"
            )));
        }
        if (th, tw) == (h, w) {
            return Ok(*x);
        }
        let rows: usize = (0..th)
            .map(|i| {
                let (a, b) = adaptive_window(i, h, th);
                b - a
            })
            .sum();
        let cols: usize = (0..tw)
            .map(|i| {
                let (a, b) = adaptive_window(i, w, tw);
                b - a
            })
            .sum();
        self.add_flops((n * c * rows * cols) as u64);
        Ok([n, c, th, tw])
    }

    fn bilinear_resize(&mut self, x: &Dims, target: (usize, usize)) -> Result<Dims> {
        let (th, tw) = target;
        if th == 0 || tw == 0 {
            return Err(config_err("bilinear_resize: target must be non-empty"));
        }
        let out = [x[0], x[1], th, tw];
        self.add_flops(8 * numel(out) as u64);
        Ok(out)
    }

    fn concat_channels(&mut self, xs: &[Dims]) -> Result<Dims> {
        let first = xs
            .first()
            .ok_or_else(|| config_err("concat_channels: no inputs"))?;
        let mut c = 0;
        for d in xs {
            if (d[0], d[2], d[3]) != (first[0], first[2], first[3]) {
                return Err(config_err(format!(
                    "concat_channels: {d:?} does not match {first:?}"
                )));
            }
            c += d[1];
        }
        Ok([first[0], c, first[2], first[3]])
    }

    fn split_channels(&mut self, x: &Dims, sizes: &[usize]) -> Result<Vec<Dims>> {
        let total: usize = sizes.iter().sum();
        if total != x[1] || sizes.contains(&0) {
            return Err(config_err(format!(
                "split_channels: sizes sum to {total}, input has {}",
                x[1]
            )));
        }
        Ok(sizes.iter().map(|&s| [x[0], s, x[2], x[3]]).collect())
    }

    fn matmul_batched(&mut self, a: &Dims, b: &Dims) -> Result<Dims> {
        if a[0] != b[0] || a[1] != b[1] || a[3] != b[2] {
            return Err(config_err(format!("matmul_batched: {a:?} x {b:?}")));
        }
        self.add_flops(2 * (a[0] * a[1] * a[2] * a[3] * b[3]) as u64);
        Ok([a[0], a[1], a[2], b[3]])
    }

    fn transpose_last2(&mut self, x: &Dims) -> Result<Dims> {
        Ok([x[0], x[1], x[3], x[2]])
    }

    fn softmax_lastdim(&mut self, x: &Dims) -> Result<Dims> {
        self.add_flops(5 * numel(*x) as u64);
        Ok(*x)
    }

    fn reshape(&mut self, x: &Dims, dims: Dims) -> Result<Dims> {
        if numel(*x) != numel(dims) {
            return Err(config_err(format!("reshape: {x:?} to {dims:?}")));
        }
        Ok(dims)
    }

    fn add(&mut self, a: &Dims, b: &Dims) -> Result<Dims> {
        self.same(a, b, "add", 1)
    }

    fn sub(&mut self, a: &Dims, b: &Dims) -> Result<Dims> {
        self.same(a, b, "sub", 1)
    }

    fn mul(&mut self, a: &Dims, b: &Dims) -> Result<Dims> {
        self.same(a, b, "mul", 1)
    }

    fn scale(&mut self, x: &Dims, _factor: f32) -> Result<Dims> {
        self.add_flops(numel(*x) as u64);
        Ok(*x)
    }

    fn abs(&mut self, x: &Dims) -> Result<Dims> {
        self.add_flops(numel(*x) as u64);
        Ok(*x)
    }

    fn bce_with_logits(&mut self, logits: &Dims, target: &Dims) -> Result<Dims> {
        self.same(logits, target, "bce_with_logits", 6)
    }

    fn sum_all(&mut self, x: &Dims) -> Result<Dims> {
        self.add_flops(numel(*x) as u64);
        Ok([1, 1, 1, 1])
    }

    fn enter_scope(&mut self, name: &str) {
        self.scopes.push(name.to_string());
    }

    fn exit_scope(&mut self) {
        self.scopes.pop();
    }
}

/// FLOPs of one forward of `graph` on inputs of the given shapes.
pub fn count_flops<G: Graph>(
    graph: &G,
    inputs: &[Dims],
    shapes: &dyn ParamShapes,
) -> Result<FlopReport> {
    let mut fc = FlopCounter::new(shapes);
    graph.forward(&mut fc, inputs)?;
    Ok(fc.report())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyStats {
    pub mean_us: f64,
    pub p50_us: f64,
    pub p95_us: f64,
    pub iterations: usize,
    pub warmup: usize,
    /// Post-warmup samples in run order.
    pub samples_us: Vec<f64>,
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

impl LatencyStats {
    pub fn from_samples(samples_us: Vec<f64>, warmup: usize) -> Result<Self> {
        if samples_us.is_empty() {
            return Err(config_err("latency stats need at least one sample"));
        }
        let mut sorted = samples_us.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            mean_us: samples_us.iter().sum::<f64>() / samples_us.len() as f64,
            p50_us: percentile(&sorted, 0.5),
            p95_us: percentile(&sorted, 0.95),
            iterations: samples_us.len(),
            warmup,
            samples_us,
        })
    }
}

/// Standard-normal input tensors drawn from `seed`.
pub fn random_inputs(dims: &[Dims], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dims.iter()
        .map(|&d| {
            let data = (0..numel(d))
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            Tensor::new(d, data).expect("valid dims")
        })
        .collect()
}

pub const MIN_ITERATIONS: usize = 30;
pub const MIN_WARMUP: usize = 5;

/// Times `iterations` eager forwards of `graph` after `warmup` untimed ones,
/// on inputs fixed up front.
pub fn bench_latency<G: Graph>(
    graph: &G,
    inputs: &[Dims],
    store: &ParamStore,
    iterations: usize,
    warmup: usize,
    seed: u64,
) -> Result<LatencyStats> {
    if iterations < MIN_ITERATIONS || warmup < MIN_WARMUP {
        return Err(config_err(format!(
            "bench needs iterations >= {MIN_ITERATIONS} and warmup >= {MIN_WARMUP} (got {iterations}, {warmup})"
        )));
    }
    let inputs = random_inputs(inputs, seed);
    let run = || -> Result<()> {
        let mut ex = Eager::new(store);
        let out = graph.forward(&mut ex, &inputs)?;
        if let Some(k) = out.iter().position(|t| !t.is_finite()) {
            return Err(Error::Numerical(format!(
                "benchmark output {k} is not finite"
            )));
        }
        std::hint::black_box(&out);
        Ok(())
    };
    for _ in 0..warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t0 = Instant::now();
        run()?;
        samples.push(t0.elapsed().as_secs_f64() * 1e6);
    }
    LatencyStats::from_samples(samples, warmup)
}

/// Shapes of the four backbone levels for `cfg` with B2 at `b2 x b2`.
pub fn pyramid_dims(cfg: &NeckConfig, batch: usize, b2: usize) -> Result<Vec<Dims>> {
    if b2 == 0 || b2 % 8 != 0 {
        return Err(config_err(format!(
            "B2 resolution {b2} must be a positive multiple of 8"
        )));
    }
    Ok((0..4)
        .map(|k| [batch, cfg.channels[k], b2 >> k, b2 >> k])
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchSettings {
    pub iterations: usize,
    pub warmup: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub params: usize,
    pub flops: u64,
    pub lat_mean_us: Option<f64>,
    pub lat_p50_us: Option<f64>,
    pub lat_p95_us: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    /// Resolution of B2 the FLOPs refer to.
    pub b2_size: usize,
    pub threads: usize,
    pub rows: Vec<AblationRow>,
}

/// Analysis entry for one neck variant.
pub fn analyze_neck(
    cfg: &NeckConfig,
    b2: usize,
    bench: Option<BenchSettings>,
) -> Result<AblationRow> {
    let neck = GdNeck::new("neck", cfg)?;
    let specs = neck.specs()?;
    let dims = pyramid_dims(cfg, 1, b2)?;
    let flops = count_flops(&neck, &dims, &specs)?.total;
    let latency = match bench {
        Some(b) => {
            let store = specs.init(b.seed);
            Some(bench_latency(
                &neck,
                &dims,
                &store,
                b.iterations,
                b.warmup,
                b.seed,
            )?)
        }
        None => None,
    };
    Ok(AblationRow {
        name: cfg.toggles().label(),
        params: specs.count(""),
        flops,
        lat_mean_us: latency.as_ref().map(|l| l.mean_us),
        lat_p50_us: latency.as_ref().map(|l| l.p50_us),
        lat_p95_us: latency.as_ref().map(|l| l.p95_us),
    })
}

/// One row per toggle combination, each built from `base`.
pub fn emit_ablation_table(
    base: &NeckConfig,
    toggles: &[Toggles],
    b2: usize,
    bench: Option<BenchSettings>,
) -> Result<AblationTable> {
    if toggles.is_empty() {
        return Err(config_err("ablation list is empty"));
    }
    let rows = toggles
        .iter()
        .map(|&t| analyze_neck(&base.clone().with_toggles(t), b2, bench))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        b2_size: b2,
        threads: rayon::current_num_threads(),
        rows,
    })
}

/// Largest change of `outputs[output]` per unit of a fixed random
/// perturbation added to `inputs[input]`, measured as max-abs ratio.
pub fn path_sensitivity<G: Graph>(
    graph: &G,
    store: &ParamStore,
    inputs: &[Tensor],
    input: usize,
    output: usize,
    probe_seed: u64,
) -> Result<f64> {
    let base = crate::autodiff::forward_eager(graph, inputs, store)?;
    let delta = crate::tensor::scale(&random_inputs(&[inputs[input].dims()], probe_seed)[0], 1e-2);
    let mut moved = inputs.to_vec();
    moved[input] = crate::tensor::add(&moved[input], &delta)?;
    let after = crate::autodiff::forward_eager(graph, &moved, store)?;
    let (a, b) = (&base[output], &after[output]);
    let change = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max);
    let size = delta
        .data()
        .iter()
        .map(|v| v.abs() as f64)
        .fold(0.0, f64::max);
    Ok(change / size)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"))
}

impl AblationTable {
    pub fn render_text(&self) -> String {
        let header = [
            "variant",
            "params",
            "flops",
            "lat_mean_us",
            "lat_p50_us",
            "lat_p95_us",
        ];
        let cells: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.name.clone(),
                    r.params.to_string(),
                    r.flops.to_string(),
                    fmt_opt(r.lat_mean_us),
                    fmt_opt(r.lat_p50_us),
                    fmt_opt(r.lat_p95_us),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = format!("# B2 {0}x{0}, threads {1}\n", self.b2_size, self.threads);
        let line = |cols: Vec<&str>| {
            cols.iter()
                .enumerate()
                .map(|(k, c)| {
                    if k == 0 {
                        format!("{c:<w$}", w = widths[k])
                    } else {
                        format!("{c:>w$}", w = widths[k])
                    }
                })
                .collect::<Vec<_>>()
                .join("  ")
        };
        out.push_str(&line(header.to_vec()));
        out.push('\n');
        for row in &cells {
            out.push_str(&line(row.iter().map(String::as_str).collect()));
            out.push('\n');
        }
        out
    }

    /// One JSON object per row.
    pub fn json_lines(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("rows serialize") + "\n")
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Conv;
    use crate::params::ParamSpecs;

    struct OneConv(Conv);
    impl Graph for OneConv {
        fn forward<E: Exec>(&self, ex: &mut E, inputs: &[E::Value]) -> Result<Vec<E::Value>> {
            Ok(vec![self.0.forward(ex, &inputs[0])?])
        }
    }

    struct Identity;
    impl Graph for Identity {
        fn forward<E: Exec>(&self, _ex: &mut E, inputs: &[E::Value]) -> Result<Vec<E::Value>> {
            Ok(inputs.to_vec())
        }
    }

    #[test]
    fn conv_closed_forms() {
        let g = OneConv(Conv::new("c", ConvSpec::new(8, 16, 3).with_bias(true)));
        let specs = g.0.specs().unwrap();
        assert_eq!(specs.count(""), 1168);
        let store = specs.init(0);
        assert_eq!(count_params(&store, ""), 1168);
        assert_eq!(count_params(&ParamStore::new(), ""), 0);

        let g = OneConv(Conv::new("c", ConvSpec::new(8, 16, 3)));
        let specs = g.0.specs().unwrap();
        let r = count_flops(&g, &[[1, 8, 6, 6]], &specs).unwrap();
        assert_eq!(r.total, 36_864);
        assert_eq!(
            count_flops(&Identity, &[[1, 8, 6, 6]], &ParamSpecs::default())
                .unwrap()
                .total,
            0
        );
    }

    #[test]
    fn quantiles_ordered() {
        let g = OneConv(Conv::new("c", ConvSpec::new(2, 2, 1)));
        let store = g.0.specs().unwrap().init(1);
        let s = bench_latency(&g, &[[1, 2, 4, 4]], &store, 30, 5, 0).unwrap();
        assert_eq!(s.samples_us.len(), 30);
        assert!(s.p50_us <= s.p95_us);
        assert!(bench_latency(&g, &[[1, 2, 4, 4]], &store, 29, 5, 0).is_err());
    }

    #[test]
    fn nearest_rank() {
        let s = LatencyStats::from_samples((1..=20).map(f64::from).collect(), 5).unwrap();
        assert_eq!((s.p50_us, s.p95_us), (10.0, 19.0));
    }
}
