//! `gdneck` command-line front end.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gdneck_core::analysis::{
    bench_latency, count_flops, emit_ablation_table, pyramid_dims, random_inputs, BenchSettings,
    LatencyStats,
};
use gdneck_core::autodiff::{forward_eager, Exec, Graph};
use gdneck_core::config::ConfigDocument;
use gdneck_core::gradcheck::{fd_gradcheck, GradcheckConfig};
use gdneck_core::layers::Module;
use gdneck_core::neck::{toy_train, GdNeck, NeckConfig, ToyBackbone};
use gdneck_core::repconv::{deploy, set_mode, RepMode};
use gdneck_core::weights::{load_file, save_file};
use gdneck_core::{Error, ParamStore, Result, Tensor};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "gdneck", version, about = "Gather-and-distribute neck engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// TOML configuration document; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Weight file; overrides `io.weights`.
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    /// Seed for random weights and inputs.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for kernel parallelism; overrides `bench.threads`.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the neck once and print per-level statistics.
    Forward {
        #[command(flatten)]
        common: Common,
        /// `random` or a weight-format file holding B2..B5 (or `image` with --backbone).
        #[arg(long, default_value = "random")]
        input: String,
        /// Feed a random image through the toy backbone first.
        #[arg(long)]
        backbone: bool,
    },
    /// Count parameters and FLOPs of the configured neck.
    Flops {
        #[command(flatten)]
        common: Common,
    },
    /// Structure ablation table over `bench.ablations`.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Skip latency measurement.
        #[arg(long)]
        no_bench: bool,
    },
    /// Latency of the configured neck in train and deploy form.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Train the toy detector and write its weights.
    TrainToy {
        #[command(flatten)]
        common: Common,
        /// Loss curve output; defaults to `<out>.curve.jsonl`.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Write randomly initialized neck weights.
    ExportWeights {
        #[command(flatten)]
        common: Common,
        /// Fuse RepConv units before writing.
        #[arg(long)]
        deploy: bool,
        /// Include the toy backbone and head.
        #[arg(long)]
        detector: bool,
    },
    /// Finite-difference check of neck gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 64)]
        probes: usize,
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        /// B2 side length of the probe input.
        #[arg(long, default_value_t = 8)]
        b2: usize,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Forward { common, .. }
            | Command::Flops { common }
            | Command::Ablate { common, .. }
            | Command::Bench { common }
            | Command::TrainToy { common, .. }
            | Command::ExportWeights { common, .. }
            | Command::Gradcheck { common, .. } => common,
        }
    }
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        other => other,
    })
}

fn read_weights(path: &Path) -> Result<ParamStore> {
    with_path(path, load_file(path))
}

fn write_weights(store: &ParamStore, path: &Path) -> Result<()> {
    with_path(path, save_file(store, path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    with_path(path, fs::write(path, text).map_err(Error::from))
}

fn load_doc(common: &Common) -> Result<ConfigDocument> {
    match &common.config {
        Some(p) => with_path(p, ConfigDocument::load(p)),
        None => Ok(ConfigDocument::default()),
    }
}

fn weights_path(common: &Common, doc: &ConfigDocument) -> Option<PathBuf> {
    common.weights.clone().or_else(|| doc.io.weights.clone())
}

fn out_path(common: &Common, doc: &ConfigDocument) -> Option<PathBuf> {
    common.out.clone().or_else(|| doc.io.out.clone())
}

/// Runs the parsed command inside a thread pool of the requested size and
/// returns what it would print.
pub fn run(cli: Cli) -> Result<String> {
    let common = cli.command.common().clone();
    let doc = load_doc(&common)?;
    let threads = common.threads.unwrap_or(doc.bench.threads);
    if threads == 0 {
        return Err(Error::Document("threads must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::State(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli.command, &doc, threads))
}

fn dispatch(cmd: Command, doc: &ConfigDocument, threads: usize) -> Result<String> {
    match cmd {
        Command::Forward {
            common,
            input,
            backbone,
        } => cmd_forward(&common, doc, &input, backbone),
        Command::Flops { common } => cmd_flops(&common, doc),
        Command::Ablate { common, no_bench } => cmd_ablate(&common, doc, !no_bench, threads),
        Command::Bench { common } => cmd_bench(&common, doc, threads),
        Command::TrainToy { common, curve } => cmd_train_toy(&common, doc, curve),
        Command::ExportWeights {
            common,
            deploy,
            detector,
        } => cmd_export(&common, doc, deploy, detector),
        Command::Gradcheck {
            common,
            probes,
            epsilon,
            tolerance,
            b2,
        } => cmd_gradcheck(&common, doc, probes, epsilon, tolerance, b2),
    }
}

/// `(mean, std, min, max)` over all elements, accumulated in f64.
pub fn summary(t: &Tensor) -> (f64, f64, f64, f64) {
    let n = t.numel() as f64;
    let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = t
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let min = t.data().iter().fold(f32::INFINITY, |a, &b| a.min(b)) as f64;
    let max = t.data().iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    (mean, var.sqrt(), min, max)
}

fn stat_line(name: &str, t: &Tensor) -> String {
    let (mean, std, min, max) = summary(t);
    let [n, c, h, w] = t.dims();
    format!(
        "{name:<4} {n}x{c}x{h}x{w}  mean {mean:.6e}  std {std:.6e}  min {min:.6e}  max {max:.6e}\n"
    )
}

/// The neck, in deploy form when `store` holds fused RepConv parameters.
fn neck_for(cfg: &NeckConfig, store: &ParamStore) -> Result<GdNeck> {
    let mut neck = GdNeck::new("neck", cfg)?;
    if store.names().any(|n| n.contains(".fused.")) {
        set_mode(&mut neck, RepMode::Deploy);
    }
    Ok(neck)
}

/// Backbone then neck, image in, `[B2..B5, N3, N4, N5]` out.
struct BackboneNeck {
    backbone: ToyBackbone,
    neck: GdNeck,
}

impl Graph for BackboneNeck {
    fn forward<E: Exec>(&self, ex: &mut E, inputs: &[E::Value]) -> Result<Vec<E::Value>> {
        let mut b = self.backbone.forward(ex, inputs)?;
        let n = self.neck.forward(ex, &b)?;
        b.extend(n);
        Ok(b)
    }
}

fn cmd_forward(
    common: &Common,
    doc: &ConfigDocument,
    input: &str,
    with_backbone: bool,
) -> Result<String> {
    let cfg = doc.model.neck_config()?;
    let b2 = doc.bench.b2_size()?;
    let image = doc.bench.image_size;
    let mut store = match weights_path(common, doc) {
        Some(p) => read_weights(&p)?,
        None => ParamStore::new(),
    };
    let fresh = store.is_empty();
    let neck = neck_for(&cfg, &store)?;
    let backbone = ToyBackbone::new("backbone", 3, cfg.channels);
    if fresh {
        store = neck.specs()?.init(common.seed);
        if with_backbone {
            store.extend_from(&backbone.specs()?.init(common.seed));
        }
    }
    let (levels, outputs) = if with_backbone {
        let img = if input == "random" {
            random_inputs(&[[1, 3, image, image]], common.seed ^ 0x1)
        } else {
            let s = read_weights(Path::new(input))?;
            vec![s.require("image")?.clone()]
        };
        let g = BackboneNeck { backbone, neck };
        let mut all = forward_eager(&g, &img, &store)?;
        let n = all.split_off(4);
        (all, n)
    } else {
        let levels = if input == "random" {
            random_inputs(&pyramid_dims(&cfg, 1, b2)?, common.seed ^ 0x1)
        } else {
            let s = read_weights(Path::new(input))?;
            ["B2", "B3", "B4", "B5"]
                .iter()
                .map(|k| s.require(k).cloned())
                .collect::<Result<Vec<_>>>()?
        };
        let n = forward_eager(&neck, &levels, &store)?;
        (levels, n)
    };
    let mut out = format!("# variant {}  scale {}\n", cfg.toggles(), scale_name(&cfg));
    for (k, t) in levels.iter().enumerate() {
        out.push_str(&stat_line(&format!("B{}", k + 2), t));
    }
    for (k, t) in outputs.iter().enumerate() {
        out.push_str(&stat_line(&format!("N{}", k + 3), t));
    }
    if let Some(p) = out_path(common, doc) {
        let dump: ParamStore = outputs
            .iter()
            .enumerate()
            .map(|(k, t)| (format!("N{}", k + 3), t.clone()))
            .collect();
        write_weights(&dump, &p)?;
        let _ = writeln!(out, "# wrote {}", p.display());
    }
    Ok(out)
}

fn scale_name(cfg: &NeckConfig) -> String {
    cfg.scale
        .map_or_else(|| "micro".to_string(), |s| s.to_string())
}

fn cmd_flops(common: &Common, doc: &ConfigDocument) -> Result<String> {
    let cfg = doc.model.neck_config()?;
    let b2 = doc.bench.b2_size()?;
    let neck = GdNeck::new("neck", &cfg)?;
    let specs = neck.specs()?;
    let report = count_flops(&neck, &pyramid_dims(&cfg, 1, b2)?, &specs)?;
    let params = specs.count("");
    let mut out = format!(
        "# variant {}  scale {}  B2 {b2}x{b2}\n",
        cfg.toggles(),
        scale_name(&cfg)
    );
    let width = report
        .by_scope
        .keys()
        .map(String::len)
        .max()
        .unwrap_or(0)
        .max(8);
    for (scope, f) in &report.by_scope {
        let name = if scope.is_empty() { "(other)" } else { scope };
        let _ = writeln!(out, "{name:<width$}  {f:>16}");
    }
    let _ = writeln!(out, "{:<width$}  {:>16}", "total", report.total);
    let _ = writeln!(out, "params {params}");
    let row = json!({ "name": cfg.toggles().label(), "params": params, "flops": report.total });
    out.push_str(&row.to_string());
    out.push('\n');
    if let Some(p) = out_path(common, doc) {
        write_text(&p, &(row.to_string() + "\n"))?;
    }
    Ok(out)
}

fn cmd_ablate(
    common: &Common,
    doc: &ConfigDocument,
    bench: bool,
    threads: usize,
) -> Result<String> {
    let base = doc.model.neck_config()?;
    let toggles = doc.bench.toggles()?;
    let b2 = doc.bench.b2_size()?;
    let settings = bench.then_some(BenchSettings {
        iterations: doc.bench.iterations,
        warmup: doc.bench.warmup,
        seed: common.seed,
    });
    let table = emit_ablation_table(&base, &toggles, b2, settings)?;
    let mut out = format!("# scale {}  threads {threads}\n", scale_name(&base));
    out.push_str(&table.render_text());
    out.push_str(&table.json_lines());
    if let Some(p) = out_path(common, doc) {
        write_text(&p, &table.json_lines())?;
    }
    Ok(out)
}

fn latency_row(name: &str, params: usize, flops: u64, s: &LatencyStats) -> serde_json::Value {
    json!({
        "name": name,
        "params": params,
        "flops": flops,
        "lat_mean_us": s.mean_us,
        "lat_p50_us": s.p50_us,
        "lat_p95_us": s.p95_us,
    })
}

fn cmd_bench(common: &Common, doc: &ConfigDocument, threads: usize) -> Result<String> {
    let cfg = doc.model.neck_config()?;
    let b2 = doc.bench.b2_size()?;
    let dims = pyramid_dims(&cfg, 1, b2)?;
    let neck = GdNeck::new("neck", &cfg)?;
    let specs = neck.specs()?;
    let store = specs.init(common.seed);
    let (dneck, dstore) = deploy(&neck, &store)?;
    let dspecs = dneck.specs()?;
    let (iters, warm) = (doc.bench.iterations, doc.bench.warmup);
    let train = bench_latency(&neck, &dims, &store, iters, warm, common.seed)?;
    let fused = bench_latency(&dneck, &dims, &dstore, iters, warm, common.seed)?;
    let rows = [
        latency_row(
            "train-form",
            specs.count(""),
            count_flops(&neck, &dims, &specs)?.total,
            &train,
        ),
        latency_row(
            "deploy-form",
            dspecs.count(""),
            count_flops(&dneck, &dims, &dspecs)?.total,
            &fused,
        ),
    ];
    let mut out = format!(
        "# variant {}  scale {}  B2 {b2}x{b2}  threads {threads}  iterations {iters}  warmup {warm}\n",
        cfg.toggles(),
        scale_name(&cfg)
    );
    let _ = writeln!(
        out,
        "{:<12} {:>12} {:>16} {:>12} {:>12} {:>12}",
        "form", "params", "flops", "mean_us", "p50_us", "p95_us"
    );
    for r in &rows {
        let _ = writeln!(
            out,
            "{:<12} {:>12} {:>16} {:>12.1} {:>12.1} {:>12.1}",
            r["name"].as_str().unwrap_or(""),
            r["params"].as_u64().unwrap_or(0),
            r["flops"].as_u64().unwrap_or(0),
            r["lat_mean_us"].as_f64().unwrap_or(0.0),
            r["lat_p50_us"].as_f64().unwrap_or(0.0),
            r["lat_p95_us"].as_f64().unwrap_or(0.0),
        );
    }
    let lines: String = rows.iter().map(|r| r.to_string() + "\n").collect();
    out.push_str(&lines);
    if let Some(p) = out_path(common, doc) {
        write_text(&p, &lines)?;
    }
    Ok(out)
}

fn cmd_train_toy(common: &Common, doc: &ConfigDocument, curve: Option<PathBuf>) -> Result<String> {
    let cfg = doc.model.neck_config()?;
    let mut train = doc.train.train_config();
    if common.seed != 0 {
        train.seed = common.seed;
    }
    let out_weights = out_path(common, doc).ok_or_else(|| {
        Error::Document("train-toy needs --out or io.out for the weight file".into())
    })?;
    let curve = curve.unwrap_or_else(|| {
        let mut s = out_weights.clone().into_os_string();
        s.push(".curve.jsonl");
        PathBuf::from(s)
    });
    let result = toy_train(&cfg, &train)?;
    let lines: String = result
        .losses
        .iter()
        .enumerate()
        .map(|(k, l)| json!({ "step": k, "loss": l }).to_string() + "\n")
        .collect();
    write_text(&curve, &lines)?;
    write_weights(&result.params, &out_weights)?;
    let first = result.losses.first().copied().unwrap_or(f32::NAN);
    let last = result.losses.last().copied().unwrap_or(f32::NAN);
    Ok(format!(
        "steps {}  initial loss {first:.6}  final loss {last:.6}  ratio {:.4}\nwrote {} and {}\n",
        result.losses.len(),
        last / first,
        out_weights.display(),
        curve.display()
    ))
}

fn cmd_export(common: &Common, doc: &ConfigDocument, fuse: bool, detector: bool) -> Result<String> {
    let cfg = doc.model.neck_config()?;
    let out = out_path(common, doc)
        .ok_or_else(|| Error::Document("export-weights needs --out or io.out".into()))?;
    let store = if detector {
        let det = gdneck_core::neck::Detector::new(&cfg, 1)?;
        let s = det.specs()?.init(common.seed);
        if fuse {
            deploy(&det, &s)?.1
        } else {
            s
        }
    } else {
        let neck = GdNeck::new("neck", &cfg)?;
        let s = neck.specs()?.init(common.seed);
        if fuse {
            deploy(&neck, &s)?.1
        } else {
            s
        }
    };
    write_weights(&store, &out)?;
    Ok(format!(
        "wrote {} tensors ({} floats) to {}\n",
        store.len(),
        store.count(""),
        out.display()
    ))
}

fn cmd_gradcheck(
    common: &Common,
    doc: &ConfigDocument,
    probes: usize,
    epsilon: f64,
    tolerance: f64,
    b2: usize,
) -> Result<String> {
    let cfg = doc.model.neck_config()?;
    let neck = GdNeck::new("neck", &cfg)?;
    let store = match weights_path(common, doc) {
        Some(p) => read_weights(&p)?,
        None => neck.specs()?.init(common.seed),
    };
    let inputs = random_inputs(&pyramid_dims(&cfg, 1, b2)?, common.seed ^ 0x1);
    let gc = GradcheckConfig {
        epsilon,
        probes,
        seed: common.seed,
        ..Default::default()
    };
    let report = fd_gradcheck(&neck, &inputs, &store, &gc)?;
    let worst = report.worst().expect("at least one probe");
    let text = format!(
        "max relative error {:.3e} over {} probes ({} redrawn near kinks)\nworst {}[{}]: analytic {:.6e} numeric {:.6e}\n",
        report.max_rel_error,
        report.probes.len(),
        report.skipped,
        worst.name,
        worst.index,
        worst.analytic,
        worst.numeric
    );
    if report.max_rel_error > tolerance {
        return Err(Error::Numerical(format!(
            "{text}exceeds tolerance {tolerance:e}"
        )));
    }
    Ok(text)
}
