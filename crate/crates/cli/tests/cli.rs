use std::path::Path;
use std::process::{Command, Output};

use gdneck_core::weights::load_file;

const MICRO: &str = "[model]\nscale = \"micro\"\n\n[bench]\nimage_size = 32\n";

fn gdneck(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gdneck"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gdneck(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

/// `(name, [mean, std, min, max])` for each stat line.
fn stats(text: &str) -> Vec<(String, Vec<f64>)> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            (
                f[0].to_string(),
                [3, 5, 7, 9]
                    .iter()
                    .map(|&k| f[k].parse().unwrap())
                    .collect(),
            )
        })
        .collect()
}

#[test]
fn forward_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "m.toml", MICRO);
    let a = ok(&["forward", "--config", &cfg, "--seed", "7"]);
    let b = ok(&["forward", "--config", &cfg, "--seed", "7"]);
    let c = ok(&["forward", "--config", &cfg, "--seed", "8"]);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn toggles_off_forward_passes_b3_to_b5_through() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{MICRO}\n").replace(
        "[bench]",
        "enable_low_gd = false\nenable_high_gd = false\nenable_laf = false\n\n[bench]",
    );
    let cfg = write_config(dir.path(), "off.toml", &text);
    let s = stats(&ok(&["forward", "--config", &cfg, "--seed", "3"]));
    for k in 0..3 {
        assert_eq!(s[k + 1].1, s[k + 4].1, "{} vs {}", s[k + 1].0, s[k + 4].0);
    }
}

#[test]
fn printed_stats_match_dumped_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "m.toml", MICRO);
    let dump = dir.path().join("n.gdw");
    let text = ok(&[
        "forward",
        "--config",
        &cfg,
        "--seed",
        "5",
        "--out",
        dump.to_str().unwrap(),
    ]);
    let store = load_file(&dump).unwrap();
    for (name, printed) in stats(&text).into_iter().filter(|(n, _)| n.starts_with('N')) {
        let v: Vec<f64> = store
            .get(&name)
            .unwrap()
            .data()
            .iter()
            .map(|&x| x as f64)
            .collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (p, want) in printed.iter().zip([mean, std, min, max]) {
            assert!(
                (p - want).abs() <= 1e-6 * want.abs().max(1e-3),
                "{name}: {p} vs {want}"
            );
        }
    }
}

#[test]
fn forward_reads_a_pyramid_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "m.toml", MICRO);
    let mut store = gdneck_core::ParamStore::new();
    let dims = [[1, 8, 8, 8], [1, 16, 4, 4], [1, 32, 2, 2], [1, 64, 1, 1]];
    for (k, d) in dims.into_iter().enumerate() {
        store.insert(
            format!("B{}", k + 2),
            gdneck_core::Tensor::full(d, k as f32),
        );
    }
    let input = dir.path().join("in.gdw");
    gdneck_core::weights::save_file(&store, &input).unwrap();
    let s = stats(&ok(&[
        "forward",
        "--config",
        &cfg,
        "--input",
        input.to_str().unwrap(),
    ]));
    assert_eq!(s[1].1, vec![1.0, 0.0, 1.0, 1.0]);
    let backbone = ok(&["forward", "--config", &cfg, "--backbone"]);
    assert_eq!(stats(&backbone).len(), 7);
}

#[test]
fn ablate_has_five_rows_matching_flops() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "m.toml", MICRO);
    let text = ok(&["ablate", "--config", &cfg, "--no-bench"]);
    let rows: Vec<serde_json::Value> = text
        .lines()
        .filter(|l| l.starts_with('{'))
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 5);
    let full = rows.iter().find(|r| r["name"] == "Low+High+LAF").unwrap();
    let flops = ok(&["flops", "--config", &cfg]);
    let summary: serde_json::Value = serde_json::from_str(flops.lines().last().unwrap()).unwrap();
    assert_eq!(full["flops"], summary["flops"]);
    assert_eq!(full["params"], summary["params"]);
}

#[test]
fn empty_ablation_list_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "e.toml", "[bench]\nablations = []\n");
    let out = gdneck(&["ablate", "--config", &cfg, "--no-bench"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ablations"));
}

#[test]
fn bad_config_names_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.toml",
        "[model]\nscale = \"micro\"\nwidth = 2\n",
    );
    let out = gdneck(&["flops", "--config", &cfg]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("width") && err.contains("line 3"), "{err}");
}

#[test]
fn zero_lr_training_is_flat_and_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "t.toml",
        "[model]\nscale = \"micro\"\n\n[train]\nsteps = 4\nlr = 0.0\nbatch_size = 2\n",
    );
    let out = dir.path().join("w.gdw");
    ok(&[
        "train-toy",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]);
    let curve = std::fs::read_to_string(dir.path().join("w.gdw.curve.jsonl")).unwrap();
    let losses: Vec<f64> = curve
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["loss"]
                .as_f64()
                .unwrap()
        })
        .collect();
    assert_eq!(losses.len(), 4);
    assert!(losses.iter().all(|&l| l == losses[0]));

    let cfg = write_config(
        dir.path(),
        "t2.toml",
        "[model]\nscale = \"micro\"\n\n[train]\nsteps = 3\nbatch_size = 2\n",
    );
    let a = dir.path().join("a.gdw");
    let b = dir.path().join("b.gdw");
    ok(&["train-toy", "--config", &cfg, "--out", a.to_str().unwrap()]);
    ok(&["train-toy", "--config", &cfg, "--out", b.to_str().unwrap()]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn exported_weights_load_back_and_deploy_form_is_smaller() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "m.toml", MICRO);
    let train = dir.path().join("train.gdw");
    let fused = dir.path().join("fused.gdw");
    ok(&[
        "export-weights",
        "--config",
        &cfg,
        "--out",
        train.to_str().unwrap(),
    ]);
    ok(&[
        "export-weights",
        "--config",
        &cfg,
        "--deploy",
        "--out",
        fused.to_str().unwrap(),
    ]);
    let (t, f) = (load_file(&train).unwrap(), load_file(&fused).unwrap());
    assert!(f.count("") < t.count(""));
    let a = ok(&[
        "forward",
        "--config",
        &cfg,
        "--weights",
        train.to_str().unwrap(),
    ]);
    let b = ok(&[
        "forward",
        "--config",
        &cfg,
        "--weights",
        fused.to_str().unwrap(),
    ]);
    for ((_, x), (_, y)) in stats(&a).iter().zip(stats(&b).iter()) {
        for (p, q) in x.iter().zip(y) {
            assert!((p - q).abs() <= 1e-4 * p.abs().max(1.0));
        }
    }
}

#[test]
fn gradcheck_command_passes_on_micro() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "m.toml", MICRO);
    let text = ok(&["gradcheck", "--config", &cfg, "--probes", "16"]);
    assert!(text.contains("max relative error"), "{text}");
}

#[test]
fn zero_threads_rejected() {
    let out = gdneck(&["flops", "--threads", "0"]);
    assert!(!out.status.success());
}
