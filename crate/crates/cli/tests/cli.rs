use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crackseg::metrics::read_csv;
use crackseg::model::{save_checkpoint, Checkpoint, CrackSegmenter, ModelConfig, Variant};
use crackseg::nnops::Tensor;
use crackseg::trainer::read_log;
use serde_json::Value;

fn crackseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crackseg"))
        .args(args)
        .env_remove("CRACKSEG_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", out.status, String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn corpus(dir: &Path, count: usize, size: usize) -> PathBuf {
    let data = dir.join("data");
    ok(crackseg(&["gen-synthetic", "--out", s(&data), "--count", &count.to_string(), "--size", &size.to_string(), &size.to_string(), "--seed", "3"]));
    data
}

fn tiny_config(dir: &Path, data: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    let text = format!(
        "[model.sae]\nembed_dim = 8\n\n[train]\nbatch_size = 4\n\n[data]\nroot = {:?}\nresize = [32, 32]\n",
        s(data)
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn train(dir: &Path, data: &Path, out: &Path, extra: &[&str]) -> Output {
    let cfg = tiny_config(dir, data);
    let mut args = vec!["train", "--config", s(&cfg), "--output-dir", s(out), "--max-epochs", "2"];
    args.extend_from_slice(extra);
    crackseg(&args)
}

/// Baseline-off model whose small branch thresholds intensity halfway
/// between the synthetic background and stroke grey levels, so predicted
/// masks reproduce the generator's stroke raster exactly.
fn perfect_checkpoint(path: &Path) {
    let cfg = ModelConfig { variant: Variant::BaselineOff, sae: crackseg::sae::SaeConfig { embed_dim: 8, ..Default::default() }, ..Default::default() };
    let mut model = CrackSegmenter::new(cfg).unwrap();
    let d = 8;
    let set = |m: &mut CrackSegmenter, name: &str, t: Tensor<f32>| {
        let id = m.params.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
        m.params.set(id, t).unwrap();
    };
    // channel 0: centre tap -1/3 per colour channel, i.e. minus the mean
    // normalised intensity; strokes sit near -0.36, background near +0.24
    let mut w = vec![0.0f32; d * 3 * 9];
    for c in 0..3 {
        w[c * 9 + 4] = -1.0 / 3.0;
    }
    set(&mut model, "sae.small.conv.weight", Tensor::from_vec(&[d, 3, 3, 3], w).unwrap());
    let mut b = vec![0.0f32; d];
    b[0] = -0.06;
    set(&mut model, "sae.small.conv.bias", Tensor::from_vec(&[d], b).unwrap());
    let mut dw = vec![0.0f32; d];
    dw[0] = 50.0;
    set(&mut model, "decoder.weight", Tensor::from_vec(&[1, d, 1, 1], dw).unwrap());
    set(&mut model, "decoder.bias", Tensor::zeros(&[1]));
    save_checkpoint(path, &Checkpoint::inference(model)).unwrap();
}

#[test]
fn help_documents_exit_codes_and_subcommands() {
    let text = ok(crackseg(&["--help"]));
    for needle in ["train", "eval", "infer", "export-attention", "compare", "gen-synthetic", "Exit codes", "CRACKSEG_OUTPUT_DIR"] {
        assert!(text.contains(needle), "help lacks {needle}");
    }
    for c in 0..=6 {
        assert!(text.contains(&format!("  {c}  ")), "help lacks exit code {c}");
    }
}

#[test]
fn print_config_is_the_documented_default() {
    let a = ok(crackseg(&["print-config"]));
    let b = ok(crackseg(&["--print-config"]));
    assert_eq!(a, b);
    let parsed = crackseg::RunConfig::from_toml_str(&a).unwrap();
    assert_eq!(parsed, crackseg::RunConfig::default());
    for (key, _) in crackseg::config::KEY_DOCS {
        let leaf = key.rsplit('.').next().unwrap();
        assert!(a.lines().any(|l| l.starts_with(&format!("{leaf} ="))), "{key} missing from print-config");
    }
    let comments = a.lines().filter(|l| l.starts_with('#')).count();
    let values = a.lines().filter(|l| l.contains(" = ")).count();
    assert!(comments > values, "every key carries a comment");
}

#[test]
fn usage_and_config_errors_have_distinct_codes() {
    assert_eq!(code(&crackseg(&[])), 2);
    assert_eq!(code(&crackseg(&["train", "--bogus"])), 2);
    assert_eq!(code(&crackseg(&["compare", "only-one.json"])), 2);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = crackseg(&["train", "--config", s(&bad)]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    std::fs::write(&bad, "[train]\nlr0 = -1.0\n").unwrap();
    assert_eq!(code(&crackseg(&["train", "--config", s(&bad)])), 3);

    let out = crackseg(&["train", "--data", s(&dir.path().join("nowhere")), "--output-dir", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 4);

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint at all").unwrap();
    let out = crackseg(&["infer", "--checkpoint", s(&junk), "--input", s(&junk), "--out", s(&dir.path().join("i"))]);
    assert_eq!(code(&out), 6);
}

#[test]
fn train_writes_artifacts_and_records_the_variant() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 10, 32);
    let out = dir.path().join("run");
    let stdout = ok(train(dir.path(), &data, &out, &["--variant", "v2"]));
    let summary: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(summary["epochs_run"], 2);
    assert_eq!(summary["variant"], "v2");
    for f in ["last.ckpt", "best.ckpt", "train_log.jsonl", "summary.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let log = read_log(&out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(|r| r.variant == "v2" && r.mask_bytes_read_training == 0));
    assert!(log.iter().all(|r| r.fusion_weights.is_some()), "v2 keeps the fusion stage");

    // resuming a finished run with a larger budget continues the same log
    let cfg = tiny_config(dir.path(), &data);
    ok(crackseg(&[
        "train", "--config", s(&cfg), "--output-dir", s(&out), "--max-epochs", "3", "--variant", "v2", "--resume", s(&out.join("last.ckpt")),
    ]));
    let resumed = read_log(&out.join("train_log.jsonl")).unwrap();
    assert_eq!(resumed.len(), 3);
    assert_eq!(resumed[..2], log[..]);
}

#[test]
fn seeded_runs_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 10, 32);
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            ok(train(dir.path(), &data, &out, &["--seed", "7"]));
            read_log(&out.join("train_log.jsonl")).unwrap()
        })
        .collect();
    for (x, y) in runs[0].iter().zip(&runs[1]) {
        assert_eq!(x.step_totals, y.step_totals);
        assert_eq!((x.train_total, x.val_total, x.lr), (y.train_total, y.val_total, y.lr));
    }
}

#[test]
fn output_dir_precedence_flag_env_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 10, 32);
    let cfg = tiny_config(dir.path(), &data);
    let env_dir = dir.path().join("from-env");
    let status = Command::new(env!("CARGO_BIN_EXE_crackseg"))
        .args(["train", "--config", s(&cfg), "--max-epochs", "1"])
        .env("CRACKSEG_OUTPUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!(env_dir.join("last.ckpt").is_file());

    let flag_dir = dir.path().join("from-flag");
    let status = Command::new(env!("CARGO_BIN_EXE_crackseg"))
        .args(["train", "--config", s(&cfg), "--max-epochs", "1", "--output-dir", s(&flag_dir)])
        .env("CRACKSEG_OUTPUT_DIR", dir.path().join("ignored"))
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!(flag_dir.join("last.ckpt").is_file());
    assert!(!dir.path().join("ignored").exists());
}

#[test]
fn eval_of_a_perfect_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 6, 32);
    let ckpt = dir.path().join("perfect.ckpt");
    perfect_checkpoint(&ckpt);
    let out = dir.path().join("eval");
    let scores = dir.path().join("scores.json");
    ok(crackseg(&[
        "eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--resize", "32", "32", "--out", s(&out), "--append-to", s(&scores), "--key", "synth",
    ]));
    let rows = read_csv(&out.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 6);
    for r in &rows {
        assert_eq!((r.miou, r.dice, r.xor, r.hd), (1.0, 1.0, 0.0, 0.0), "{}", r.name);
    }
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema"], 1);
    assert_eq!(summary["variant"], "baseline-off");
    assert_eq!(summary["report"]["images"], 6);
    // aggregates recomputed from the CSV rows
    for (metric, col) in [("miou", rows.iter().map(|r| r.miou).collect::<Vec<_>>()), ("dice", rows.iter().map(|r| r.dice).collect())] {
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let std = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        let got = &summary["report"][metric];
        assert!((got["mean"].as_f64().unwrap() - mean).abs() <= 1e-9);
        assert!((got["std"].as_f64().unwrap() - std).abs() <= 1e-9);
    }
    let stored: Value = serde_json::from_str(&std::fs::read_to_string(&scores).unwrap()).unwrap();
    assert_eq!(stored["synth"]["miou"], 1.0);
    assert_eq!(stored["synth"]["hd"], 0.0);

    // a missing reference mask is reported and excluded
    let first = std::fs::read_dir(data.join("masks")).unwrap().next().unwrap().unwrap().path();
    std::fs::remove_file(&first).unwrap();
    let stdout = ok(crackseg(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--resize", "32", "32", "--out", s(&out)]));
    let summary: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(summary["missing_masks"].as_array().unwrap().len(), 1);
    assert_eq!(read_csv(&out.join("metrics.csv")).unwrap().len(), 5);

    // no masks at all is a data error
    std::fs::remove_dir_all(data.join("masks")).unwrap();
    std::fs::create_dir(data.join("masks")).unwrap();
    assert_eq!(code(&crackseg(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&out)])), 4);
}

#[test]
fn infer_writes_binary_masks_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 4, 32);
    let ckpt = dir.path().join("perfect.ckpt");
    perfect_checkpoint(&ckpt);
    let images = data.join("images");
    let run = |out: &Path| {
        ok(crackseg(&["infer", "--checkpoint", s(&ckpt), "--input", s(&images), "--out", s(out), "--resize", "32", "32"]));
        let mut files: Vec<PathBuf> = std::fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files
    };
    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    assert_eq!(a.len(), 4);
    for (x, y) in a.iter().zip(&b) {
        let img = image::open(x).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (32, 32));
        assert!(img.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
        // the crafted model reproduces the reference raster
        let reference = image::open(data.join("masks").join(x.file_name().unwrap())).unwrap().to_luma8();
        assert_eq!(img, reference);
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }

    // unreadable inputs are skipped, not fatal, while one image is readable
    let junk = dir.path().join("junk.png");
    std::fs::write(&junk, b"nope").unwrap();
    let first = std::fs::read_dir(&images).unwrap().next().unwrap().unwrap().path();
    let out = dir.path().join("c");
    let res = crackseg(&["infer", "--checkpoint", s(&ckpt), "--input", s(&junk), s(&first), "--out", s(&out), "--resize", "32", "32"]);
    assert!(res.status.success());
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 1);
}

#[test]
fn export_attention_writes_overlays_at_original_size() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 10, 48);
    let cfg = tiny_config(dir.path(), &data);
    let run = dir.path().join("run");
    ok(crackseg(&["train", "--config", s(&cfg), "--output-dir", s(&run), "--max-epochs", "1"]));
    let img = std::fs::read_dir(data.join("images")).unwrap().next().unwrap().unwrap().path();
    let out = dir.path().join("attn");
    ok(crackseg(&["export-attention", "--checkpoint", s(&run.join("last.ckpt")), "--input", s(&img), "--out", s(&out)]));
    let stem = img.file_stem().unwrap().to_str().unwrap();
    for suffix in ["mask", "attn_fine", "attn_small", "attn_large"] {
        let p = out.join(format!("{stem}_{suffix}.png"));
        let dims = image::image_dimensions(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(dims, (48, 48), "{suffix}");
    }

    // a variant without attention has nothing to export
    let ckpt = dir.path().join("perfect.ckpt");
    perfect_checkpoint(&ckpt);
    assert_ne!(code(&crackseg(&["export-attention", "--checkpoint", s(&ckpt), "--input", s(&img), "--out", s(&out)])), 0);
}

fn scores(path: &Path, values: &[(&str, f64)]) {
    let obj: serde_json::Map<String, Value> =
        values.iter().map(|(k, v)| (k.to_string(), serde_json::json!({ "miou": v, "dice": v / 2.0 }))).collect();
    std::fs::write(path, serde_json::to_string(&obj).unwrap()).unwrap();
}

#[test]
fn compare_runs_the_paired_test() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    scores(&a, &[("d1", 1.0), ("d2", 2.0), ("d3", 3.0), ("d4", 4.0), ("d5", 5.0)]);
    scores(&b, &[("d1", 0.0), ("d2", 0.0), ("d3", 0.0), ("d4", 0.0), ("d5", 0.0)]);
    let report = dir.path().join("report.json");
    let stdout = ok(crackseg(&["compare", s(&a), s(&b), "--metric", "miou", "--out", s(&report)]));
    assert!(stdout.contains("t=4.2426") && stdout.contains("df=4"), "{stdout}");
    let rows: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let t = rows[0]["t_statistic"].as_f64().unwrap();
    assert!((t - 18f64.sqrt()).abs() < 1e-12);
    assert!((rows[0]["p_value"].as_f64().unwrap() - 0.0132).abs() < 5e-4);
    assert_eq!(rows[0]["stars"], "*");

    // identical score sets have zero-variance differences
    assert_eq!(code(&crackseg(&["compare", s(&a), s(&a)])), 4);

    let c = dir.path().join("c.json");
    scores(&c, &[("d1", 1.0), ("d2", 2.0), ("other", 3.0), ("d4", 4.0), ("d5", 5.0)]);
    let out = crackseg(&["compare", s(&a), s(&c)]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("keys differ"));
}
