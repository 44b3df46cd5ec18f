use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use crackseg::config::{render_documented, RunConfig};
use crackseg::data::{self, DatasetSpec};
use crackseg::metrics::{self, stats, ImageMetrics, MetricReport};
use crackseg::model::{export_attention, load_checkpoint, Checkpoint};
use crackseg::synthgen::{write_corpus, SynthSpec};
use crackseg::{trainer, Error};

use crate::{CompareArgs, EvalArgs, ExportArgs, InferArgs, SynthArgs, TrainArgs};

pub const EVAL_SCHEMA: u32 = 1;

fn pair(v: &Option<Vec<usize>>) -> Option<[usize; 2]> {
    v.as_ref().map(|v| [v[0], v[1]])
}

pub fn print_config() -> Result<()> {
    print!("{}", render_documented(&RunConfig::default()));
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    // precedence: flags, then the environment, then the file
    cfg.apply_env();
    if let Some(d) = a.data {
        cfg.data.root = d;
    }
    if let Some(d) = a.output_dir {
        cfg.output_dir = d;
    }
    if let Some(n) = a.max_epochs {
        cfg.train.max_epochs = n;
    }
    if let Some(v) = a.variant {
        cfg.model.variant = v;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(r) = pair(&a.resize) {
        cfg.data.resize = r;
    }
    cfg.validate()?;
    if a.print_config {
        print!("{}", render_documented(&cfg));
        return Ok(());
    }
    log::info!("training variant {} into {}", cfg.model.variant, cfg.output_dir.display());
    let summary = match &a.resume {
        Some(p) => trainer::resume(&cfg, p)?,
        None => trainer::fit(&cfg)?,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn resolve_resize(arg: &Option<Vec<usize>>, ckpt: &Checkpoint) -> [usize; 2] {
    pair(arg)
        .or_else(|| ckpt.run.as_ref().map(|r| r.data.resize))
        .unwrap_or_else(|| DatasetSpec::default().resize)
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    schema: u32,
    checkpoint: &'a Path,
    data: &'a Path,
    variant: String,
    resize: [usize; 2],
    missing_masks: Vec<String>,
    report: MetricReport,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let spec = DatasetSpec {
        root: a.data.clone(),
        image_dir: a.image_dir.clone(),
        mask_dir: a.mask_dir.clone(),
        resize: resolve_resize(&a.resize, &ckpt),
        ..Default::default()
    };
    spec.validate().map_err(Error::Config)?;
    let files = data::list_images(&spec.images_path())?;
    let mut rows: Vec<ImageMetrics> = Vec::new();
    let mut missing = Vec::new();
    for f in &files {
        let Some(mask_path) = data::find_mask(&spec, f) else {
            log::warn!("no reference mask for {}; excluded", f.display());
            missing.push(data::stem(f));
            continue;
        };
        let img = data::load_image(f, spec.resize)?.reshaped(&[1, 3, spec.resize[0], spec.resize[1]])?;
        let pred = ckpt.model.predict(&img)?;
        let gt = data::load_mask(&mask_path, spec.resize)?;
        rows.push(ImageMetrics::compute(data::stem(f), &pred.masks[0], &gt)?);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "none of the {} images under {} has a reference mask",
            files.len(),
            spec.images_path().display()
        ))
        .into());
    }
    if !missing.is_empty() {
        eprintln!("excluded {} image(s) without masks: {}", missing.len(), missing.join(", "));
    }
    let report = metrics::aggregate(&rows)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    metrics::write_csv(&a.out.join("metrics.csv"), &rows)?;
    let summary = EvalSummary {
        schema: EVAL_SCHEMA,
        checkpoint: &a.checkpoint,
        data: &a.data,
        variant: ckpt.model.variant().to_string(),
        resize: spec.resize,
        missing_masks: missing,
        report,
    };
    let text = serde_json::to_string_pretty(&summary)?;
    std::fs::write(a.out.join("metrics_summary.json"), &text)?;
    println!("{text}");

    if let (Some(path), Some(key)) = (&a.append_to, &a.key) {
        let mut scores = if path.exists() { read_scores(path)? } else { BTreeMap::new() };
        let r = &summary.report;
        let mut m = BTreeMap::from([
            ("miou".to_string(), r.miou.mean),
            ("dice".to_string(), r.dice.mean),
            ("xor".to_string(), r.xor.mean),
            ("hd".to_string(), r.hd.mean),
        ]);
        if let Some(x) = &r.xor_ratio {
            m.insert("xor_ratio".into(), x.mean);
        }
        scores.insert(key.clone(), m);
        std::fs::write(path, serde_json::to_string_pretty(&scores)?)?;
    }
    Ok(())
}

fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(data::list_images(p)?);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

pub fn infer(a: InferArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let [h, w] = resolve_resize(&a.resize, &ckpt);
    let files = expand_inputs(&a.input)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut written = 0;
    for f in &files {
        let img = match data::load_image(f, [h, w]) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("skipping {}: {e}", f.display());
                eprintln!("skipping {}: {e}", f.display());
                continue;
            }
        };
        let pred = ckpt.model.predict(&img.reshaped(&[1, 3, h, w])?)?;
        let m = &pred.masks[0];
        let png = image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([if m.get(y as usize, x as usize) { 255 } else { 0 }]));
        let out = a.out.join(format!("{}.png", data::stem(f)));
        png.save(&out).map_err(|source| Error::Image { path: out.clone(), source })?;
        written += 1;
    }
    if written == 0 && !files.is_empty() {
        return Err(Error::Data("no input image could be read".into()).into());
    }
    println!("wrote {written} mask(s) to {}", a.out.display());
    Ok(())
}

pub fn export(a: ExportArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let resize = resolve_resize(&a.resize, &ckpt);
    let files = expand_inputs(&a.input)?;
    let summary = export_attention(&ckpt.model, &files, resize, &a.out)?;
    for (p, why) in &summary.skipped {
        eprintln!("skipped {}: {why}", p.display());
    }
    println!("wrote {} file(s) to {}", summary.written.len(), a.out.display());
    Ok(())
}

type Scores = BTreeMap<String, BTreeMap<String, f64>>;

fn read_scores(path: &Path) -> Result<Scores> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let s: Scores = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: expected {{dataset: {{metric: value}}}}: {e}", path.display())))?;
    Ok(s)
}

#[derive(Serialize)]
struct CompareRow {
    metric: String,
    datasets: Vec<String>,
    #[serde(flatten)]
    result: stats::PairedTTestResult,
}

pub fn compare(a: CompareArgs) -> Result<()> {
    let (sa, sb) = (read_scores(&a.a)?, read_scores(&a.b)?);
    let (ka, kb): (Vec<&String>, Vec<&String>) = (sa.keys().collect(), sb.keys().collect());
    if ka != kb {
        return Err(Error::Data(format!("dataset keys differ: {ka:?} vs {kb:?}")).into());
    }
    let metrics: Vec<String> = if a.metric.is_empty() {
        let mut common: Vec<String> = sa.values().next().map(|m| m.keys().cloned().collect()).unwrap_or_default();
        common.retain(|m| sa.values().chain(sb.values()).all(|d| d.contains_key(m)));
        common
    } else {
        a.metric.clone()
    };
    if metrics.is_empty() {
        bail!(Error::Data("no metric is present for every dataset".into()));
    }
    let datasets: Vec<String> = sa.keys().cloned().collect();
    let mut rows = Vec::new();
    for m in &metrics {
        let col = |s: &Scores| -> Result<Vec<f64>> {
            datasets
                .iter()
                .map(|d| s[d].get(m).copied().ok_or_else(|| Error::Data(format!("dataset {d} lacks metric {m}")).into()))
                .collect()
        };
        let (va, vb) = (col(&sa)?, col(&sb)?);
        let result = stats::paired_ttest(&va, &vb).with_context(|| format!("metric {m}"))?;
        println!(
            "{m:<10} n={} mean_diff={:+.6} t={:.4} df={} p={:.4} {}",
            result.n, result.mean_diff, result.t_statistic, result.df, result.p_value, result.stars
        );
        rows.push(CompareRow { metric: m.clone(), datasets: datasets.clone(), result });
    }
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&rows)?)?;
    }
    Ok(())
}

pub fn gen_synthetic(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        count: a.count,
        size: [a.size[0], a.size[1]],
        seed: a.seed,
        strokes_min: a.strokes_min,
        strokes_max: a.strokes_max,
        ..Default::default()
    };
    let samples = write_corpus(&spec, &a.out)?;
    let mean_frac = samples.iter().map(|s| s.fraction()).sum::<f64>() / samples.len().max(1) as f64;
    println!("wrote {} image/mask pairs to {} (mean crack fraction {:.4})", samples.len(), a.out.display(), mean_frac);
    Ok(())
}
