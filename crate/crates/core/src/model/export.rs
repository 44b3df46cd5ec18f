//! Attention heatmap overlays and predicted-mask images.
//!
//! Colormap: a jet-style ramp, dark blue (0) → cyan → yellow → dark red (1).
//! Overlay pixel = `OVERLAY_ALPHA · colormap(a) + (1 − OVERLAY_ALPHA) · input`.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{CrackSegmenter, PredictionBatch};
use crate::dat::SCALE_NAMES;
use crate::data::{load_image, stem};
use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::nnops::{resize_bilinear, NormMode, Tape, Tensor};

pub const OVERLAY_ALPHA: f64 = 0.5;

/// Jet-style colormap of `t ∈ [0, 1]` (values outside are clamped).
pub fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |c: f64| ((1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Blends an attention map (same size as `base`, values in `[0, 1]`) over `base`.
pub fn overlay(base: &RgbImage, attn: &[f64]) -> RgbImage {
    let (w, h) = base.dimensions();
    assert_eq!(attn.len(), (w * h) as usize, "attention map must match the image size");
    RgbImage::from_fn(w, h, |x, y| {
        let c = colormap(attn[(y * w + x) as usize]);
        let p = base.get_pixel(x, y).0;
        Rgb(std::array::from_fn(|i| (OVERLAY_ALPHA * c[i] as f64 + (1.0 - OVERLAY_ALPHA) * p[i] as f64).round() as u8))
    })
}

/// Predictions plus the per-scale attention summaries (`[B, 1, h_s, w_s]`,
/// each in `[0, 1]`) of the final attention block; `None` for scales the
/// variant does not refine.
pub fn attention_maps(model: &CrackSegmenter, images: &Tensor<f32>) -> Result<(PredictionBatch, [Option<Tensor<f64>>; 3])> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, images, NormMode::Eval)?;
    let state = out.attention_state(&tape, &model.config().dat)?;
    let mut maps: [Option<Tensor<f64>>; 3] = [None, None, None];
    for (m, s) in maps.iter_mut().zip(state.iter()) {
        if let Some(s) = s {
            *m = Some(s.summary()?);
        }
    }
    Ok((PredictionBatch::from_probs(tape.value(out.probs).clone())?, maps))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub written: Vec<PathBuf>,
    /// `(image, reason)` for inputs that could not be processed.
    pub skipped: Vec<(PathBuf, String)>,
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn export_one(model: &CrackSegmenter, path: &Path, resize: [usize; 2], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let original = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8();
    let (w, h) = original.dimensions();
    let (hu, wu) = (h as usize, w as usize);
    let x = load_image(path, resize)?.reshaped(&[1, 3, resize[0], resize[1]])?;
    let (pred, maps) = attention_maps(model, &x)?;
    let name = stem(path);
    let mut written = Vec::new();

    let mask = nearest(&pred.masks[0], hu, wu);
    let mask_img = image::GrayImage::from_fn(w, h, |x, y| image::Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }]));
    let p = out_dir.join(format!("{name}_mask.png"));
    mask_img.save(&p).map_err(|source| Error::Image { path: p.clone(), source })?;
    written.push(p);

    for (scale, m) in maps.iter().enumerate() {
        let Some(m) = m else { continue };
        let up = resize_bilinear(m, hu, wu);
        let p = out_dir.join(format!("{name}_attn_{}.png", SCALE_NAMES[scale]));
        save(&overlay(&original, up.data()), &p)?;
        written.push(p);
    }
    Ok(written)
}

fn nearest(m: &Mask, th: usize, tw: usize) -> Mask {
    let (h, w) = m.dims();
    Mask::from_fn(th, tw, |y, x| m.get((y * h / th).min(h - 1), (x * w / tw).min(w - 1)))
}

/// Writes, per image, `<stem>_mask.png` and one `<stem>_attn_<scale>.png`
/// overlay per refined scale, all at the image's original size. Unreadable
/// images are skipped with a warning; failing every image is an error.
pub fn export_attention(model: &CrackSegmenter, images: &[PathBuf], resize: [usize; 2], out_dir: &Path) -> Result<ExportSummary> {
    if !model.variant().uses_dat() {
        return Err(Error::State(format!("variant {} has no attention stage to export", model.variant())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut summary = ExportSummary::default();
    for p in images {
        match export_one(model, p, resize, out_dir) {
            Ok(w) => summary.written.extend(w),
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                summary.skipped.push((p.clone(), e.to_string()));
            }
        }
    }
    if !images.is_empty() && summary.skipped.len() == images.len() {
        return Err(Error::Data(format!("none of the {} images could be exported", images.len())));
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dat::DatConfig;
    use crate::model::ModelConfig;
    use crate::sae::SaeConfig;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0, 0, 128]);
        assert_eq!(colormap(1.0), [128, 0, 0]);
        assert_eq!(colormap(0.5), [128, 255, 128]);
        assert_eq!(colormap(-3.0), colormap(0.0));
    }

    #[test]
    fn overlay_is_the_documented_blend() {
        let base = RgbImage::from_fn(3, 2, |x, y| Rgb([(x * 40) as u8, (y * 90) as u8, 200]));
        let attn: Vec<f64> = (0..6).map(|i| i as f64 / 5.0).collect();
        let o = overlay(&base, &attn);
        for y in 0..2 {
            for x in 0..3 {
                let c = colormap(attn[(y * 3 + x) as usize]);
                let b = base.get_pixel(x, y).0;
                for i in 0..3 {
                    let expect = (0.5 * c[i] as f64 + 0.5 * b[i] as f64).round() as u8;
                    assert_eq!(o.get_pixel(x, y).0[i], expect);
                }
            }
        }
    }

    #[test]
    fn overlays_keep_original_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(40, 30, |x, y| Rgb([(x * 6) as u8, (y * 8) as u8, 90]));
        let p = dir.path().join("in.png");
        img.save(&p).unwrap();
        let missing = dir.path().join("missing.png");
        let model = CrackSegmenter::new(ModelConfig {
            sae: SaeConfig { embed_dim: 8, ..Default::default() },
            dat: DatConfig { num_blocks: 1, heads: 2, ..Default::default() },
            ..Default::default()
        })
        .unwrap();
        let out = dir.path().join("out");
        let s = export_attention(&model, &[p, missing.clone()], [32, 32], &out).unwrap();
        assert_eq!(s.written.len(), 4);
        assert_eq!(s.skipped.len(), 1);
        for f in &s.written {
            let d = image::open(f).unwrap();
            assert_eq!((d.width(), d.height()), (40, 30));
        }
        assert!(export_attention(&model, &[missing], [32, 32], &out).is_err());
    }
}
