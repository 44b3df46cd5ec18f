//! Segmentation metrics over binary masks and their dataset aggregates.

mod distance;
pub mod stats;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use distance::squared_distance_transform;

use crate::error::{Error, Result};

/// Schema version of the per-image CSV and the JSON summary.
pub const REPORT_SCHEMA: u32 = 1;

/// Binary `h x w` grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Metric(format!("mask data has {} cells, expected {h}x{w}", data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![false; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Self { h, w, data }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn not(&self) -> Self {
        Self { h: self.h, w: self.w, data: self.data.iter().map(|v| !v).collect() }
    }

    /// Coordinates `(y, x)` of set cells.
    pub fn points(&self) -> Vec<(usize, usize)> {
        (0..self.data.len()).filter(|&i| self.data[i]).map(|i| (i / self.w, i % self.w)).collect()
    }
}

fn check_dims(p: &Mask, g: &Mask) -> Result<()> {
    if p.dims() != g.dims() {
        return Err(Error::Metric(format!("mask dimensions differ: {:?} vs {:?}", p.dims(), g.dims())));
    }
    Ok(())
}

/// Intersection, union, |P|, |G| for the positive class.
fn counts(p: &Mask, g: &Mask) -> (usize, usize, usize, usize) {
    let (mut inter, mut union, mut np, mut ng) = (0, 0, 0, 0);
    for (&a, &b) in p.data.iter().zip(&g.data) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
        np += a as usize;
        ng += b as usize;
    }
    (inter, union, np, ng)
}

fn iou_from(inter: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean of the crack-class and background-class IoU. A class absent from
/// both masks scores 1.
pub fn miou(p: &Mask, g: &Mask) -> Result<f64> {
    check_dims(p, g)?;
    let n = p.data.len();
    let (inter, union, _, _) = counts(p, g);
    // background: intersection is everything outside the union
    let bg_inter = n - union;
    let bg_union = n - inter;
    Ok((iou_from(inter, union) + iou_from(bg_inter, bg_union)) / 2.0)
}

/// Crack-class IoU alone.
pub fn iou(p: &Mask, g: &Mask) -> Result<f64> {
    check_dims(p, g)?;
    let (inter, union, _, _) = counts(p, g);
    Ok(iou_from(inter, union))
}

/// Crack-class Dice; both empty scores 1.
pub fn dice(p: &Mask, g: &Mask) -> Result<f64> {
    check_dims(p, g)?;
    let (inter, _, np, ng) = counts(p, g);
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XorScore {
    /// Disagreeing pixels over all pixels.
    pub fraction: f64,
    /// Disagreeing pixels over ground-truth crack pixels; undefined when the
    /// ground truth is empty.
    pub ratio: Option<f64>,
}

pub fn xor_metric(p: &Mask, g: &Mask) -> Result<XorScore> {
    check_dims(p, g)?;
    let diff = p.data.iter().zip(&g.data).filter(|(a, b)| a != b).count();
    let ng = g.count();
    Ok(XorScore {
        fraction: diff as f64 / p.data.len() as f64,
        ratio: (ng > 0).then(|| diff as f64 / ng as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HausdorffScore {
    /// Pixel units.
    pub raw: f64,
    /// Divided by the image diagonal.
    pub normalized: f64,
    /// Exactly one of the masks was empty; the score is then the maximal
    /// value (the diagonal).
    pub one_empty: bool,
}

/// Symmetric Hausdorff distance between the crack-pixel sets.
///
/// Both empty gives 0; exactly one empty gives the image diagonal.
pub fn hausdorff(p: &Mask, g: &Mask) -> Result<HausdorffScore> {
    check_dims(p, g)?;
    let (h, w) = p.dims();
    let diag = ((h * h + w * w) as f64).sqrt();
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return Ok(HausdorffScore { raw: 0.0, normalized: 0.0, one_empty: false }),
        (true, false) | (false, true) => return Ok(HausdorffScore { raw: diag, normalized: 1.0, one_empty: true }),
        _ => {}
    }
    let directed = |from: &Mask, to: &Mask| -> f64 {
        let dt = squared_distance_transform(to);
        from.data.iter().zip(&dt).filter(|(&on, _)| on).map(|(_, &d)| d).fold(0.0, f64::max)
    };
    let raw = directed(p, g).max(directed(g, p)).sqrt();
    Ok(HausdorffScore { raw, normalized: raw / diag, one_empty: false })
}

/// Metrics of one predicted mask against its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub miou: f64,
    pub dice: f64,
    pub xor: f64,
    pub xor_ratio: Option<f64>,
    pub hd: f64,
    pub hd_raw: f64,
    pub pred_empty: bool,
    pub gt_empty: bool,
}

impl ImageMetrics {
    pub fn compute(name: impl Into<String>, p: &Mask, g: &Mask) -> Result<Self> {
        let x = xor_metric(p, g)?;
        let hd = hausdorff(p, g)?;
        Ok(Self {
            name: name.into(),
            miou: miou(p, g)?,
            dice: dice(p, g)?,
            xor: x.fraction,
            xor_ratio: x.ratio,
            hd: hd.normalized,
            hd_raw: hd.raw,
            pred_empty: p.is_empty(),
            gt_empty: g.is_empty(),
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.pred_empty || self.gt_empty
    }
}

/// Mean and sample standard deviation; the deviation needs two values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        // shifted by the first value so constant inputs give an exact mean
        let first = values[0];
        let mean = first + values.iter().map(|v| v - first).sum::<f64>() / n as f64;
        let std = (n >= 2).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema: u32,
    pub images: usize,
    pub miou: MeanStd,
    pub dice: MeanStd,
    pub xor: MeanStd,
    /// Over images with a non-empty reference only.
    pub xor_ratio: Option<MeanStd>,
    pub hd: MeanStd,
    pub hd_raw: MeanStd,
    pub pred_empty: usize,
    pub gt_empty: usize,
}

pub fn aggregate(per_image: &[ImageMetrics]) -> Result<MetricReport> {
    if per_image.is_empty() {
        return Err(Error::Metric("cannot aggregate zero images".into()));
    }
    let col = |f: fn(&ImageMetrics) -> f64| -> MeanStd {
        MeanStd::of(&per_image.iter().map(f).collect::<Vec<_>>()).expect("non-empty")
    };
    let ratios: Vec<f64> = per_image.iter().filter_map(|m| m.xor_ratio).collect();
    Ok(MetricReport {
        schema: REPORT_SCHEMA,
        images: per_image.len(),
        miou: col(|m| m.miou),
        dice: col(|m| m.dice),
        xor: col(|m| m.xor),
        xor_ratio: MeanStd::of(&ratios),
        hd: col(|m| m.hd),
        hd_raw: col(|m| m.hd_raw),
        pred_empty: per_image.iter().filter(|m| m.pred_empty).count(),
        gt_empty: per_image.iter().filter(|m| m.gt_empty).count(),
    })
}

pub fn write_csv(path: &Path, rows: &[ImageMetrics]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::Metric(format!("{}: {e}", path.display())))?;
    for r in rows {
        wtr.serialize(r).map_err(|e| Error::Metric(e.to_string()))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<ImageMetrics>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Metric(format!("{}: {e}", path.display())))?;
    rdr.deserialize().map(|r| r.map_err(|e| Error::Metric(e.to_string()))).collect()
}
