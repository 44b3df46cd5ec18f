//! Deterministic synthetic crack images: dark meandering strokes on a noisy
//! background, with exact stroke masks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Mask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub count: usize,
    /// `[height, width]`, both even.
    pub size: [usize; 2],
    pub strokes_min: usize,
    pub strokes_max: usize,
    /// Stroke width range in pixels.
    pub width_min: f64,
    pub width_max: f64,
    /// Background grey level in `[0, 1]`.
    pub background: f64,
    /// Half-width of the uniform per-pixel texture noise.
    pub noise: f64,
    /// How much darker strokes are than the background level.
    pub contrast_gap: f64,
    /// Images whose mask fraction falls outside this range are redrawn.
    pub min_fraction: f64,
    pub max_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 64,
            size: [256, 256],
            strokes_min: 1,
            strokes_max: 3,
            width_min: 1.0,
            width_max: 4.0,
            background: 0.62,
            noise: 0.06,
            contrast_gap: 0.3,
            min_fraction: 0.005,
            max_fraction: 0.10,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let [h, w] = self.size;
        if h < 8 || w < 8 || h % 2 != 0 || w % 2 != 0 {
            return bad(format!("synthetic size must be even and at least 8, got {h}x{w}"));
        }
        if self.strokes_min > self.strokes_max {
            return bad("strokes_min exceeds strokes_max".into());
        }
        if !(self.width_min > 0.0 && self.width_min <= self.width_max) {
            return bad(format!("stroke width range [{}, {}] is invalid", self.width_min, self.width_max));
        }
        if self.noise < 0.0 || self.noise * 4.0 > self.contrast_gap {
            return bad(format!("noise {} must be at most a quarter of the contrast gap {}", self.noise, self.contrast_gap));
        }
        let lo = self.background - self.contrast_gap - self.noise;
        let hi = self.background + self.noise;
        if lo < 0.0 || hi > 1.0 {
            return bad("background, contrast and noise must keep pixel values within [0, 1]".into());
        }
        Ok(())
    }
}

/// One generated image (8-bit grey, row-major) and its stroke mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub pixels: Vec<u8>,
    pub mask: Mask,
}

impl SynthSample {
    pub fn fraction(&self) -> f64 {
        let (h, w) = self.mask.dims();
        self.mask.count() as f64 / (h * w) as f64
    }
}

const MAX_REDRAWS: u64 = 64;

struct Stroke {
    points: Vec<(f64, f64)>,
    width: f64,
}

/// A meandering polyline entering on one border and walking across the
/// image with a slowly drifting heading until it leaves.
fn draw_stroke(rng: &mut ChaCha8Rng, h: usize, w: usize, spec: &SynthSpec) -> Stroke {
    let (hf, wf) = (h as f64, w as f64);
    let side = rng.gen_range(0..4);
    let (mut y, mut x, base) = match side {
        0 => (0.0, rng.gen_range(0.0..wf), std::f64::consts::FRAC_PI_2),
        1 => (hf - 1.0, rng.gen_range(0.0..wf), -std::f64::consts::FRAC_PI_2),
        2 => (rng.gen_range(0.0..hf), 0.0, 0.0),
        _ => (rng.gen_range(0.0..hf), wf - 1.0, std::f64::consts::PI),
    };
    let mut heading = base + rng.gen_range(-0.6..0.6);
    let step = 2.0;
    let mut points = vec![(y, x)];
    let max_steps = 4 * (h + w);
    for _ in 0..max_steps {
        heading += rng.gen_range(-0.25..0.25);
        // stay roughly on course so strokes cross the image
        heading = base + (heading - base).clamp(-1.0, 1.0);
        y += step * heading.sin();
        x += step * heading.cos();
        points.push((y, x));
        if y < -1.0 || x < -1.0 || y > hf || x > wf {
            break;
        }
    }
    Stroke { points, width: rng.gen_range(spec.width_min..=spec.width_max) }
}

fn seg_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0) };
    let (qy, qx) = (a.0 + t * dy, a.1 + t * dx);
    (p.0 - qy).powi(2) + (p.1 - qx).powi(2)
}

fn rasterize(strokes: &[Stroke], h: usize, w: usize) -> Mask {
    let mut data = vec![false; h * w];
    for s in strokes {
        let r = s.width / 2.0;
        for seg in s.points.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let y0 = (a.0.min(b.0) - r).floor().max(0.0) as usize;
            let y1 = ((a.0.max(b.0) + r).ceil().max(0.0) as usize).min(h - 1);
            let x0 = (a.1.min(b.1) - r).floor().max(0.0) as usize;
            let x1 = ((a.1.max(b.1) + r).ceil().max(0.0) as usize).min(w - 1);
            if y0 > y1 || x0 > x1 {
                continue;
            }
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    if seg_dist2((yy as f64, xx as f64), a, b) <= r * r {
                        data[yy * w + xx] = true;
                    }
                }
            }
        }
    }
    Mask::new(h, w, data).expect("mask dims")
}

fn render(rng: &mut ChaCha8Rng, mask: &Mask, spec: &SynthSpec) -> Vec<u8> {
    mask.data()
        .iter()
        .map(|&on| {
            let base = if on { spec.background - spec.contrast_gap } else { spec.background };
            let v = base + rng.gen_range(-spec.noise..=spec.noise);
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

/// Image `index` of the corpus; depends only on `(spec, index)`.
pub fn generate_one(spec: &SynthSpec, index: u64) -> SynthSample {
    let [h, w] = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let mut attempt = 0;
    loop {
        let n = rng.gen_range(spec.strokes_min..=spec.strokes_max);
        let strokes: Vec<Stroke> = (0..n).map(|_| draw_stroke(&mut rng, h, w, spec)).collect();
        let mask = rasterize(&strokes, h, w);
        let frac = mask.count() as f64 / (h * w) as f64;
        attempt += 1;
        let in_range = n == 0 || (frac >= spec.min_fraction && frac <= spec.max_fraction);
        if in_range || attempt >= MAX_REDRAWS {
            let pixels = render(&mut rng, &mask, spec);
            return SynthSample { pixels, mask };
        }
    }
}

pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthSample>> {
    spec.validate()?;
    Ok((0..spec.count as u64).map(|i| generate_one(spec, i)).collect())
}

pub fn sample_name(index: usize) -> String {
    format!("synth_{index:04}.png")
}

/// Writes `images/` and `masks/` under `dir`.
pub fn write_corpus(spec: &SynthSpec, dir: &Path) -> Result<Vec<SynthSample>> {
    let samples = generate(spec)?;
    let (img_dir, mask_dir) = (dir.join("images"), dir.join("masks"));
    for d in [&img_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let [h, w] = spec.size;
    for (i, s) in samples.iter().enumerate() {
        let name = sample_name(i);
        let img = image::GrayImage::from_raw(w as u32, h as u32, s.pixels.clone()).expect("pixel count");
        let p = img_dir.join(&name);
        img.save(&p).map_err(|source| Error::Image { path: p.clone(), source })?;
        let m: Vec<u8> = s.mask.data().iter().map(|&v| if v { 255 } else { 0 }).collect();
        let p = mask_dir.join(&name);
        image::GrayImage::from_raw(w as u32, h as u32, m)
            .expect("pixel count")
            .save(&p)
            .map_err(|source| Error::Image { path: p.clone(), source })?;
    }
    Ok(samples)
}
