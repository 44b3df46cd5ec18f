//! Dataset discovery, the train/validation split, image decoding and
//! training-time augmentation.
//!
//! Layout: `<root>/images/*.{png,jpg,jpeg}` with optional
//! `<root>/masks/<stem>.<ext>` references used only for evaluation.

use std::cell::Cell;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::nnops::{resize_bilinear, Tensor};

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
/// Per-channel standardization constants applied after scaling to `[0, 1]`.
pub const NORM_MEAN: f32 = 0.5;
pub const NORM_STD: f32 = 0.5;
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub image_dir: String,
    pub mask_dir: String,
    /// `[height, width]`, both even.
    pub resize: [usize; 2],
    pub split_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            image_dir: "images".into(),
            mask_dir: "masks".into(),
            resize: [256, 256],
            split_seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn images_path(&self) -> PathBuf {
        self.root.join(&self.image_dir)
    }

    pub fn masks_path(&self) -> PathBuf {
        self.root.join(&self.mask_dir)
    }

    pub fn validate(&self) -> Result<(), String> {
        let [h, w] = self.resize;
        if h < 16 || w < 16 || h % 2 != 0 || w % 2 != 0 {
            return Err(format!("data.resize must be even and at least 16, got {h}x{w}"));
        }
        Ok(())
    }
}

fn has_image_ext(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files directly under `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && has_image_ext(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn stem(p: &Path) -> String {
    p.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn split_key(name: &str, seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    h.finalize().into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
}

/// Deterministic split: files are ranked by `sha256(seed, file name)` and
/// the first `round(0.8 n)` go to training. Both lists are sorted by name.
pub fn split_files(files: &[PathBuf], seed: u64) -> Split {
    let mut ranked: Vec<(&PathBuf, [u8; 32])> = files.iter().map(|p| (p, split_key(&file_name(p), seed))).collect();
    ranked.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    let n_train = (files.len() as f64 * TRAIN_FRACTION).round() as usize;
    let mut train: Vec<PathBuf> = ranked[..n_train].iter().map(|(p, _)| (*p).clone()).collect();
    let mut val: Vec<PathBuf> = ranked[n_train..].iter().map(|(p, _)| (*p).clone()).collect();
    train.sort();
    val.sort();
    Split { train, val }
}

pub fn load_split(spec: &DatasetSpec) -> Result<Split> {
    let dir = spec.images_path();
    let files = list_images(&dir)?;
    if files.len() < 5 {
        return Err(Error::Data(format!("{} holds {} images; at least 5 are needed for a split", dir.display(), files.len())));
    }
    Ok(split_files(&files, spec.split_seed))
}

/// Decodes an image to `[3, H, W]`: grayscale is replicated, values are
/// scaled to `[0, 1]`, bilinearly resized to `target`, then standardized
/// with [`NORM_MEAN`] / [`NORM_STD`].
pub fn load_image(path: &Path, target: [usize; 2]) -> Result<Tensor<f32>> {
    let [th, tw] = target;
    if th % 2 != 0 || tw % 2 != 0 {
        return Err(Error::Data(format!("target size {th}x{tw} must be even")));
    }
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    let planar = Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    });
    let resized = if (h, w) == (th, tw) { planar } else { resize_bilinear(&planar, th, tw) };
    Ok(resized.map(|v| (v - NORM_MEAN) / NORM_STD))
}

thread_local! {
    static MASK_BYTES_READ: Cell<u64> = const { Cell::new(0) };
}

/// Bytes of mask files read on the current thread since the last reset.
pub fn mask_bytes_read() -> u64 {
    MASK_BYTES_READ.with(Cell::get)
}

pub fn reset_mask_bytes_read() {
    MASK_BYTES_READ.with(|c| c.set(0));
}

/// Reference mask for an image, if one exists under the mask directory.
pub fn find_mask(spec: &DatasetSpec, image: &Path) -> Option<PathBuf> {
    let dir = spec.masks_path();
    let s = stem(image);
    IMAGE_EXTENSIONS.iter().map(|e| dir.join(format!("{s}.{e}"))).find(|p| p.is_file())
}

/// Loads a reference mask (any pixel above mid-gray is crack), resized by
/// nearest neighbour to `target`. Every byte read is counted.
pub fn load_mask(path: &Path, target: [usize; 2]) -> Result<Mask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    MASK_BYTES_READ.with(|c| c.set(c.get() + bytes.len() as u64));
    let img = image::load_from_memory(&bytes).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let gray = img.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let [th, tw] = target;
    Ok(Mask::from_fn(th, tw, |y, x| {
        let sy = ((y as f64 + 0.5) * h as f64 / th as f64) as usize;
        let sx = ((x as f64 + 0.5) * w as f64 / tw as f64) as usize;
        gray.get_pixel(sx.min(w - 1) as u32, sy.min(h - 1) as u32).0[0] > 127
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub enabled: bool,
    pub p_hflip: f64,
    pub p_vflip: f64,
    /// Rotation by a uniformly drawn multiple of 90° (only 0°/180° for
    /// non-square images, so dimensions are kept).
    pub right_angle_rotation: bool,
    /// Rotation by a uniform angle in `[0°, 360°)` with reflect padding,
    /// applied instead of the right-angle rotation.
    pub free_rotation: bool,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            p_hflip: 0.5,
            p_vflip: 0.5,
            right_angle_rotation: true,
            free_rotation: false,
            scale_min: 0.8,
            scale_max: 1.25,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<(), String> {
        for (k, p) in [("p_hflip", self.p_hflip), ("p_vflip", self.p_vflip)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("augment.{k} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(format!("augment scale range [{}, {}] is invalid", self.scale_min, self.scale_max));
        }
        Ok(())
    }
}

fn remap(img: &Tensor<f32>, f: impl Fn(usize, usize) -> (usize, usize)) -> Tensor<f32> {
    let [c, h, w] = img.dims3().expect("image is [C, H, W]");
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (sy, sx) = f(y, x);
        img.data()[(ch * h + sy) * w + sx]
    })
}

pub fn hflip(img: &Tensor<f32>) -> Tensor<f32> {
    let w = img.shape()[2];
    remap(img, |y, x| (y, w - 1 - x))
}

pub fn vflip(img: &Tensor<f32>) -> Tensor<f32> {
    let h = img.shape()[1];
    remap(img, |y, x| (h - 1 - y, x))
}

/// Counter-clockwise rotation by 90° of a square image.
pub fn rot90(img: &Tensor<f32>) -> Tensor<f32> {
    let [_, h, w] = img.dims3().expect("image is [C, H, W]");
    assert_eq!(h, w, "rot90 keeps dimensions only for square images");
    remap(img, |y, x| (x, w - 1 - y))
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

fn sample_bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (ly, lx) = ((y - y0) as f32, (x - x0) as f32);
    let at = |yy: f64, xx: f64| plane[reflect(yy as isize, h) * w + reflect(xx as isize, w)];
    (1.0 - ly) * ((1.0 - lx) * at(y0, x0) + lx * at(y0, x0 + 1.0)) + ly * ((1.0 - lx) * at(y0 + 1.0, x0) + lx * at(y0 + 1.0, x0 + 1.0))
}

/// Rotation about the centre by `angle` radians, reflect-padded.
pub fn rotate(img: &Tensor<f32>, angle: f64) -> Tensor<f32> {
    let [c, h, w] = img.dims3().expect("image is [C, H, W]");
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, co) = angle.sin_cos();
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let sy = cy + co * dy - s * dx;
        let sx = cx + s * dy + co * dx;
        sample_bilinear(&img.data()[ch * h * w..(ch + 1) * h * w], h, w, sy, sx)
    })
}

/// Rescales by `factor` and centre-crops or edge-pads back to the input size.
pub fn scale_jitter(img: &Tensor<f32>, factor: f64) -> Tensor<f32> {
    let [c, h, w] = img.dims3().expect("image is [C, H, W]");
    let nh = ((h as f64 * factor).round() as usize).max(1);
    let nw = ((w as f64 * factor).round() as usize).max(1);
    if (nh, nw) == (h, w) {
        return img.clone();
    }
    let scaled = resize_bilinear(img, nh, nw);
    let (oy, ox) = (nh as isize - h as isize, nw as isize - w as isize);
    let (oy, ox) = (oy.div_euclid(2), ox.div_euclid(2));
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let sy = (y as isize + oy).clamp(0, nh as isize - 1) as usize;
        let sx = (x as isize + ox).clamp(0, nw as isize - 1) as usize;
        scaled.data()[(ch * nh + sy) * nw + sx]
    })
}

/// Applies the configured random transforms; dimensions are preserved.
pub fn augment(img: &Tensor<f32>, spec: &AugmentationSpec, rng: &mut impl Rng) -> Tensor<f32> {
    if !spec.enabled {
        return img.clone();
    }
    let [_, h, w] = img.dims3().expect("image is [C, H, W]");
    let mut out = img.clone();
    if rng.gen_bool(spec.p_hflip) {
        out = hflip(&out);
    }
    if rng.gen_bool(spec.p_vflip) {
        out = vflip(&out);
    }
    if spec.free_rotation {
        out = rotate(&out, rng.gen_range(0.0..std::f64::consts::TAU));
    } else if spec.right_angle_rotation {
        let quarter_turns = rng.gen_range(0..4u32);
        if h == w {
            for _ in 0..quarter_turns {
                out = rot90(&out);
            }
        } else if quarter_turns % 2 == 1 {
            out = vflip(&hflip(&out));
        }
    }
    if spec.scale_max > spec.scale_min || spec.scale_min != 1.0 {
        let f = if spec.scale_max > spec.scale_min { rng.gen_range(spec.scale_min..=spec.scale_max) } else { spec.scale_min };
        out = scale_jitter(&out, f);
    }
    out
}

/// Deterministic stream for `(seed, epoch)`.
pub fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// Index batches for one epoch: a `(seed, epoch)`-keyed shuffle, chunked,
/// keeping the final partial batch.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(seed, epoch));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Decoded images kept in memory.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub paths: Vec<PathBuf>,
    pub images: Vec<Tensor<f32>>,
}

impl ImageSet {
    pub fn load(paths: &[PathBuf], target: [usize; 2]) -> Result<Self> {
        let images = paths.iter().map(|p| load_image(p, target)).collect::<Result<Vec<_>>>()?;
        Ok(Self { paths: paths.to_vec(), images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the listed images into `[B, 3, H, W]`, augmenting each with
    /// `rng` when `aug` is given.
    pub fn batch(&self, idx: &[usize], aug: Option<(&AugmentationSpec, &mut ChaCha8Rng)>) -> Result<Tensor<f32>> {
        let items: Vec<Tensor<f32>> = match aug {
            Some((spec, rng)) => idx.iter().map(|&i| augment(&self.images[i], spec, rng)).collect(),
            None => idx.iter().map(|&i| self.images[i].clone()).collect(),
        };
        let [c, h, w] = items[0].dims3()?;
        let flat: Vec<Tensor<f32>> = items.into_iter().map(|t| t.reshaped(&[1, c, h, w])).collect::<Result<_, _>>()?;
        Ok(Tensor::stack_batch(&flat)?)
    }
}
