use super::tape::Backward;
use super::{NnError, Real, Tape, Tensor, Var};

/// Two-tap linear interpolation weights along one axis, `align_corners =
/// false` convention: output index `o` samples source coordinate
/// `(o + 0.5) * in / out - 0.5`, clamped to the valid range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

pub fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l = src - i0 as f64;
            Tap { i0, i1, w0: 1.0 - l, w1: l }
        })
        .collect()
}

/// Bilinear resize of every `[h, w]` plane in `x` (rank >= 2, last two axes
/// spatial).
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let shape = x.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes = x.len() / (h * w);
    let (ty, tx) = (bilinear_taps(h, out_h), bilinear_taps(w, out_w));
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for yt in &ty {
            let (wy0, wy1) = (T::lit(yt.w0), T::lit(yt.w1));
            for xt in &tx {
                let (wx0, wx1) = (T::lit(xt.w0), T::lit(xt.w1));
                let v = wy0 * (wx0 * src[yt.i0 * w + xt.i0] + wx1 * src[yt.i0 * w + xt.i1])
                    + wy1 * (wx0 * src[yt.i1 * w + xt.i0] + wx1 * src[yt.i1 * w + xt.i1]);
                out.push(v);
            }
        }
    }
    let mut new_shape = shape.to_vec();
    let n = new_shape.len();
    new_shape[n - 2] = out_h;
    new_shape[n - 1] = out_w;
    Tensor::from_vec(&new_shape, out).expect("resize shape")
}

struct UpsampleBackward {
    h: usize,
    w: usize,
}

impl<T: Real> Backward<T> for UpsampleBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let (h, w) = (self.h, self.w);
        let (oh, ow) = (2 * h, 2 * w);
        let (ty, tx) = (bilinear_taps(h, oh), bilinear_taps(w, ow));
        let planes = x.len() / (h * w);
        let mut dx = vec![T::zero(); x.len()];
        for p in 0..planes {
            let gp = &g.data()[p * oh * ow..(p + 1) * oh * ow];
            let dp = &mut dx[p * h * w..(p + 1) * h * w];
            for (oy, yt) in ty.iter().enumerate() {
                for (ox, xt) in tx.iter().enumerate() {
                    let gv = gp[oy * ow + ox];
                    let (wy0, wy1, wx0, wx1) = (T::lit(yt.w0), T::lit(yt.w1), T::lit(xt.w0), T::lit(xt.w1));
                    dp[yt.i0 * w + xt.i0] = dp[yt.i0 * w + xt.i0] + gv * wy0 * wx0;
                    dp[yt.i0 * w + xt.i1] = dp[yt.i0 * w + xt.i1] + gv * wy0 * wx1;
                    dp[yt.i1 * w + xt.i0] = dp[yt.i1 * w + xt.i0] + gv * wy1 * wx0;
                    dp[yt.i1 * w + xt.i1] = dp[yt.i1 * w + xt.i1] + gv * wy1 * wx1;
                }
            }
        }
        vec![Some(Tensor::from_vec(x.shape(), dx).unwrap())]
    }
}

/// Pooling window `[start, end)` of output cell `i` when `input` cells are
/// pooled into `output` cells.
fn adaptive_window(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

struct AdaptivePoolBackward {
    grid: usize,
}

impl<T: Real> Backward<T> for AdaptivePoolBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let [b, c, h, w] = x.dims4().unwrap();
        let gs = self.grid;
        let mut dx = vec![T::zero(); x.len()];
        for p in 0..b * c {
            for gy in 0..gs {
                let (y0, y1) = adaptive_window(gy, h, gs);
                for gx in 0..gs {
                    let (x0, x1) = adaptive_window(gx, w, gs);
                    let share = g.data()[(p * gs + gy) * gs + gx] / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let i = (p * h + y) * w + xx;
                            dx[i] = dx[i] + share;
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::from_vec(x.shape(), dx).unwrap())]
    }
}

struct GlobalPoolBackward;

impl<T: Real> Backward<T> for GlobalPoolBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let [_, _, h, w] = x.dims4().unwrap();
        let n = T::from_usize(h * w).unwrap();
        let dx: Vec<T> = (0..x.len()).map(|i| g.data()[i / (h * w)] / n).collect();
        vec![Some(Tensor::from_vec(x.shape(), dx).unwrap())]
    }
}

impl<T: Real> Tape<T> {
    /// Doubles height and width of `x [B,C,H,W]` by bilinear interpolation.
    pub fn upsample_bilinear2x(&mut self, x: Var) -> Result<Var, NnError> {
        let xv = self.value(x);
        let [_, _, h, w] = xv.dims4()?;
        let out = resize_bilinear(xv, 2 * h, 2 * w);
        Ok(self.push(&[x], out, UpsampleBackward { h, w }))
    }

    /// Mean over the spatial axes: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NnError> {
        let xv = self.value(x);
        let [b, c, h, w] = xv.dims4()?;
        let n = T::from_usize(h * w).unwrap();
        let out: Vec<T> = xv.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() / n).collect();
        let out = Tensor::from_vec(&[b, c], out)?;
        Ok(self.push(&[x], out, GlobalPoolBackward))
    }

    /// Adaptive average pooling to a `grid x grid` map.
    pub fn adaptive_avg_pool(&mut self, x: Var, grid: usize) -> Result<Var, NnError> {
        let xv = self.value(x);
        let [b, c, h, w] = xv.dims4()?;
        if grid == 0 || h < grid || w < grid {
            return Err(NnError::Shape(format!(
                "adaptive_avg_pool: {h}x{w} map cannot be pooled to a {grid}x{grid} grid"
            )));
        }
        let mut out = Vec::with_capacity(b * c * grid * grid);
        for p in 0..b * c {
            let plane = &xv.data()[p * h * w..(p + 1) * h * w];
            for gy in 0..grid {
                let (y0, y1) = adaptive_window(gy, h, grid);
                for gx in 0..grid {
                    let (x0, x1) = adaptive_window(gx, w, grid);
                    let mut s = T::zero();
                    for y in y0..y1 {
                        s = s + plane[y * w + x0..y * w + x1].iter().copied().sum::<T>();
                    }
                    out.push(s / T::from_usize((y1 - y0) * (x1 - x0)).unwrap());
                }
            }
        }
        let out = Tensor::from_vec(&[b, c, grid, grid], out)?;
        Ok(self.push(&[x], out, AdaptivePoolBackward { grid }))
    }
}
