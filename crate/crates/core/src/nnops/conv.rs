//! Cross-correlation convolutions (the deep-learning "convolution").

use super::tape::Backward;
use super::{NnError, Real, Tape, Tensor, Var};

/// Stride and zero padding of a 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, pad_h: usize, pad_w: usize) -> Self {
        Self { stride, pad_h, pad_w }
    }

    /// Stride 1 with padding that preserves the spatial size of an odd kernel.
    pub const fn same(kh: usize, kw: usize) -> Self {
        Self { stride: 1, pad_h: kh / 2, pad_w: kw / 2 }
    }

    /// `floor((in + 2 pad - k) / stride) + 1`, or `None` when the kernel
    /// does not fit.
    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.pad_h, w + 2 * self.pad_w);
        if self.stride == 0 || ph < kh || pw < kw {
            return None;
        }
        Some(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

#[derive(Clone, Copy)]
struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeometry,
}

impl ConvDims {
    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.geom.stride == 1
            && self.geom.pad_h == 0
            && self.geom.pad_w == 0
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Real>(x: &[T], d: &ConvDims, cols: &mut [T]) {
    let s = d.geom.stride;
    let p = d.p();
    for c in 0..d.cin {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = &mut cols[((c * d.kh + i) * d.kw + j) * p..][..p];
                for oy in 0..d.oh {
                    let y = (oy * s + i) as isize - d.geom.pad_h as isize;
                    let dst = &mut row[oy * d.ow..(oy + 1) * d.ow];
                    if y < 0 || y >= d.h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[y as usize * d.w..(y as usize + 1) * d.w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let x = (ox * s + j) as isize - d.geom.pad_w as isize;
                        *v = if x < 0 || x >= d.w as isize { T::zero() } else { src[x as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], d: &ConvDims, dx: &mut [T]) {
    let s = d.geom.stride;
    let p = d.p();
    for c in 0..d.cin {
        let plane = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = &cols[((c * d.kh + i) * d.kw + j) * p..][..p];
                for oy in 0..d.oh {
                    let y = (oy * s + i) as isize - d.geom.pad_h as isize;
                    if y < 0 || y >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * d.w..(y as usize + 1) * d.w];
                    for ox in 0..d.ow {
                        let x = (ox * s + j) as isize - d.geom.pad_w as isize;
                        if x >= 0 && x < d.w as isize {
                            dst[x as usize] = dst[x as usize] + row[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<(usize, usize, ConvDims), NnError> {
    let [batch, cin, h, wd] = x.dims4()?;
    let [cout, wcin, kh, kw] = w.dims4().map_err(|_| {
        NnError::Shape(format!("conv2d weight must be rank 4, got {:?}", w.shape()))
    })?;
    if wcin != cin {
        return Err(NnError::Shape(format!(
            "conv2d: input {:?} has {cin} channels but weight {:?} expects {wcin}",
            x.shape(),
            w.shape()
        )));
    }
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(NnError::Shape(format!(
                "conv2d: bias {:?} does not match weight {:?}",
                b.shape(),
                w.shape()
            )));
        }
    }
    let (oh, ow) = geom.output_size(h, wd, kh, kw).ok_or_else(|| {
        NnError::Shape(format!(
            "conv2d: kernel {:?} with {geom:?} does not fit input {:?}",
            w.shape(),
            x.shape()
        ))
    })?;
    Ok((batch, cout, ConvDims { cin, h, w: wd, kh, kw, oh, ow, geom }))
}

/// Forward convolution kernel, exposed for inference-only callers.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>, NnError> {
    let (batch, cout, d) = conv_dims(x, w, b, geom)?;
    let (k, p) = (d.k(), d.p());
    let in_per = d.cin * d.h * d.w;
    let mut out = vec![T::zero(); batch * cout * p];
    let mut cols = if d.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for bi in 0..batch {
        let xb = &x.data()[bi * in_per..(bi + 1) * in_per];
        let ob = &mut out[bi * cout * p..(bi + 1) * cout * p];
        if let Some(b) = b {
            for (co, row) in ob.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v = b.data()[co]);
            }
        }
        let src: &[T] = if d.is_pointwise() {
            xb
        } else {
            im2col(xb, &d, &mut cols);
            &cols
        };
        T::gemm(cout, k, p, T::one(), w.data(), k as isize, 1, src, p as isize, 1, T::one(), ob, p as isize, 1);
    }
    Tensor::from_vec(&[batch, cout, d.oh, d.ow], out)
}

struct Conv2dBackward {
    geom: ConvGeometry,
    has_bias: bool,
}

impl<T: Real> Backward<T> for Conv2dBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (batch, cout, d) = conv_dims(x, w, None, self.geom).expect("checked in forward");
        let (k, p) = (d.k(), d.p());
        let in_per = d.cin * d.h * d.w;
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); w.len()];
        let mut db = vec![T::zero(); cout];
        let mut cols = if d.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        let mut dcols = if d.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        for bi in 0..batch {
            let xb = &x.data()[bi * in_per..(bi + 1) * in_per];
            let gb = &g.data()[bi * cout * p..(bi + 1) * cout * p];
            if self.has_bias {
                for (co, row) in gb.chunks(p).enumerate() {
                    db[co] = db[co] + row.iter().copied().sum::<T>();
                }
            }
            let src: &[T] = if d.is_pointwise() {
                xb
            } else {
                im2col(xb, &d, &mut cols);
                &cols
            };
            // dW += G (cout x p) * cols^T (p x k)
            T::gemm(cout, p, k, T::one(), gb, p as isize, 1, src, 1, p as isize, T::one(), &mut dw, k as isize, 1);
            // dcols = W^T (k x cout) * G (cout x p)
            let dxb = &mut dx[bi * in_per..(bi + 1) * in_per];
            if d.is_pointwise() {
                T::gemm(k, cout, p, T::one(), w.data(), 1, k as isize, gb, p as isize, 1, T::zero(), dxb, p as isize, 1);
            } else {
                T::gemm(k, cout, p, T::one(), w.data(), 1, k as isize, gb, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
                col2im_add(&dcols, &d, dxb);
            }
        }
        let mut grads = vec![
            Some(Tensor::from_vec(x.shape(), dx).unwrap()),
            Some(Tensor::from_vec(w.shape(), dw).unwrap()),
        ];
        if self.has_bias {
            grads.push(Some(Tensor::from_vec(&[cout], db).unwrap()));
        }
        grads
    }
}

fn depthwise_dims<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<ConvDims, NnError> {
    let [_, c, h, wd] = x.dims4()?;
    let [wc, one, kh, kw] = w.dims4()?;
    if wc != c || one != 1 {
        return Err(NnError::Shape(format!(
            "depthwise_conv2d: input {:?} needs weight [{c}, 1, kh, kw], got {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if let Some(b) = b {
        if b.shape() != [c] {
            return Err(NnError::Shape(format!(
                "depthwise_conv2d: bias {:?} does not match {c} channels",
                b.shape()
            )));
        }
    }
    let (oh, ow) = geom.output_size(h, wd, kh, kw).ok_or_else(|| {
        NnError::Shape(format!("depthwise_conv2d: kernel {:?} does not fit {:?}", w.shape(), x.shape()))
    })?;
    Ok(ConvDims { cin: c, h, w: wd, kh, kw, oh, ow, geom })
}

struct DepthwiseBackward {
    geom: ConvGeometry,
    has_bias: bool,
}

impl<T: Real> Backward<T> for DepthwiseBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let d = depthwise_dims(x, w, None, self.geom).expect("checked in forward");
        let batch = x.shape()[0];
        let s = d.geom.stride;
        let (hw, ohw, kk) = (d.h * d.w, d.oh * d.ow, d.kh * d.kw);
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); w.len()];
        let mut db = vec![T::zero(); d.cin];
        for bi in 0..batch {
            for c in 0..d.cin {
                let plane = &x.data()[(bi * d.cin + c) * hw..][..hw];
                let dplane = &mut dx[(bi * d.cin + c) * hw..][..hw];
                let gplane = &g.data()[(bi * d.cin + c) * ohw..][..ohw];
                db[c] = db[c] + gplane.iter().copied().sum::<T>();
                for i in 0..d.kh {
                    for j in 0..d.kw {
                        let k = w.data()[c * kk + i * d.kw + j];
                        let (lo, hi) = tap_range(d.ow, s, d.geom.pad_w, j, d.w);
                        let mut acc = T::zero();
                        for oy in 0..d.oh {
                            let y = (oy * s + i) as isize - d.geom.pad_h as isize;
                            if y < 0 || y >= d.h as isize || lo >= hi {
                                continue;
                            }
                            let row = y as usize * d.w;
                            let grow = &gplane[oy * d.ow + lo..oy * d.ow + hi];
                            let x0 = row + lo * s + j - d.geom.pad_w;
                            if s == 1 {
                                let xs = &plane[x0..x0 + (hi - lo)];
                                acc = acc + grow.iter().zip(xs).map(|(&gv, &xv)| gv * xv).sum::<T>();
                                for (dv, &gv) in dplane[x0..x0 + (hi - lo)].iter_mut().zip(grow) {
                                    *dv = *dv + gv * k;
                                }
                            } else {
                                for (t, &gv) in grow.iter().enumerate() {
                                    acc = acc + gv * plane[x0 + t * s];
                                    dplane[x0 + t * s] = dplane[x0 + t * s] + gv * k;
                                }
                            }
                        }
                        dw[c * kk + i * d.kw + j] = dw[c * kk + i * d.kw + j] + acc;
                    }
                }
            }
        }
        let mut grads = vec![
            Some(Tensor::from_vec(x.shape(), dx).unwrap()),
            Some(Tensor::from_vec(w.shape(), dw).unwrap()),
        ];
        if self.has_bias {
            grads.push(Some(Tensor::from_vec(&[d.cin], db).unwrap()));
        }
        grads
    }
}

/// Output columns `[lo, hi)` whose kernel column `j` lands inside the input.
fn tap_range(ow: usize, stride: usize, pad: usize, j: usize, w: usize) -> (usize, usize) {
    let lo = if pad > j { (pad - j).div_ceil(stride) } else { 0 };
    let hi = if w + pad > j { ((w - 1 + pad - j) / stride + 1).min(ow) } else { 0 };
    (lo, hi.max(lo))
}

impl<T: Real> Tape<T> {
    /// 2-d cross-correlation of `x [B,Cin,H,W]` with `w [Cout,Cin,kh,kw]`
    /// plus an optional per-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var, NnError> {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(&inputs, out, Conv2dBackward { geom, has_bias: b.is_some() }))
    }

    /// Per-channel convolution with `w [C,1,kh,kw]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var, NnError> {
        let (xv, wv) = (self.value(x), self.value(w));
        let d = depthwise_dims(xv, wv, b.map(|b| self.value(b)), geom)?;
        let batch = xv.shape()[0];
        let s = geom.stride;
        let mut out = vec![T::zero(); batch * d.cin * d.oh * d.ow];
        let (hw, ohw, kk) = (d.h * d.w, d.oh * d.ow, d.kh * d.kw);
        for bi in 0..batch {
            for c in 0..d.cin {
                let plane = &xv.data()[(bi * d.cin + c) * hw..][..hw];
                let kern = &wv.data()[c * kk..(c + 1) * kk];
                let bias = b.map_or(T::zero(), |b| self.value(b).data()[c]);
                let dst = &mut out[(bi * d.cin + c) * ohw..][..ohw];
                dst.iter_mut().for_each(|v| *v = bias);
                for i in 0..d.kh {
                    for j in 0..d.kw {
                        let k = kern[i * d.kw + j];
                        let (lo, hi) = tap_range(d.ow, s, geom.pad_w, j, d.w);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..d.oh {
                            let y = (oy * s + i) as isize - geom.pad_h as isize;
                            if y < 0 || y >= d.h as isize {
                                continue;
                            }
                            let x0 = y as usize * d.w + lo * s + j - geom.pad_w;
                            let drow = &mut dst[oy * d.ow + lo..oy * d.ow + hi];
                            if s == 1 {
                                for (o, &xv) in drow.iter_mut().zip(&plane[x0..x0 + (hi - lo)]) {
                                    *o = *o + k * xv;
                                }
                            } else {
                                for (t, o) in drow.iter_mut().enumerate() {
                                    *o = *o + k * plane[x0 + t * s];
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[batch, d.cin, d.oh, d.ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(&inputs, out, DepthwiseBackward { geom, has_bias: b.is_some() }))
    }
}
