//! Elementwise arithmetic, layout changes and reductions.

use super::tape::Backward;
use super::{NnError, Real, Tape, Tensor, Var};

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), NnError> {
    if a.shape() != b.shape() {
        return Err(NnError::Shape(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

enum Binary {
    Add,
    Sub,
    Mul,
}

impl<T: Real> Backward<T> for Binary {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        match self {
            Binary::Add => vec![Some(g.clone()), Some(g.clone())],
            Binary::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Binary::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let da = Tensor::from_fn(a.shape(), |i| g.data()[i] * b.data()[i]);
                let db = Tensor::from_fn(a.shape(), |i| g.data()[i] * a.data()[i]);
                vec![Some(da), Some(db)]
            }
        }
    }
}

struct Affine<T> {
    scale: T,
}

impl<T: Real> Backward<T> for Affine<T> {
    fn backward(&self, _inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.map(|v| v * self.scale))]
    }
}

struct ChannelBroadcastMul;

impl<T: Real> Backward<T> for ChannelBroadcastMul {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (x, a) = (inputs[0], inputs[1]);
        let [b, c, h, w] = x.dims4().unwrap();
        let hw = h * w;
        let mut dx = vec![T::zero(); x.len()];
        let mut da = vec![T::zero(); a.len()];
        for bi in 0..b {
            let ap = &a.data()[bi * hw..(bi + 1) * hw];
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in 0..hw {
                    dx[off + i] = g.data()[off + i] * ap[i];
                    da[bi * hw + i] = da[bi * hw + i] + g.data()[off + i] * x.data()[off + i];
                }
            }
        }
        vec![
            Some(Tensor::from_vec(x.shape(), dx).unwrap()),
            Some(Tensor::from_vec(a.shape(), da).unwrap()),
        ]
    }
}

struct Concat {
    channels: Vec<usize>,
}

impl<T: Real> Backward<T> for Concat {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let [b, total, h, w] = g.dims4().unwrap();
        let hw = h * w;
        let mut start = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for (k, &c) in self.channels.iter().enumerate() {
            let mut d = Vec::with_capacity(b * c * hw);
            for bi in 0..b {
                d.extend_from_slice(&g.data()[(bi * total + start) * hw..(bi * total + start + c) * hw]);
            }
            grads.push(Some(Tensor::from_vec(inputs[k].shape(), d).unwrap()));
            start += c;
        }
        grads
    }
}

struct SliceChannels {
    start: usize,
}

impl<T: Real> Backward<T> for SliceChannels {
    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let [b, c, h, w] = x.dims4().unwrap();
        let len = out.shape()[1];
        let hw = h * w;
        let mut dx = vec![T::zero(); x.len()];
        for bi in 0..b {
            dx[(bi * c + self.start) * hw..(bi * c + self.start + len) * hw]
                .copy_from_slice(&g.data()[bi * len * hw..(bi + 1) * len * hw]);
        }
        vec![Some(Tensor::from_vec(x.shape(), dx).unwrap())]
    }
}

/// Swaps the last two axes of a rank-3 layout `[n, r, c] -> [n, c, r]`.
fn transpose_last2<T: Real>(data: &[T], n: usize, r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for k in 0..n {
        let src = &data[k * r * c..(k + 1) * r * c];
        let dst = &mut out[k * r * c..(k + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

struct Transpose {
    n: usize,
    r: usize,
    c: usize,
}

impl<T: Real> Backward<T> for Transpose {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let d = transpose_last2(g.data(), self.n, self.c, self.r);
        vec![Some(Tensor::from_vec(inputs[0].shape(), d).unwrap())]
    }
}

struct Reshape;

impl<T: Real> Backward<T> for Reshape {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone().reshaped(inputs[0].shape()).unwrap())]
    }
}

struct Reduce<T> {
    scale: T,
}

impl<T: Real> Backward<T> for Reduce<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::full(inputs[0].shape(), g.item() * self.scale))]
    }
}

struct BatchedGram<T> {
    scale: T,
}

impl<T: Real> Backward<T> for BatchedGram<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let [n, l, d] = a.dims3().unwrap();
        let m = b.shape()[1];
        let mut da = vec![T::zero(); a.len()];
        let mut db = vec![T::zero(); b.len()];
        for k in 0..n {
            let gk = &g.data()[k * l * m..(k + 1) * l * m];
            let ak = &a.data()[k * l * d..(k + 1) * l * d];
            let bk = &b.data()[k * m * d..(k + 1) * m * d];
            // dA = s * G (l x m) * B (m x d)
            T::gemm(l, m, d, self.scale, gk, m as isize, 1, bk, d as isize, 1, T::zero(), &mut da[k * l * d..(k + 1) * l * d], d as isize, 1);
            // dB = s * G^T (m x l) * A (l x d)
            T::gemm(m, l, d, self.scale, gk, 1, m as isize, ak, d as isize, 1, T::zero(), &mut db[k * m * d..(k + 1) * m * d], d as isize, 1);
        }
        vec![
            Some(Tensor::from_vec(a.shape(), da).unwrap()),
            Some(Tensor::from_vec(b.shape(), db).unwrap()),
        ]
    }
}

struct Cosine<T> {
    eps: T,
}

impl<T: Real> Cosine<T> {
    fn parts(&self, a: &[T], b: &[T]) -> (T, T, T) {
        let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
        let na2 = a.iter().map(|&x| x * x).sum::<T>();
        let nb2 = b.iter().map(|&x| x * x).sum::<T>();
        (dot, na2, nb2)
    }

    /// `max(sqrt(|a|²|b|²), eps)`; taking one root keeps `cos(a, a) = 1` exact.
    fn denom(&self, na2: T, nb2: T) -> T {
        (na2 * nb2).sqrt().max(self.eps)
    }
}

impl<T: Real> Backward<T> for Cosine<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let [n, d] = a.dims2().unwrap();
        let mut da = vec![T::zero(); a.len()];
        let mut db = vec![T::zero(); b.len()];
        for k in 0..n {
            let (ak, bk) = (&a.data()[k * d..(k + 1) * d], &b.data()[k * d..(k + 1) * d]);
            let (dot, na2, nb2) = self.parts(ak, bk);
            let p = self.denom(na2, nb2);
            let clamped = p <= self.eps;
            let gk = g.data()[k];
            let c = dot / (p * p * p);
            for j in 0..d {
                // d/da_j (dot / P) with P = sqrt(|a|²|b|²): b_j/P - dot a_j |b|² / P³
                let (ra, rb) = if clamped { (T::zero(), T::zero()) } else { (ak[j] * nb2 * c, bk[j] * na2 * c) };
                da[k * d + j] = gk * (bk[j] / p - ra);
                db[k * d + j] = gk * (ak[j] / p - rb);
            }
        }
        vec![
            Some(Tensor::from_vec(a.shape(), da).unwrap()),
            Some(Tensor::from_vec(b.shape(), db).unwrap()),
        ]
    }
}

struct IdentityL1;

impl<T: Real> Backward<T> for IdentityL1 {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let a = inputs[0];
        let [n, l, _] = a.dims3().unwrap();
        let inv = T::one() / T::from_usize(l * l).unwrap();
        let da = Tensor::from_fn(a.shape(), |idx| {
            let k = idx / (l * l);
            let (i, j) = ((idx / l) % l, idx % l);
            let target = if i == j { T::one() } else { T::zero() };
            let diff = a.data()[idx] - target;
            let sign = if diff > T::zero() {
                T::one()
            } else if diff < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            g.data()[k] * sign * inv
        });
        let _ = n;
        vec![Some(da)]
    }
}

struct BinaryCrossEntropy<T> {
    clamp: T,
}

impl<T: Real> Backward<T> for BinaryCrossEntropy<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (p, t) = (inputs[0], inputs[1]);
        let n = T::from_usize(p.len()).unwrap();
        let (lo, hi) = (self.clamp, T::one() - self.clamp);
        let dp = Tensor::from_fn(p.shape(), |i| {
            let o = p.data()[i];
            if o < lo || o > hi {
                return T::zero();
            }
            let tt = t.data()[i];
            g.item() * (-(tt / o) + (T::one() - tt) / (T::one() - o)) / n
        });
        // targets never receive gradient
        vec![Some(dp), None]
    }
}

impl<T: Real> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let out = Tensor::from_fn(av.shape(), |i| av.data()[i] + bv.data()[i]);
        Ok(self.push(&[a, b], out, Binary::Add))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("sub", av, bv)?;
        let out = Tensor::from_fn(av.shape(), |i| av.data()[i] - bv.data()[i]);
        Ok(self.push(&[a, b], out, Binary::Sub))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let out = Tensor::from_fn(av.shape(), |i| av.data()[i] * bv.data()[i]);
        Ok(self.push(&[a, b], out, Binary::Mul))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(&[x], out, Affine { scale })
    }

    /// `x [B,C,H,W] * a [B,1,H,W]`, broadcasting `a` over channels.
    pub fn mul_channel_broadcast(&mut self, x: Var, a: Var) -> Result<Var, NnError> {
        let (xv, av) = (self.value(x), self.value(a));
        let [b, c, h, w] = xv.dims4()?;
        if av.shape() != [b, 1, h, w] {
            return Err(NnError::Shape(format!(
                "mul_channel_broadcast: weight {:?} does not broadcast over {:?}",
                av.shape(),
                xv.shape()
            )));
        }
        let hw = h * w;
        let out = Tensor::from_fn(xv.shape(), |i| {
            let bi = i / (c * hw);
            xv.data()[i] * av.data()[bi * hw + i % hw]
        });
        Ok(self.push(&[x, a], out, ChannelBroadcastMul))
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let first = self.value(parts[0]).dims4()?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let [b, c, h, w] = self.value(p).dims4()?;
            if [b, h, w] != [first[0], first[2], first[3]] {
                return Err(NnError::Shape(format!(
                    "concat_channels: {:?} does not match {:?}",
                    self.value(p).shape(),
                    first
                )));
            }
            channels.push(c);
        }
        let total: usize = channels.iter().sum();
        let (b, hw) = (first[0], first[2] * first[3]);
        let mut out = Vec::with_capacity(b * total * hw);
        for bi in 0..b {
            for (&p, &c) in parts.iter().zip(&channels) {
                out.extend_from_slice(&self.value(p).data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let out = Tensor::from_vec(&[b, total, first[2], first[3]], out)?;
        Ok(self.push(parts, out, Concat { channels }))
    }

    /// Channels `[start, start + len)` of a rank-4 tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let xv = self.value(x);
        let [b, c, h, w] = xv.dims4()?;
        if len == 0 || start + len > c {
            return Err(NnError::Shape(format!(
                "slice_channels: [{start}, {}) out of range for {:?}",
                start + len,
                xv.shape()
            )));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(b * len * hw);
        for bi in 0..b {
            out.extend_from_slice(&xv.data()[(bi * c + start) * hw..(bi * c + start + len) * hw]);
        }
        let out = Tensor::from_vec(&[b, len, h, w], out)?;
        Ok(self.push(&[x], out, SliceChannels { start }))
    }

    /// `[B,D,H,W] -> [B,H*W,D]`; token `y * W + x` holds pixel `(y, x)`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var, NnError> {
        let [b, d, h, w] = self.value(x).dims4()?;
        let out = transpose_last2(self.value(x).data(), b, d, h * w);
        let out = Tensor::from_vec(&[b, h * w, d], out)?;
        Ok(self.push(&[x], out, Transpose { n: b, r: d, c: h * w }))
    }

    /// Inverse of [`Tape::to_tokens`] for a token grid of `h x w`.
    pub fn to_spatial(&mut self, t: Var, h: usize, w: usize) -> Result<Var, NnError> {
        let [b, l, d] = self.value(t).dims3()?;
        if l != h * w {
            return Err(NnError::Shape(format!("to_spatial: {l} tokens cannot form a {h}x{w} grid")));
        }
        let out = transpose_last2(self.value(t).data(), b, l, d);
        let out = Tensor::from_vec(&[b, d, h, w], out)?;
        Ok(self.push(&[t], out, Transpose { n: b, r: l, c: d }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(&[x], out, Reshape))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(&[x], out, Reduce { scale: T::one() })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::from_usize(xv.len()).unwrap();
        let out = Tensor::scalar(xv.sum() / n);
        self.push(&[x], out, Reduce { scale: T::one() / n })
    }

    /// Batched `scale * A B^T` for `A [N,L,D]`, `B [N,M,D]`.
    pub fn batched_gram(&mut self, a: Var, b: Var, scale: T) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        let [n, l, d] = av.dims3()?;
        let [nb, m, db] = bv.dims3()?;
        if nb != n || db != d {
            return Err(NnError::Shape(format!("batched_gram: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut out = vec![T::zero(); n * l * m];
        for k in 0..n {
            T::gemm(
                l, d, m, scale,
                &av.data()[k * l * d..], d as isize, 1,
                &bv.data()[k * m * d..], 1, d as isize,
                T::zero(), &mut out[k * l * m..], m as isize, 1,
            );
        }
        let out = Tensor::from_vec(&[n, l, m], out)?;
        Ok(self.push(&[a, b], out, BatchedGram { scale }))
    }

    /// Row-wise cosine similarity of `[N,D]` inputs; the norm product is
    /// bounded below by `eps`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: T) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("cosine_similarity", av, bv)?;
        let [n, d] = av.dims2()?;
        let op = Cosine { eps };
        let out: Vec<T> = (0..n)
            .map(|k| {
                let (dot, na2, nb2) = op.parts(&av.data()[k * d..(k + 1) * d], &bv.data()[k * d..(k + 1) * d]);
                dot / op.denom(na2, nb2)
            })
            .collect();
        let out = Tensor::from_vec(&[n], out)?;
        Ok(self.push(&[a, b], out, op))
    }

    /// Per-item mean absolute deviation from the identity of `A [N,L,L]`.
    pub fn identity_l1(&mut self, a: Var) -> Result<Var, NnError> {
        let av = self.value(a);
        let [n, l, l2] = av.dims3()?;
        if l != l2 {
            return Err(NnError::Shape(format!("identity_l1 needs square matrices, got {:?}", av.shape())));
        }
        let inv = T::one() / T::from_usize(l * l).unwrap();
        let out: Vec<T> = (0..n)
            .map(|k| {
                let m = &av.data()[k * l * l..(k + 1) * l * l];
                let s: T = m
                    .iter()
                    .enumerate()
                    .map(|(idx, &v)| if idx / l == idx % l { (v - T::one()).abs() } else { v.abs() })
                    .sum();
                s * inv
            })
            .collect();
        let out = Tensor::from_vec(&[n], out)?;
        Ok(self.push(&[a], out, IdentityL1))
    }

    /// Mean binary cross-entropy of probabilities against constant targets,
    /// probabilities clamped to `[clamp, 1 - clamp]`.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: Var, clamp: T) -> Result<Var, NnError> {
        let (pv, tv) = (self.value(probs), self.value(targets));
        same_shape("binary_cross_entropy", pv, tv)?;
        let (lo, hi) = (clamp, T::one() - clamp);
        let total: T = pv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(&o, &t)| {
                let o = o.max(lo).min(hi);
                -(t * o.ln() + (T::one() - t) * (T::one() - o).ln())
            })
            .sum();
        let out = Tensor::scalar(total / T::from_usize(pv.len()).unwrap());
        Ok(self.push(&[probs, targets], out, BinaryCrossEntropy { clamp }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnops::testutil::{check_input_grad, rand_tensor};

    #[test]
    fn token_order_is_row_major() {
        let mut tape = Tape::<f64>::new();
        // channel 0 holds 0..4, channel 1 holds 10..14
        let x = tape.constant(Tensor::from_vec(&[1, 2, 2, 2], vec![0., 1., 2., 3., 10., 11., 12., 13.]).unwrap());
        let t = tape.to_tokens(x).unwrap();
        assert_eq!(tape.value(t).shape(), &[1, 4, 2]);
        assert_eq!(tape.value(t).data(), &[0., 10., 1., 11., 2., 12., 3., 13.]);
        let back = tape.to_spatial(t, 2, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn structural_gradients() {
        let a = rand_tensor::<f64>(&[2, 3, 2, 2], 51);
        let b = rand_tensor::<f64>(&[2, 3, 2, 2], 52);
        let w = rand_tensor::<f64>(&[2, 1, 2, 2], 53);
        check_input_grad(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap(), 1e-3);
        check_input_grad(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]).unwrap(), 1e-3);
        check_input_grad(&[a.clone(), w], |t, v| t.mul_channel_broadcast(v[0], v[1]).unwrap(), 1e-3);
        check_input_grad(&[a.clone(), b.clone()], |t, v| {
            let c = t.concat_channels(&[v[0], v[1]]).unwrap();
            t.slice_channels(c, 2, 3).unwrap()
        }, 1e-3);
        check_input_grad(&[a.clone()], |t, v| t.to_tokens(v[0]).unwrap(), 1e-3);
        check_input_grad(&[rand_tensor(&[2, 6, 3], 54)], |t, v| t.to_spatial(v[0], 2, 3).unwrap(), 1e-3);
        check_input_grad(&[a.clone()], |t, v| t.mean(v[0]), 1e-3);
        check_input_grad(&[a], |t, v| t.affine(v[0], -2.5, 1.0), 1e-3);
    }

    #[test]
    fn gram_cosine_identity_gradients() {
        let a = rand_tensor::<f64>(&[2, 4, 3], 55);
        let b = rand_tensor::<f64>(&[2, 5, 3], 56);
        check_input_grad(&[a.clone(), b], |t, v| t.batched_gram(v[0], v[1], 0.7).unwrap(), 1e-3);
        check_input_grad(&[a.clone()], |t, v| t.batched_gram(v[0], v[0], 0.5).unwrap(), 1e-3);
        let x = rand_tensor::<f64>(&[3, 6], 57);
        let y = rand_tensor::<f64>(&[3, 6], 58);
        check_input_grad(&[x, y], |t, v| t.cosine_similarity(v[0], v[1], 1e-8).unwrap(), 1e-3);
        let m = rand_tensor::<f64>(&[2, 3, 3], 59).map(|v| v + 0.05);
        check_input_grad(&[m], |t, v| t.identity_l1(v[0]).unwrap(), 1e-3);
    }

    #[test]
    fn bce_gradient_on_probabilities() {
        let p = rand_tensor::<f64>(&[2, 5], 60).map(|v| 0.5 + 0.4 * v);
        let t = p.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let pv = tape.leaf(p.clone(), true);
        let tv = tape.constant(t.clone());
        let l = tape.binary_cross_entropy(pv, tv, 1e-7).unwrap();
        let g = tape.backward(l).unwrap();
        for i in 0..p.len() {
            let expect = (-(t.data()[i] / p.data()[i]) + (1.0 - t.data()[i]) / (1.0 - p.data()[i])) / 10.0;
            assert!((g.wrt(pv).unwrap().data()[i] - expect).abs() < 1e-12);
        }
    }
}
