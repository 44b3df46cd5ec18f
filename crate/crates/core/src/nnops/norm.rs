use super::tape::Backward;
use super::{NnError, Real, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// New running statistics produced by a train-mode batch norm. The caller
/// decides whether to commit them.
#[derive(Debug, Clone)]
pub struct RunningUpdate<T: Real> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

struct BatchNormBackward<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

fn bn_dims<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize), NnError> {
    let [b, c, h, w] = x.dims4()?;
    Ok((b, c, h * w))
}

impl<T: Real> Backward<T> for BatchNormBackward<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (b, c, hw) = bn_dims(x).unwrap();
        let n = T::from_usize(b * hw).unwrap();
        let mut dx = vec![T::zero(); x.len()];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            let (mu, is) = (self.mean[ch], self.inv_std[ch]);
            let ga = gamma.data()[ch];
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (x.data()[i] - mu) * is;
                    sum_g = sum_g + g.data()[i];
                    sum_gx = sum_gx + g.data()[i] * xh;
                }
            }
            dgamma[ch] = sum_gx;
            dbeta[ch] = sum_g;
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    dx[i] = if self.batch_stats {
                        let xh = (x.data()[i] - mu) * is;
                        ga * is * (g.data()[i] - sum_g / n - xh * sum_gx / n)
                    } else {
                        ga * is * g.data()[i]
                    };
                }
            }
        }
        vec![
            Some(Tensor::from_vec(x.shape(), dx).unwrap()),
            Some(Tensor::from_vec(&[c], dgamma).unwrap()),
            Some(Tensor::from_vec(&[c], dbeta).unwrap()),
        ]
    }
}

struct LayerNormBackward<T> {
    inv_std: Vec<T>,
    mean: Vec<T>,
}

impl<T: Real> Backward<T> for LayerNormBackward<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let d = *x.shape().last().unwrap();
        let nd = T::from_usize(d).unwrap();
        let mut dx = vec![T::zero(); x.len()];
        let mut dgamma = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); d];
        for (row, (xr, gr)) in x.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
            let (mu, is) = (self.mean[row], self.inv_std[row]);
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for j in 0..d {
                let xh = (xr[j] - mu) * is;
                let dxh = gr[j] * gamma.data()[j];
                dgamma[j] = dgamma[j] + gr[j] * xh;
                dbeta[j] = dbeta[j] + gr[j];
                sum_dxh = sum_dxh + dxh;
                sum_dxh_xh = sum_dxh_xh + dxh * xh;
            }
            let dst = &mut dx[row * d..(row + 1) * d];
            for j in 0..d {
                let xh = (xr[j] - mu) * is;
                let dxh = gr[j] * gamma.data()[j];
                dst[j] = is * (dxh - sum_dxh / nd - xh * sum_dxh_xh / nd);
            }
        }
        vec![
            Some(Tensor::from_vec(x.shape(), dx).unwrap()),
            Some(Tensor::from_vec(&[d], dgamma).unwrap()),
            Some(Tensor::from_vec(&[d], dbeta).unwrap()),
        ]
    }
}

impl<T: Real> Tape<T> {
    /// Per-channel batch normalization of `x [B,C,H,W]`.
    ///
    /// Train mode normalizes with the biased batch variance and returns the
    /// momentum-updated running statistics (running variance uses the
    /// unbiased estimate). Eval mode normalizes with the running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        mode: NormMode,
    ) -> Result<(Var, Option<RunningUpdate<T>>), NnError> {
        let xv = self.value(x);
        let (b, c, hw) = bn_dims(xv)?;
        for (what, t) in [("gamma", self.value(gamma)), ("beta", self.value(beta)), ("running mean", running_mean), ("running var", running_var)] {
            if t.shape() != [c] {
                return Err(NnError::Shape(format!(
                    "batch_norm: {what} {:?} does not match {c} channels of {:?}",
                    t.shape(),
                    xv.shape()
                )));
            }
        }
        let eps = T::lit(NORM_EPS);
        let n = b * hw;
        let (mean, var) = match mode {
            NormMode::Train => {
                if n <= 1 {
                    return Err(NnError::Degenerate(format!(
                        "batch_norm in train mode needs more than one value per channel, got input {:?}",
                        xv.shape()
                    )));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let nt = T::from_usize(n).unwrap();
                for ch in 0..c {
                    let mut s = T::zero();
                    for bi in 0..b {
                        s = s + xv.data()[(bi * c + ch) * hw..][..hw].iter().copied().sum::<T>();
                    }
                    let mu = s / nt;
                    let mut v = T::zero();
                    for bi in 0..b {
                        for &xx in &xv.data()[(bi * c + ch) * hw..][..hw] {
                            v = v + (xx - mu) * (xx - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = v / nt;
                }
                (mean, var)
            }
            NormMode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    out[i] = gv[ch] * (xv.data()[i] - mean[ch]) * inv_std[ch] + bv[ch];
                }
            }
        }
        let update = (mode == NormMode::Train).then(|| {
            let m = T::lit(BN_MOMENTUM);
            let unbias = T::from_usize(n).unwrap() / T::from_usize(n - 1).unwrap();
            RunningUpdate {
                mean: Tensor::from_fn(&[c], |i| (T::one() - m) * running_mean.data()[i] + m * mean[i]),
                var: Tensor::from_fn(&[c], |i| (T::one() - m) * running_var.data()[i] + m * var[i] * unbias),
            }
        });
        let out = Tensor::from_vec(xv.shape(), out)?;
        let op = BatchNormBackward { mean, inv_std, batch_stats: mode == NormMode::Train };
        Ok((self.push(&[x, gamma, beta], out, op), update))
    }

    /// Normalization over the last axis followed by a per-feature affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NnError> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(NnError::Shape(format!(
                "layer_norm: affine parameters {:?}/{:?} do not match feature dim {d}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let eps = T::lit(NORM_EPS);
        let nd = T::from_usize(d).unwrap();
        let rows = xv.len() / d;
        let mut mean = Vec::with_capacity(rows);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); xv.len()];
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        for (r, row) in xv.data().chunks(d).enumerate() {
            let mu = row.iter().copied().sum::<T>() / nd;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nd;
            let is = T::one() / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = gv[j] * (row[j] - mu) * is + bv[j];
            }
            mean.push(mu);
            inv_std.push(is);
        }
        let out = Tensor::from_vec(xv.shape(), out)?;
        Ok(self.push(&[x, gamma, beta], out, LayerNormBackward { inv_std, mean }))
    }
}
