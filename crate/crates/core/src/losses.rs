//! Self-supervision objectives: pseudo-label cross-entropy plus inter-scale
//! and intra-scale consistency.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::ForwardOutput;
use crate::nnops::{NnError, Real, Tape, Tensor, Var};
use crate::sae::ScaleFeatures;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside logs.
pub const PROB_CLAMP: f64 = 1e-7;
/// Lower bound on the norm product of the cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub intra_grid: usize,
    /// Treat pseudo-targets as constants. The threshold has zero derivative
    /// almost everywhere, so both settings yield the same gradients; the
    /// flag exists for configuration parity.
    pub stop_gradient_target: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda1: 0.1, lambda2: 0.1, intra_grid: 16, stop_gradient_target: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) || !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(format!("loss weights must be finite and non-negative, got {} and {}", self.lambda1, self.lambda2));
        }
        if self.intra_grid == 0 {
            return Err("loss.intra_grid must be positive".into());
        }
        Ok(())
    }
}

/// Global average pool of each scale: `[B, D]` per scale.
pub fn context_vectors<T: Real>(tape: &mut Tape<T>, feats: &ScaleFeatures) -> Result<[Var; 3], NnError> {
    Ok([
        tape.global_avg_pool(feats.fine)?,
        tape.global_avg_pool(feats.small)?,
        tape.global_avg_pool(feats.large)?,
    ])
}

/// Per-item `λ1 [(1 - cos(g_f, g_s)) + (1 - cos(g_s, g_l))]`, shape `[B]`.
pub fn inter_scale_loss<T: Real>(tape: &mut Tape<T>, g: [Var; 3], lambda1: f64) -> Result<Var, NnError> {
    let eps = T::lit(COSINE_EPS);
    let l = T::lit(lambda1);
    let fs = tape.cosine_similarity(g[0], g[1], eps)?;
    let sl = tape.cosine_similarity(g[1], g[2], eps)?;
    let a = tape.affine(fs, -l, l);
    let b = tape.affine(sl, -l, l);
    tape.add(a, b)
}

/// Row-stochastic token affinity `softmax_rows(X Xᵀ / sqrt(D))` of the map
/// pooled to `grid x grid` tokens: `[B, L, L]` with `L = grid²`.
pub fn self_similarity<T: Real>(tape: &mut Tape<T>, x: Var, grid: usize) -> Result<Var, NnError> {
    let [_, d, h, w] = tape.value(x).dims4()?;
    if h < grid || w < grid {
        return Err(NnError::Shape(format!(
            "a {h}x{w} feature map is smaller than the {grid}x{grid} self-similarity grid; lower loss.intra_grid"
        )));
    }
    let pooled = tape.adaptive_avg_pool(x, grid)?;
    let tokens = tape.to_tokens(pooled)?;
    let logits = tape.batched_gram(tokens, tokens, T::one() / T::from_usize(d).unwrap().sqrt())?;
    tape.softmax(logits, 2)
}

/// Per-item `λ2 · mean |A - I|`, shape `[B]`.
pub fn intra_scale_loss<T: Real>(tape: &mut Tape<T>, a: Var, lambda2: f64) -> Result<Var, NnError> {
    let dev = tape.identity_l1(a)?;
    Ok(tape.affine(dev, T::lit(lambda2), T::zero()))
}

/// `1` where the probability is at least one half.
pub fn pseudo_targets<T: Real>(probs: &Tensor<T>) -> Tensor<T> {
    let half = T::lit(0.5);
    probs.map(|o| if o >= half { T::one() } else { T::zero() })
}

/// Mean binary cross-entropy of the probabilities against their own
/// thresholded targets.
pub fn pseudo_ce_loss<T: Real>(tape: &mut Tape<T>, probs: Var) -> Result<Var, NnError> {
    let targets = pseudo_targets(tape.value(probs));
    let t = tape.constant(targets);
    tape.binary_cross_entropy(probs, t, T::lit(PROB_CLAMP))
}

/// `ce + mean_b(inter_b + intra_b)`.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, ce: Var, inter: Var, intra: Var) -> Result<Var, NnError> {
    let per_item = tape.add(inter, intra)?;
    let consistency = tape.mean(per_item);
    tape.add(ce, consistency)
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub ce: Var,
    /// `[B]`
    pub inter: Var,
    /// `[B]`, averaged over the three scales.
    pub intra: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    /// Batch means.
    pub inter: f64,
    pub intra: f64,
    pub total: f64,
    pub inter_per_item: Vec<f64>,
    pub intra_per_item: Vec<f64>,
}

impl LossVars {
    pub fn report<T: Real>(&self, tape: &Tape<T>) -> LossReport {
        let inter = tape.value(self.inter).to_f64_vec();
        let intra = tape.value(self.intra).to_f64_vec();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        LossReport {
            ce: tape.value(self.ce).item().to_f64().unwrap(),
            inter: mean(&inter),
            intra: mean(&intra),
            total: tape.value(self.total).item().to_f64().unwrap(),
            inter_per_item: inter,
            intra_per_item: intra,
        }
    }
}

/// Records all loss terms for a forward pass.
pub fn compute<T: Real>(tape: &mut Tape<T>, out: &ForwardOutput<T>, cfg: &LossConfig) -> Result<LossVars, NnError> {
    let g = context_vectors(tape, &out.features)?;
    let inter = inter_scale_loss(tape, g, cfg.lambda1)?;
    let mut intra = None;
    for x in out.features.as_array() {
        let a = self_similarity(tape, x, cfg.intra_grid)?;
        let l = intra_scale_loss(tape, a, cfg.lambda2)?;
        intra = Some(match intra {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let intra = tape.affine(intra.unwrap(), T::one() / T::lit(3.0), T::zero());
    let ce = pseudo_ce_loss(tape, out.probs)?;
    let total = total_loss(tape, ce, inter, intra)?;
    Ok(LossVars { ce, inter, intra, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecs(tape: &mut Tape<f64>, rows: [&[f64]; 3]) -> [Var; 3] {
        rows.map(|r| tape.constant(Tensor::from_vec(&[1, r.len()], r.to_vec()).unwrap()))
    }

    #[test]
    fn inter_zero_for_equal_and_two_for_orthogonal() {
        let mut tape = Tape::new();
        let g = vecs(&mut tape, [&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]]);
        let l = inter_scale_loss(&mut tape, g, 0.7).unwrap();
        assert!(tape.value(l).data()[0].abs() < 1e-12);
        let g = vecs(&mut tape, [&[1.0, 0.0], &[0.0, 1.0], &[2.0, 0.0]]);
        let l = inter_scale_loss(&mut tape, g, 1.0).unwrap();
        assert_eq!(tape.value(l).data()[0], 2.0);
    }

    #[test]
    fn inter_is_scale_invariant() {
        let mut tape = Tape::new();
        let g = vecs(&mut tape, [&[0.3, -1.0, 2.0], &[1.0, 0.5, 0.2], &[-0.4, 0.1, 0.9]]);
        let a = inter_scale_loss(&mut tape, g, 0.5).unwrap();
        let g = vecs(&mut tape, [&[3.0, -10.0, 20.0], &[1.0, 0.5, 0.2], &[-0.04, 0.01, 0.09]]);
        let b = inter_scale_loss(&mut tape, g, 0.5).unwrap();
        assert!((tape.value(a).data()[0] - tape.value(b).data()[0]).abs() < 1e-6);
    }

    #[test]
    fn intra_closed_forms() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::from_fn(&[1, 4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }));
        let l = intra_scale_loss(&mut tape, eye, 1.0).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
        let uniform = tape.constant(Tensor::full(&[1, 4, 4], 0.25));
        let l = intra_scale_loss(&mut tape, uniform, 1.0).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.375);
    }

    #[test]
    fn self_similarity_rows_and_symmetry() {
        // orthogonal equal-norm tokens: every row is identical in structure
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 4, 2, 2], |i| if i / 4 == i % 4 { 2.0 } else { 0.0 }));
        let a = self_similarity(&mut tape, x, 2).unwrap();
        let a = tape.value(a);
        let (diag, off) = (a.data()[0], a.data()[1]);
        // logits are 4/sqrt(4) = 2 on the diagonal and 0 elsewhere
        let e2 = 2f64.exp();
        assert!((diag - e2 / (e2 + 3.0)).abs() < 1e-12);
        for i in 0..4 {
            let row = &a.data()[i * 4..(i + 1) * 4];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (j, &v) in row.iter().enumerate() {
                assert!((v - if i == j { diag } else { off }).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn too_coarse_map_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 8, 8]));
        let err = self_similarity(&mut tape, x, 16).unwrap_err().to_string();
        assert!(err.contains("intra_grid"));
    }

    #[test]
    fn ce_closed_forms() {
        for (o, expect) in [(0.9, -(0.9f64).ln()), (0.5, 2f64.ln())] {
            let mut tape = Tape::new();
            let p = tape.leaf(Tensor::full(&[2, 3, 3], o), true);
            let l = pseudo_ce_loss(&mut tape, p).unwrap();
            assert!((tape.value(l).item() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn total_decomposes() {
        let mut tape = Tape::<f64>::new();
        let ce = tape.constant(Tensor::scalar(0.5));
        let inter = tape.constant(Tensor::from_vec(&[2], vec![0.2, 0.4]).unwrap());
        let intra = tape.constant(Tensor::from_vec(&[2], vec![0.1, 0.3]).unwrap());
        let t = total_loss(&mut tape, ce, inter, intra).unwrap();
        assert!((tape.value(t).item() - 1.0).abs() < 1e-15);
        let zero = tape.constant(Tensor::zeros(&[2]));
        let z = tape.constant(Tensor::scalar(0.0));
        let t = total_loss(&mut tape, z, zero, zero).unwrap();
        assert_eq!(tape.value(t).item(), 0.0);
    }
}
