//! Attention-guided fusion: a sigmoid-gated weighted sum of the three scales.

use crate::layers::{Builder, Conv, Fwd, Init};
use crate::nnops::{ConvGeometry, NnError, Real, Tape, Tensor, Var};

/// Handles to the fusion intermediates.
#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub large_proj: Var,
    /// `[large_proj; small; fine]` along channels.
    pub concat: Var,
    /// `[B, 3, H, W]` sigmoid weights, channel `i` gating slab `i` of `concat`.
    pub attn: Var,
    pub fused: Var,
}

/// Fusion intermediates copied off the tape.
#[derive(Debug, Clone)]
pub struct FusionState {
    pub large_proj: Tensor<f64>,
    pub concat: Tensor<f64>,
    pub attn: Tensor<f64>,
    pub fused: Tensor<f64>,
}

impl FusionState {
    pub fn from_vars<T: Real>(tape: &Tape<T>, v: &FusionVars) -> Self {
        Self {
            large_proj: tape.value(v.large_proj).cast(),
            concat: tape.value(v.concat).cast(),
            attn: tape.value(v.attn).cast(),
            fused: tape.value(v.fused).cast(),
        }
    }

    /// Mean of each attention channel over batch and space, in concat order
    /// (large, small, fine). The three need not sum to one.
    pub fn weight_summary(&self) -> [f64; 3] {
        mean_attention(&self.attn)
    }
}

pub fn mean_attention<T: Real>(attn: &Tensor<T>) -> [f64; 3] {
    let [b, c, h, w] = attn.dims4().expect("attention map is rank 4");
    debug_assert_eq!(c, 3);
    let hw = h * w;
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for bi in 0..b {
            s += attn.data()[(bi * 3 + i) * hw..][..hw].iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
        }
        *o = s / (b * hw) as f64;
    }
    out
}

#[derive(Debug, Clone)]
pub struct Agf {
    /// Refit of the upsampled large scale, `D -> D`.
    pub proj: Conv,
    /// `3D -> 3` attention logits; zero-initialised so every weight starts at
    /// `sigmoid(0) = 0.5`.
    pub attn: Conv,
}

impl Agf {
    pub fn new(b: &mut Builder, d: usize) -> Self {
        let one = ConvGeometry::new(1, 0, 0);
        Self {
            proj: Conv::new(b, "agf.proj", d, d, (1, 1), one, Init::KaimingUniform),
            attn: Conv::new(b, "agf.attn", 3, 3 * d, (1, 1), one, Init::Zeros),
        }
    }

    /// Brings the large scale to full resolution (when `upsample`) and
    /// applies the projection.
    pub fn project_large<T: Real>(&self, f: &mut Fwd<T>, large: Var, upsample: bool) -> Result<Var, NnError> {
        let x = if upsample { f.tape.upsample_bilinear2x(large)? } else { large };
        self.proj.apply(f, x)
    }

    /// Fuses refined maps. `large` is at half resolution unless `upsample` is
    /// false, in which case it must already match `small` and `fine`.
    pub fn fuse<T: Real>(&self, f: &mut Fwd<T>, fine: Var, small: Var, large: Var, upsample: bool) -> Result<FusionVars, NnError> {
        let fs = f.tape.value(fine).dims4()?;
        let ss = f.tape.value(small).dims4()?;
        let ls = f.tape.value(large).dims4()?;
        let factor = if upsample { 2 } else { 1 };
        if fs != ss || ls[0] != fs[0] || ls[1] != fs[1] || ls[2] * factor != fs[2] || ls[3] * factor != fs[3] {
            return Err(NnError::Shape(format!(
                "fusion needs fine == small and large at 1/{factor} resolution, got fine {fs:?}, small {ss:?}, large {ls:?}"
            )));
        }
        let d = fs[1];
        let large_proj = self.project_large(f, large, upsample)?;
        let concat = f.tape.concat_channels(&[large_proj, small, fine])?;
        let logits = self.attn.apply(f, concat)?;
        let attn = f.tape.sigmoid(logits);
        let mut fused = None;
        for i in 0..3 {
            let slab = f.tape.slice_channels(concat, i * d, d)?;
            let gate = f.tape.slice_channels(attn, i, 1)?;
            let weighted = f.tape.mul_channel_broadcast(slab, gate)?;
            fused = Some(match fused {
                None => weighted,
                Some(acc) => f.tape.add(acc, weighted)?,
            });
        }
        Ok(FusionVars { large_proj, concat, attn, fused: fused.unwrap() })
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nnops::{NormMode, ParamStore};

    fn build(d: usize) -> (Agf, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let agf = Agf::new(&mut Builder { store: &mut store, rng: &mut rng }, d);
        (agf, store)
    }

    fn rand_map(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0))
    }

    fn run(agf: &Agf, store: &ParamStore<f32>, maps: [Tensor<f32>; 3]) -> FusionState {
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, store, NormMode::Eval);
        let [fine, small, large] = maps.map(|m| f.tape.constant(m));
        let v = agf.fuse(&mut f, fine, small, large, true).unwrap();
        FusionState::from_vars(f.tape, &v)
    }

    #[test]
    fn shapes_and_neutral_start() {
        let (agf, store) = build(64);
        let s = run(&agf, &store, [rand_map(&[2, 64, 32, 32], 1), rand_map(&[2, 64, 32, 32], 2), rand_map(&[2, 64, 16, 16], 3)]);
        assert_eq!(s.fused.shape(), &[2, 64, 32, 32]);
        assert_eq!(s.attn.shape(), &[2, 3, 32, 32]);
        assert!(s.attn.data().iter().all(|&a| a == 0.5));
        assert_eq!(s.weight_summary(), [0.5; 3]);
        // fused = 0.5 * (large_proj + small + fine)
        let d = 64 * 32 * 32;
        for i in 0..s.fused.len() {
            let (bi, r) = (i / d, i % d);
            let at = |slab: usize| s.concat.data()[bi * 3 * d + slab * d + r];
            let expect = 0.5 * at(0) + 0.5 * at(1) + 0.5 * at(2);
            assert!((s.fused.data()[i] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn reconstruction_identity_is_bit_exact() {
        let (agf, mut store) = build(4);
        store.set(agf.attn.weight, rand_map(&[3, 12, 1, 1], 4)).unwrap();
        let s = run(&agf, &store, [rand_map(&[2, 4, 6, 6], 5), rand_map(&[2, 4, 6, 6], 6), rand_map(&[2, 4, 3, 3], 7)]);
        // recompute in f32 exactly as the forward pass does
        let (cat, attn): (Tensor<f32>, Tensor<f32>) = (s.concat.cast(), s.attn.cast());
        let (d, hw) = (4, 36);
        for bi in 0..2 {
            for ch in 0..d {
                for p in 0..hw {
                    let term = |slab: usize| cat.data()[(bi * 3 * d + slab * d + ch) * hw + p] * attn.data()[(bi * 3 + slab) * hw + p];
                    let expect = (term(0) + term(1)) + term(2);
                    assert_eq!(s.fused.data()[(bi * d + ch) * hw + p] as f32, expect);
                }
            }
        }
    }

    #[test]
    fn attention_slices_gate_matching_slabs() {
        // one-hot logits: channel i saturates high while the others saturate low
        let (agf, mut store) = build(2);
        for hot in 0..3 {
            store.set(agf.attn.weight, Tensor::zeros(&[3, 6, 1, 1])).unwrap();
            store.set(agf.attn.bias, Tensor::from_fn(&[3], |i| if i == hot { 40.0 } else { -40.0 })).unwrap();
            store.set(agf.proj.weight, Tensor::from_fn(&[2, 2, 1, 1], |i| if i == 0 || i == 3 { 1.0 } else { 0.0 })).unwrap();
            let fine = Tensor::full(&[1, 2, 4, 4], 1.0f32);
            let small = Tensor::full(&[1, 2, 4, 4], 10.0f32);
            let large = Tensor::full(&[1, 2, 2, 2], 100.0f32);
            let s = run(&agf, &store, [fine, small, large]);
            let expect = [100.0, 10.0, 1.0][hot];
            assert!(s.fused.data().iter().all(|&v| (v - expect).abs() < 1e-3), "slot {hot}");
        }
    }

    #[test]
    fn batch_permutation_is_covariant() {
        let (agf, mut store) = build(3);
        store.set(agf.attn.weight, rand_map(&[3, 9, 1, 1], 8)).unwrap();
        let maps = [rand_map(&[2, 3, 4, 4], 9), rand_map(&[2, 3, 4, 4], 10), rand_map(&[2, 3, 2, 2], 11)];
        let swap = |t: &Tensor<f32>| Tensor::stack_batch(&[t.batch_slice(1, 1), t.batch_slice(0, 1)]).unwrap();
        let a = run(&agf, &store, maps.clone());
        let b = run(&agf, &store, maps.each_ref().map(swap));
        assert_eq!(swap(&a.fused.cast::<f32>()), b.fused.cast::<f32>());
    }

    #[test]
    fn mismatched_scales_are_rejected() {
        let (agf, store) = build(2);
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, NormMode::Eval);
        let fine = f.tape.constant(Tensor::<f32>::zeros(&[1, 2, 4, 4]));
        let large = f.tape.constant(Tensor::<f32>::zeros(&[1, 2, 4, 4]));
        assert!(agf.fuse(&mut f, fine, fine, large, true).is_err());
    }
}
