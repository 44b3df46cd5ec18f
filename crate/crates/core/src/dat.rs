//! Directional attention transformer: per-scale blocks that build queries and
//! keys with direction-shaped convolutions, normalize their elementwise
//! product into attention weights, and follow up with a depthwise
//! convolutional feed-forward stage.

use serde::{Deserialize, Serialize};

use crate::layers::{Builder, Conv, Fwd, Init, LayerNorm};
use crate::nnops::{Activation, ConvGeometry, NnError, Real, Tape, Tensor, Var};
use crate::sae::ScaleFeatures;

/// Axis over which the query-key product is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SoftmaxAxis {
    /// Over the channels of each head, independently at every pixel.
    #[default]
    Channel,
    /// Over all pixels, independently for every channel.
    Spatial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatConfig {
    /// `(k_h, k_w)` of each directional query/key kernel.
    pub directions: Vec<(usize, usize)>,
    pub num_blocks: usize,
    pub heads: usize,
    pub share_weights_across_scales: bool,
    pub softmax_axis: SoftmaxAxis,
    /// Adds the block input back onto the attention output. Disable for the
    /// literal formulation where only the feed-forward stage is residual.
    pub attention_residual: bool,
    pub ffn_ratio: usize,
    pub activation: Activation,
}

impl Default for DatConfig {
    fn default() -> Self {
        Self {
            directions: vec![(1, 3), (3, 1)],
            num_blocks: 2,
            heads: 4,
            share_weights_across_scales: false,
            softmax_axis: SoftmaxAxis::Channel,
            attention_residual: true,
            ffn_ratio: 2,
            activation: Activation::Gelu,
        }
    }
}

impl DatConfig {
    pub fn validate(&self, embed_dim: usize) -> Result<(), String> {
        if self.directions.is_empty() {
            return Err("dat.directions must list at least one kernel".into());
        }
        if let Some(&(kh, kw)) = self.directions.iter().find(|(kh, kw)| kh % 2 == 0 || kw % 2 == 0 || *kh == 0 || *kw == 0) {
            return Err(format!("dat.directions: kernel ({kh}, {kw}) must have odd, positive sides"));
        }
        if self.num_blocks == 0 {
            return Err("dat.num_blocks must be positive".into());
        }
        if self.heads == 0 || embed_dim % self.heads != 0 {
            return Err(format!("dat.heads = {} must divide embed_dim = {embed_dim}", self.heads));
        }
        if self.ffn_ratio == 0 {
            return Err("dat.ffn_ratio must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Direction {
    kernel: (usize, usize),
    q: Conv,
    k: Conv,
}

/// Handles to the intermediate values of one block, valid until the tape is
/// differentiated.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub q: Vec<Var>,
    pub k: Vec<Var>,
    pub a: Vec<Var>,
    pub c: Vec<Var>,
    pub v: Var,
}

#[derive(Debug, Clone)]
pub struct DatBlock {
    norm_in: LayerNorm,
    dirs: Vec<Direction>,
    value: Conv,
    out: Conv,
    norm_ffn: LayerNorm,
    ffn_expand: Conv,
    ffn_dw: Conv,
    ffn_project: Conv,
    heads: usize,
    axis: SoftmaxAxis,
    residual: bool,
    act: Activation,
}

impl DatBlock {
    pub fn new(b: &mut Builder, name: &str, d: usize, cfg: &DatConfig) -> Self {
        let dirs = cfg
            .directions
            .iter()
            .map(|&(kh, kw)| {
                let geom = ConvGeometry::same(kh, kw);
                let tag = format!("{name}.dir{kh}x{kw}");
                Direction {
                    kernel: (kh, kw),
                    q: Conv::new(b, &format!("{tag}.q"), d, d, (kh, kw), geom, Init::KaimingUniform),
                    k: Conv::new(b, &format!("{tag}.k"), d, d, (kh, kw), geom, Init::KaimingUniform),
                }
            })
            .collect::<Vec<_>>();
        let one = ConvGeometry::new(1, 0, 0);
        let hidden = d * cfg.ffn_ratio;
        Self {
            norm_in: LayerNorm::new(b, &format!("{name}.norm_in"), d),
            value: Conv::new(b, &format!("{name}.v"), d, d, (1, 1), one, Init::KaimingUniform),
            out: Conv::new(b, &format!("{name}.out"), d, d * dirs.len(), (1, 1), one, Init::KaimingUniform),
            dirs,
            norm_ffn: LayerNorm::new(b, &format!("{name}.norm_ffn"), d),
            ffn_expand: Conv::new(b, &format!("{name}.ffn.expand"), hidden, d, (1, 1), one, Init::KaimingUniform),
            ffn_dw: Conv::depthwise(b, &format!("{name}.ffn.dw"), hidden, 3),
            ffn_project: Conv::new(b, &format!("{name}.ffn.project"), d, hidden, (1, 1), one, Init::KaimingUniform),
            heads: cfg.heads,
            axis: cfg.softmax_axis,
            residual: cfg.attention_residual,
            act: cfg.activation,
        }
    }

    /// Output projection and last feed-forward convolution, the two weights
    /// whose zeroing turns the block into its residual path.
    pub fn residual_gates(&self) -> [&Conv; 2] {
        [&self.out, &self.ffn_project]
    }

    /// `A = softmax(Q ⊙ K / sqrt(D / heads))` within each head.
    fn attention<T: Real>(&self, tape: &mut Tape<T>, q: Var, k: Var) -> Result<Var, NnError> {
        let [b, d, h, w] = tape.value(q).dims4()?;
        let dh = d / self.heads;
        let s = tape.mul(q, k)?;
        let s = tape.affine(s, T::one() / T::from_usize(dh).unwrap().sqrt(), T::zero());
        let a = match self.axis {
            SoftmaxAxis::Channel => {
                let g = tape.reshape(s, &[b, self.heads, dh, h * w])?;
                tape.softmax(g, 2)?
            }
            SoftmaxAxis::Spatial => {
                let g = tape.reshape(s, &[b, d, h * w])?;
                tape.softmax(g, 2)?
            }
        };
        tape.reshape(a, &[b, d, h, w])
    }

    /// Refines tokens `[B, h*w, D]` laid out on an `h x w` grid.
    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, tokens: Var, h: usize, w: usize) -> Result<(Var, BlockTrace), NnError> {
        for dir in &self.dirs {
            let (kh, kw) = dir.kernel;
            if kh > h || kw > w {
                return Err(NnError::Shape(format!(
                    "directional kernel {kh}x{kw} is larger than the {h}x{w} feature map"
                )));
            }
        }
        let normed = self.norm_in.apply(f, tokens)?;
        let x = f.tape.to_spatial(normed, h, w)?;
        let v = self.value.apply(f, x)?;
        let mut trace = BlockTrace { q: vec![], k: vec![], a: vec![], c: vec![], v };
        for dir in &self.dirs {
            let q = dir.q.apply(f, x)?;
            let k = dir.k.apply(f, x)?;
            let a = self.attention(f.tape, q, k)?;
            let c = f.tape.mul(a, v)?;
            trace.q.push(q);
            trace.k.push(k);
            trace.a.push(a);
            trace.c.push(c);
        }
        let cat = if trace.c.len() == 1 { trace.c[0] } else { f.tape.concat_channels(&trace.c)? };
        let mut attn = self.out.apply(f, cat)?;
        if self.residual {
            let input = f.tape.to_spatial(tokens, h, w)?;
            attn = f.tape.add(attn, input)?;
        }
        let y = self.norm_ffn.apply_spatial(f, attn)?;
        let y = self.ffn_expand.apply(f, y)?;
        let y = self.ffn_dw.apply(f, y)?;
        let y = self.act.apply(f.tape, y);
        let y = self.ffn_project.apply(f, y)?;
        let out = f.tape.add(y, attn)?;
        Ok((f.tape.to_tokens(out)?, trace))
    }
}

/// Scale index into per-scale arrays: fine, small, large.
pub const SCALE_NAMES: [&str; 3] = ["fine", "small", "large"];

#[derive(Debug, Clone)]
pub struct Dat {
    /// Blocks per scale; with weight sharing all three entries are equal.
    scales: [Vec<DatBlock>; 3],
}

impl Dat {
    pub fn new(b: &mut Builder, d: usize, cfg: &DatConfig) -> Self {
        let mut stack = |tag: &str| -> Vec<DatBlock> {
            (0..cfg.num_blocks).map(|i| DatBlock::new(b, &format!("dat.{tag}.block{i}"), d, cfg)).collect()
        };
        let scales = if cfg.share_weights_across_scales {
            let shared = stack("shared");
            [shared.clone(), shared.clone(), shared]
        } else {
            [stack("fine"), stack("small"), stack("large")]
        };
        Self { scales }
    }

    pub fn blocks(&self, scale: usize) -> &[DatBlock] {
        &self.scales[scale]
    }

    /// Refines one spatial map `[B, D, H, W]` with the blocks of `scale`;
    /// returns the refined map and the trace of the final block.
    pub fn refine_scale<T: Real>(&self, f: &mut Fwd<T>, scale: usize, x: Var) -> Result<(Var, BlockTrace), NnError> {
        let [_, _, h, w] = f.tape.value(x).dims4()?;
        let mut tokens = f.tape.to_tokens(x)?;
        let mut last = None;
        for block in &self.scales[scale] {
            let (t, trace) = block.forward(f, tokens, h, w)?;
            tokens = t;
            last = Some(trace);
        }
        let out = f.tape.to_spatial(tokens, h, w)?;
        Ok((out, last.expect("at least one block per scale")))
    }

    pub fn refine<T: Real>(&self, f: &mut Fwd<T>, feats: &ScaleFeatures) -> Result<(ScaleFeatures, [BlockTrace; 3]), NnError> {
        let (fine, tf) = self.refine_scale(f, 0, feats.fine)?;
        let (small, ts) = self.refine_scale(f, 1, feats.small)?;
        let (large, tl) = self.refine_scale(f, 2, feats.large)?;
        Ok((ScaleFeatures { fine, small, large }, [tf, ts, tl]))
    }
}

/// Attention weights of the final block of one scale, copied off the tape.
#[derive(Debug, Clone)]
pub struct ScaleAttention {
    /// One `[B, D, H, W]` tensor per direction.
    pub a: Vec<Tensor<f64>>,
    pub heads: usize,
    pub axis: SoftmaxAxis,
}

impl ScaleAttention {
    pub fn from_trace<T: Real>(tape: &Tape<T>, trace: &BlockTrace, cfg: &DatConfig) -> Self {
        Self {
            a: trace.a.iter().map(|&v| tape.value(v).cast()).collect(),
            heads: cfg.heads,
            axis: cfg.softmax_axis,
        }
    }

    /// Per-image spatial map `[B, 1, H, W]` in `[0, 1]`.
    ///
    /// Within a head, channel-axis weights sum to one at every pixel, so their
    /// plain mean is constant; the head's map is therefore its peak weight
    /// (how sharply the head attends at that pixel). Spatial-axis weights are
    /// averaged over the head's channels. Head maps are averaged over heads
    /// and directions and min-max rescaled per image; a constant map rescales
    /// to all zeros.
    pub fn summary(&self) -> Result<Tensor<f64>, NnError> {
        let first = self.a.first().ok_or_else(|| NnError::Degenerate("no attention maps recorded".into()))?;
        let [b, d, h, w] = first.dims4()?;
        let hw = h * w;
        let dh = d / self.heads;
        let mut acc = vec![0.0f64; b * hw];
        for a in &self.a {
            for bi in 0..b {
                for head in 0..self.heads {
                    for p in 0..hw {
                        let vals = (0..dh).map(|c| a.data()[(bi * d + head * dh + c) * hw + p]);
                        let v = match self.axis {
                            SoftmaxAxis::Channel => vals.fold(f64::NEG_INFINITY, f64::max),
                            SoftmaxAxis::Spatial => vals.sum::<f64>() / dh as f64,
                        };
                        acc[bi * hw + p] += v;
                    }
                }
            }
        }
        let n = (self.a.len() * self.heads) as f64;
        for v in &mut acc {
            *v /= n;
        }
        min_max_per_image(&mut acc, b);
        Tensor::from_vec(&[b, 1, h, w], acc)
    }
}

/// Rescales each of the `b` equal chunks of `data` to `[0, 1]`; constant
/// chunks become zero.
pub fn min_max_per_image(data: &mut [f64], b: usize) {
    let n = data.len() / b;
    for chunk in data.chunks_mut(n) {
        let lo = chunk.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if range <= 1e-12 * hi.abs().max(1.0) {
            chunk.iter_mut().for_each(|v| *v = 0.0);
        } else {
            chunk.iter_mut().for_each(|v| *v = (*v - lo) / range);
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nnops::{NormMode, ParamStore};

    fn build(cfg: &DatConfig, d: usize, seed: u64) -> (Dat, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dat = Dat::new(&mut Builder { store: &mut store, rng: &mut rng }, d, cfg);
        (dat, store)
    }

    fn rand_map(shape: &[usize], seed: u64) -> Tensor<f32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0))
    }

    #[test]
    fn block_preserves_token_shape() {
        let (dat, store) = build(&DatConfig::default(), 64, 1);
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, NormMode::Train);
        let t = f.tape.constant(rand_map(&[1, 1024, 64], 2));
        let (y, trace) = dat.blocks(0)[0].forward(&mut f, t, 32, 32).unwrap();
        assert_eq!(f.tape.value(y).shape(), &[1, 1024, 64]);
        assert_eq!(trace.a.len(), 2);
    }

    #[test]
    fn attention_sums_to_one_per_head() {
        let cfg = DatConfig { heads: 2, ..Default::default() };
        let (dat, store) = build(&cfg, 8, 4);
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, NormMode::Train);
        let t = f.tape.constant(rand_map(&[2, 36, 8], 5).map(|v| 3.0 * v));
        let (_, trace) = dat.blocks(0)[0].forward(&mut f, t, 6, 6).unwrap();
        for &a in &trace.a {
            let a = f.tape.value(a);
            assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
            for bi in 0..2 {
                for head in 0..2 {
                    for p in 0..36 {
                        let s: f32 = (0..4).map(|c| a.data()[(bi * 8 + head * 4 + c) * 36 + p]).sum();
                        assert!((s - 1.0).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn zeroed_gates_reduce_block_to_identity() {
        let (dat, mut store) = build(&DatConfig::default(), 16, 6);
        let block = dat.blocks(1)[0].clone();
        for conv in block.residual_gates() {
            for id in conv.params() {
                let shape = store.get(id).shape().to_vec();
                store.set(id, Tensor::zeros(&shape)).unwrap();
            }
        }
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, NormMode::Train);
        let input = rand_map(&[2, 64, 16], 7);
        let t = f.tape.constant(input.clone());
        let (y, _) = block.forward(&mut f, t, 8, 8).unwrap();
        assert_eq!(f.tape.value(y), &input);
    }

    #[test]
    fn oversized_direction_kernel_is_rejected() {
        let cfg = DatConfig { directions: vec![(1, 5)], ..Default::default() };
        let (dat, store) = build(&cfg, 8, 8);
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, NormMode::Train);
        let t = f.tape.constant(rand_map(&[1, 12, 8], 9));
        let err = dat.blocks(0)[0].forward(&mut f, t, 3, 4).unwrap_err();
        assert!(err.to_string().contains("1x5"));
    }

    #[test]
    fn scales_are_isolated_without_sharing() {
        let cfg = DatConfig { num_blocks: 1, ..Default::default() };
        let (dat, store) = build(&cfg, 8, 10);
        let run = |store: &ParamStore<f32>| {
            let mut tape = Tape::new();
            let mut f = Fwd::new(&mut tape, store, NormMode::Train);
            let feats = ScaleFeatures {
                fine: f.tape.constant(rand_map(&[1, 8, 8, 8], 11)),
                small: f.tape.constant(rand_map(&[1, 8, 8, 8], 12)),
                large: f.tape.constant(rand_map(&[1, 8, 4, 4], 13)),
            };
            let (out, _) = dat.refine(&mut f, &feats).unwrap();
            out.as_array().map(|v| f.tape.value(v).clone())
        };
        let before = run(&store);
        let mut perturbed = store.clone();
        for (id, e) in store.iter() {
            if e.name.starts_with("dat.fine.") {
                perturbed.set(id, e.tensor.map(|v| v + 0.25)).unwrap();
            }
        }
        let after = run(&perturbed);
        assert_ne!(before[0], after[0]);
        assert_eq!(before[1], after[1]);
        assert_eq!(before[2], after[2]);
    }

    #[test]
    fn shared_weights_use_one_parameter_set() {
        let cfg = DatConfig { share_weights_across_scales: true, ..Default::default() };
        let (_, shared) = build(&cfg, 8, 14);
        let (_, separate) = build(&DatConfig::default(), 8, 14);
        assert_eq!(shared.len() * 3, separate.len());
    }

    #[test]
    fn refine_stays_finite_across_seeds() {
        let cfg = DatConfig { num_blocks: 1, ..Default::default() };
        for seed in 0..100 {
            let (dat, store) = build(&cfg, 8, seed);
            let mut tape = Tape::new();
            let mut f = Fwd::new(&mut tape, &store, NormMode::Train);
            let feats = ScaleFeatures {
                fine: f.tape.constant(rand_map(&[1, 8, 6, 6], seed + 1000).map(|v| 4.0 * v)),
                small: f.tape.constant(rand_map(&[1, 8, 6, 6], seed + 2000)),
                large: f.tape.constant(rand_map(&[1, 8, 4, 4], seed + 3000)),
            };
            let (out, _) = dat.refine(&mut f, &feats).unwrap();
            for v in out.as_array() {
                assert!(f.tape.value(v).is_finite(), "seed {seed}");
            }
        }
    }

    #[test]
    fn constant_attention_summarizes_to_zeros() {
        let s = ScaleAttention { a: vec![Tensor::full(&[2, 8, 3, 3], 0.25)], heads: 2, axis: SoftmaxAxis::Channel };
        assert!(s.summary().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn summary_spans_unit_interval() {
        let a = rand_map(&[2, 8, 5, 5], 15).cast::<f64>().map(|v| v.abs());
        let s = ScaleAttention { a: vec![a], heads: 4, axis: SoftmaxAxis::Channel }.summary().unwrap();
        for img in s.data().chunks(25) {
            let lo = img.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo.abs() < 1e-6 && (hi - 1.0).abs() < 1e-6);
        }
    }
}
