//! The assembled segmenter: embedder → directional attention → fusion →
//! decoder, with the ablation wirings.

mod checkpoint;
mod export;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use export::{attention_maps, colormap, export_attention, overlay, ExportSummary, OVERLAY_ALPHA};

use crate::agf::{Agf, FusionState, FusionVars};
use crate::dat::{BlockTrace, Dat, DatConfig, ScaleAttention};
use crate::error::{Error, Result};
use crate::layers::{Builder, Conv, Fwd, Init};
use crate::metrics::Mask;
use crate::nnops::{ConvGeometry, NnError, NormMode, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::sae::{Sae, SaeConfig, ScaleFeatures};

/// Module subsets.
///
/// * `full` — embedder, attention on every scale, fusion.
/// * `v0` — embedder, unweighted sum fusion.
/// * `v1` — embedder, attention, unweighted sum fusion.
/// * `v2` — embedder, fusion (no attention).
/// * `v3` — 3x3 embedding branch only, attention on it, fusion fed the one
///   map three times at full resolution.
/// * `baseline-off` — 3x3 embedding branch straight into the decoder.
///
/// The unweighted sum is `fine + small + proj(upsample(large))`, reusing the
/// fusion stage's large-scale projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Variant {
    #[default]
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "v0")]
    V0,
    #[serde(rename = "v1")]
    V1,
    #[serde(rename = "v2")]
    V2,
    #[serde(rename = "v3")]
    V3,
    #[serde(rename = "baseline-off")]
    BaselineOff,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::Full, Variant::V0, Variant::V1, Variant::V2, Variant::V3, Variant::BaselineOff];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::V0 => "v0",
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
            Variant::BaselineOff => "baseline-off",
        }
    }

    pub fn uses_dat(self) -> bool {
        matches!(self, Variant::Full | Variant::V1 | Variant::V3)
    }

    pub fn uses_agf(self) -> bool {
        matches!(self, Variant::Full | Variant::V2 | Variant::V3)
    }

    pub fn multi_scale(self) -> bool {
        !matches!(self, Variant::V3 | Variant::BaselineOff)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}; expected one of full, v0, v1, v2, v3, baseline-off"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub sae: SaeConfig,
    pub dat: DatConfig,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { sae: SaeConfig::default(), dat: DatConfig::default(), variant: Variant::Full, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.sae.embed_dim < 8 {
            return Err(format!("sae.embed_dim must be at least 8, got {}", self.sae.embed_dim));
        }
        if self.sae.in_channels == 0 {
            return Err("sae.in_channels must be positive".into());
        }
        self.dat.validate(self.sae.embed_dim)
    }
}

/// Everything a forward pass leaves behind on the tape.
#[derive(Debug)]
pub struct ForwardOutput<T: Real> {
    /// Crack probabilities `[B, H, W]`.
    pub probs: Var,
    /// Per-scale maps feeding the consistency losses: refined when the
    /// variant has attention, embedded otherwise; single-scale variants
    /// repeat their one map.
    pub features: ScaleFeatures,
    /// Final attention block of each scale, when that scale was refined.
    pub traces: [Option<BlockTrace>; 3],
    pub fusion: Option<FusionVars>,
    /// Batch-norm running statistics to commit after the step.
    pub running: Vec<(ParamId, Tensor<T>)>,
    pub dat_blocks_run: usize,
}

impl<T: Real> ForwardOutput<T> {
    /// Attention weights of each refined scale. Must be called before the
    /// tape is differentiated.
    pub fn attention_state(&self, tape: &Tape<T>, cfg: &DatConfig) -> Result<[Option<ScaleAttention>; 3]> {
        if self.traces.iter().all(Option::is_none) {
            return Err(Error::State("this variant has no attention stage".into()));
        }
        Ok(self.traces.each_ref().map(|t| t.as_ref().map(|t| ScaleAttention::from_trace(tape, t, cfg))))
    }

    pub fn fusion_state(&self, tape: &Tape<T>) -> Option<FusionState> {
        self.fusion.as_ref().map(|v| FusionState::from_vars(tape, v))
    }
}

/// Thresholded output of a forward pass.
#[derive(Debug, Clone)]
pub struct PredictionBatch {
    /// `[B, H, W]` probabilities.
    pub probs: Tensor<f32>,
    /// Binary masks, `1` where the probability is at least one half.
    pub masks: Vec<Mask>,
}

impl PredictionBatch {
    pub fn from_probs(probs: Tensor<f32>) -> Result<Self> {
        let [b, h, w] = probs.dims3()?;
        let masks = (0..b)
            .map(|i| Mask::from_fn(h, w, |y, x| probs.data()[(i * h + y) * w + x] >= 0.5))
            .collect();
        Ok(Self { probs, masks })
    }

    /// Self-training targets; identical to the masks by construction.
    pub fn pseudo_targets(&self) -> &[Mask] {
        &self.masks
    }
}

/// The segmenter: layer layout plus its parameters.
#[derive(Debug, Clone)]
pub struct CrackSegmenter<T: Real = f32> {
    cfg: ModelConfig,
    pub params: ParamStore<T>,
    sae: Sae,
    dat: Dat,
    agf: Agf,
    decoder: Conv,
}

impl CrackSegmenter<f32> {
    /// Builds every parameter of every stage, whatever the variant, so
    /// checkpoints share one layout; stages a variant skips are never read.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate().map_err(Error::Config)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut b = Builder { store: &mut store, rng: &mut rng };
        let d = cfg.sae.embed_dim;
        let sae = Sae::new(&mut b, &cfg.sae);
        let dat = Dat::new(&mut b, d, &cfg.dat);
        let agf = Agf::new(&mut b, d);
        let decoder = Conv::new(&mut b, "decoder", 1, d, (1, 1), ConvGeometry::new(1, 0, 0), Init::KaimingUniform);
        Ok(Self { cfg, params: store, sae, dat, agf, decoder })
    }
}

impl<T: Real> CrackSegmenter<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn decoder(&self) -> &Conv {
        &self.decoder
    }

    pub fn agf(&self) -> &Agf {
        &self.agf
    }

    /// Same layout with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> CrackSegmenter<U> {
        CrackSegmenter {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            sae: self.sae.clone(),
            dat: self.dat.clone(),
            agf: self.agf.clone(),
            decoder: self.decoder.clone(),
        }
    }

    /// Rewires to another variant, keeping parameters.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.cfg.variant = variant;
        self
    }

    /// Records a forward pass of `images [B, C, H, W]`.
    pub fn forward(&self, tape: &mut Tape<T>, images: &Tensor<T>, mode: NormMode) -> Result<ForwardOutput<T>> {
        let [_, _, h, w] = images.dims4()?;
        if h < 16 || w < 16 {
            return Err(NnError::Shape(format!("input must be at least 16x16, got {h}x{w}")).into());
        }
        let mut f = Fwd::new(tape, &self.params, mode);
        let x = f.tape.constant(images.clone());
        let variant = self.cfg.variant;
        let mut traces: [Option<BlockTrace>; 3] = [None, None, None];
        let mut fusion = None;
        let mut dat_blocks_run = 0;

        let (features, fused) = if variant.multi_scale() {
            let embedded = self.sae.embed(&mut f, x)?;
            let feats = if variant.uses_dat() {
                let (refined, t) = self.dat.refine(&mut f, &embedded)?;
                traces = t.map(Some);
                dat_blocks_run = 3 * self.cfg.dat.num_blocks;
                refined
            } else {
                embedded
            };
            let fused = if variant.uses_agf() {
                let v = self.agf.fuse(&mut f, feats.fine, feats.small, feats.large, true)?;
                fusion = Some(v);
                v.fused
            } else {
                let proj = self.agf.project_large(&mut f, feats.large, true)?;
                let s = f.tape.add(feats.fine, feats.small)?;
                f.tape.add(s, proj)?
            };
            (feats, fused)
        } else {
            let mut single = self.sae.embed_small(&mut f, x)?;
            if variant.uses_dat() {
                let (refined, t) = self.dat.refine_scale(&mut f, 1, single)?;
                traces[1] = Some(t);
                dat_blocks_run = self.cfg.dat.num_blocks;
                single = refined;
            }
            let fused = if variant.uses_agf() {
                let v = self.agf.fuse(&mut f, single, single, single, false)?;
                fusion = Some(v);
                v.fused
            } else {
                single
            };
            (ScaleFeatures { fine: single, small: single, large: single }, fused)
        };

        let logits = self.decoder.apply(&mut f, fused)?;
        let probs = f.tape.sigmoid(logits);
        let [b, _, oh, ow] = f.tape.value(probs).dims4()?;
        let probs = f.tape.reshape(probs, &[b, oh, ow])?;
        let running = std::mem::take(&mut f.running);
        Ok(ForwardOutput { probs, features, traces, fusion, running, dat_blocks_run })
    }

    /// Applies batch-norm statistics produced by a train-mode pass.
    pub fn commit_running(&mut self, updates: Vec<(ParamId, Tensor<T>)>) -> Result<()> {
        for (id, t) in updates {
            self.params.set(id, t)?;
        }
        Ok(())
    }

    /// Eval-mode forward pass returning thresholded predictions.
    pub fn predict(&self, images: &Tensor<T>) -> Result<PredictionBatch> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, images, NormMode::Eval)?;
        PredictionBatch::from_probs(tape.value(out.probs).cast())
    }

    /// Names of the parameters a variant reads.
    pub fn params_read_by(&self, variant: Variant, h: usize, w: usize) -> Result<Vec<String>> {
        let model = self.clone().with_variant(variant);
        let mut tape = Tape::new();
        let images = Tensor::zeros(&[1, self.cfg.sae.in_channels, h, w]);
        model.forward(&mut tape, &images, NormMode::Eval)?;
        Ok(tape.params_used().iter().map(|&id| self.params.name(id).to_string()).collect())
    }
}
