//! Run configuration: one TOML file covering model, optimisation, data,
//! losses and augmentation. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentationSpec, DatasetSpec};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::trainer::PlateauConfig;
use crate::trainer::AdamWParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub improvement_threshold: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_grad_norm: f64,
    pub seed: u64,
    /// Score validation predictions against reference masks when present.
    pub val_metrics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            weight_decay: 1e-5,
            plateau_factor: 0.5,
            plateau_patience: 5,
            max_epochs: 500,
            early_stop_patience: 100,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            improvement_threshold: 1e-6,
            clip_grad_norm: 0.0,
            seed: 0,
            val_metrics: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        let pos = [
            ("lr0", self.lr0),
            ("plateau_factor", self.plateau_factor),
            ("eps", self.eps),
        ];
        for (k, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("train.{k} must be positive, got {v}"));
            }
        }
        if self.plateau_factor >= 1.0 {
            return Err("train.plateau_factor must be below 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("train.beta1 and train.beta2 must lie in [0, 1)".into());
        }
        if self.weight_decay < 0.0 || self.clip_grad_norm < 0.0 || self.improvement_threshold < 0.0 {
            return Err("train.weight_decay, clip_grad_norm and improvement_threshold must be non-negative".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err("train.batch_size, max_epochs and the patience values must be positive".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWParams {
        AdamWParams { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn plateau(&self) -> PlateauConfig {
        PlateauConfig {
            factor: self.plateau_factor,
            patience: self.plateau_patience,
            early_stop_patience: self.early_stop_patience,
            threshold: self.improvement_threshold,
        }
    }

    pub fn clip(&self) -> Option<f64> {
        (self.clip_grad_norm > 0.0).then_some(self.clip_grad_norm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
    pub loss: LossConfig,
    pub augment: AugmentationSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DatasetSpec::default(),
            loss: LossConfig::default(),
            augment: AugmentationSpec::default(),
        }
    }
}

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "CRACKSEG_OUTPUT_DIR";

/// Documentation of every configuration key, in print order.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("output_dir", "Directory for checkpoints, logs and summaries (overridden by CRACKSEG_OUTPUT_DIR)"),
    ("model.variant", "Module subset: full, v0, v1, v2, v3 or baseline-off"),
    ("model.seed", "Seed for parameter initialisation"),
    ("model.sae.embed_dim", "Embedding dimension D (at least 8, divisible by model.dat.heads)"),
    ("model.sae.in_channels", "Input image channels"),
    ("model.sae.activation", "Embedder nonlinearity: gelu or relu"),
    ("model.dat.directions", "Directional query/key kernels as [k_h, k_w] pairs with odd sides"),
    ("model.dat.num_blocks", "Attention blocks per scale"),
    ("model.dat.heads", "Attention heads; the softmax runs within each head's channels"),
    ("model.dat.share_weights_across_scales", "Use one block stack for all three scales"),
    ("model.dat.softmax_axis", "Normalization axis of the attention weights: channel or spatial"),
    ("model.dat.attention_residual", "Add the block input onto the attention output"),
    ("model.dat.ffn_ratio", "Hidden expansion of the depthwise feed-forward stage"),
    ("model.dat.activation", "Feed-forward nonlinearity: gelu or relu"),
    ("train.lr0", "Initial learning rate"),
    ("train.weight_decay", "Decoupled weight decay"),
    ("train.plateau_factor", "Learning-rate multiplier on a validation plateau"),
    ("train.plateau_patience", "Non-improving epochs before the learning rate is reduced"),
    ("train.max_epochs", "Epoch budget"),
    ("train.early_stop_patience", "Non-improving epochs before training stops"),
    ("train.batch_size", "Images per optimisation step"),
    ("train.beta1", "First-moment decay"),
    ("train.beta2", "Second-moment decay"),
    ("train.eps", "Denominator stabiliser of the adaptive step"),
    ("train.improvement_threshold", "Validation loss must drop below best minus this to count as improvement"),
    ("train.clip_grad_norm", "Global gradient-norm clip; 0 disables (5.0 is a reasonable debugging value)"),
    ("train.seed", "Seed for shuffling and augmentation"),
    ("train.val_metrics", "Score validation predictions against reference masks when available"),
    ("data.root", "Dataset root directory"),
    ("data.image_dir", "Image subdirectory of data.root"),
    ("data.mask_dir", "Reference-mask subdirectory of data.root (evaluation only)"),
    ("data.resize", "Working resolution [height, width]; both even"),
    ("data.split_seed", "Seed of the deterministic 80:20 train/validation split"),
    ("loss.lambda1", "Weight of the inter-scale consistency loss"),
    ("loss.lambda2", "Weight of the intra-scale consistency loss"),
    ("loss.intra_grid", "Side of the pooled token grid for the self-similarity matrix"),
    ("loss.stop_gradient_target", "Treat pseudo-targets as constants"),
    ("augment.enabled", "Apply training-time augmentation"),
    ("augment.p_hflip", "Horizontal flip probability"),
    ("augment.p_vflip", "Vertical flip probability"),
    ("augment.right_angle_rotation", "Rotate by a random multiple of 90 degrees"),
    ("augment.free_rotation", "Rotate by a random angle with reflect padding instead"),
    ("augment.scale_min", "Lower bound of the scale jitter factor"),
    ("augment.scale_max", "Upper bound of the scale jitter factor"),
];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            self.model.validate(),
            self.train.validate(),
            self.data.validate(),
            self.loss.validate(),
            self.augment.validate(),
        ];
        for c in checks {
            c.map_err(Error::Config)?;
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }
        let [h, w] = self.data.resize;
        let coarsest = if self.model.variant.multi_scale() { (h / 2).min(w / 2) } else { h.min(w) };
        if coarsest < self.loss.intra_grid {
            return Err(Error::Config(format!(
                "loss.intra_grid = {} exceeds the coarsest feature map side {coarsest} at data.resize = {h}x{w}",
                self.loss.intra_grid
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies the output-directory environment override, if set.
    pub fn apply_env(&mut self) {
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                self.output_dir = PathBuf::from(dir);
            }
        }
    }
}

/// Dotted paths of every leaf value in a TOML table.
pub fn leaf_keys(v: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaf_keys(child, &p, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

/// The configuration as TOML with a documentation comment above every key.
pub fn render_documented(cfg: &RunConfig) -> String {
    let value = toml::Value::try_from(cfg).expect("config serializes");
    let lookup = |path: &str| -> toml::Value {
        let mut cur = &value;
        for part in path.split('.') {
            cur = &cur[part];
        }
        cur.clone()
    };
    let mut out = String::from("# Run configuration. Every key is optional; the values below are the defaults.\n");
    let mut section = String::new();
    for (key, doc) in KEY_DOCS {
        let (sec, leaf) = key.rsplit_once('.').unwrap_or(("", key));
        if sec != section {
            out.push_str(&format!("\n[{sec}]\n"));
            section = sec.to_string();
        }
        let v = lookup(key);
        out.push_str(&format!("# {doc}\n{leaf} = {v}\n"));
    }
    out
}
