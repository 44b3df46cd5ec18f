//! Scale-adaptive embedder: three parallel convolution → activation →
//! batch-norm branches producing fine, small and large feature maps.

use serde::{Deserialize, Serialize};

use crate::layers::{BatchNorm, Builder, Conv, Fwd, Init};
use crate::nnops::{Activation, ConvGeometry, NnError, Real, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaeConfig {
    pub embed_dim: usize,
    pub in_channels: usize,
    pub activation: Activation,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self { embed_dim: 64, in_channels: 3, activation: Activation::Gelu }
    }
}

/// Feature maps of the three scales. `large` has half the spatial size.
#[derive(Debug, Clone, Copy)]
pub struct ScaleFeatures {
    pub fine: Var,
    pub small: Var,
    pub large: Var,
}

impl ScaleFeatures {
    pub fn as_array(&self) -> [Var; 3] {
        [self.fine, self.small, self.large]
    }
}

#[derive(Debug, Clone)]
struct Branch {
    conv: Conv,
    norm: BatchNorm,
}

impl Branch {
    fn apply<T: Real>(&self, f: &mut Fwd<T>, act: Activation, x: Var) -> Result<Var, NnError> {
        let y = self.conv.apply(f, x)?;
        // activation precedes the normalization in this embedder
        let y = act.apply(f.tape, y);
        self.norm.apply(f, y)
    }
}

#[derive(Debug, Clone)]
pub struct Sae {
    cfg: SaeConfig,
    fine: Branch,
    small: Branch,
    large: Branch,
}

impl Sae {
    pub fn new(b: &mut Builder, cfg: &SaeConfig) -> Self {
        let (d, c) = (cfg.embed_dim, cfg.in_channels);
        let mut branch = |name: &str, k: usize, geom: ConvGeometry| Branch {
            conv: Conv::new(b, &format!("sae.{name}.conv"), d, c, (k, k), geom, Init::KaimingUniform),
            norm: BatchNorm::new(b, &format!("sae.{name}.bn"), d),
        };
        let fine = branch("fine", 1, ConvGeometry::new(1, 0, 0));
        let small = branch("small", 3, ConvGeometry::new(1, 1, 1));
        let large = branch("large", 3, ConvGeometry::new(2, 1, 1));
        Self { cfg: cfg.clone(), fine, small, large }
    }

    fn check_input<T: Real>(&self, f: &Fwd<T>, image: Var) -> Result<(), NnError> {
        let [_, c, h, w] = f.tape.value(image).dims4()?;
        if c != self.cfg.in_channels {
            return Err(NnError::Shape(format!(
                "embedder expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(NnError::Shape(format!(
                "input height and width must be even, got {h}x{w}; resize to {}x{}",
                h + h % 2,
                w + w % 2
            )));
        }
        Ok(())
    }

    pub fn embed<T: Real>(&self, f: &mut Fwd<T>, image: Var) -> Result<ScaleFeatures, NnError> {
        self.check_input(f, image)?;
        let act = self.cfg.activation;
        Ok(ScaleFeatures {
            fine: self.fine.apply(f, act, image)?,
            small: self.small.apply(f, act, image)?,
            large: self.large.apply(f, act, image)?,
        })
    }

    /// Only the 3x3 stride-1 branch, for single-scale wirings.
    pub fn embed_small<T: Real>(&self, f: &mut Fwd<T>, image: Var) -> Result<Var, NnError> {
        self.check_input(f, image)?;
        self.small.apply(f, self.cfg.activation, image)
    }
}
