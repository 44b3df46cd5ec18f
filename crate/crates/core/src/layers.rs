//! Parameterized building blocks shared by the model stages.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nnops::{ConvGeometry, NnError, NormMode, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Forward-pass context: the tape being recorded, the parameters read, and
/// the batch-norm statistics produced along the way.
pub struct Fwd<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub mode: NormMode,
    /// Running-statistic updates in the order they were produced; committed
    /// by the caller after a successful step.
    pub running: Vec<(ParamId, Tensor<T>)>,
}

impl<'a, T: Real> Fwd<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, mode: NormMode) -> Self {
        Self { tape, store, mode, running: Vec::new() }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

/// How a convolution weight is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    KaimingUniform,
    Zeros,
}

/// Parameter factory with a seeded stream.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init, fan_in: usize) -> ParamId {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::KaimingUniform => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let rng = &mut *self.rng;
                Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound) as f32)
            }
        };
        self.store.add(name, t, true)
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeometry,
    /// Depthwise convolutions carry one `[1, kh, kw]` kernel per channel.
    pub depthwise: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        out_ch: usize,
        in_ch: usize,
        kernel: (usize, usize),
        geom: ConvGeometry,
        init: Init,
    ) -> Self {
        let (kh, kw) = kernel;
        let weight = b.tensor(&format!("{name}.weight"), &[out_ch, in_ch, kh, kw], init, in_ch * kh * kw);
        let bias = b.tensor(&format!("{name}.bias"), &[out_ch], Init::Zeros, 1);
        Self { weight, bias, geom, depthwise: false }
    }

    pub fn depthwise(b: &mut Builder, name: &str, channels: usize, k: usize) -> Self {
        let weight = b.tensor(&format!("{name}.weight"), &[channels, 1, k, k], Init::KaimingUniform, k * k);
        let bias = b.tensor(&format!("{name}.bias"), &[channels], Init::Zeros, 1);
        Self { weight, bias, geom: ConvGeometry::same(k, k), depthwise: true }
    }

    pub fn apply<T: Real>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var, NnError> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        if self.depthwise {
            f.tape.depthwise_conv2d(x, w, Some(b), self.geom)
        } else {
            f.tape.conv2d(x, w, Some(b), self.geom)
        }
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Self {
        let gamma = b.store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true);
        let beta = b.store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true);
        let running_mean = b.store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false);
        let running_var = b.store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false);
        Self { gamma, beta, running_mean, running_var }
    }

    pub fn apply<T: Real>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var, NnError> {
        let (g, b) = (f.param(self.gamma), f.param(self.beta));
        let (rm, rv) = (f.store.get(self.running_mean), f.store.get(self.running_var));
        let (y, update) = f.tape.batch_norm(x, g, b, rm, rv, f.mode)?;
        if let Some(u) = update {
            f.running.push((self.running_mean, u.mean));
            f.running.push((self.running_var, u.var));
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        let gamma = b.store.add(format!("{name}.gamma"), Tensor::ones(&[dim]), true);
        let beta = b.store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true);
        Self { gamma, beta }
    }

    /// Normalizes tokens `[B, L, D]` over `D`.
    pub fn apply<T: Real>(&self, f: &mut Fwd<T>, tokens: Var) -> Result<Var, NnError> {
        let (g, b) = (f.param(self.gamma), f.param(self.beta));
        f.tape.layer_norm(tokens, g, b)
    }

    /// Normalizes a spatial map `[B, D, H, W]` over `D` at every pixel.
    pub fn apply_spatial<T: Real>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var, NnError> {
        let [_, _, h, w] = f.tape.value(x).dims4()?;
        let t = f.tape.to_tokens(x)?;
        let t = self.apply(f, t)?;
        f.tape.to_spatial(t, h, w)
    }
}
