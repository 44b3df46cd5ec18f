//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnops::{ParamId, ParamStore, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

/// First and second moments of one parameter plus its own step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Optimizer state keyed by parameter id. Parameters that never received a
/// gradient have no entry and are never touched.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub moments: BTreeMap<ParamId, Moments>,
}

/// Global L2 norm of all gradients.
pub fn grad_norm<T: Real>(grads: &BTreeMap<ParamId, Tensor<T>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.to_f64().unwrap().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// One update. Non-finite gradients abort the step before any parameter
/// changes. With `clip`, gradients are rescaled to that global norm first.
pub fn adamw_step(
    store: &mut ParamStore<f32>,
    grads: &BTreeMap<ParamId, Tensor<f32>>,
    state: &mut AdamState,
    lr: f64,
    hp: &AdamWParams,
    clip: Option<f64>,
) -> Result<()> {
    for (&id, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {}", store.name(id))));
        }
    }
    let scale = match clip {
        Some(max) => {
            let n = grad_norm(grads);
            if n > max { (max / n) as f32 } else { 1.0 }
        }
        None => 1.0,
    };
    for (&id, g) in grads {
        if !store.entry(id).trainable {
            continue;
        }
        let p = store.get_mut(id);
        let mo = state.moments.entry(id).or_insert_with(|| Moments { step: 0, m: vec![0.0; g.len()], v: vec![0.0; g.len()] });
        mo.step += 1;
        let bc1 = 1.0 - hp.beta1.powi(mo.step as i32);
        let bc2 = 1.0 - hp.beta2.powi(mo.step as i32);
        let decay = (1.0 - lr * hp.weight_decay) as f32;
        for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            // moments are stored as f32 but updated in f64
            let gv = (gv * scale) as f64;
            *pv *= decay;
            let m = hp.beta1 * mo.m[i] as f64 + (1.0 - hp.beta1) * gv;
            let v = hp.beta2 * mo.v[i] as f64 + (1.0 - hp.beta2) * gv * gv;
            mo.m[i] = m as f32;
            mo.v[i] = v as f32;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            *pv -= (lr * m_hat / (v_hat.sqrt() + hp.eps)) as f32;
        }
    }
    Ok(())
}
