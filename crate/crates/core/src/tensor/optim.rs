use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{GradVector, ParamMask, ParamStore, Real};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moments, aligned with the flat parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        AdamState { step: 0, m: vec![0.0; numel], v: vec![0.0; numel] }
    }
}

/// One decoupled-weight-decay Adam update in flat order.
///
/// Tensors outside `mask` are left untouched (their moments too). A
/// non-finite gradient aborts before anything is modified.
pub fn adamw_step(
    params: &mut ParamStore<f32>,
    grad: &GradVector<f32>,
    state: &mut AdamState,
    hyper: &AdamWConfig,
    mask: Option<&ParamMask>,
) -> Result<()> {
    if grad.len() != params.numel() {
        return Err(Error::LengthMismatch { left: grad.len(), right: params.numel() });
    }
    if let Some(bad) = grad.values().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient coordinate {bad} at step {}", state.step + 1)));
    }
    if hyper.lr < 0.0 {
        return Err(Error::InvalidArgument("learning rate must be non-negative".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let (b1, b2) = (hyper.beta1 as f32, hyper.beta2 as f32);
    let g = grad.values();
    for i in 0..params.num_tensors() {
        if mask.is_some_and(|m| !m.contains(i)) {
            continue;
        }
        let off = params.offset(i);
        let vals = params.tensor_mut(i).values_mut();
        for (j, p) in vals.iter_mut().enumerate() {
            let k = off + j;
            let gk = g[k];
            state.m[k] = b1 * state.m[k] + (1.0 - b1) * gk;
            state.v[k] = b2 * state.v[k] + (1.0 - b2) * gk * gk;
            // bias correction: bc1 == 0 only when beta1 == 1, excluded by config
            let mhat = state.m[k] as f64 / if bc1 > 0.0 { bc1 } else { 1.0 };
            let vhat = state.v[k] as f64 / if bc2 > 0.0 { bc2 } else { 1.0 };
            let mut x = p.f64();
            x -= hyper.lr * hyper.weight_decay * x;
            x -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
            *p = x as f32;
        }
    }
    Ok(())
}

/// Learning rate at `step` of `total` with optional cosine decay to zero
/// after a linear warmup.
pub fn scheduled_lr(base: f64, step: usize, total: usize, warmup: usize, cosine: bool) -> f64 {
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    if !cosine || total <= warmup {
        return base;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}
