//! AdamW, gradient clipping and the warmup-cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{contract_err, Error, Result};
use crate::params::ParamSet;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    /// Completed optimizer steps; drives bias correction.
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// Biases, norm parameters and mask tokens are never decayed.
pub fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() > 1 && !name.ends_with("mask_token")
}

/// One bias-corrected AdamW step. `lr_scale` multiplies the rate per
/// parameter name (layer-wise decay); every parameter needs a gradient.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr: f64,
    lr_scale: impl Fn(&str) -> f64,
) -> Result<()> {
    for (name, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
    }
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| contract_err!("no gradient for {name}"))?;
        if g.shape() != p.shape() {
            return Err(contract_err!("{name}: gradient {:?} vs parameter {:?}", g.shape(), p.shape()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked above").data();
        let m = state.m.get_mut(name).ok_or_else(|| contract_err!("no first moment for {name}"))?;
        let step = lr * lr_scale(name);
        let wd = if decays(name, p.shape()) { cfg.weight_decay } else { 0.0 };
        let v = state.v.get_mut(name).ok_or_else(|| contract_err!("no second moment for {name}"))?;
        for (((pi, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g) {
            let gf = gi.as_f64();
            let mf = cfg.beta1 * mi.as_f64() + (1.0 - cfg.beta1) * gf;
            let vf = cfg.beta2 * vi.as_f64() + (1.0 - cfg.beta2) * gf * gf;
            *mi = T::of(mf);
            *vi = T::of(vf);
            let pf = pi.as_f64();
            let update = (mf / bc1) / ((vf / bc2).sqrt() + cfg.eps);
            *pi = T::of(pf - step * wd * pf - step * update);
        }
    }
    Ok(())
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut ParamSet<T>, max_norm: f64) -> f64 {
    let total = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = T::of(max_norm / total);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    total
}

/// Linear warmup from zero, then a single cosine cycle down to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// `blr * batch / 256`.
    pub fn scaled_base(blr: f64, batch: usize) -> f64 {
        blr * batch as f64 / 256.0
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.base_lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}
