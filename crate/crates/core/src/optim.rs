//! AdamW with decoupled weight decay, and the warm-up / step-decay schedule.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-5 }
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One AdamW update for every parameter that has a gradient in `grads`.
///
/// Any non-finite gradient aborts before anything is modified.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return invalid(format!("learning rate {lr} must be finite and non-negative"));
    }
    for (name, g) in grads.iter() {
        let Some(p) = params.get(name) else {
            return invalid(format!("gradient for unknown parameter {name}"));
        };
        if p.shape() != g.shape() {
            return invalid(format!("gradient shape {:?} for parameter {name} {:?}", g.shape(), p.shape()));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { param: name.to_string(), index: i });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let shrink = 1.0 - lr * cfg.weight_decay;
    for (name, g) in grads.iter() {
        let p = params.get(name).expect("checked above");
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
        let mut data = p.data().to_vec();
        for (k, (x, &gk)) in data.iter_mut().zip(g.data()).enumerate() {
            *x *= shrink;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            *x -= lr * mh / (vh.sqrt() + cfg.eps);
        }
        let next = Tensor::new(p.shape().to_vec(), data)
            .map_err(|_| Error::NonFinite { op: "adamw_step" })?;
        params.set(name, next)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay: f64,
    pub decay_every: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { base_lr: 1e-3, warmup_epochs: 5, decay: 0.75, decay_every: 18 }
    }
}

/// Linear ramp from `base/warmup` at epoch 0 to `base` at epoch `warmup - 1`,
/// then `base * decay^floor((epoch - warmup) / decay_every)`.
pub fn lr_schedule(epoch: usize, cfg: &ScheduleConfig) -> f64 {
    let w = cfg.warmup_epochs;
    if epoch < w {
        let start = cfg.base_lr / w as f64;
        if w == 1 {
            return cfg.base_lr;
        }
        return start + (cfg.base_lr - start) * epoch as f64 / (w - 1) as f64;
    }
    let steps = (epoch - w) / cfg.decay_every.max(1);
    cfg.base_lr * cfg.decay.powi(steps as i32)
}
