//! Adam / AdamW and the two learning-rate schedules used for pre-training
//! (linear warmup then linear decay) and fine-tuning (cosine annealing).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// `true` selects AdamW (decoupled decay); `false` folds the decay into the gradient.
    pub decoupled: bool,
}

impl AdamConfig {
    pub fn adam() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: false,
        }
    }

    pub fn adamw(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            decoupled: true,
            ..Self::adam()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::adam()
    }
}

/// First/second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<R> {
    pub config: AdamConfig,
    m: Vec<Tensor<R>>,
    v: Vec<Tensor<R>>,
    step: u64,
}

impl<R: Real> OptimizerState<R> {
    pub fn new(params: &ParamStore<R>, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update at learning rate `lr`.
pub fn adam_step<R: Real>(
    params: &mut ParamStore<R>,
    grads: &ParamGrads<R>,
    state: &mut OptimizerState<R>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer: {} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (name, _)) in params.iter().enumerate() {
        if !grads.get(i).is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let b1 = R::from_f64c(cfg.beta1);
    let b2 = R::from_f64c(cfg.beta2);
    let one = R::one();
    let bc1 = R::from_f64c(1.0 - cfg.beta1.powi(t));
    let bc2 = R::from_f64c(1.0 - cfg.beta2.powi(t));
    let eps = R::from_f64c(cfg.eps);
    let lr_r = R::from_f64c(lr);
    let wd = R::from_f64c(cfg.weight_decay);

    for i in 0..params.len() {
        let g = grads.get(i).data();
        let p = params.tensor_at_mut(i).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let mut gj = g[j];
            if cfg.weight_decay != 0.0 {
                if cfg.decoupled {
                    p[j] = p[j] - lr_r * wd * p[j];
                } else {
                    gj = gj + wd * p[j];
                }
            }
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] = p[j] - lr_r * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `base_lr`, then linear decay to 0 at `total_steps`.
pub fn lr_linear_warmup_decay(step: u64, warmup_steps: u64, total_steps: u64, base_lr: f64) -> f64 {
    if step > total_steps {
        log::warn!("lr schedule: step {step} beyond total {total_steps}, clamping to 0");
        return 0.0;
    }
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
    base_lr * (total_steps - step) as f64 / span
}

/// Cosine annealing from `base_lr` at step 0 to `min_lr` at `total_steps`.
pub fn lr_cosine_anneal(step: u64, total_steps: u64, base_lr: f64, min_lr: f64) -> f64 {
    let frac = step.min(total_steps) as f64 / total_steps.max(1) as f64;
    min_lr + (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}
