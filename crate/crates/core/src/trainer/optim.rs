//! AdamW with decoupled weight decay, warmup + cosine learning-rate
//! schedule, and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{MaeError, Result};
use crate::tensor::Tensor;

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        OptimHyper {
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            eps: 1e-8,
        }
    }
}

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Per-parameter first/second moments plus the shared step counter.
pub struct OptimState {
    pub hyper: OptimHyper,
    pub step: u64,
    moments: Vec<Option<Moments>>,
}

impl OptimState {
    pub fn new(hyper: OptimHyper, n_params: usize) -> Self {
        OptimState {
            hyper,
            step: 0,
            moments: (0..n_params).map(|_| None).collect(),
        }
    }
}

/// One decoupled-weight-decay Adam step:
/// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
///
/// `grads` aligns with `params`; `None` entries leave their parameter
/// untouched (no decay either). Decay applies only where the parameter's
/// flag is set. Deterministic: a pure function of params, grads, state,
/// and the learning rate.
pub fn adamw_step(
    params: &mut [(String, &mut Tensor<f32>, bool)],
    grads: &[Option<Tensor<f32>>],
    state: &mut OptimState,
    lr_now: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.moments.len() {
        return Err(MaeError::Contract(format!(
            "optimizer saw {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.moments.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let h = state.hyper;
    let bias1 = 1.0 - h.beta1.powi(t);
    let bias2 = 1.0 - h.beta2.powi(t);
    let (b1, b2) = (h.beta1 as f32, h.beta2 as f32);
    let lr = lr_now as f32;
    let wd = h.weight_decay as f32;
    let eps = h.eps as f32;
    let (inv_bias1, inv_bias2) = ((1.0 / bias1) as f32, (1.0 / bias2) as f32);

    for i in 0..params.len() {
        let Some(grad) = &grads[i] else { continue };
        let (name, param, decay) = &mut params[i];
        if grad.shape() != param.shape() {
            return Err(MaeError::Dimension {
                op: "adamw_step",
                lhs: grad.shape().to_vec(),
                rhs: param.shape().to_vec(),
            });
        }
        if !grad.is_finite() {
            return Err(MaeError::NonFinite {
                what: "gradient",
                name: name.clone(),
            });
        }
        let moments = state.moments[i].get_or_insert_with(|| Moments {
            m: vec![0.0; grad.numel()],
            v: vec![0.0; grad.numel()],
        });
        for ((p, &g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m * inv_bias1;
            let v_hat = *v * inv_bias2;
            let decay_term = if *decay { wd * *p } else { 0.0 };
            *p -= lr * (m_hat / (v_hat.sqrt() + eps) + decay_term);
        }
    }
    Ok(())
}

/// Linear warmup to `base_lr`, then half-cosine decay to zero.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let decay_steps = (self.total_steps - self.warmup_steps).max(1);
        let progress = (step - self.warmup_steps) as f64 / decay_steps as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Scales all gradients by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`; returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Option<Tensor<f32>>], max_norm: f64) -> f64 {
    let mut sum_sq = 0.0f64;
    for grad in grads.iter().flatten() {
        for &g in grad.data() {
            sum_sq += (g as f64) * (g as f64);
        }
    }
    let norm = sum_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for grad in grads.iter_mut().flatten() {
            for g in grad.data_mut() {
                *g *= scale;
            }
        }
    }
    norm
}
