//! Adam with bias correction, global-norm clipping and the warmup schedule.

use std::collections::BTreeMap;

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// Applies one Adam update to every parameter that has a gradient.
/// Parameters without a gradient entry are left untouched.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        if !p.same_shape(g) {
            return Err(Error::Shape(format!(
                "adam: parameter `{name}` is {:?} but its gradient is {:?}",
                p.shape(),
                g.shape()
            )));
        }
        for moments in [&state.first_moment, &state.second_moment] {
            if let Some(m) = moments.get(name) {
                if !m.same_shape(g) {
                    return Err(Error::Shape(format!("adam: moment shape for `{name}`")));
                }
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let zeros = || Tensor::new(g.shape().to_vec(), vec![0.0; g.len()]).expect("shape");
        let m = state.first_moment.entry(name.clone()).or_insert_with(zeros);
        let v = state.second_moment.entry(name.clone()).or_insert_with(zeros);
        let p = params.get_mut(name).expect("checked above");
        for (((pi, &gi), mi), vi) in
            p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &Gradients) -> f64 {
    grads.values().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Rescales all gradients jointly so their global ℓ2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip threshold must be positive");
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = max_norm / norm;
        grads.values_mut().for_each(|g| g.scale_in_place(k));
    }
    norm
}

/// Warmup `lr_max · (1 − exp(−step / warmup_steps))`.
pub fn learning_rate(step: u64, warmup_steps: u64, lr_max: f64) -> f64 {
    if warmup_steps == 0 {
        return lr_max;
    }
    lr_max * (1.0 - (-(step as f64) / warmup_steps as f64).exp())
}
