//! Teacher-forced dual training.

use std::fmt;

use crate::autodiff::{Gradients, Tape};
use crate::config::Task;
use crate::data::Triplet;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Dropout;
use crate::optim::{adam_step, clip_global_norm, learning_rate, AdamConfig, AdamState};

/// Summary of one optimizer step. Losses are batch means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub qa_loss: f64,
    pub qg_loss: f64,
    /// Mean coverage term across the directions trained.
    pub coverage: f64,
    /// Total gold tokens (`END` included) per direction, for per-token NLL.
    pub qa_nll: f64,
    pub qg_nll: f64,
    pub qa_tokens: usize,
    pub qg_tokens: usize,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clamps: usize,
    pub lr: f64,
}

impl fmt::Display for StepMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step {} loss {:.4} qa {:.4} qg {:.4} coverage {:.4} grad-norm {:.4} clamps {} lr {:.3e}",
            self.step, self.loss, self.qa_loss, self.qg_loss, self.coverage, self.grad_norm, self.clamps, self.lr
        )
    }
}

/// Loss and gradients of a batch, averaged over triplets.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub metrics: StepMetrics,
    pub grads: Gradients,
}

/// Mean dual loss and its gradient over `batch`. `dropout_seed = None`
/// disables dropout.
pub fn batch_gradients(model: &Model, batch: &[Triplet], dropout_seed: Option<u64>) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::EmptySequence("batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut metrics = StepMetrics::default();
    let mut grads = Gradients::new();
    let mut coverage_terms = 0usize;
    for (i, triplet) in batch.iter().enumerate() {
        let mut tape = Tape::new();
        let p = model.registry.bind(&mut tape);
        let mut dropout =
            dropout_seed.map(|s| Dropout::new(model.config.keep_prob, s ^ (i as u64).wrapping_mul(0x9e37_79b9)));
        let mut dropout_ref = dropout.as_mut();
        let (loss, parts) = model.dual_loss(&mut tape, &p, triplet, &mut dropout_ref)?;
        let loss = tape.affine(loss, scale, 0.0);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss on triplet `{}`", triplet.id)));
        }
        metrics.loss += value;
        for part in parts {
            let l = tape.value(part.terms.loss).item() * scale;
            let nll = tape.value(part.terms.nll).item();
            metrics.coverage += tape.value(part.terms.coverage).item() * scale;
            metrics.clamps += part.terms.clamps;
            coverage_terms += 1;
            match part.task {
                Task::Qa => {
                    metrics.qa_loss += l;
                    metrics.qa_nll += nll;
                    metrics.qa_tokens += part.terms.steps;
                }
                Task::Qg => {
                    metrics.qg_loss += l;
                    metrics.qg_nll += nll;
                    metrics.qg_tokens += part.terms.steps;
                }
            }
        }
        for (name, g) in tape.backward(loss)? {
            match grads.get_mut(&name) {
                Some(acc) => acc.add_scaled(&g, 1.0),
                None => {
                    grads.insert(name, g);
                }
            }
        }
    }
    metrics.coverage *= batch.len() as f64 / coverage_terms.max(1) as f64;
    if grads.values().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(BatchGradients { metrics, grads })
}

/// Model plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        Trainer { model, adam: AdamState::new() }
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// One forward/backward over `batch`, clipping, and an Adam update at
    /// the warmup learning rate of the step being taken (counted from 1).
    pub fn train_step(&mut self, batch: &[Triplet]) -> Result<StepMetrics> {
        let cfg = &self.model.config;
        let step = self.adam.step + 1;
        let seed = cfg.seed ^ step.wrapping_mul(0x2545_f491_4f6c_dd1d);
        let dropout = (cfg.keep_prob < 1.0).then_some(seed);
        let BatchGradients { mut metrics, mut grads } = batch_gradients(&self.model, batch, dropout)?;
        metrics.grad_norm = clip_global_norm(&mut grads, cfg.clip);
        metrics.lr = learning_rate(step, cfg.warmup_steps, cfg.lr_max);
        metrics.step = step;
        adam_step(self.model.registry.tensors_mut(), &grads, &mut self.adam, metrics.lr, AdamConfig::default())?;
        Ok(metrics)
    }
}

/// Cycles through `data` in fixed order, `batch_size` triplets at a time.
pub fn batch_at(data: &[Triplet], batch_size: usize, index: u64) -> Vec<Triplet> {
    let n = data.len();
    let start = (index as usize * batch_size) % n;
    (0..batch_size.min(n)).map(|k| data[(start + k) % n].clone()).collect()
}
