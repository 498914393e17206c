//! Pointer-generator output layer and the per-direction loss with coverage.
//!
//! Distributions live on an extended id space: vocabulary ids followed by
//! one id per distinct out-of-vocabulary context word, in order of first
//! appearance.

use crate::autodiff::{Tape, Var};
use crate::embedding::{Vocabulary, UNK};
use crate::error::Result;
use crate::nn::declare_dense;
use crate::registry::{ParamBuilder, Scope};
use crate::tensor::Tensor;

/// Log-probabilities are taken of `max(p, LOG_FLOOR)`.
pub const LOG_FLOOR: f64 = 1e-12;

/// Per-task head: `w1`/`b1` feed the vocabulary distribution and `w2`/`b2`
/// the copy gate (absent when copying is disabled).
pub fn declare_head(b: &mut ParamBuilder, d_enc: usize, gen_hidden: usize, copy: bool) {
    b.fan_avg("w1", d_enc, gen_hidden);
    b.constant("b1", 1, gen_hidden, 0.0);
    if copy {
        b.fan_avg("w2", 2 * d_enc, 1);
        b.constant("b2", 1, 1, 0.0);
    }
}

/// The vocabulary projection `W_shared`, `b_shared`.
pub fn declare_projection(b: &mut ParamBuilder, gen_hidden: usize, vocab_size: usize) {
    declare_dense(b, gen_hidden, vocab_size);
}

/// Extended ids of one context.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Extension {
    vocab_size: usize,
    /// Extended id of every context position.
    pub ids: Vec<usize>,
    /// Out-of-vocabulary context words; word `k` has id `vocab_size + k`.
    pub oov: Vec<String>,
}

impl Extension {
    pub fn new(vocab: &Vocabulary, context: &[String]) -> Self {
        let mut oov: Vec<String> = Vec::new();
        let ids = context
            .iter()
            .map(|tok| match vocab.get(tok) {
                Some(id) => id,
                None => match oov.iter().position(|o| o == tok) {
                    Some(k) => vocab.len() + k,
                    None => {
                        oov.push(tok.clone());
                        vocab.len() + oov.len() - 1
                    }
                },
            })
            .collect();
        Extension { vocab_size: vocab.len(), ids, oov }
    }

    pub fn size(&self) -> usize {
        self.vocab_size + self.oov.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Extended id of a gold token: its vocabulary id, else its context
    /// copy id, else `UNK`.
    pub fn id(&self, vocab: &Vocabulary, token: &str) -> usize {
        vocab
            .get(token)
            .or_else(|| self.oov.iter().position(|o| o == token).map(|k| self.vocab_size + k))
            .unwrap_or(UNK)
    }

    pub fn surface<'v>(&'v self, vocab: &'v Vocabulary, id: usize) -> &'v str {
        if id < self.vocab_size {
            vocab.token(id)
        } else {
            &self.oov[id - self.vocab_size]
        }
    }

    /// `n × size` indicator of which extended id sits at each context
    /// position.
    pub fn indicator(&self) -> Tensor {
        let mut m = Tensor::zeros(self.ids.len(), self.size());
        for (j, &id) in self.ids.iter().enumerate() {
            m.set(j, id, 1.0);
        }
        m
    }
}

/// `softmax(tanh(Ď W1 + b1) W_shared + b_shared)`, one row per step.
pub fn vocab_distribution(tape: &mut Tape, head: &Scope, projection: &Scope, d_check: Var) -> Result<Var> {
    let h = tape.matmul(d_check, head.get("w1")?)?;
    let h = tape.add_row(h, head.get("b1")?)?;
    let h = tape.tanh(h);
    let logits = tape.matmul(h, projection.get("w")?)?;
    let logits = tape.add_row(logits, projection.get("b")?)?;
    tape.softmax_rows(logits, None)
}

/// `σ([Ď, D̃] W2 + b2)`, one gate per step as a column.
pub fn mixture_gate(tape: &mut Tape, head: &Scope, d_check: Var, d_tilde: Var) -> Result<Var> {
    let joined = tape.concat_cols(&[d_check, d_tilde])?;
    let z = tape.matmul(joined, head.get("w2")?)?;
    let z = tape.add_scalar(z, head.get("b2")?)?;
    Ok(tape.sigmoid(z))
}

/// Attention scores merged by word onto the extended id space.
pub fn context_distribution(tape: &mut Tape, scores: Var, ext: &Extension) -> Result<Var> {
    let m = tape.constant(ext.indicator());
    tape.matmul(scores, m)
}

/// `λ·p_vocab + (1−λ)·p_context` on the extended space; `lambda = None`
/// is the copy-free model (λ = 1).
pub fn final_distribution(tape: &mut Tape, lambda: Option<Var>, p_vocab: Var, p_context: Var) -> Result<Var> {
    let (steps, v) = (tape.value(p_vocab).rows(), tape.value(p_vocab).cols());
    let ext = tape.value(p_context).cols();
    let p_vocab = if ext > v {
        let pad = tape.constant(Tensor::zeros(steps, ext - v));
        tape.concat_cols(&[p_vocab, pad])?
    } else {
        p_vocab
    };
    let Some(lambda) = lambda else {
        return Ok(p_vocab);
    };
    let ones = tape.constant(Tensor::filled(1, ext, 1.0));
    let wide = tape.matmul(lambda, ones)?;
    let generated = tape.mul(wide, p_vocab)?;
    let rest = tape.affine(wide, -1.0, 1.0);
    let copied = tape.mul(rest, p_context)?;
    tape.add(generated, copied)
}

/// `p_final(target_t)` per step as a column, without materializing the
/// full extended distribution.
pub fn target_probabilities(
    tape: &mut Tape,
    lambda: Option<Var>,
    p_vocab: Var,
    scores: Var,
    ext: &Extension,
    targets: &[usize],
) -> Result<Var> {
    let v = tape.value(p_vocab).cols();
    let generated = tape.pick(p_vocab, targets.iter().map(|&t| (t < v).then_some(t)).collect())?;
    let Some(lambda) = lambda else {
        return Ok(generated);
    };
    let n = ext.ids.len();
    let mut hits = Tensor::zeros(targets.len(), n);
    for (t, &target) in targets.iter().enumerate() {
        for (j, &id) in ext.ids.iter().enumerate() {
            if id == target {
                hits.set(t, j, 1.0);
            }
        }
    }
    let masked = tape.mul_const(scores, hits)?;
    let copied = tape.sum_cols(masked);
    let generated = tape.mul(lambda, generated)?;
    let rest = tape.affine(lambda, -1.0, 1.0);
    let copied = tape.mul(rest, copied)?;
    tape.add(generated, copied)
}

/// `Σ_j min(s_t[j], Σ_{t'<t} s_t'[j])` for every step `t`, as a column.
pub fn coverage_penalties(tape: &mut Tape, scores: Var) -> Result<Var> {
    let steps = tape.value(scores).rows();
    let mut lower = Tensor::zeros(steps, steps);
    for t in 0..steps {
        for u in 0..t {
            lower.set(t, u, 1.0);
        }
    }
    let lower = tape.constant(lower);
    let cumulative = tape.matmul(lower, scores)?;
    let overlap = tape.minimum(scores, cumulative)?;
    Ok(tape.sum_cols(overlap))
}

/// The terms of one direction's loss.
#[derive(Clone, Copy, Debug)]
pub struct SequenceLoss {
    /// `−Σ_t log p_final(target_t)`.
    pub nll: Var,
    /// `Σ_t coverage_t`.
    pub coverage: Var,
    /// `nll + κ·coverage`.
    pub loss: Var,
    /// Steps whose gold probability fell below [`LOG_FLOOR`].
    pub clamps: usize,
    pub steps: usize,
}

pub fn sequence_loss(tape: &mut Tape, p_target: Var, scores: Var, kappa: f64) -> Result<SequenceLoss> {
    let clamps = tape.value(p_target).data().iter().filter(|&&p| p < LOG_FLOOR).count();
    let steps = tape.value(p_target).rows();
    let logp = tape.log_clamped(p_target, LOG_FLOOR);
    let logp = tape.sum_all(logp);
    let nll = tape.affine(logp, -1.0, 0.0);
    let cov = coverage_penalties(tape, scores)?;
    let coverage = tape.sum_all(cov);
    let weighted = tape.affine(coverage, kappa, 0.0);
    let loss = tape.add(nll, weighted)?;
    Ok(SequenceLoss { nll, coverage, loss, clamps, steps })
}

/// One step's output distribution with its parts.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDistribution {
    pub lambda: f64,
    /// Over the vocabulary.
    pub p_vocab: Vec<f64>,
    /// Over the extended space.
    pub p_context: Vec<f64>,
    /// Over the extended space.
    pub p_final: Vec<f64>,
}

impl MixtureDistribution {
    pub fn new(lambda: f64, p_vocab: Vec<f64>, p_context: Vec<f64>) -> Self {
        let p_final = p_context
            .iter()
            .enumerate()
            .map(|(i, &c)| lambda * p_vocab.get(i).copied().unwrap_or(0.0) + (1.0 - lambda) * c)
            .collect();
        MixtureDistribution { lambda, p_vocab, p_context, p_final }
    }

    /// Highest-probability extended id; ties go to the lowest id.
    pub fn argmax(&self) -> usize {
        argmax(&self.p_final)
    }
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Merges one row of attention scores by extended id.
pub fn merge_scores(scores: &[f64], ext: &Extension) -> Vec<f64> {
    let mut out = vec![0.0; ext.size()];
    for (&s, &id) in scores.iter().zip(&ext.ids) {
        out[id] += s;
    }
    out
}

/// Running attention total for coverage during step-by-step generation.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverageState {
    pub cumulative: Vec<f64>,
    pub step: usize,
}

impl CoverageState {
    pub fn new(n: usize) -> Self {
        CoverageState { cumulative: vec![0.0; n], step: 0 }
    }

    /// Penalty of `scores` against the attention accumulated so far.
    pub fn penalty(&self, scores: &[f64]) -> f64 {
        scores.iter().zip(&self.cumulative).map(|(s, c)| s.min(*c)).sum()
    }

    pub fn push(&mut self, scores: &[f64]) {
        self.cumulative.iter_mut().zip(scores).for_each(|(c, s)| *c += s);
        self.step += 1;
    }
}
