//! Model assembly with the sharing scheme, the teacher-forced forward pass
//! of each direction, and greedy decoding.
//!
//! Logical parameter names are task-qualified (`qa.context_encoder.*`,
//! `qg.projection.*`); the registry's alias table decides which of them
//! share storage.

use crate::attention;
use crate::autodiff::{Tape, Var};
use crate::config::{Mode, ModelConfig, Task};
use crate::data::Triplet;
use crate::embedding::{self, TokenIds, Vocabulary, END};
use crate::encoders::{self, Reading};
use crate::error::{Error, Result};
use crate::generator::{self, Extension, MixtureDistribution, SequenceLoss};
use crate::nn::Dropout;
use crate::registry::{ParamBuilder, ParameterRegistry, Params};
use crate::tensor::Tensor;

/// Physical component names of the three encoders.
pub const ENCODERS: [&str; 3] = ["context_encoder", "question_encoder", "answer_encoder"];

/// Encoder of the sequence a task conditions on besides the context.
pub fn counterpart_encoder(task: Task) -> &'static str {
    match task {
        Task::Qa => "question_encoder",
        Task::Qg => "answer_encoder",
    }
}

/// Encoder of the sequence a task decodes.
pub fn decoder_encoder(task: Task) -> &'static str {
    counterpart_encoder(task.dual())
}

/// Physical attention sites of a task's two fold-in steps.
pub fn attention_sites(task: Task) -> (&'static str, &'static str) {
    match task {
        Task::Qa => ("attn.context_question", "attn.answer_context"),
        Task::Qg => ("attn.context_answer", "attn.question_context"),
    }
}

/// Builds every parameter the configuration calls for, with aliases that
/// realize the sharing scheme.
pub fn assemble_model(cfg: &ModelConfig, vocab_size: usize) -> Result<ParameterRegistry> {
    cfg.validate()?;
    for w in cfg.warnings() {
        log::warn!("{w}");
    }
    let dual = cfg.mode == Mode::Dual;
    let tasks = cfg.mode.tasks();
    let (d_enc, d_fold) = (cfg.d_enc(), cfg.d_fold());
    let mut registry = ParameterRegistry::new();
    let mut aliases: Vec<(String, String)> = Vec::new();
    {
        let mut b = ParamBuilder::new(&mut registry, cfg.seed);
        embedding::declare(&mut b.sub("embed"), cfg, vocab_size);

        for name in ENCODERS {
            let reading = if name == "context_encoder" { Reading::Bidirectional } else { Reading::Causal };
            let unshare =
                dual && if name == "context_encoder" { cfg.unshare_context_encoder } else { cfg.unshare_qa_encoders };
            if unshare {
                for task in tasks {
                    encoders::declare(&mut b.sub(&format!("{}.{name}", task.name())), cfg, reading);
                }
            } else {
                encoders::declare(&mut b.sub(name), cfg, reading);
                for task in tasks {
                    aliases.push((format!("{}.{name}", task.name()), name.to_string()));
                }
            }
        }

        let mut steps = vec![("fold_second", 1)];
        if !cfg.no_context_attention {
            steps.insert(0, ("fold_first", 0));
        }
        for (step, index) in steps {
            if dual && cfg.share_attention {
                let physical = format!("attn.{step}");
                attention::declare_site(&mut b.sub(&physical), d_enc, d_fold);
                for task in tasks {
                    aliases.push((format!("{}.{step}", task.name()), physical.clone()));
                }
            } else {
                for &task in tasks {
                    let (first, second) = attention_sites(task);
                    let physical = if index == 0 { first } else { second };
                    attention::declare_site(&mut b.sub(physical), d_enc, d_fold);
                    aliases.push((format!("{}.{step}", task.name()), physical.to_string()));
                }
            }
        }

        if dual && cfg.unshare_output_projection {
            for task in tasks {
                generator::declare_projection(
                    &mut b.sub(&format!("{}.projection", task.name())),
                    cfg.gen_hidden,
                    vocab_size,
                );
            }
        } else {
            generator::declare_projection(&mut b.sub("projection"), cfg.gen_hidden, vocab_size);
            for task in tasks {
                aliases.push((format!("{}.projection", task.name()), "projection".to_string()));
            }
        }
        for task in tasks {
            generator::declare_head(&mut b.sub(&format!("{}.head", task.name())), d_enc, cfg.gen_hidden, !cfg.no_copy);
        }
    }
    for (logical, physical) in aliases {
        registry.alias(&logical, &physical);
    }
    Ok(registry)
}

/// One direction of one triplet, converted to ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub task: Task,
    pub context: TokenIds,
    pub ext: Extension,
    pub counterpart: TokenIds,
    /// `START` followed by the target tokens.
    pub decoder_input: TokenIds,
    /// Target extended ids followed by `END`; same length as the input.
    pub targets: Vec<usize>,
}

impl Example {
    pub fn new(vocab: &Vocabulary, triplet: &Triplet, task: Task) -> Self {
        Example::from_tokens(vocab, task, &triplet.context, triplet.counterpart(task), triplet.target(task))
    }

    pub fn from_tokens(
        vocab: &Vocabulary,
        task: Task,
        context: &[String],
        counterpart: &[String],
        target: &[String],
    ) -> Self {
        let ext = Extension::new(vocab, context);
        let mut targets: Vec<usize> = target.iter().map(|t| ext.id(vocab, t)).collect();
        targets.push(END);
        Example {
            task,
            context: TokenIds::new(vocab, context),
            counterpart: TokenIds::new(vocab, counterpart),
            decoder_input: TokenIds::shifted(vocab, target),
            targets,
            ext,
        }
    }
}

/// Decoder-side tape values of one direction.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutputs {
    pub p_vocab: Var,
    /// Copy gate per step; `None` when copying is disabled.
    pub lambda: Option<Var>,
    /// Second fold-in scores, `steps × n`.
    pub scores: Var,
}

/// Tape values shared by every decoding step of one direction.
#[derive(Clone, Copy, Debug)]
pub struct Sources {
    /// Context after the first fold-in (or the encoded context when that
    /// step is ablated).
    pub folded: Var,
    /// First fold-in scores, `n × counterpart length`.
    pub first_scores: Option<Var>,
}

/// Loss terms of one direction on one triplet.
#[derive(Clone, Copy, Debug)]
pub struct TaskLoss {
    pub task: Task,
    pub terms: SequenceLoss,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<String>,
    /// Extended ids of the emitted tokens.
    pub ids: Vec<usize>,
    /// First fold-in scores (`n` rows), when that step exists.
    pub first_scores: Option<Tensor>,
    /// Second fold-in score row of every emitted step, `END` included.
    pub second_scores: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub registry: ParameterRegistry,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        let registry = assemble_model(&config, vocab.len())?;
        Ok(Model { config, vocab, registry })
    }

    fn check_task(&self, task: Task) -> Result<()> {
        if self.config.mode.has(task) {
            Ok(())
        } else {
            Err(Error::Config(format!("{} is not available in {:?} mode", task.name(), self.config.mode)))
        }
    }

    /// Embeds and encodes the context and counterpart and performs the
    /// first fold-in.
    pub fn sources(
        &self,
        tape: &mut Tape,
        p: &Params,
        ex: &Example,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<Sources> {
        self.check_task(ex.task)?;
        let cfg = &self.config;
        let t = p.scope(ex.task.name());
        let embed = p.scope("embed");
        let c = embedding::embed_sequence(tape, &embed, &ex.context)?;
        let c = encoders::encode_context(tape, &t.sub("context_encoder"), cfg, c, dropout)?;
        if cfg.no_context_attention {
            return Ok(Sources { folded: c, first_scores: None });
        }
        let q = embedding::embed_sequence(tape, &embed, &ex.counterpart)?;
        let q = encoders::encode_autoregressive(tape, &t.sub(counterpart_encoder(ex.task)), cfg, q, dropout)?;
        let (folded, scores) = attention::fold(tape, &t.sub("fold_first"), c, q)?;
        Ok(Sources { folded, first_scores: Some(scores) })
    }

    /// Runs the decoder over `input`. With `last_only` the second fold-in
    /// and the output layer see only the final position.
    pub fn decoder(
        &self,
        tape: &mut Tape,
        p: &Params,
        task: Task,
        sources: Sources,
        input: &TokenIds,
        last_only: bool,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<DecoderOutputs> {
        let cfg = &self.config;
        let t = p.scope(task.name());
        let d = embedding::embed_sequence(tape, &p.scope("embed"), input)?;
        let d_tilde = encoders::encode_autoregressive(tape, &t.sub(decoder_encoder(task)), cfg, d, dropout)?;
        let d_tilde = if last_only {
            let len = tape.value(d_tilde).rows();
            tape.slice_rows(d_tilde, len - 1, len)?
        } else {
            d_tilde
        };
        let (d_check, scores) = attention::fold_second(tape, &t.sub("fold_second"), d_tilde, sources.folded)?;
        let head = t.sub("head");
        let p_vocab = generator::vocab_distribution(tape, &head, &t.sub("projection"), d_check)?;
        let lambda = if cfg.no_copy { None } else { Some(generator::mixture_gate(tape, &head, d_check, d_tilde)?) };
        Ok(DecoderOutputs { p_vocab, lambda, scores })
    }

    /// Teacher-forced loss of one direction.
    pub fn task_loss(
        &self,
        tape: &mut Tape,
        p: &Params,
        ex: &Example,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<TaskLoss> {
        let sources = self.sources(tape, p, ex, dropout)?;
        let out = self.decoder(tape, p, ex.task, sources, &ex.decoder_input, false, dropout)?;
        let p_target =
            generator::target_probabilities(tape, out.lambda, out.p_vocab, out.scores, &ex.ext, &ex.targets)?;
        let terms = generator::sequence_loss(tape, p_target, out.scores, self.config.kappa)?;
        Ok(TaskLoss { task: ex.task, terms })
    }

    /// Weighted sum of both directions' losses on one triplet (or the one
    /// direction a single-task model carries).
    pub fn dual_loss(
        &self,
        tape: &mut Tape,
        p: &Params,
        triplet: &Triplet,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<(Var, Vec<TaskLoss>)> {
        let mut parts = Vec::new();
        let mut total: Option<Var> = None;
        for &task in self.config.mode.tasks() {
            let ex = Example::new(&self.vocab, triplet, task);
            let l = self.task_loss(tape, p, &ex, dropout)?;
            let weight = match task {
                Task::Qa => self.config.qa_weight,
                Task::Qg => self.config.qg_weight,
            };
            let weighted = tape.affine(l.terms.loss, weight, 0.0);
            total = Some(match total {
                Some(acc) => tape.add(acc, weighted)?,
                None => weighted,
            });
            parts.push(l);
        }
        Ok((total.expect("every mode has a task"), parts))
    }

    /// Teacher-forced output distribution of every step (dropout off).
    pub fn step_distributions(&self, ex: &Example) -> Result<Vec<MixtureDistribution>> {
        let mut tape = Tape::new();
        let p = self.registry.bind(&mut tape);
        let sources = self.sources(&mut tape, &p, ex, &mut None)?;
        let out = self.decoder(&mut tape, &p, ex.task, sources, &ex.decoder_input, false, &mut None)?;
        Ok(mixtures(&tape, &out, &ex.ext))
    }

    /// Greedy decoding: each step feeds back the model's own output and
    /// takes the argmax of the final distribution, stopping at `END` or
    /// after `decode_cap` tokens.
    pub fn greedy_decode(&self, task: Task, context: &[String], counterpart: &[String]) -> Result<Decoded> {
        let ex = Example::from_tokens(&self.vocab, task, context, counterpart, &[]);
        let mut tape = Tape::new();
        let p = self.registry.bind(&mut tape);
        let sources = self.sources(&mut tape, &p, &ex, &mut None)?;
        let first_scores = sources.first_scores.map(|s| tape.value(s).clone());
        let base = tape.len();
        let mut input = ex.decoder_input.clone();
        let mut decoded = Decoded { tokens: Vec::new(), ids: Vec::new(), first_scores, second_scores: Vec::new() };
        while decoded.tokens.len() < self.config.decode_cap {
            let out = self.decoder(&mut tape, &p, task, sources, &input, true, &mut None)?;
            let step = mixtures(&tape, &out, &ex.ext).pop().expect("one row");
            decoded.second_scores.push(tape.value(out.scores).row(0).to_vec());
            tape.truncate(base);
            let id = step.argmax();
            if id == END {
                break;
            }
            let token = ex.ext.surface(&self.vocab, id).to_string();
            input.push(&self.vocab, &token);
            decoded.ids.push(id);
            decoded.tokens.push(token);
        }
        Ok(decoded)
    }
}

fn mixtures(tape: &Tape, out: &DecoderOutputs, ext: &Extension) -> Vec<MixtureDistribution> {
    let (pv, s) = (tape.value(out.p_vocab), tape.value(out.scores));
    (0..pv.rows())
        .map(|t| {
            let lambda = out.lambda.map_or(1.0, |l| tape.value(l).data()[t]);
            MixtureDistribution::new(lambda, pv.row(t).to_vec(), generator::merge_scores(s.row(t), ext))
        })
        .collect()
}
