use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use daan::checkpoint::{load_checkpoint, save_checkpoint};
use daan::checks::{check_config, dual_loss_check, operation_checks, random_problem, TOLERANCE};
use daan::config::{Mode, ModelConfig, Task};
use daan::data::{dataset_stats, parse_squad, to_squad_json, DatasetStats, Triplet};
use daan::embedding::{build_vocabulary, load_word_embeddings};
use daan::evaluate::{dump_attention, evaluate, generate, Report};
use daan::model::Model;
use daan::synthetic::{copy_corpus, qa_corpus};
use daan::train::{batch_at, Trainer};
use daan::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "daan", version, about = "Joint question answering and question generation")]
struct Cli {
    /// Write attention score matrices of every generation to this directory.
    #[arg(long, global = true, value_name = "DIR")]
    dump_attention: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a SQuAD-format file and write a checkpoint.
    Train(TrainArgs),
    /// Greedy decode one direction, one generation per line.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generations against the references (B1-B4, ROUGE-L).
    Eval {
        /// Checkpoint to evaluate; repeat to compare models.
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Pool n-gram counts over the corpus instead of averaging
        /// sentence scores.
        #[arg(long)]
        corpus_bleu: bool,
        /// Recall weight of the ROUGE-L F-measure.
        #[arg(long, default_value_t = 1.0)]
        rouge_beta: f64,
    },
    /// Triplet count and mean context, question and answer lengths.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare backward passes against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic SQuAD-format corpus.
    Synth {
        #[arg(long, value_enum, default_value_t = Corpus::Qa)]
        kind: Corpus,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Corpus {
    /// Short fact lists with "what did X do" questions.
    Qa,
    /// Answers are single out-of-vocabulary code words.
    Copy,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Unshare {
    OutputProjection,
    QaEncoders,
    ContextEncoder,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum EncoderAblation {
    NoLstm,
    NoSelfattn,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    steps: u64,
    #[arg(long)]
    out: PathBuf,
    /// Pretrained word vectors: a word then `d_word` numbers per line.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    log_every: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Coordinates sampled per parameter tensor of the full model.
    #[arg(long, default_value_t = 24)]
    sample: usize,
    #[arg(long, default_value_t = 50)]
    vocab_size: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

/// Model configuration: an optional TOML file of `key = value` lines,
/// then per-field overrides.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    no_copy: bool,
    #[arg(long)]
    no_context_attention: bool,
    #[arg(long, value_enum)]
    unshare: Vec<Unshare>,
    #[arg(long, value_enum)]
    encoder: Vec<EncoderAblation>,
    #[arg(long)]
    share_attention: bool,
    #[arg(long)]
    vector_highway_bias: bool,
    #[arg(long)]
    lstm_residual: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    d_word: Option<usize>,
    #[arg(long)]
    d_char: Option<usize>,
    #[arg(long)]
    d_embed: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_attn: Option<usize>,
    #[arg(long)]
    d_fold: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    lstm_layers: Option<usize>,
    #[arg(long)]
    ffn_hidden: Option<usize>,
    #[arg(long)]
    gen_hidden: Option<usize>,
    #[arg(long)]
    layer_norm_eps: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    qa_weight: Option<f64>,
    #[arg(long)]
    qg_weight: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    keep_prob: Option<f64>,
    #[arg(long)]
    decode_cap: Option<usize>,
    #[arg(long)]
    min_count: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self, base: ModelConfig) -> Result<ModelConfig> {
        let mut c = match &self.config {
            Some(path) => ModelConfig::from_toml(&std::fs::read_to_string(path)?)?,
            None => base,
        };
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { c.$field = v; })*
            };
        }
        set!(
            mode,
            seed,
            d_word,
            d_char,
            d_embed,
            d_model,
            heads,
            lstm_layers,
            gen_hidden,
            layer_norm_eps,
            kappa,
            qa_weight,
            qg_weight,
            clip,
            lr_max,
            warmup_steps,
            batch_size,
            keep_prob,
            decode_cap,
            min_count
        );
        if self.d_attn.is_some() {
            c.d_attn = self.d_attn;
        }
        if self.d_fold.is_some() {
            c.d_fold = self.d_fold;
        }
        if self.ffn_hidden.is_some() {
            c.ffn_hidden = self.ffn_hidden;
        }
        c.no_copy |= self.no_copy;
        c.no_context_attention |= self.no_context_attention;
        c.share_attention |= self.share_attention;
        c.vector_highway_bias |= self.vector_highway_bias;
        c.lstm_residual |= self.lstm_residual;
        c.unshare_output_projection |= self.unshare.contains(&Unshare::OutputProjection);
        c.unshare_qa_encoders |= self.unshare.contains(&Unshare::QaEncoders);
        c.unshare_context_encoder |= self.unshare.contains(&Unshare::ContextEncoder);
        c.encoder_no_lstm |= self.encoder.contains(&EncoderAblation::NoLstm);
        c.encoder_no_selfattn |= self.encoder.contains(&EncoderAblation::NoSelfattn);
        c.validate()?;
        Ok(c)
    }
}

fn load_data(path: &Path) -> Result<Vec<Triplet>> {
    let parsed = parse_squad(path)?;
    if parsed.skipped > 0 {
        warn!("{}: skipped {} questions without a usable answer", path.display(), parsed.skipped);
    }
    if parsed.triplets.is_empty() {
        return Err(Error::Dataset { locator: path.display().to_string(), msg: "no usable triplets".into() });
    }
    Ok(parsed.triplets)
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = args.config.resolve(ModelConfig::default())?;
    let data = load_data(&args.data)?;
    let vocab =
        build_vocabulary(data.iter().flat_map(|t| [&t.context[..], &t.question[..], &t.answer[..]]), cfg.min_count);
    info!("{} triplets, vocabulary of {} words", data.len(), vocab.len());
    let mut model = Model::new(cfg, vocab)?;
    if let Some(path) = &args.embeddings {
        let (table, found) = load_word_embeddings(path, &model.vocab, model.config.d_word, model.config.seed)?;
        info!("{found} of {} words found in {}", model.vocab.len(), path.display());
        *model.registry.get_mut("embed.word_fixed")? = table;
    }
    info!("{} parameters, {} trainable", model.registry.census(), model.registry.trainable_census());
    let batch_size = model.config.batch_size;
    let mut trainer = Trainer::new(model);
    let start = Instant::now();
    for i in 0..args.steps {
        let m = trainer.train_step(&batch_at(&data, batch_size, i))?;
        if m.step % args.log_every.max(1) == 0 || m.step == args.steps {
            info!("{m} ({:.1?})", start.elapsed());
        }
    }
    save_checkpoint(&args.out, &trainer)?;
    println!("wrote {} after {} steps", args.out.display(), trainer.step());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(args) => train(args),
        Command::Generate { ckpt, data, task, out } => {
            let model = load_checkpoint(ckpt)?.model;
            let data = load_data(data)?;
            let decoded = generate(&model, &data, *task)?;
            let mut text = String::new();
            for (i, d) in decoded.iter().enumerate() {
                text.push_str(&d.tokens.join(" "));
                text.push('\n');
                if let Some(dir) = &cli.dump_attention {
                    dump_attention(dir, *task, i, d)?;
                }
            }
            std::fs::write(out, text)?;
            Ok(())
        }
        Command::Eval { ckpt, data, corpus_bleu, rouge_beta } => {
            let data = load_data(data)?;
            let mut rows = Vec::new();
            for path in ckpt {
                let model = load_checkpoint(path)?.model;
                rows.extend(evaluate(&model, &data, *corpus_bleu, *rouge_beta)?);
                if let Some(dir) = &cli.dump_attention {
                    for &task in model.config.mode.tasks() {
                        for (i, d) in generate(&model, &data, task)?.iter().enumerate() {
                            dump_attention(&dir.join(model.config.mode.name()), task, i, d)?;
                        }
                    }
                }
            }
            print!("{}", Report(&rows));
            Ok(())
        }
        Command::Stats { data } => {
            let stats = dataset_stats(&load_data(data)?)?;
            println!("{}\n{stats}", DatasetStats::HEADER);
            Ok(())
        }
        Command::Gradcheck(args) => {
            let mut worst = 0.0f64;
            for seed in 0..args.seeds {
                for r in operation_checks(seed)? {
                    worst = worst.max(r.max_error);
                    if !r.passed() {
                        println!("seed {seed} {} {:.3e} at {:?}", r.name, r.max_error, r.worst);
                    }
                }
                let cfg = args.config.resolve(check_config(seed))?;
                let (vocab, triplet) = random_problem(args.vocab_size, (12, 6, 4), seed);
                let model = Model::new(cfg, vocab)?;
                let r = dual_loss_check(&model, &triplet, seed, Some(args.sample))?;
                println!("seed {seed} dual loss {:.3e}", r.max_error);
                worst = worst.max(r.max_error);
            }
            println!("max relative error {worst:.3e}");
            if worst < TOLERANCE {
                Ok(())
            } else {
                Err(Error::NonFinite(format!("gradient check: relative error {worst:.3e} exceeds {TOLERANCE:e}")))
            }
        }
        Command::Synth { kind, count, seed, out } => {
            let data = match kind {
                Corpus::Qa => qa_corpus(*count, *seed),
                Corpus::Copy => copy_corpus(*count, *seed),
            };
            std::fs::write(out, serde_json::to_string_pretty(&to_squad_json(&data))?)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
