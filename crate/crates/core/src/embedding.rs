//! Word + character embedding with a linear projection and highway layer.
//! One parameter set serves the context, question and answer.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::registry::{ParamBuilder, Scope};
use crate::tensor::{fan_avg_init_with, Tensor};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const START: usize = 2;
pub const END: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<start>", "<end>"];

pub const MAX_WORD_LEN: usize = 16;
pub const CONV_WIDTH: usize = 3;
/// Unknown-character id followed by the 95 printable ASCII characters.
pub const NUM_CHARS: usize = 96;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in words {
            if !SPECIALS.contains(&w.as_str()) {
                tokens.push(w);
            }
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or `UNK` when it is not in the vocabulary.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Keeps tokens seen at least `min_count` times. Ids after the specials are
/// assigned by descending count, ties broken lexicographically.
pub fn build_vocabulary<'c, S: AsRef<str> + 'c>(
    corpus: impl IntoIterator<Item = &'c [S]>,
    min_count: usize,
) -> Vocabulary {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for seq in corpus {
        for tok in seq {
            *counts.entry(tok.as_ref()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()))
}

pub fn char_id(c: char) -> usize {
    match c {
        ' '..='~' => c as usize - ' ' as usize + 1,
        _ => 0,
    }
}

/// Character ids of a word truncated or padded to [`MAX_WORD_LEN`]; padding
/// is `None`.
pub fn char_ids(word: &str) -> [Option<usize>; MAX_WORD_LEN] {
    let mut out = [None; MAX_WORD_LEN];
    for (slot, c) in out.iter_mut().zip(word.chars()) {
        *slot = Some(char_id(c));
    }
    out
}

/// Word ids and character ids of a token sequence, ready to embed.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenIds {
    pub words: Vec<usize>,
    pub chars: Vec<[Option<usize>; MAX_WORD_LEN]>,
}

impl TokenIds {
    pub fn new(vocab: &Vocabulary, tokens: &[String]) -> Self {
        TokenIds {
            words: tokens.iter().map(|t| vocab.id(t)).collect(),
            chars: tokens.iter().map(|t| char_ids(t)).collect(),
        }
    }

    /// `START` followed by `tokens`: the teacher-forced decoder input.
    pub fn shifted(vocab: &Vocabulary, tokens: &[String]) -> Self {
        let mut ids = TokenIds { words: vec![START], chars: vec![char_ids(SPECIALS[START])] };
        let rest = TokenIds::new(vocab, tokens);
        ids.words.extend(rest.words);
        ids.chars.extend(rest.chars);
        ids
    }

    pub fn push(&mut self, vocab: &Vocabulary, token: &str) {
        self.words.push(vocab.id(token));
        self.chars.push(char_ids(token));
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

pub fn declare(b: &mut ParamBuilder, cfg: &ModelConfig, vocab_size: usize) {
    let table = random_word_table(vocab_size, cfg.d_word, &mut b.rng_for("embed.word_fixed"));
    b.frozen("word_fixed", table);
    b.fan_avg("word_special", 3, cfg.d_word);
    b.fan_avg("char", NUM_CHARS, cfg.d_char);
    b.fan_avg("conv_w", CONV_WIDTH * cfg.d_char, cfg.d_char);
    b.constant("conv_b", 1, cfg.d_char, 0.0);
    let bias_width = if cfg.vector_highway_bias { cfg.d_embed } else { 1 };
    b.fan_avg("h1", cfg.d_word + cfg.d_char, cfg.d_embed);
    b.fan_avg("h2", cfg.d_embed, cfg.d_embed);
    b.fan_avg("h3", cfg.d_embed, cfg.d_embed);
    for v in ["v1", "v2", "v3"] {
        b.constant(v, 1, bias_width, 0.0);
    }
}

/// Fixed word table: fan-avg rows for every vocabulary word, zeros for the
/// special rows (PAD stays zero; UNK/START/END live in the trainable table).
fn random_word_table(vocab_size: usize, d_word: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = fan_avg_init_with(vocab_size.max(1), d_word, rng);
    for id in [PAD, UNK, START, END] {
        if id < vocab_size {
            t.row_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    t
}

/// Reads a whitespace-separated text embedding file (word then `d_word`
/// floats per line) into a fixed word table for `vocab`. Vocabulary words
/// missing from the file keep a random fan-avg row; the PAD row is zero.
/// Returns the table and how many vocabulary words were found.
pub fn load_word_embeddings(path: &Path, vocab: &Vocabulary, d_word: usize, seed: u64) -> Result<(Tensor, usize)> {
    let mut table = random_word_table(vocab.len(), d_word, &mut ChaCha8Rng::seed_from_u64(seed));
    let file = std::fs::File::open(path)?;
    let mut found = 0;
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::EmbeddingFile { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })?;
        if values.len() != d_word {
            return Err(Error::EmbeddingFile {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected {d_word} values, found {}", values.len()),
            });
        }
        match vocab.get(word) {
            Some(id) if id > END => {
                table.row_mut(id).copy_from_slice(&values);
                found += 1;
            }
            _ => {}
        }
    }
    Ok((table, found))
}

/// Embeds a token sequence to `L × d_embed`.
pub fn embed_sequence(tape: &mut Tape, p: &Scope, ids: &TokenIds) -> Result<Var> {
    let l = ids.len();
    if l == 0 {
        return Err(Error::EmptySequence("embed_sequence"));
    }
    let fixed_ids = ids.words.iter().map(|&w| (!(UNK..=END).contains(&w)).then_some(w)).collect();
    let special_ids = ids.words.iter().map(|&w| (UNK..=END).contains(&w).then(|| w - UNK)).collect();
    let fixed = tape.gather_rows(p.get("word_fixed")?, fixed_ids)?;
    let special = tape.gather_rows(p.get("word_special")?, special_ids)?;
    let word = tape.add(fixed, special)?;

    let char_vec = char_cnn(tape, p, &ids.chars)?;
    let joined = tape.concat_cols(&[word, char_vec])?;
    let e = tape.matmul(joined, p.get("h1")?)?;
    let e = add_bias(tape, e, p.get("v1")?)?;
    Ok(highway(tape, p, e)?.0)
}

/// `g ⊙ e + (1 − g) ⊙ (e·H3 + v3)` with gate `g = σ(e·H2 + v2)`. Returns
/// the output and the gate.
fn highway(tape: &mut Tape, p: &Scope, e: Var) -> Result<(Var, Var)> {
    let gate = tape.matmul(e, p.get("h2")?)?;
    let gate = add_bias(tape, gate, p.get("v2")?)?;
    let gate = tape.sigmoid(gate);
    let transform = tape.matmul(e, p.get("h3")?)?;
    let transform = add_bias(tape, transform, p.get("v3")?)?;
    let carried = tape.mul(gate, e)?;
    let one_minus = tape.affine(gate, -1.0, 1.0);
    let transformed = tape.mul(one_minus, transform)?;
    Ok((tape.add(carried, transformed)?, gate))
}

fn add_bias(tape: &mut Tape, x: Var, bias: Var) -> Result<Var> {
    if tape.value(bias).len() == 1 {
        tape.add_scalar(x, bias)
    } else {
        tape.add_row(x, bias)
    }
}

/// Width-3 same-padded convolution over each word's characters followed by
/// max-over-time pooling: `L × d_char`.
fn char_cnn(tape: &mut Tape, p: &Scope, chars: &[[Option<usize>; MAX_WORD_LEN]]) -> Result<Var> {
    let table = p.get("char")?;
    let d_char = tape.value(table).cols();
    let half = CONV_WIDTH / 2;
    let mut window_ids = Vec::with_capacity(chars.len() * MAX_WORD_LEN * CONV_WIDTH);
    for word in chars {
        for pos in 0..MAX_WORD_LEN {
            for k in 0..CONV_WIDTH {
                let src = (pos + k).checked_sub(half).filter(|&s| s < MAX_WORD_LEN);
                window_ids.push(src.and_then(|s| word[s]));
            }
        }
    }
    let windows = tape.gather_rows(table, window_ids)?;
    let windows = tape.reshape(windows, chars.len() * MAX_WORD_LEN, CONV_WIDTH * d_char)?;
    let conv = tape.matmul(windows, p.get("conv_w")?)?;
    let conv = tape.add_row(conv, p.get("conv_b")?)?;
    tape.group_max(conv, MAX_WORD_LEN)
}
