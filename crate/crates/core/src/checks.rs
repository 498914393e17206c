//! Finite-difference checks of every tape operation and of the end-to-end
//! dual loss.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var, MASK_NEG};
use crate::config::ModelConfig;
use crate::data::Triplet;
use crate::embedding::{Vocabulary, SPECIALS};
use crate::error::Result;
use crate::gradcheck::{check_tape_fn, finite_difference_at, max_relative_error, random_tensor, Coord};
use crate::model::Model;
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub worst: Option<Coord>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE
    }
}

type Build = Box<dyn Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>>;

fn case(name: &str, specs: &[(&str, usize, usize)], build: Build) -> (String, Vec<(String, usize, usize)>, Build) {
    (name.to_string(), specs.iter().map(|&(n, r, c)| (n.to_string(), r, c)).collect(), build)
}

fn cases() -> Vec<(String, Vec<(String, usize, usize)>, Build)> {
    let ab = [("a", 2, 3), ("b", 2, 3)];
    let k = Tensor::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.5, -1.0, 0.0]]).expect("rectangular");
    let mut mask = Tensor::zeros(3, 3);
    for (r, c) in [(0, 1), (0, 2), (1, 2)] {
        mask.set(r, c, MASK_NEG);
    }
    let lstm = [("x", 5, 3), ("wx", 3, 8), ("wh", 2, 8), ("b", 1, 8)];
    vec![
        case("matmul", &[("a", 3, 4), ("b", 4, 2)], Box::new(|t, v| t.matmul(v["a"], v["b"]))),
        case("matmul_nt", &[("a", 3, 4), ("b", 5, 4)], Box::new(|t, v| t.matmul_nt(v["a"], v["b"]))),
        case("matmul_nt_self", &[("a", 3, 3)], Box::new(|t, v| t.matmul_nt(v["a"], v["a"]))),
        case("add", &ab, Box::new(|t, v| t.add(v["a"], v["b"]))),
        case("sub", &ab, Box::new(|t, v| t.sub(v["a"], v["b"]))),
        case("mul", &ab, Box::new(|t, v| t.mul(v["a"], v["b"]))),
        case("minimum", &ab, Box::new(|t, v| t.minimum(v["a"], v["b"]))),
        case("add_row", &[("a", 2, 3), ("r", 1, 3)], Box::new(|t, v| t.add_row(v["a"], v["r"]))),
        case("add_scalar", &[("a", 2, 3), ("s", 1, 1)], Box::new(|t, v| t.add_scalar(v["a"], v["s"]))),
        case("affine", &[("a", 2, 3)], Box::new(|t, v| Ok(t.affine(v["a"], -1.5, 1.0)))),
        case("mul_const", &[("a", 2, 3)], Box::new(move |t, v| t.mul_const(v["a"], k.clone()))),
        case("sigmoid", &[("a", 3, 4)], Box::new(|t, v| Ok(t.sigmoid(v["a"])))),
        case("tanh", &[("a", 3, 4)], Box::new(|t, v| Ok(t.tanh(v["a"])))),
        case("relu", &[("a", 3, 4)], Box::new(|t, v| Ok(t.relu(v["a"])))),
        case(
            "log_clamped",
            &[("a", 3, 4)],
            Box::new(|t, v| {
                let p = t.sigmoid(v["a"]);
                Ok(t.log_clamped(p, 1e-12))
            }),
        ),
        case("softmax", &[("a", 3, 4)], Box::new(|t, v| t.softmax_rows(v["a"], None))),
        case("softmax_masked", &[("a", 3, 3)], Box::new(move |t, v| t.softmax_rows(v["a"], Some(&mask)))),
        case(
            "layer_norm",
            &[("x", 4, 5), ("g", 1, 5), ("b", 1, 5)],
            Box::new(|t, v| t.layer_norm(v["x"], v["g"], v["b"], 1e-6)),
        ),
        case("concat_cols", &[("a", 2, 3), ("b", 2, 2)], Box::new(|t, v| t.concat_cols(&[v["a"], v["b"], v["a"]]))),
        case("concat_rows", &[("a", 2, 3), ("b", 1, 3)], Box::new(|t, v| t.concat_rows(&[v["a"], v["b"]]))),
        case("slice_cols", &[("a", 3, 5)], Box::new(|t, v| t.slice_cols(v["a"], 1, 4))),
        case("slice_rows", &[("a", 4, 2)], Box::new(|t, v| t.slice_rows(v["a"], 1, 3))),
        case(
            "gather_rows",
            &[("a", 4, 3)],
            Box::new(|t, v| t.gather_rows(v["a"], vec![Some(2), None, Some(2), Some(0)])),
        ),
        case("reshape", &[("a", 4, 3)], Box::new(|t, v| t.reshape(v["a"], 2, 6))),
        case("group_max", &[("a", 6, 3)], Box::new(|t, v| t.group_max(v["a"], 3))),
        case("sum_all", &[("a", 3, 4)], Box::new(|t, v| Ok(t.sum_all(v["a"])))),
        case("sum_cols", &[("a", 3, 4)], Box::new(|t, v| Ok(t.sum_cols(v["a"])))),
        case("pick", &[("a", 3, 4)], Box::new(|t, v| t.pick(v["a"], vec![Some(1), None, Some(3)]))),
        case("lstm_forward", &lstm, Box::new(|t, v| t.lstm(v["x"], v["wx"], v["wh"], v["b"], false))),
        case("lstm_backward", &lstm, Box::new(|t, v| t.lstm(v["x"], v["wx"], v["wh"], v["b"], true))),
    ]
}

/// Checks every tape operation at random inputs drawn from `seed`, every
/// coordinate perturbed.
pub fn operation_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, specs, build) in cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: BTreeMap<String, Tensor> =
            specs.iter().map(|(n, r, c)| (n.clone(), random_tensor(*r, *c, 1.0, &mut rng))).collect();
        let (max_error, worst) = check_tape_fn(&params, EPS, seed, None, &build)?;
        out.push(CheckResult { name, max_error, worst });
    }
    Ok(out)
}

/// Configuration of the end-to-end check: small widths, one LSTM layer,
/// two heads, dropout off.
pub fn check_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        d_word: 16,
        d_char: 8,
        d_embed: 16,
        heads: 2,
        lstm_layers: 1,
        keep_prob: 1.0,
        seed,
        ..ModelConfig::default()
    }
}

/// A random vocabulary of `vocab_size` entries (specials included) and one
/// triplet with the given context, question and answer lengths. The
/// context holds one out-of-vocabulary word, which the answer repeats.
pub fn random_problem(vocab_size: usize, lengths: (usize, usize, usize), seed: u64) -> (Vocabulary, Triplet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..vocab_size - SPECIALS.len()).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::from_tokens(words.clone());
    let (n, m, k) = lengths;
    let mut draw =
        |len: usize| -> Vec<String> { (0..len).map(|_| words.choose(&mut rng).expect("words").clone()).collect() };
    let mut context = draw(n);
    let question = draw(m);
    let mut answer = draw(k);
    let oov = "unseen".to_string();
    let at = rng.gen_range(0..n);
    context[at] = oov.clone();
    answer[0] = oov;
    let triplet = Triplet::new("check", &question.join(" "), &context.join(" "), &answer.join(" "));
    (vocab, triplet)
}

/// Compares the backward pass of the dual loss on `triplet` with central
/// differences at `sample` random coordinates of every trainable tensor
/// (all coordinates when `None`).
pub fn dual_loss_check(model: &Model, triplet: &Triplet, seed: u64, sample: Option<usize>) -> Result<CheckResult> {
    let mut tape = Tape::new();
    let p = model.registry.bind(&mut tape);
    let (loss, _) = model.dual_loss(&mut tape, &p, triplet, &mut None)?;
    let analytic = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = model.registry.trainable();
    let mut coords = Vec::new();
    for (name, t) in &work {
        match sample {
            Some(k) if t.len() > k => coords.extend((0..k).map(|_| (name.clone(), rng.gen_range(0..t.len())))),
            _ => coords.extend((0..t.len()).map(|i| (name.clone(), i))),
        }
    }
    let numeric = finite_difference_at(&mut work, EPS, &coords, |overrides| {
        let mut tape = Tape::new();
        let p = model.registry.bind_with(&mut tape, overrides);
        let (loss, _) = model.dual_loss(&mut tape, &p, triplet, &mut None)?;
        Ok(tape.value(loss).item())
    })?;
    let (max_error, worst) = max_relative_error(&analytic, &numeric);
    Ok(CheckResult { name: "dual_loss".into(), max_error, worst })
}
