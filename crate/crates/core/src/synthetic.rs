//! Small generated corpora for overfitting and copy checks.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Triplet;

const NAMES: [&str; 14] = [
    "alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy", "mallory", "niaj", "olivia",
    "peggy",
];
const VERBS: [&str; 12] =
    ["bought", "sold", "found", "lost", "painted", "built", "hid", "moved", "cleaned", "fixed", "stole", "drew"];
const OBJECTS: [&str; 14] =
    ["lamp", "boat", "chair", "kite", "clock", "drum", "map", "vase", "sword", "coin", "book", "ring", "hat", "key"];
const PLACES: [&str; 12] =
    ["paris", "rome", "oslo", "lima", "cairo", "tokyo", "delhi", "quito", "bern", "dakar", "hanoi", "perth"];

fn sentence(f: &[&str; 4]) -> String {
    format!("{} {} the {} in {} .", f[0], f[1], f[2], f[3])
}

/// `count` facts `name verb the object in place .` with no word repeated
/// across facts, so every question has exactly one answer.
fn facts(rng: &mut ChaCha8Rng, count: usize) -> Vec<[&'static str; 4]> {
    let pick = |rng: &mut ChaCha8Rng, pool: &[&'static str]| -> Vec<&'static str> {
        pool.choose_multiple(rng, count).copied().collect()
    };
    let (n, v, o, p) = (pick(rng, &NAMES), pick(rng, &VERBS), pick(rng, &OBJECTS), pick(rng, &PLACES));
    (0..count).map(|i| [n[i], v[i], o[i], p[i]]).collect()
}

/// Question answering over short fact lists: each context holds two or
/// three facts and a closing clause (17 to 24 tokens). The question names
/// the subject and verb of one fact (`what did alice buy ?`) and the
/// answer is the rest of it (`the lamp in paris`). The corpus uses about 60
/// distinct words.
pub fn qa_corpus(n: usize, seed: u64) -> Vec<Triplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let count = rng.gen_range(2..=3);
            let facts = facts(&mut rng, count);
            let mut context = facts.iter().map(sentence).collect::<Vec<_>>().join(" ");
            let dots = if count == 2 { rng.gen_range(1..=4) } else { 1 };
            context.push_str(&format!(" the end{}", " .".repeat(dots)));
            let target = facts.choose(&mut rng).unwrap();
            let question = format!("what did {} {} ?", target[0], target[1]);
            let answer = format!("the {} in {}", target[2], target[3]);
            Triplet::new(&format!("qa-{i}"), &question, &context, &answer)
        })
        .collect()
}

/// Every answer is a single made-up code word that occurs once in its
/// context and nowhere else in the corpus; with a vocabulary built at
/// `min_count >= 3` these are context-only out-of-vocabulary tokens.
pub fn copy_corpus(n: usize, seed: u64) -> Vec<Triplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let code = format!("zx{i}q{}", rng.gen_range(100..1000));
            let owner = NAMES[i % NAMES.len()];
            let f = facts(&mut rng, 1)[0];
            let context = if rng.gen_bool(0.5) {
                format!("{} the code of {owner} is {code} .", sentence(&f))
            } else {
                format!("the code of {owner} is {code} . {}", sentence(&f))
            };
            let question = format!("what is the code of {owner} ?");
            Triplet::new(&format!("copy-{i}"), &question, &context, &code)
        })
        .collect()
}
