//! BLEU-1..4 and ROUGE-L over token sequences.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches, the candidate's n-gram total and the
/// reference's n-gram total.
fn clipped<T: Hash + Eq>(candidate: &[T], reference: &[T], n: usize) -> [usize; 3] {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let matched = cand.iter().map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0))).sum();
    [matched, candidate.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1)]
}

/// Orders that neither side is long enough to contain are left out of the
/// geometric mean; any other order with no match gives 0.
fn combine(counts: &[[usize; 3]], cand_len: usize, ref_len: usize) -> f64 {
    let used: Vec<&[usize; 3]> = counts.iter().filter(|[_, c, r]| *c > 0 || *r > 0).collect();
    if cand_len == 0 || used.iter().any(|[m, _, _]| *m == 0) {
        return 0.0;
    }
    let log_mean = used.iter().map(|[m, c, _]| (*m as f64 / *c as f64).ln()).sum::<f64>() / used.len() as f64;
    let bp = (1.0 - ref_len as f64 / cand_len as f64).min(0.0).exp();
    bp * log_mean.exp()
}

/// Sentence BLEU: geometric mean of clipped n-gram precisions for
/// `n = 1..=max_n` times the brevity penalty, without smoothing.
pub fn bleu<T: Hash + Eq>(candidate: &[T], reference: &[T], max_n: usize) -> f64 {
    assert!(max_n >= 1, "bleu needs max_n >= 1");
    let counts: Vec<[usize; 3]> = (1..=max_n).map(|n| clipped(candidate, reference, n)).collect();
    combine(&counts, candidate.len(), reference.len())
}

/// Corpus BLEU: n-gram matches, totals and lengths are summed over all
/// pairs before combining.
pub fn corpus_bleu<T: Hash + Eq>(pairs: &[(&[T], &[T])], max_n: usize) -> f64 {
    assert!(max_n >= 1, "bleu needs max_n >= 1");
    let mut counts = vec![[0; 3]; max_n];
    let (mut c_len, mut r_len) = (0, 0);
    for (cand, reference) in pairs {
        for (n, acc) in counts.iter_mut().enumerate() {
            let c = clipped(cand, reference, n + 1);
            acc.iter_mut().zip(c).for_each(|(a, v)| *a += v);
        }
        c_len += cand.len();
        r_len += reference.len();
    }
    combine(&counts, c_len, r_len)
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure `(1+β²)PR / (R + β²P)` from the longest common
/// subsequence.
pub fn rouge_l_beta<T: Eq>(candidate: &[T], reference: &[T], beta: f64) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// ROUGE-L F1.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    rouge_l_beta(candidate, reference, 1.0)
}

/// BLEU-1..4 and ROUGE-L for one direction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Scores {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
}

impl Scores {
    pub const HEADER: &'static str = "B1\tB2\tB3\tB4\tRL";

    /// Macro-averaged sentence scores, or corpus BLEU when `corpus` is set
    /// (ROUGE-L is always macro-averaged).
    pub fn compute<T: Hash + Eq>(pairs: &[(&[T], &[T])], corpus: bool, beta: f64) -> Scores {
        if pairs.is_empty() {
            return Scores::default();
        }
        let n = pairs.len() as f64;
        let mut bleu_scores = [0.0; 4];
        for (k, slot) in bleu_scores.iter_mut().enumerate() {
            *slot = if corpus {
                corpus_bleu(pairs, k + 1)
            } else {
                pairs.iter().map(|(c, r)| bleu(c, r, k + 1)).sum::<f64>() / n
            };
        }
        let rouge = pairs.iter().map(|(c, r)| rouge_l_beta(c, r, beta)).sum::<f64>() / n;
        Scores { bleu: bleu_scores, rouge_l: rouge }
    }
}

/// Percentages with two decimals, tab separated.
impl fmt::Display for Scores {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.bleu {
            write!(f, "{:.2}\t", 100.0 * b)?;
        }
        write!(f, "{:.2}", 100.0 * self.rouge_l)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn t(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu(&t("the cat sat"), &t("the cat sat"), 4), 1.0);
        assert_eq!(bleu(&t("the cat"), &t("the cat sat on"), 3), 0.0);
        let s = t("a b c d e");
        for n in 1..=4 {
            assert!((bleu(&s, &s, n) - 1.0).abs() < 1e-12);
        }
        assert_eq!(bleu(&t("x y"), &t("a b"), 1), 0.0);
        assert!((bleu(&t("the cat"), &t("the cat sat"), 1) - (-0.5f64).exp()).abs() < 1e-9);
        assert_eq!(bleu::<&str>(&[], &t("a"), 1), 0.0);
        // clipping: "the the the" against "the cat" matches one "the"
        assert!((bleu(&t("the the the"), &t("the cat"), 1) - 1.0 / 3.0).abs() < 1e-12);
        // bigram precision 1/2, unigram 2/3: sqrt(1/3)
        let got = bleu(&t("a b x"), &t("a b c"), 2);
        assert!((got - (2.0f64 / 3.0 * 0.5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&t("a b c"), &t("a b c")), 1.0);
        assert_eq!(rouge_l(&t("a b"), &t("c d")), 0.0);
        assert!((rouge_l(&t("a b c d"), &t("a c b d")) - 0.75).abs() < 1e-9);
        assert_eq!(rouge_l::<&str>(&[], &[]), 0.0);
        // P = 1, R = 1/2: β = 1 gives 2/3, large β approaches R
        let (c, r) = (t("a b"), t("a x b y"));
        assert!((rouge_l(&c, &r) - 2.0 / 3.0).abs() < 1e-12);
        assert!((rouge_l_beta(&c, &r, 1e3) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn corpus_bleu_pools_counts() {
        let (a, b) = (t("a b c d"), t("x y"));
        let (ra, rb) = (t("a b c d"), t("x z"));
        let pooled = corpus_bleu(&[(&a[..], &ra[..]), (&b[..], &rb[..])], 1);
        assert!((pooled - 5.0 / 6.0).abs() < 1e-12);
        let scores = Scores::compute(&[(&a[..], &ra[..]), (&b[..], &rb[..])], false, 1.0);
        assert!((scores.bleu[0] - (1.0 + 0.5) / 2.0).abs() < 1e-12);
        assert_eq!(scores.bleu[1], 0.5);
        assert_eq!(scores.to_string().split('\t').count(), 5);
    }

    fn seq() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..6, 0..12)
    }

    proptest! {
        #[test]
        fn scores_in_unit_interval(c in seq(), r in seq(), n in 1usize..5) {
            let b = bleu(&c, &r, n);
            let l = rouge_l(&c, &r);
            prop_assert!((0.0..=1.0).contains(&b));
            prop_assert!((0.0..=1.0).contains(&l));
        }

        #[test]
        fn identical_sequences_score_one(c in prop::collection::vec(0u8..6, 1..12)) {
            prop_assert!((bleu(&c, &c, 4) - 1.0).abs() < 1e-12);
            prop_assert_eq!(rouge_l(&c, &c), 1.0);
        }

        #[test]
        fn renaming_tokens_changes_nothing(c in seq(), r in seq(), n in 1usize..5, shift in 1u8..50) {
            let rename = |s: &[u8]| s.iter().map(|x| x.wrapping_mul(7).wrapping_add(shift)).collect::<Vec<u8>>();
            prop_assert_eq!(bleu(&c, &r, n), bleu(&rename(&c), &rename(&r), n));
            prop_assert_eq!(rouge_l(&c, &r), rouge_l(&rename(&c), &rename(&r)));
        }

        #[test]
        fn sub_multiset_unigram_bleu_is_brevity_penalty(r in prop::collection::vec(0u8..6, 1..12), keep in prop::collection::vec(any::<bool>(), 12)) {
            let c: Vec<u8> = r.iter().zip(&keep).filter(|(_, &k)| k).map(|(x, _)| *x).collect();
            prop_assume!(!c.is_empty());
            let bp = (1.0 - r.len() as f64 / c.len() as f64).min(0.0).exp();
            prop_assert!((bleu(&c, &r, 1) - bp).abs() < 1e-12);
        }
    }
}
