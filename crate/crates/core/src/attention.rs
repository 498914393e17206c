//! Two-step fold-in attention. The counterpart sequence is folded into the
//! context first; the decoding prefix then attends over that enriched
//! context. Both steps are the same bilinear attention with their own
//! `(U, V)` pair, so QA and QG run through one code path.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::registry::{ParamBuilder, Scope};

pub fn declare_site(b: &mut ParamBuilder, d_enc: usize, d_fold: usize) {
    b.fan_avg("u", d_enc, d_fold);
    b.fan_avg("v", d_enc, d_fold);
}

/// `softmax_rows((X U)(Y V)ᵀ / √d_enc)`: one row per query in `x`, one
/// column per key in `y`.
pub fn bilinear_scores(tape: &mut Tape, p: &Scope, x: Var, y: Var) -> Result<Var> {
    let d_enc = tape.value(x).cols();
    let xu = tape.matmul(x, p.get("u")?)?;
    let yv = tape.matmul(y, p.get("v")?)?;
    let logits = tape.matmul_nt(xu, yv)?;
    let logits = tape.affine(logits, 1.0 / (d_enc as f64).sqrt(), 0.0);
    tape.softmax_rows(logits, None)
}

/// Each query row replaced by its attention-weighted average of `keys`,
/// returned with the scores.
pub fn fold(tape: &mut Tape, p: &Scope, queries: Var, keys: Var) -> Result<(Var, Var)> {
    let scores = bilinear_scores(tape, p, queries, keys)?;
    let out = tape.matmul(scores, keys)?;
    Ok((out, scores))
}

/// Folds the counterpart into the context: `n × d_enc`, one row per
/// context position.
pub fn fold_first(tape: &mut Tape, p: &Scope, context: Var, counterpart: Var) -> Result<Var> {
    Ok(fold(tape, p, context, counterpart)?.0)
}

/// Folds the enriched context into the decoding prefix. Returns the folded
/// prefix and the `t × n` scores that the output layer recycles as its
/// copy distribution and the loss uses for coverage.
pub fn fold_second(tape: &mut Tape, p: &Scope, prefix: Var, folded: Var) -> Result<(Var, Var)> {
    fold(tape, p, prefix, folded)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{check_tape_fn, random_tensor};
    use crate::registry::{ParameterRegistry, Params};
    use crate::tensor::Tensor;

    fn sites(d: usize, d_fold: usize, seed: u64) -> ParameterRegistry {
        let mut r = ParameterRegistry::new();
        let mut b = ParamBuilder::new(&mut r, seed);
        declare_site(&mut b.sub("first"), d, d_fold);
        declare_site(&mut b.sub("second"), d, d_fold);
        r
    }

    fn run_fold(r: &ParameterRegistry, site: &str, q: &Tensor, k: &Tensor) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let p = r.bind(&mut tape);
        let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
        let (out, s) = fold(&mut tape, &p.scope(site), qv, kv).unwrap();
        (tape.value(out).clone(), tape.value(s).clone())
    }

    #[test]
    fn single_key_gets_all_mass() {
        let r = sites(4, 3, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_tensor(5, 4, 1.0, &mut rng);
        let k = random_tensor(1, 4, 1.0, &mut rng);
        let (out, s) = run_fold(&r, "first", &q, &k);
        assert_eq!(s.shape(), &[5, 1]);
        assert!(s.data().iter().all(|&v| v == 1.0));
        for i in 0..5 {
            assert_eq!(out.row(i), k.row(0));
        }
    }

    #[test]
    fn scores_match_printed_formula() {
        let r = sites(4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(2, 4, 1.0, &mut rng);
        let y = random_tensor(3, 4, 1.0, &mut rng);
        let (_, s) = run_fold(&r, "first", &x, &y);
        let (u, v) = (r.get("first.u").unwrap(), r.get("first.v").unwrap());
        let (xu, yv) = (x.matmul(u), y.matmul(v));
        for i in 0..2 {
            let logits: Vec<f64> =
                (0..3).map(|j| (0..3).map(|k| xu.get(i, k) * yv.get(j, k)).sum::<f64>() / 2.0).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..3 {
                assert!((s.get(i, j) - logits[j].exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn folded_rows_are_convex_combinations() {
        let r = sites(5, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let q = random_tensor(6, 5, 2.0, &mut rng);
            let k = random_tensor(4, 5, 2.0, &mut rng);
            let (out, s) = run_fold(&r, "first", &q, &k);
            assert_eq!(out.rows(), 6);
            for i in 0..6 {
                assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for c in 0..5 {
                    let col: Vec<f64> = (0..4).map(|j| k.get(j, c)).collect();
                    let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
                    assert!(out.get(i, c) >= lo - 1e-12 && out.get(i, c) <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn second_fold_rows_are_independent() {
        let r = sites(4, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let prefix = random_tensor(3, 4, 1.0, &mut rng);
        let folded = random_tensor(5, 4, 1.0, &mut rng);
        let (all_out, all_s) = run_fold(&r, "second", &prefix, &folded);
        for t in 0..3 {
            let row = Tensor::from_rows(&[prefix.row(t).to_vec()]).unwrap();
            let (out, s) = run_fold(&r, "second", &row, &folded);
            assert_eq!(s.row(0), all_s.row(t));
            assert_eq!(out.row(0), all_out.row(t));
        }
    }

    /// One generic pipeline: fold `counterpart` into `context`, then fold the
    /// result into `prefix`.
    fn two_step(r: &ParameterRegistry, first: &str, second: &str, ctx: &Tensor, cp: &Tensor, pre: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let p = r.bind(&mut tape);
        let (c, q, d) = (tape.constant(ctx.clone()), tape.constant(cp.clone()), tape.constant(pre.clone()));
        let folded = fold_first(&mut tape, &p.scope(first), c, q).unwrap();
        let (out, _) = fold_second(&mut tape, &p.scope(second), d, folded).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn swapping_modalities_and_sites_mirrors_the_computation() {
        let mut r = ParameterRegistry::new();
        {
            let mut b = ParamBuilder::new(&mut r, 8);
            for site in ["context_answer", "context_question", "question_context", "answer_context"] {
                declare_site(&mut b.sub(site), 4, 3);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ctx = random_tensor(6, 4, 1.0, &mut rng);
        let question = random_tensor(3, 4, 1.0, &mut rng);
        let answer = random_tensor(2, 4, 1.0, &mut rng);
        // question generation folds the answer in and decodes the question
        let qg = two_step(&r, "context_answer", "question_context", &ctx, &answer, &question);
        // the same sites with the modalities swapped are a QA computation
        let mut mirrored = r.clone();
        for (a, b) in [("context_answer", "context_question"), ("question_context", "answer_context")] {
            for leaf in ["u", "v"] {
                let ta = r.get(&format!("{a}.{leaf}")).unwrap().clone();
                let tb = r.get(&format!("{b}.{leaf}")).unwrap().clone();
                *mirrored.get_mut(&format!("{b}.{leaf}")).unwrap() = ta;
                *mirrored.get_mut(&format!("{a}.{leaf}")).unwrap() = tb;
            }
        }
        let qa = two_step(&mirrored, "context_question", "answer_context", &ctx, &answer, &question);
        assert_eq!(qa, qg);
    }

    #[test]
    fn fold_gradients_match_finite_differences() {
        for seed in 0..3 {
            let r = sites(4, 3, seed);
            let mut params = r.tensors().clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 30);
            params.insert("ctx".into(), random_tensor(5, 4, 1.0, &mut rng));
            params.insert("cp".into(), random_tensor(3, 4, 1.0, &mut rng));
            params.insert("pre".into(), random_tensor(4, 4, 1.0, &mut rng));
            let build = |tape: &mut Tape, v: &BTreeMap<String, Var>| {
                let p = Params::from_vars(v.clone());
                let folded = fold_first(tape, &p.scope("first"), v["ctx"], v["cp"])?;
                let (out, scores) = fold_second(tape, &p.scope("second"), v["pre"], folded)?;
                let s = tape.sum_all(scores);
                let o = tape.sum_all(out);
                let sq = tape.mul(out, out)?;
                let sq = tape.sum_all(sq);
                let t = tape.add(o, sq)?;
                tape.add(t, s)
            };
            let (err, at) = check_tape_fn(&params, 1e-5, seed, None, &build).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err:e} at {at:?}");
        }
    }

    proptest! {
        #[test]
        fn score_rows_are_distributions(seed in 0u64..1000, p in 1usize..6, q in 1usize..6) {
            let r = sites(3, 2, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(p, 3, 3.0, &mut rng);
            let y = random_tensor(q, 3, 3.0, &mut rng);
            let (_, s) = run_fold(&r, "first", &x, &y);
            for i in 0..p {
                prop_assert!(s.row(i).iter().all(|&v| v >= 0.0));
                prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
