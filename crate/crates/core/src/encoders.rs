//! Context, question and answer encoders: a feed-forward block, a stacked
//! LSTM block and a multi-head self-attention block, each followed by layer
//! normalization, with the block outputs concatenated along features.

use crate::autodiff::{Tape, Var, MASK_NEG};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{self, declare_dense, declare_layer_norm, declare_lstm, Direction, Dropout};
use crate::registry::{ParamBuilder, Scope};
use crate::tensor::Tensor;

/// How an encoder reads its sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reading {
    /// Bidirectional LSTMs and unmasked self-attention (the context).
    Bidirectional,
    /// Forward LSTMs and causally masked self-attention (questions and
    /// answers, which are also decoded).
    Causal,
}

/// `0` where position `i` may attend to position `j ≤ i`, [`MASK_NEG`]
/// above the diagonal.
pub fn causal_mask(len: usize) -> Tensor {
    let mut m = Tensor::zeros(len, len);
    for i in 0..len {
        for j in i + 1..len {
            m.set(i, j, MASK_NEG);
        }
    }
    m
}

pub fn declare(b: &mut ParamBuilder, cfg: &ModelConfig, reading: Reading) {
    let d = cfg.d_model;
    declare_dense(&mut b.sub("ffn.l1"), cfg.d_embed, cfg.ffn_hidden());
    declare_dense(&mut b.sub("ffn.l2"), cfg.ffn_hidden(), d);
    declare_layer_norm(&mut b.sub("ln1"), d);
    if !cfg.encoder_no_lstm {
        for k in 0..cfg.lstm_layers {
            match reading {
                Reading::Bidirectional => {
                    declare_lstm(&mut b.sub(&format!("lstm{k}.fwd")), d, d / 2);
                    declare_lstm(&mut b.sub(&format!("lstm{k}.bwd")), d, d / 2);
                }
                Reading::Causal => declare_lstm(&mut b.sub(&format!("lstm{k}.fwd")), d, d),
            }
        }
        declare_layer_norm(&mut b.sub("ln2"), d);
    }
    if !cfg.encoder_no_selfattn {
        for h in 0..cfg.heads {
            b.fan_avg(&format!("attn.r{h}"), d, cfg.d_attn() / cfg.heads);
        }
        declare_layer_norm(&mut b.sub("ln3"), d);
    }
}

/// Multi-head self-attention. Head `h` scores with its own projection
/// `R_h` and averages the `h`-th slice of the input features.
pub fn self_attention(tape: &mut Tape, p: &Scope, x: Var, heads: usize, mask: Option<&Tensor>) -> Result<Var> {
    let (len, d) = (tape.value(x).rows(), tape.value(x).cols());
    if d % heads != 0 {
        return Err(Error::Shape(format!("self_attention: width {d} not divisible by {heads} heads")));
    }
    let slice = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let r = p.get(&format!("r{h}"))?;
        let d_head = tape.value(r).cols();
        let xr = tape.matmul(x, r)?;
        let scores = tape.matmul_nt(xr, xr)?;
        let scores = tape.affine(scores, 1.0 / (d_head as f64).sqrt(), 0.0);
        let weights = tape.softmax_rows(scores, mask)?;
        let value = if heads == 1 { x } else { tape.slice_cols(x, h * slice, (h + 1) * slice)? };
        outs.push(tape.matmul(weights, value)?);
    }
    debug_assert_eq!(tape.value(outs[0]).rows(), len);
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Encodes an embedded sequence `L × d_embed` to `L × d_enc`.
pub fn encode(
    tape: &mut Tape,
    p: &Scope,
    cfg: &ModelConfig,
    x: Var,
    reading: Reading,
    dropout: &mut Option<&mut Dropout>,
) -> Result<Var> {
    let len = tape.value(x).rows();
    if len == 0 {
        return Err(Error::EmptySequence("encode"));
    }
    let eps = cfg.layer_norm_eps;
    let h = nn::dense(tape, &p.sub("ffn.l1"), x)?;
    let h = tape.relu(h);
    let f = nn::dense(tape, &p.sub("ffn.l2"), h)?;
    let f = nn::layer_normalize(tape, &p.sub("ln1"), f, eps)?;
    let f = nn::maybe_dropout(tape, dropout, f)?;
    let mut blocks = vec![f];
    let mut last = f;

    if !cfg.encoder_no_lstm {
        let mut s = last;
        for k in 0..cfg.lstm_layers {
            let fwd = nn::lstm_sequence(tape, &p.sub(&format!("lstm{k}.fwd")), s, Direction::Forward)?;
            let out = match reading {
                Reading::Bidirectional => {
                    let bwd = nn::lstm_sequence(tape, &p.sub(&format!("lstm{k}.bwd")), s, Direction::Backward)?;
                    tape.concat_cols(&[fwd, bwd])?
                }
                Reading::Causal => fwd,
            };
            s = if cfg.lstm_residual { tape.add(s, out)? } else { out };
        }
        let l = nn::layer_normalize(tape, &p.sub("ln2"), s, eps)?;
        let l = nn::maybe_dropout(tape, dropout, l)?;
        blocks.push(l);
        last = l;
    }

    if !cfg.encoder_no_selfattn {
        let mask = match reading {
            Reading::Bidirectional => None,
            Reading::Causal => Some(causal_mask(len)),
        };
        let a = self_attention(tape, &p.sub("attn"), last, cfg.heads, mask.as_ref())?;
        let a = nn::layer_normalize(tape, &p.sub("ln3"), a, eps)?;
        let a = nn::maybe_dropout(tape, dropout, a)?;
        blocks.push(a);
    }
    tape.concat_cols(&blocks)
}

pub fn encode_context(
    tape: &mut Tape,
    p: &Scope,
    cfg: &ModelConfig,
    x: Var,
    dropout: &mut Option<&mut Dropout>,
) -> Result<Var> {
    encode(tape, p, cfg, x, Reading::Bidirectional, dropout)
}

pub fn encode_autoregressive(
    tape: &mut Tape,
    p: &Scope,
    cfg: &ModelConfig,
    x: Var,
    dropout: &mut Option<&mut Dropout>,
) -> Result<Var> {
    encode(tape, p, cfg, x, Reading::Causal, dropout)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{check_tape_fn, random_tensor};
    use crate::registry::{ParameterRegistry, Params};

    fn cfg() -> ModelConfig {
        ModelConfig { d_embed: 6, d_model: 8, heads: 2, lstm_layers: 2, ..ModelConfig::tiny() }
    }

    fn encoder(cfg: &ModelConfig, reading: Reading, seed: u64) -> ParameterRegistry {
        let mut r = ParameterRegistry::new();
        declare(&mut ParamBuilder::new(&mut r, seed).sub("enc"), cfg, reading);
        r
    }

    fn run(r: &ParameterRegistry, cfg: &ModelConfig, x: &Tensor, reading: Reading) -> Tensor {
        let mut tape = Tape::new();
        let p = r.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = encode(&mut tape, &p.scope("enc"), cfg, xv, reading, &mut None).unwrap();
        tape.value(out).clone()
    }

    fn attend(r: &Tensor, x: &Tensor, mask: Option<&Tensor>) -> Tensor {
        let mut reg = ParameterRegistry::new();
        reg.insert("a.r0", r.clone(), true);
        let mut tape = Tape::new();
        let p = reg.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self_attention(&mut tape, &p.scope("a"), xv, 1, mask).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn causal_mask_layout() {
        assert_eq!(causal_mask(1).data(), &[0.0]);
        let m = causal_mask(3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), if j <= i { 0.0 } else { MASK_NEG });
            }
        }
    }

    #[test]
    fn single_row_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_tensor(1, 4, 1.0, &mut rng);
        let r = random_tensor(4, 3, 1.0, &mut rng);
        assert_eq!(attend(&r, &x, None), x);
    }

    #[test]
    fn zero_projection_averages_attendable_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(4, 3, 1.0, &mut rng);
        let r = Tensor::zeros(3, 2);
        let full = attend(&r, &x, None);
        let causal = attend(&r, &x, Some(&causal_mask(4)));
        for i in 0..4 {
            for c in 0..3 {
                let all = (0..4).map(|j| x.get(j, c)).sum::<f64>() / 4.0;
                let prefix = (0..=i).map(|j| x.get(j, c)).sum::<f64>() / (i + 1) as f64;
                assert!((full.get(i, c) - all).abs() < 1e-12);
                assert!((causal.get(i, c) - prefix).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_head_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(3, 4, 1.0, &mut rng);
        let r = random_tensor(4, 5, 1.0, &mut rng);
        let got = attend(&r, &x, None);
        let xr = x.matmul(&r);
        for i in 0..3 {
            let logits: Vec<f64> =
                (0..3).map(|j| (0..5).map(|k| xr.get(i, k) * xr.get(j, k)).sum::<f64>() / 5f64.sqrt()).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..4 {
                let expect: f64 = (0..3).map(|j| logits[j].exp() / z * x.get(j, c)).sum();
                assert!((got.get(i, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_read_their_own_feature_slice() {
        let mut reg = ParameterRegistry::new();
        reg.insert("a.r0", Tensor::zeros(4, 1), true);
        reg.insert("a.r1", Tensor::zeros(4, 1), true);
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![3.0, 4.0, 5.0, 6.0]]).unwrap();
        let mut tape = Tape::new();
        let p = reg.bind(&mut tape);
        let xv = tape.constant(x);
        let out = self_attention(&mut tape, &p.scope("a"), xv, 2, None).unwrap();
        assert_eq!(tape.value(out).row(0), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn output_width_and_determinism() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(5, c.d_embed, 1.0, &mut rng);
        for reading in [Reading::Bidirectional, Reading::Causal] {
            let r = encoder(&c, reading, 4);
            let out = run(&r, &c, &x, reading);
            assert_eq!(out.shape(), &[5, 3 * c.d_model]);
            assert_eq!(out, run(&encoder(&c, reading, 4), &c, &x, reading));
        }
    }

    #[test]
    fn blocks_carry_layer_norm_structure() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(4, c.d_embed, 1.0, &mut rng);
        let mut r = encoder(&c, Reading::Causal, 6);
        for ln in ["ln1", "ln2", "ln3"] {
            let bias = r.get_mut(&format!("enc.{ln}.bias")).unwrap();
            let v: f64 = rng.gen_range(-1.0..1.0);
            bias.data_mut().iter_mut().enumerate().for_each(|(i, b)| *b = v + i as f64 * 0.1);
        }
        let out = run(&r, &c, &x, Reading::Causal);
        for (block, ln) in ["ln1", "ln2", "ln3"].iter().enumerate() {
            let bias = r.get(&format!("enc.{ln}.bias")).unwrap();
            let bias_mean = bias.sum() / bias.len() as f64;
            for row in 0..4 {
                let slab = &out.row(row)[block * c.d_model..(block + 1) * c.d_model];
                let mean = slab.iter().sum::<f64>() / c.d_model as f64;
                assert!((mean - bias_mean).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn context_encoder_sees_the_future() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(5, c.d_embed, 1.0, &mut rng);
        let r = encoder(&c, Reading::Bidirectional, 8);
        let base = run(&r, &c, &x, Reading::Bidirectional);
        let mut y = x.clone();
        y.row_mut(4).iter_mut().for_each(|v| *v += 1.0);
        let moved = run(&r, &c, &y, Reading::Bidirectional);
        let diff: f64 = base.row(0).iter().zip(moved.row(0)).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn autoregressive_encoder_is_prefix_stable() {
        let c = cfg();
        let r = encoder(&c, Reading::Causal, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            let x = random_tensor(6, c.d_embed, 1.0, &mut rng);
            let base = run(&r, &c, &x, Reading::Causal);
            for t in 0..5 {
                let mut y = x.clone();
                for j in t + 1..6 {
                    y.row_mut(j).copy_from_slice(random_tensor(1, c.d_embed, 2.0, &mut rng).data());
                }
                let out = run(&r, &c, &y, Reading::Causal);
                for s in 0..=t {
                    assert_eq!(out.row(s), base.row(s));
                }
            }
        }
    }

    #[test]
    fn single_token_reduces_to_row_stack() {
        let c = ModelConfig { lstm_layers: 1, ..cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(1, c.d_embed, 1.0, &mut rng);
        let r = encoder(&c, Reading::Causal, 12);
        let out = run(&r, &c, &x, Reading::Causal);
        // self-attention over one row returns its input, so the attention
        // block is the layer-normalized LSTM block
        let (l, a) = (&out.row(0)[8..16], &out.row(0)[16..24]);
        let mean = l.iter().sum::<f64>() / 8.0;
        let var = l.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        for (u, v) in l.iter().zip(a) {
            assert!(((u - mean) / (var + c.layer_norm_eps).sqrt() - v).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_block_code_without_recurrence() {
        // with the LSTM block removed the two readings differ only in the
        // attention mask; removing the mask makes them identical
        let c = ModelConfig { encoder_no_lstm: true, ..cfg() };
        let r = encoder(&c, Reading::Causal, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random_tensor(5, c.d_embed, 1.0, &mut rng);
        let bi = run(&r, &c, &x, Reading::Bidirectional);
        assert_eq!(bi.cols(), 2 * c.d_model);
        let mut tape = Tape::new();
        let p = r.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let s = p.scope("enc");
        let h = nn::dense(&mut tape, &s.sub("ffn.l1"), xv).unwrap();
        let h = tape.relu(h);
        let f = nn::dense(&mut tape, &s.sub("ffn.l2"), h).unwrap();
        let f = nn::layer_normalize(&mut tape, &s.sub("ln1"), f, c.layer_norm_eps).unwrap();
        let a = self_attention(&mut tape, &s.sub("attn"), f, c.heads, None).unwrap();
        let a = nn::layer_normalize(&mut tape, &s.sub("ln3"), a, c.layer_norm_eps).unwrap();
        let joined = tape.concat_cols(&[f, a]).unwrap();
        assert_eq!(tape.value(joined), &bi);
        assert_ne!(run(&r, &c, &x, Reading::Causal), bi);
    }

    #[test]
    fn residual_lstm_adds_layer_input() {
        let c = ModelConfig { lstm_layers: 1, lstm_residual: true, encoder_no_selfattn: true, ..cfg() };
        let r = encoder(&c, Reading::Bidirectional, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = random_tensor(4, c.d_embed, 1.0, &mut rng);
        let out = run(&r, &c, &x, Reading::Bidirectional);
        let plain = run(&r, &ModelConfig { lstm_residual: false, ..c.clone() }, &x, Reading::Bidirectional);
        assert_eq!(out.row(0)[..8], plain.row(0)[..8]);
        assert_ne!(out.row(0)[8..], plain.row(0)[8..]);

        let mut tape = Tape::new();
        let p = r.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let s = p.scope("enc");
        let h = nn::dense(&mut tape, &s.sub("ffn.l1"), xv).unwrap();
        let h = tape.relu(h);
        let f = nn::dense(&mut tape, &s.sub("ffn.l2"), h).unwrap();
        let f = nn::layer_normalize(&mut tape, &s.sub("ln1"), f, c.layer_norm_eps).unwrap();
        let fwd = nn::lstm_sequence(&mut tape, &s.sub("lstm0.fwd"), f, Direction::Forward).unwrap();
        let bwd = nn::lstm_sequence(&mut tape, &s.sub("lstm0.bwd"), f, Direction::Backward).unwrap();
        let l = tape.concat_cols(&[fwd, bwd]).unwrap();
        let l = tape.add(f, l).unwrap();
        let l = nn::layer_normalize(&mut tape, &s.sub("ln2"), l, c.layer_norm_eps).unwrap();
        let want = tape.value(l);
        for row in 0..4 {
            assert_eq!(&out.row(row)[8..], want.row(row));
        }
    }

    #[test]
    fn ablations_drop_blocks() {
        let c = ModelConfig { encoder_no_selfattn: true, ..cfg() };
        let r = encoder(&c, Reading::Bidirectional, 15);
        assert!(!r.contains("enc.attn.r0"));
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = random_tensor(3, c.d_embed, 1.0, &mut rng);
        assert_eq!(run(&r, &c, &x, Reading::Bidirectional).cols(), 2 * c.d_model);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let c = ModelConfig { lstm_layers: 1, ..cfg() };
        for reading in [Reading::Bidirectional, Reading::Causal] {
            for seed in 0..2 {
                let r = encoder(&c, reading, seed);
                let mut params = r.trainable();
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 20);
                params.insert("x".into(), random_tensor(4, c.d_embed, 1.0, &mut rng));
                let cc = c.clone();
                let build = move |tape: &mut Tape, v: &BTreeMap<String, Var>| {
                    let p = Params::from_vars(v.clone());
                    encode(tape, &p.scope("enc"), &cc, v["x"], reading, &mut None)
                };
                let (err, at) = check_tape_fn(&params, 1e-5, seed, None, &build).unwrap();
                assert!(err < 1e-4, "{reading:?} seed {seed}: {err:e} at {at:?}");
            }
        }
    }
}
