//! Layer building blocks shared by the embedding, encoder and output layers.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::registry::{ParamBuilder, Scope};
use crate::tensor::Tensor;

/// `w: in×out` (fan-avg) and `b: 1×out` (zeros).
pub fn declare_dense(b: &mut ParamBuilder, d_in: usize, d_out: usize) {
    b.fan_avg("w", d_in, d_out);
    b.constant("b", 1, d_out, 0.0);
}

pub fn dense(tape: &mut Tape, p: &Scope, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.get("w")?)?;
    tape.add_row(y, p.get("b")?)
}

pub fn declare_layer_norm(b: &mut ParamBuilder, width: usize) {
    b.constant("gain", 1, width, 1.0);
    b.constant("bias", 1, width, 0.0);
}

/// Per-row normalization to zero mean and unit variance (with `eps` added
/// to the variance) followed by the affine `gain`/`bias`.
pub fn layer_normalize(tape: &mut Tape, p: &Scope, x: Var, eps: f64) -> Result<Var> {
    tape.layer_norm(x, p.get("gain")?, p.get("bias")?, eps)
}

/// Gate layout along `4h`: input, forget, candidate, output. The forget
/// gate bias starts at 1.
pub fn declare_lstm(b: &mut ParamBuilder, d_in: usize, hidden: usize) {
    b.fan_avg("wx", d_in, 4 * hidden);
    b.fan_avg("wh", hidden, 4 * hidden);
    let mut bias = vec![0.0; 4 * hidden];
    bias[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
    b.tensor("b", Tensor::row_vector(bias).expect("nonempty"));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// One hidden state per input row, starting from zero state. The backward
/// direction reads the sequence last-to-first and returns outputs aligned
/// with the input positions.
pub fn lstm_sequence(tape: &mut Tape, p: &Scope, x: Var, direction: Direction) -> Result<Var> {
    if tape.value(x).rows() == 0 {
        return Err(Error::EmptySequence("lstm_sequence"));
    }
    tape.lstm(x, p.get("wx")?, p.get("wh")?, p.get("b")?, direction == Direction::Backward)
}

/// Inverted dropout: kept units are scaled by `1/keep` during training.
#[derive(Debug)]
pub struct Dropout {
    keep: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(keep: f64, seed: u64) -> Self {
        Dropout { keep, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.keep >= 1.0 {
            return Ok(x);
        }
        let shape = tape.value(x).shape().to_vec();
        let n = tape.value(x).len();
        let scale = 1.0 / self.keep;
        let mask: Vec<f64> = (0..n).map(|_| if self.rng.gen::<f64>() < self.keep { scale } else { 0.0 }).collect();
        tape.mul_const(x, Tensor::new(shape, mask)?)
    }
}

/// Applies dropout when a dropout source is present.
pub fn maybe_dropout(tape: &mut Tape, dropout: &mut Option<&mut Dropout>, x: Var) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::autodiff::sigmoid;
    use crate::gradcheck::{check_tape_fn, random_tensor};
    use crate::registry::{ParameterRegistry, Params};

    fn lstm_params(d_in: usize, h: usize, seed: u64) -> ParameterRegistry {
        let mut r = ParameterRegistry::new();
        declare_lstm(&mut ParamBuilder::new(&mut r, seed).sub("l"), d_in, h);
        r
    }

    /// Standalone evaluation of one LSTM cell step from zero state.
    fn cell_from_zero(x: &[f64], wx: &Tensor, b: &Tensor) -> Vec<f64> {
        let h = b.len() / 4;
        let z: Vec<f64> = (0..4 * h)
            .map(|j| b.data()[j] + x.iter().enumerate().map(|(k, xv)| xv * wx.get(k, j)).sum::<f64>())
            .collect();
        (0..h)
            .map(|j| {
                let i = sigmoid(z[j]);
                let g = z[2 * h + j].tanh();
                let o = sigmoid(z[3 * h + j]);
                o * (i * g).tanh()
            })
            .collect()
    }

    fn run_lstm(r: &ParameterRegistry, x: &Tensor, dir: Direction) -> Tensor {
        let mut tape = Tape::new();
        let p = r.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = lstm_sequence(&mut tape, &p.scope("l"), xv, dir).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let r = lstm_params(3, 2, 0);
        assert_eq!(r.get("l.b").unwrap().data(), &[0., 0., 1., 1., 0., 0., 0., 0.]);
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let mut r = lstm_params(3, 4, 0);
        for t in r.tensors_mut().values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(5, 3, 1.0, &mut rng);
        for dir in [Direction::Forward, Direction::Backward] {
            let out = run_lstm(&r, &x, dir);
            assert_eq!(out.rows(), 5);
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_step_matches_cell() {
        let r = lstm_params(3, 4, 2);
        let x = Tensor::from_rows(&[vec![0.3, -0.7, 1.1]]).unwrap();
        let expect = cell_from_zero(x.row(0), r.get("l.wx").unwrap(), r.get("l.b").unwrap());
        for dir in [Direction::Forward, Direction::Backward] {
            let out = run_lstm(&r, &x, dir);
            for (a, b) in out.data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_direction_is_forward_on_reversed_input() {
        let r = lstm_params(3, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(6, 3, 1.0, &mut rng);
        let rev_rows: Vec<Vec<f64>> = (0..6).rev().map(|i| x.row(i).to_vec()).collect();
        let fwd_on_rev = run_lstm(&r, &Tensor::from_rows(&rev_rows).unwrap(), Direction::Forward);
        let bwd = run_lstm(&r, &x, Direction::Backward);
        for t in 0..6 {
            assert_eq!(bwd.row(t), fwd_on_rev.row(5 - t));
        }
    }

    #[test]
    fn forward_lstm_is_causal() {
        let r = lstm_params(3, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor(6, 3, 1.0, &mut rng);
        let base = run_lstm(&r, &x, Direction::Forward);
        for t in 0..5 {
            let mut y = x.clone();
            for j in t + 1..6 {
                y.row_mut(j).iter_mut().for_each(|v| *v += 0.5);
            }
            let out = run_lstm(&r, &y, Direction::Forward);
            for s in 0..=t {
                assert_eq!(out.row(s), base.row(s));
            }
        }
    }

    #[test]
    fn layer_norm_limits() {
        let mut r = ParameterRegistry::new();
        declare_layer_norm(&mut ParamBuilder::new(&mut r, 0).sub("ln"), 4);
        r.get_mut("ln.bias").unwrap().data_mut().copy_from_slice(&[0.1, -0.2, 0.3, 0.5]);
        let x = Tensor::from_rows(&[vec![2.0; 4], vec![-1.0, 1.0, -1.0, 1.0], vec![0.3, 9.0, -4.0, 1.0]]).unwrap();
        let mut tape = Tape::new();
        let p = r.bind(&mut tape);
        let xv = tape.constant(x);
        let y = layer_normalize(&mut tape, &p.scope("ln"), xv, 1e-6).unwrap();
        let y = tape.value(y).clone();
        // constant row collapses onto the bias
        for (a, b) in y.row(0).iter().zip(&[0.1, -0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
        // zero-mean unit-variance row passes through (up to eps)
        for (a, (x, b)) in y.row(1).iter().zip([-1.0, 1.0, -1.0, 1.0].iter().zip(&[0.1, -0.2, 0.3, 0.5])) {
            assert!((a - (x / (1.0f64 + 1e-6).sqrt() + b)).abs() < 1e-12);
        }
        let bias_mean = (0.1 - 0.2 + 0.3 + 0.5) / 4.0;
        for r in 0..3 {
            let m = y.row(r).iter().sum::<f64>() / 4.0;
            assert!((m - bias_mean).abs() < 1e-9);
        }
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        for seed in 0..3 {
            let r = lstm_params(3, 2, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
            let mut p: BTreeMap<String, Tensor> = r.tensors().clone();
            p.insert("x".into(), random_tensor(4, 3, 1.0, &mut rng));
            for dir in [Direction::Forward, Direction::Backward] {
                let (err, _) =
                    check_tape_fn(&p, 1e-5, seed, None, &move |tape: &mut Tape, v: &BTreeMap<String, Var>| {
                        let params = Params::from_vars(v.clone());
                        lstm_sequence(tape, &params.scope("l"), v["x"], dir)
                    })
                    .unwrap();
                assert!(err < 1e-4, "{err:e}");
            }
        }
    }

    #[test]
    fn dropout_is_inverted_and_seeded() {
        let x = Tensor::filled(50, 40, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut d = Dropout::new(0.9, 3);
        let y = d.apply(&mut tape, xv).unwrap();
        let vals = tape.value(y).data().to_vec();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-15));
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - 1.0).abs() < 0.05);
        let mut d2 = Dropout::new(0.9, 3);
        let y2 = d2.apply(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y2).data(), &vals[..]);
        let mut off = Dropout::new(1.0, 3);
        assert_eq!(off.apply(&mut tape, xv).unwrap(), xv);
    }
}
