//! Central-difference gradient oracle used to validate the tape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor for [`relative_error`]. Coordinates whose true
/// gradient is (near) zero are compared on an absolute scale below it.
pub const RELATIVE_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// One perturbed coordinate: parameter name and flat index.
pub type Coord = (String, usize);

/// Central differences `(f(θ+ε) − f(θ−ε)) / 2ε` for every coordinate of
/// every parameter.
pub fn finite_difference_gradient<F>(params: &mut BTreeMap<String, Tensor>, eps: f64, mut f: F) -> Result<Gradients>
where
    F: FnMut(&BTreeMap<String, Tensor>) -> Result<f64>,
{
    let coords: Vec<Coord> = params.iter().flat_map(|(name, t)| (0..t.len()).map(move |i| (name.clone(), i))).collect();
    let partial = finite_difference_at(params, eps, &coords, &mut f)?;
    let mut out = Gradients::new();
    for (name, t) in params.iter() {
        let mut g = Tensor::new(t.shape().to_vec(), vec![0.0; t.len()])?;
        for (i, v) in g.data_mut().iter_mut().enumerate() {
            *v = partial[&(name.clone(), i)];
        }
        out.insert(name.clone(), g);
    }
    Ok(out)
}

/// Central differences at selected coordinates only.
pub fn finite_difference_at<F>(
    params: &mut BTreeMap<String, Tensor>,
    eps: f64,
    coords: &[Coord],
    mut f: F,
) -> Result<BTreeMap<Coord, f64>>
where
    F: FnMut(&BTreeMap<String, Tensor>) -> Result<f64>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut out = BTreeMap::new();
    for (name, i) in coords {
        let orig = params[name].data()[*i];
        params.get_mut(name).expect("coordinate names a parameter").data_mut()[*i] = orig + eps;
        let plus = f(params)?;
        params.get_mut(name).expect("present").data_mut()[*i] = orig - eps;
        let minus = f(params)?;
        params.get_mut(name).expect("present").data_mut()[*i] = orig;
        out.insert((name.clone(), *i), (plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Largest [`relative_error`] between analytic gradients and numeric
/// partials at the given coordinates, with the worst coordinate.
pub fn max_relative_error(analytic: &Gradients, numeric: &BTreeMap<Coord, f64>) -> (f64, Option<Coord>) {
    let mut worst = (0.0, None);
    for ((name, i), &n) in numeric {
        let a = analytic.get(name).map_or(0.0, |g| g.data()[*i]);
        let e = relative_error(a, n);
        if e > worst.0 || worst.1.is_none() {
            worst = (e, Some((name.clone(), *i)));
        }
    }
    worst
}

/// Builds a computation on a fresh tape from named parameter handles.
pub trait TapeFn: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var> {}
impl<F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>> TapeFn for F {}

/// Evaluates `build` and reduces its output to a scalar by a fixed random
/// projection (identity when it is already scalar).
fn scalarize(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights: Vec<f64> = (0..tape.value(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = Tensor::new(shape, weights)?;
    let p = tape.mul_const(out, w)?;
    Ok(tape.sum_all(p))
}

pub fn evaluate(params: &BTreeMap<String, Tensor>, seed: u64, build: &impl TapeFn) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let vars: BTreeMap<String, Var> = params.iter().map(|(k, t)| (k.clone(), tape.param(k, t, true))).collect();
    let out = build(&mut tape, &vars)?;
    let loss = scalarize(&mut tape, out, seed)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

/// Compares tape gradients with central differences. Every coordinate is
/// checked when `sample` is `None`; otherwise at most `sample` random
/// coordinates per parameter. Returns the max relative error.
pub fn check_tape_fn(
    params: &BTreeMap<String, Tensor>,
    eps: f64,
    seed: u64,
    sample: Option<usize>,
    build: &impl TapeFn,
) -> Result<(f64, Option<Coord>)> {
    let (_, analytic) = evaluate(params, seed, build)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    for (name, t) in params {
        match sample {
            Some(k) if t.len() > k => {
                for _ in 0..k {
                    coords.push((name.clone(), rng.gen_range(0..t.len())));
                }
            }
            _ => coords.extend((0..t.len()).map(|i| (name.clone(), i))),
        }
    }
    let mut work = params.clone();
    let numeric = finite_difference_at(&mut work, eps, &coords, |p| Ok(evaluate(p, seed, build)?.0))?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Random tensor with entries uniform in `[-scale, scale]`.
pub fn random_tensor(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(vec![rows, cols], data).expect("positive extents")
}
