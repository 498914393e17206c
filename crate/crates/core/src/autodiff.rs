//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive executed during a forward pass in
//! topological order (a node can only reference nodes created before it).
//! [`Tape::backward`] walks the record once in reverse and returns the
//! gradient of a scalar loss with respect to every parameter bound on the
//! tape. Parameters are borrowed from their owner, so binding a large
//! projection matrix costs nothing.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Additive mask value standing in for `-inf`.
pub const MASK_NEG: f64 = -1e9;

pub(crate) fn is_masked(m: f64) -> bool {
    m <= MASK_NEG * 0.5
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    AddScalar { x: Var, s: Var },
    Affine { x: Var, scale: f64 },
    MulConst { x: Var, k: Tensor },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log { x: Var, floor: f64 },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Gather { table: Var, ids: Vec<Option<usize>> },
    Reshape(Var),
    GroupMax { x: Var, argmax: Vec<usize> },
    Lstm(Box<LstmRecord>),
    Minimum(Var, Var),
    SumAll(Var),
    SumCols(Var),
    Pick { x: Var, idx: Vec<Option<usize>> },
}

#[derive(Debug)]
struct LstmRecord {
    x: Var,
    wx: Var,
    wh: Var,
    b: Var,
    reverse: bool,
    /// Post-activation gates `[i, f, g, o]` per step, `T×4h`.
    gates: Tensor,
    cells: Tensor,
    tanh_cells: Tensor,
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: BTreeMap<String, Var>,
    consumed: bool,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Drops the record so the tape can be reused for a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.consumed = false;
    }

    /// Drops every node recorded after the first `len`, keeping the
    /// earlier values; used to reuse a shared prefix of a computation.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.params.retain(|_, v| v.0 < len);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Outputs of every row softmax recorded so far, in order.
    pub fn softmax_outputs(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Softmax(_))).map(|n| n.value.as_ref())
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Binds a named parameter. Binding the same name twice returns the
    /// same node, so a shared tensor accumulates gradient from every use.
    pub fn param(&mut self, name: &str, t: &'a Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(Cow::Borrowed(t), Op::Leaf, trainable);
        if trainable {
            self.params.insert(name.to_string(), v);
        }
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs)
    }

    fn shape_err(&self, what: &str, a: Var, b: Var) -> Error {
        Error::Shape(format!("{what}: {:?} vs {:?}", self.value(a).shape(), self.value(b).shape()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(self.shape_err("matmul", a, b));
        }
        let out = va.matmul(vb);
        Ok(self.op(out, Op::MatMul { a, b, trans_b: false }, &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let mut out = Tensor::zeros(va.rows(), vb.rows());
        gemm(va, false, vb, true, &mut out, 0.0);
        Ok(self.op(out, Op::MatMul { a, b, trans_b: true }, &[a, b]))
    }

    fn elementwise(&mut self, a: Var, b: Var, what: &str) -> Result<()> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(self.shape_err(what, a, b));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.op(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.op(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "minimum")?;
        let out = self.value(a).zip_map(self.value(b), f64::min);
        Ok(self.op(out, Op::Minimum(a, b), &[a, b]))
    }

    /// Adds a `1×c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.rows() != 1 || vr.cols() != vx.cols() {
            return Err(self.shape_err("add_row", x, row));
        }
        let mut out = vx.clone();
        let c = vx.cols();
        for r in 0..vx.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        debug_assert_eq!(out.cols(), c);
        Ok(self.op(out, Op::AddRow { x, row }, &[x, row]))
    }

    /// Adds a `1×1` tensor to every entry of `x`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(self.shape_err("add_scalar", x, s));
        }
        let k = self.value(s).item();
        let out = self.value(x).map(|v| v + k);
        Ok(self.op(out, Op::AddScalar { x, s }, &[x, s]))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.op(out, Op::Affine { x, scale }, &[x])
    }

    /// Element-wise product with a constant tensor (masks, dropout).
    pub fn mul_const(&mut self, x: Var, k: Tensor) -> Result<Var> {
        if !self.value(x).same_shape(&k) {
            return Err(Error::Shape(format!("mul_const: {:?} vs {:?}", self.value(x).shape(), k.shape())));
        }
        let out = self.value(x).zip_map(&k, |a, b| a * b);
        Ok(self.op(out, Op::MulConst { x, k }, &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.op(out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.op(out, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.op(out, Op::Relu(x), &[x])
    }

    /// `ln(max(x, floor))`; entries below the floor get no gradient.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).map(|v| v.max(floor).ln());
        self.op(out, Op::Log { x, floor }, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let out = softmax_rows(self.value(x), mask)?;
        Ok(self.op(out, Op::Softmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(self.shape_err("layer_norm gain/bias", x, gain));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = Tensor::zeros(vx.rows(), c);
        let mut out = Tensor::zeros(vx.rows(), c);
        let mut inv_std = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat.set(r, j, h);
                out.set(r, j, h * g[j] + b[j]);
            }
        }
        Ok(self.op(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.op(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::Shape("concat_rows: column counts differ".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols;
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.op(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        if start >= end || end > vx.cols() {
            return Err(Error::Shape(format!("slice_cols {start}..{end} of {:?}", vx.shape())));
        }
        let mut out = Tensor::zeros(vx.rows(), end - start);
        for r in 0..vx.rows() {
            out.row_mut(r).copy_from_slice(&vx.row(r)[start..end]);
        }
        Ok(self.op(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        if start >= end || end > vx.rows() {
            return Err(Error::Shape(format!("slice_rows {start}..{end} of {:?}", vx.shape())));
        }
        let c = vx.cols();
        let out = Tensor::new(vec![end - start, c], vx.data()[start * c..end * c].to_vec())?;
        Ok(self.op(out, Op::SliceRows { x, start }, &[x]))
    }

    /// Row lookup; `None` yields a zero row that receives no gradient.
    pub fn gather_rows(&mut self, table: Var, ids: Vec<Option<usize>>) -> Result<Var> {
        let vt = self.value(table);
        if ids.is_empty() {
            return Err(Error::EmptySequence("gather_rows"));
        }
        let c = vt.cols();
        let mut out = Tensor::zeros(ids.len(), c);
        for (r, id) in ids.iter().enumerate() {
            if let Some(id) = *id {
                if id >= vt.rows() {
                    return Err(Error::Shape(format!("row {id} out of range {}", vt.rows())));
                }
                out.row_mut(r).copy_from_slice(vt.row(id));
            }
        }
        Ok(self.op(out, Op::Gather { table, ids }, &[table]))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(x).clone().reshaped(rows, cols)?;
        Ok(self.op(out, Op::Reshape(x), &[x]))
    }

    /// Column-wise max over consecutive groups of `group` rows. Ties go to
    /// the first row in the group.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let vx = self.value(x);
        if group == 0 || vx.rows() % group != 0 {
            return Err(Error::Shape(format!("group_max: {} rows by {group}", vx.rows())));
        }
        let (n, c) = (vx.rows() / group, vx.cols());
        let mut out = Tensor::zeros(n, c);
        let mut argmax = vec![0usize; n * c];
        for g in 0..n {
            for j in 0..c {
                let mut best = g * group;
                for r in g * group + 1..(g + 1) * group {
                    if vx.get(r, j) > vx.get(best, j) {
                        best = r;
                    }
                }
                out.set(g, j, vx.get(best, j));
                argmax[g * c + j] = best;
            }
        }
        Ok(self.op(out, Op::GroupMax { x, argmax }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.op(out, Op::SumAll(x), &[x])
    }

    /// Row sums as an `r×1` column.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let sums = (0..vx.rows()).map(|r| vx.row(r).iter().sum()).collect::<Vec<f64>>();
        let out = Tensor::new(vec![sums.len(), 1], sums).expect("nonempty");
        self.op(out, Op::SumCols(x), &[x])
    }

    /// Picks one entry per row as an `r×1` column; `None` picks zero.
    pub fn pick(&mut self, x: Var, idx: Vec<Option<usize>>) -> Result<Var> {
        let vx = self.value(x);
        if idx.len() != vx.rows() {
            return Err(Error::Shape(format!("pick: {} indices for {} rows", idx.len(), vx.rows())));
        }
        let mut vals = Vec::with_capacity(idx.len());
        for (r, i) in idx.iter().enumerate() {
            match *i {
                Some(i) if i >= vx.cols() => return Err(Error::Shape(format!("pick: column {i} of {}", vx.cols()))),
                Some(i) => vals.push(vx.get(r, i)),
                None => vals.push(0.0),
            }
        }
        let out = Tensor::new(vec![idx.len(), 1], vals)?;
        Ok(self.op(out, Op::Pick { x, idx }, &[x]))
    }

    /// Runs an LSTM over the rows of `x` with zero initial state. Gate
    /// layout along the `4h` axis is input, forget, candidate, output.
    /// With `reverse` the sequence is consumed last-to-first and the
    /// outputs are written back at their original positions.
    pub fn lstm(&mut self, x: Var, wx: Var, wh: Var, b: Var, reverse: bool) -> Result<Var> {
        let (vx, vwx, vwh, vb) = (self.value(x), self.value(wx), self.value(wh), self.value(b));
        let steps = vx.rows();
        let h = vwh.rows();
        if vwx.rows() != vx.cols() || vwx.cols() != 4 * h || vwh.cols() != 4 * h || vb.len() != 4 * h {
            return Err(Error::Shape(format!(
                "lstm: x {:?}, wx {:?}, wh {:?}, b {:?}",
                vx.shape(),
                vwx.shape(),
                vwh.shape(),
                vb.shape()
            )));
        }
        let mut pre = Tensor::zeros(steps, 4 * h);
        gemm(vx, false, vwx, false, &mut pre, 0.0);
        let mut gates = Tensor::zeros(steps, 4 * h);
        let mut cells = Tensor::zeros(steps, h);
        let mut tanh_cells = Tensor::zeros(steps, h);
        let mut out = Tensor::zeros(steps, h);
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut z = vec![0.0; 4 * h];
        for t in order(steps, reverse) {
            z.copy_from_slice(pre.row(t));
            for (zi, bi) in z.iter_mut().zip(vb.data()) {
                *zi += bi;
            }
            for (k, &hk) in h_prev.iter().enumerate() {
                if hk != 0.0 {
                    for (zi, w) in z.iter_mut().zip(vwh.row(k)) {
                        *zi += hk * w;
                    }
                }
            }
            let g_row = gates.row_mut(t);
            for j in 0..h {
                g_row[j] = sigmoid(z[j]);
                g_row[h + j] = sigmoid(z[h + j]);
                g_row[2 * h + j] = z[2 * h + j].tanh();
                g_row[3 * h + j] = sigmoid(z[3 * h + j]);
            }
            for j in 0..h {
                let c = g_row[h + j] * c_prev[j] + g_row[j] * g_row[2 * h + j];
                let tc = c.tanh();
                c_prev[j] = c;
                h_prev[j] = g_row[3 * h + j] * tc;
            }
            cells.row_mut(t).copy_from_slice(&c_prev);
            tanh_cells.row_mut(t).iter_mut().zip(&c_prev).for_each(|(o, c)| *o = c.tanh());
            out.row_mut(t).copy_from_slice(&h_prev);
        }
        let record = LstmRecord { x, wx, wh, b, reverse, gates, cells, tanh_cells };
        Ok(self.op(out, Op::Lstm(Box::new(record)), &[x, wx, wh, b]))
    }

    /// Reverse sweep. Returns the gradient of `loss` for every trainable
    /// parameter bound on this tape; parameters the loss does not reach get
    /// zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::NoForwardPass("tape already consumed; reset it first".into()));
        }
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::NoForwardPass("no operations recorded".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got {:?}", self.value(loss).shape())));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            backprop(nodes, i, &g, &mut grads);
        }
        let mut out = Gradients::new();
        for (name, v) in &self.params {
            let g = match grads.get_mut(v.0).and_then(Option::take) {
                Some(g) => g,
                None => {
                    let t = &self.nodes[v.0].value;
                    Tensor::new(t.shape().to_vec(), vec![0.0; t.len()])?
                }
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

fn order(steps: usize, reverse: bool) -> Box<dyn Iterator<Item = usize>> {
    if reverse {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of `x + mask`. Masked entries (mask ≤ `MASK_NEG / 2`)
/// come out as exactly zero; a row with no unmasked entry is an error.
pub fn softmax_rows(x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    if let Some(m) = mask {
        if !m.same_shape(x) {
            return Err(Error::Shape(format!("softmax mask {:?} vs logits {:?}", m.shape(), x.shape())));
        }
    }
    let c = x.cols();
    let mut out = Tensor::zeros(x.rows(), c);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let mr = mask.map(|m| m.row(r));
        let logit = |j: usize| xr[j] + mr.map_or(0.0, |m| m[j]);
        let live = |j: usize| mr.is_none_or(|m| !is_masked(m[j]));
        let max = (0..c).filter(|&j| live(j)).map(logit).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::FullyMaskedRow { row: r });
        }
        let o = out.row_mut(r);
        let mut total = 0.0;
        for j in 0..c {
            if live(j) {
                o[j] = (logit(j) - max).exp();
                total += o[j];
            }
        }
        o.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_scaled(&g, 1.0),
        slot @ None => *slot = Some(g),
    }
}

/// Gradient slot for `v`, zero-initialized on first touch.
fn slot<'g>(grads: &'g mut [Option<Tensor>], nodes: &[Node], v: Var) -> &'g mut Tensor {
    grads[v.0].get_or_insert_with(|| {
        let t = &nodes[v.0].value;
        Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]).expect("valid shape")
    })
}

fn backprop(nodes: &[Node], i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    let needs = |v: Var| nodes[v.0].needs_grad;
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let (a, b, trans_b) = (*a, *b, *trans_b);
            if needs(a) {
                // C = A·B  -> dA = G·Bᵀ ;  C = A·Bᵀ -> dA = G·B
                let vb = val(b);
                gemm(g, false, vb, !trans_b, slot(grads, nodes, a), 1.0);
            }
            if needs(b) {
                let va = val(a);
                if trans_b {
                    gemm(g, true, va, false, slot(grads, nodes, b), 1.0);
                } else {
                    gemm(va, true, g, false, slot(grads, nodes, b), 1.0);
                }
            }
        }
        Op::Add(a, b) => {
            if needs(*a) {
                acc(grads, *a, g.clone());
            }
            if needs(*b) {
                acc(grads, *b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                acc(grads, *a, g.clone());
            }
            if needs(*b) {
                acc(grads, *b, g.map(|x| -x));
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                acc(grads, *a, g.zip_map(val(*b), |x, y| x * y));
            }
            if needs(*b) {
                acc(grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
        }
        Op::Minimum(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if needs(*a) {
                let mut d = g.clone();
                for ((d, &x), &y) in d.data_mut().iter_mut().zip(va.data()).zip(vb.data()) {
                    if x > y {
                        *d = 0.0;
                    }
                }
                acc(grads, *a, d);
            }
            if needs(*b) {
                let mut d = g.clone();
                for ((d, &x), &y) in d.data_mut().iter_mut().zip(va.data()).zip(vb.data()) {
                    if x <= y {
                        *d = 0.0;
                    }
                }
                acc(grads, *b, d);
            }
        }
        Op::AddRow { x, row } => {
            if needs(*x) {
                acc(grads, *x, g.clone());
            }
            if needs(*row) {
                let mut d = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in d.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                let d = d.reshaped_like(val(*row));
                acc(grads, *row, d);
            }
        }
        Op::AddScalar { x, s } => {
            if needs(*x) {
                acc(grads, *x, g.clone());
            }
            if needs(*s) {
                let d = Tensor::scalar(g.sum()).reshaped_like(val(*s));
                acc(grads, *s, d);
            }
        }
        Op::Affine { x, scale } => acc(grads, *x, g.map(|v| v * scale)),
        Op::MulConst { x, k } => acc(grads, *x, g.zip_map(k, |a, b| a * b)),
        Op::Sigmoid(x) => acc(grads, *x, g.zip_map(out, |d, y| d * y * (1.0 - y))),
        Op::Tanh(x) => acc(grads, *x, g.zip_map(out, |d, y| d * (1.0 - y * y))),
        Op::Relu(x) => acc(grads, *x, g.zip_map(val(*x), |d, v| if v > 0.0 { d } else { 0.0 })),
        Op::Log { x, floor } => {
            let floor = *floor;
            acc(grads, *x, g.zip_map(val(*x), |d, v| if v >= floor { d / v } else { 0.0 }))
        }
        Op::Softmax(x) => {
            let mut d = Tensor::zeros(out.rows(), out.cols());
            for r in 0..out.rows() {
                let (p, gr) = (out.row(r), g.row(r));
                let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                for (o, (pj, gj)) in d.row_mut(r).iter_mut().zip(p.iter().zip(gr)) {
                    *o = pj * (gj - dot);
                }
            }
            acc(grads, *x, d);
        }
        Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
            let c = out.cols();
            let gn = val(*gain).data();
            if needs(*gain) {
                let mut d = vec![0.0; c];
                for r in 0..g.rows() {
                    for j in 0..c {
                        d[j] += g.get(r, j) * xhat.get(r, j);
                    }
                }
                let d = Tensor::new(val(*gain).shape().to_vec(), d).expect("shape");
                acc(grads, *gain, d);
            }
            if needs(*bias) {
                let mut d = vec![0.0; c];
                for r in 0..g.rows() {
                    for (o, v) in d.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                let d = Tensor::new(val(*bias).shape().to_vec(), d).expect("shape");
                acc(grads, *bias, d);
            }
            if needs(*x) {
                let mut dx = Tensor::zeros(g.rows(), c);
                let n = c as f64;
                for r in 0..g.rows() {
                    let dxhat: Vec<f64> = (0..c).map(|j| g.get(r, j) * gn[j]).collect();
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = (0..c).map(|j| dxhat[j] * xhat.get(r, j)).sum();
                    for j in 0..c {
                        let v = inv_std[r] / n * (n * dxhat[j] - sum_d - xhat.get(r, j) * sum_dx);
                        dx.set(r, j, v);
                    }
                }
                acc(grads, *x, dx);
            }
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for &p in parts {
                let w = val(p).cols();
                if needs(p) {
                    let mut d = Tensor::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    acc(grads, p, d);
                }
                off += w;
            }
        }
        Op::ConcatRows(parts) => {
            let c = g.cols();
            let mut off = 0;
            for &p in parts {
                let n = val(p).rows();
                if needs(p) {
                    let d = Tensor::new(vec![n, c], g.data()[off * c..(off + n) * c].to_vec()).expect("shape");
                    acc(grads, p, d);
                }
                off += n;
            }
        }
        Op::SliceCols { x, start } => {
            let dst = slot(grads, nodes, *x);
            for r in 0..g.rows() {
                for (o, v) in dst.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
        }
        Op::SliceRows { x, start } => {
            let c = g.cols();
            let dst = slot(grads, nodes, *x);
            for (o, v) in dst.data_mut()[start * c..start * c + g.len()].iter_mut().zip(g.data()) {
                *o += v;
            }
        }
        Op::Gather { table, ids } => {
            let dst = slot(grads, nodes, *table);
            for (r, id) in ids.iter().enumerate() {
                if let Some(id) = *id {
                    for (o, v) in dst.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
        }
        Op::Reshape(x) => {
            let shape = val(*x).shape().to_vec();
            acc(grads, *x, Tensor::new(shape, g.data().to_vec()).expect("shape"));
        }
        Op::GroupMax { x, argmax } => {
            let c = g.cols();
            let dst = slot(grads, nodes, *x);
            for gi in 0..g.rows() {
                for j in 0..c {
                    let r = argmax[gi * c + j];
                    let cur = dst.get(r, j);
                    dst.set(r, j, cur + g.get(gi, j));
                }
            }
        }
        Op::SumAll(x) => {
            let shape = val(*x).shape().to_vec();
            let n = val(*x).len();
            acc(grads, *x, Tensor::new(shape, vec![g.item(); n]).expect("shape"));
        }
        Op::SumCols(x) => {
            let vx = val(*x);
            let mut d = Tensor::zeros(vx.rows(), vx.cols());
            for r in 0..vx.rows() {
                let gr = g.get(r, 0);
                d.row_mut(r).iter_mut().for_each(|v| *v = gr);
            }
            acc(grads, *x, d);
        }
        Op::Pick { x, idx } => {
            let dst = slot(grads, nodes, *x);
            for (r, i) in idx.iter().enumerate() {
                if let Some(i) = *i {
                    let cur = dst.get(r, i);
                    dst.set(r, i, cur + g.get(r, 0));
                }
            }
        }
        Op::Lstm(rec) => lstm_backward(nodes, rec, out, g, grads),
    }
}

fn lstm_backward(nodes: &[Node], rec: &LstmRecord, hidden: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    let (vx, vwx, vwh) = (val(rec.x), val(rec.wx), val(rec.wh));
    let steps = vx.rows();
    let h = vwh.rows();
    let mut dz = Tensor::zeros(steps, 4 * h);
    // previous hidden state for each step in processing order
    let mut h_prev_all = Tensor::zeros(steps, h);
    let seq: Vec<usize> = order(steps, rec.reverse).collect();
    for w in seq.windows(2) {
        h_prev_all.row_mut(w[1]).copy_from_slice(hidden.row(w[0]));
    }
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    for (pos, &t) in seq.iter().enumerate().rev() {
        let gates = rec.gates.row(t);
        let tc = rec.tanh_cells.row(t);
        let c_prev: Vec<f64> = if pos == 0 { vec![0.0; h] } else { rec.cells.row(seq[pos - 1]).to_vec() };
        let dzr = dz.row_mut(t);
        for j in 0..h {
            let (ig, fg, gg, og) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
            let dh = g.get(t, j) + dh_next[j];
            let d_o = dh * tc[j];
            let dc = dh * og * (1.0 - tc[j] * tc[j]) + dc_next[j];
            dzr[j] = dc * gg * ig * (1.0 - ig);
            dzr[h + j] = dc * c_prev[j] * fg * (1.0 - fg);
            dzr[2 * h + j] = dc * ig * (1.0 - gg * gg);
            dzr[3 * h + j] = d_o * og * (1.0 - og);
            dc_next[j] = dc * fg;
        }
        for (k, d) in dh_next.iter_mut().enumerate() {
            *d = vwh.row(k).iter().zip(dzr.iter()).map(|(w, z)| w * z).sum();
        }
    }
    if nodes[rec.x.0].needs_grad {
        gemm(&dz, false, vwx, true, slot(grads, nodes, rec.x), 1.0);
    }
    if nodes[rec.wx.0].needs_grad {
        gemm(vx, true, &dz, false, slot(grads, nodes, rec.wx), 1.0);
    }
    if nodes[rec.wh.0].needs_grad {
        gemm(&h_prev_all, true, &dz, false, slot(grads, nodes, rec.wh), 1.0);
    }
    if nodes[rec.b.0].needs_grad {
        let dst = slot(grads, nodes, rec.b);
        for r in 0..steps {
            for (o, v) in dst.data_mut().iter_mut().zip(dz.row(r)) {
                *o += v;
            }
        }
    }
}

impl Tensor {
    fn reshaped_like(self, like: &Tensor) -> Tensor {
        Tensor::new(like.shape().to_vec(), self.into_data()).expect("same element count")
    }
}
