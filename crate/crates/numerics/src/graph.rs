//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] on a `1 x 1` output walks the tape in reverse and
//! accumulates gradients into every node; [`Graph::param_grads`] then
//! collects the gradients of the parameters that were read from the
//! [`ParameterStore`].
//!
//! Every op validates shapes up front and rejects non-finite outputs, so a
//! NaN never travels silently through a forward pass.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NumericsError, Result};
use crate::params::{Gradients, ParameterStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct AttentionTape {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    segments: Vec<Range<usize>>,
    // softmax weights, indexed [query * heads + head][key - segment.start]
    probs: Vec<Vec<f64>>,
    // dropout keep-mask already divided by the keep probability
    mask: Option<Vec<Vec<f64>>>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Abs(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    PadCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Element(Var, usize, usize),
    Attention(Box<AttentionTape>),
}

struct Node {
    value: Tensor,
    op: Op,
}

struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

pub struct Graph<'a> {
    store: &'a ParameterStore,
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    grads: Vec<Option<Tensor>>,
    dropout: Option<Dropout>,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NumericsError::shape(
            op,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParameterStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grads: Vec::new(),
            dropout: None,
        }
    }

    /// Enables attention dropout with a seeded mask stream. Without this
    /// call the graph is in evaluation mode.
    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            self.dropout = Some(Dropout {
                rate,
                rng: ChaCha8Rng::seed_from_u64(seed),
            });
        }
        self
    }

    pub fn store(&self) -> &'a ParameterStore {
        self.store
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf)
    }

    /// A constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Reads a parameter from the store. Repeated reads return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = self.push("param", value, Op::Leaf)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        check_same(name, self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), f);
        self.push(name, value, op)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(name, value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `a + row` with the `1 x n` row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(NumericsError::shape(
                "add_row",
                format!("[1, {}]", av.cols()),
                format!("{:?}", rv.shape()),
            ));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        self.push("add_row", value, Op::AddRow(a, row))
    }

    /// Scales row `r` of `a` by `col[r]`, where `col` is `m x 1`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(NumericsError::shape(
                "mul_col",
                format!("[{}, 1]", av.rows()),
                format!("{:?}", cv.shape()),
            ));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            let k = cv.get(r, 0);
            for x in value.row_mut(r) {
                *x *= k;
            }
        }
        self.push("mul_col", value, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * k, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + k, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(NumericsError::invalid("log", "non-positive input"));
        }
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(NumericsError::invalid("mean", "empty tensor"));
        }
        let m = t.sum() / t.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols() {
            return Err(NumericsError::shape(
                "slice_cols",
                format!("cols >= {}", start + len),
                t.cols(),
            ));
        }
        let value = Tensor::from_fn(t.rows(), len, |r, c| t.get(r, start + c));
        self.push("slice_cols", value, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.rows() {
            return Err(NumericsError::shape(
                "slice_rows",
                format!("rows >= {}", start + len),
                t.rows(),
            ));
        }
        let value = Tensor::new(
            len,
            t.cols(),
            t.data()[start * t.cols()..(start + len) * t.cols()].to_vec(),
        )?;
        self.push("slice_rows", value, Op::SliceRows(a, start))
    }

    /// Places `a` at column offset `start` of a zero matrix `total` columns wide.
    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Result<Var> {
        let t = self.value(a);
        if start + t.cols() > total {
            return Err(NumericsError::shape(
                "pad_cols",
                format!("total >= {}", start + t.cols()),
                total,
            ));
        }
        let mut value = Tensor::zeros(t.rows(), total);
        for r in 0..t.rows() {
            value.row_mut(r)[start..start + t.cols()].copy_from_slice(t.row(r));
        }
        self.push("pad_cols", value, Op::PadCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| NumericsError::invalid("concat_rows", "no inputs"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(NumericsError::shape("concat_rows", cols, t.cols()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(rows, cols, data)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| NumericsError::invalid("concat_cols", "no inputs"))?;
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(NumericsError::shape("concat_cols", rows, t.rows()));
            }
            cols += t.cols();
        }
        let mut value = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            for r in 0..rows {
                value.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
            }
            offset += t.cols();
        }
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).reshape(rows, cols)?;
        self.push("reshape", value, Op::Reshape(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push("transpose", value, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        self.push("softmax_rows", value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row {
                *x -= lse;
            }
        }
        self.push("log_softmax_rows", value, Op::LogSoftmaxRows(a))
    }

    /// The `1 x 1` entry `a[r, c]`.
    pub fn element(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let t = self.value(a);
        if r >= t.rows() || c >= t.cols() {
            return Err(NumericsError::shape(
                "element",
                format!("index within {:?}", t.shape()),
                format!("({r}, {c})"),
            ));
        }
        let value = Tensor::scalar(t.get(r, c));
        self.push("element", value, Op::Element(a, r, c))
    }

    /// Multi-head scaled dot-product attention over projected inputs.
    ///
    /// Query row `i` attends to the key/value rows in `segments[i]`, which
    /// lets several independent query/context groups share one call.
    /// `q` is `m x d`, `k` and `v` are `n x d`, `d` must divide by `heads`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Range<usize>],
    ) -> Result<Var> {
        const OP: &str = "attention";
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let d = qv.cols();
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::invalid(
                OP,
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
            return Err(NumericsError::shape(
                OP,
                format!("keys/values [n, {d}]"),
                format!("{:?} / {:?}", kv.shape(), vv.shape()),
            ));
        }
        if segments.len() != qv.rows() {
            return Err(NumericsError::shape(OP, qv.rows(), segments.len()));
        }
        for seg in segments {
            if seg.is_empty() {
                return Err(NumericsError::invalid(OP, "empty key set"));
            }
            if seg.end > kv.rows() {
                return Err(NumericsError::shape(
                    OP,
                    format!("key rows >= {}", seg.end),
                    kv.rows(),
                ));
            }
        }
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(qv.rows(), d);
        let mut probs = Vec::with_capacity(qv.rows() * heads);
        let mut dropout = self.dropout.take();
        let mut masks = dropout.as_ref().map(|_| Vec::with_capacity(qv.rows() * heads));
        for (i, seg) in segments.iter().enumerate() {
            let qrow = qv.row(i);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let mut w: Vec<f64> = seg
                    .clone()
                    .map(|j| {
                        let krow = &kv.row(j)[cols.clone()];
                        qrow[cols.clone()]
                            .iter()
                            .zip(krow)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            * inv_sqrt
                    })
                    .collect();
                softmax_in_place(&mut w);
                let mask = match (&mut dropout, &mut masks) {
                    (Some(dp), Some(ms)) => {
                        let keep = 1.0 - dp.rate;
                        let m: Vec<f64> = w
                            .iter()
                            .map(|_| if dp.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        ms.push(m);
                        ms.last()
                    }
                    _ => None,
                };
                let orow = &mut out.row_mut(i)[cols.clone()];
                for (jj, j) in seg.clone().enumerate() {
                    let a = w[jj] * mask.map_or(1.0, |m| m[jj]);
                    if a == 0.0 {
                        continue;
                    }
                    for (o, x) in orow.iter_mut().zip(&vv.row(j)[cols.clone()]) {
                        *o += a * x;
                    }
                }
                probs.push(w);
            }
        }
        self.dropout = dropout;
        let tape = AttentionTape {
            q,
            k,
            v,
            heads,
            segments: segments.to_vec(),
            probs,
            mask: masks,
        };
        self.push(OP, out, Op::Attention(Box::new(tape)))
    }

    /// Softmax weights recorded by an attention node, one vector per
    /// `(query, head)` pair in query-major order.
    pub fn attention_weights(&self, v: Var) -> Option<&[Vec<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention(tape) => Some(&tape.probs),
            _ => None,
        }
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).shape() != [1, 1] {
            return Err(NumericsError::shape(
                "backward",
                "[1, 1]",
                format!("{:?}", self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        if let Some(bad) = grads.iter().flatten().find(|g| !g.is_finite()) {
            let _ = bad;
            return Err(NumericsError::NonFinite { op: "backward" });
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter read by this graph. Parameters that did
    /// not influence the output receive a zero gradient.
    pub fn param_grads(&self) -> Gradients {
        let mut out = Gradients::new();
        for (name, &v) in &self.params {
            let g = match self.grad(v) {
                Some(g) => g.clone(),
                None => {
                    let t = self.value(v);
                    Tensor::zeros(t.rows(), t.cols())
                }
            };
            out.insert(name.clone(), g);
        }
        out
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                gemm(g, false, bv, true, &mut ga, 0.0);
                accumulate(grads, *a, ga);
                let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                gemm(av, true, g, false, &mut gb, 0.0);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.zip_map(bv, |x, y| x / y));
                let gb = Tensor::from_fn(g.rows(), g.cols(), |r, c| {
                    let bb = bv.get(r, c);
                    -g.get(r, c) * av.get(r, c) / (bb * bb)
                });
                accumulate(grads, *b, gb);
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                let mut gr = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (acc, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                        *acc += x;
                    }
                }
                accumulate(grads, *row, gr);
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                let ga = Tensor::from_fn(g.rows(), g.cols(), |r, c| g.get(r, c) * cv.get(r, 0));
                accumulate(grads, *a, ga);
                let gc = Tensor::from_fn(g.rows(), 1, |r, _| {
                    g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum()
                });
                accumulate(grads, *col, gc);
            }
            Op::Scale(a, k) => accumulate(grads, *a, g.map(|x| x * k)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |x, z| if z > 0.0 { x } else { 0.0 });
                accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => accumulate(grads, *a, g.zip_map(y, |x, s| x * s * (1.0 - s))),
            Op::Tanh(a) => accumulate(grads, *a, g.zip_map(y, |x, t| x * (1.0 - t * t))),
            Op::Softplus(a) => {
                accumulate(grads, *a, g.zip_map(self.value(*a), |x, z| x * sigmoid(z)));
            }
            Op::Abs(a) => {
                let ga = g.zip_map(self.value(*a), |x, z| {
                    if z > 0.0 {
                        x
                    } else if z < 0.0 {
                        -x
                    } else {
                        0.0
                    }
                });
                accumulate(grads, *a, ga);
            }
            Op::Log(a) => accumulate(grads, *a, g.zip_map(self.value(*a), |x, z| x / z)),
            Op::Exp(a) => accumulate(grads, *a, g.zip_map(y, |x, e| x * e)),
            Op::Sum(a) => {
                let t = self.value(*a);
                accumulate(grads, *a, Tensor::filled(t.rows(), t.cols(), g.get(0, 0)));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let k = g.get(0, 0) / t.len() as f64;
                accumulate(grads, *a, Tensor::filled(t.rows(), t.cols(), k));
            }
            Op::SliceCols(a, start) => {
                let t = self.value(*a);
                let mut ga = Tensor::zeros(t.rows(), t.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let t = self.value(*a);
                let mut ga = Tensor::zeros(t.rows(), t.cols());
                let w = t.cols();
                ga.data_mut()[start * w..start * w + g.len()].copy_from_slice(g.data());
                accumulate(grads, *a, ga);
            }
            Op::PadCols(a, start) => {
                let t = self.value(*a);
                let ga = Tensor::from_fn(t.rows(), t.cols(), |r, c| g.get(r, start + c));
                accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let n = t.len();
                    let gp = Tensor::new(t.rows(), t.cols(), g.data()[offset..offset + n].to_vec())
                        .expect("concat_rows slice");
                    offset += n;
                    accumulate(grads, p, gp);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let gp = Tensor::from_fn(t.rows(), t.cols(), |r, c| g.get(r, offset + c));
                    offset += t.cols();
                    accumulate(grads, p, gp);
                }
            }
            Op::Reshape(a) => {
                let t = self.value(*a);
                accumulate(grads, *a, g.reshape(t.rows(), t.cols()).expect("reshape back"));
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(x, s)| x * s).sum();
                    for c in 0..g.cols() {
                        ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for c in 0..g.cols() {
                        ga.set(r, c, g.get(r, c) - y.get(r, c).exp() * total);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Element(a, r, c) => {
                let t = self.value(*a);
                let mut ga = Tensor::zeros(t.rows(), t.cols());
                ga.set(*r, *c, g.get(0, 0));
                accumulate(grads, *a, ga);
            }
            Op::Attention(tape) => self.backprop_attention(tape, g, grads),
        }
    }

    fn backprop_attention(&self, tape: &AttentionTape, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (qv, kv, vv) = (self.value(tape.q), self.value(tape.k), self.value(tape.v));
        let d = qv.cols();
        let dh = d / tape.heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut gq = Tensor::zeros(qv.rows(), d);
        let mut gk = Tensor::zeros(kv.rows(), d);
        let mut gv = Tensor::zeros(vv.rows(), d);
        for (i, seg) in tape.segments.iter().enumerate() {
            let grow = g.row(i);
            for h in 0..tape.heads {
                let cols = h * dh..(h + 1) * dh;
                let slot = i * tape.heads + h;
                let w = &tape.probs[slot];
                let mask = tape.mask.as_ref().map(|m| &m[slot]);
                let gout = &grow[cols.clone()];
                // d(weight_j) through the value mix, then through the mask.
                let mut dw: Vec<f64> = seg
                    .clone()
                    .enumerate()
                    .map(|(jj, j)| {
                        let m = mask.map_or(1.0, |m| m[jj]);
                        let a = w[jj] * m;
                        if a != 0.0 {
                            for (acc, x) in gv.row_mut(j)[cols.clone()].iter_mut().zip(gout) {
                                *acc += a * x;
                            }
                        }
                        m * gout
                            .iter()
                            .zip(&vv.row(j)[cols.clone()])
                            .map(|(x, y)| x * y)
                            .sum::<f64>()
                    })
                    .collect();
                let dot: f64 = dw.iter().zip(w).map(|(a, b)| a * b).sum();
                for (ds, p) in dw.iter_mut().zip(w) {
                    *ds = p * (*ds - dot) * inv_sqrt;
                }
                let qrow = &qv.row(i)[cols.clone()];
                let gq_row = &mut gq.row_mut(i)[cols.clone()];
                for (jj, j) in seg.clone().enumerate() {
                    let s = dw[jj];
                    if s == 0.0 {
                        continue;
                    }
                    for (acc, x) in gq_row.iter_mut().zip(&kv.row(j)[cols.clone()]) {
                        *acc += s * x;
                    }
                    for (acc, x) in gk.row_mut(j)[cols.clone()].iter_mut().zip(qrow) {
                        *acc += s * x;
                    }
                }
            }
        }
        accumulate(grads, tape.q, gq);
        accumulate(grads, tape.k, gk);
        accumulate(grads, tape.v, gv);
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
