use std::collections::BTreeMap;

use super::{Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    AddRow(Var, Var),
    OuterSum(Var, Var),
    Sigmoid(Var),
    SigmoidClamped(Var, f64, f64),
    Tanh(Var),
    Ln(Var),
    Ln1m(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Softmax(Var, Option<Vec<bool>>),
    LogSoftmax(Var, Option<Vec<bool>>),
    Pick(Var, Vec<usize>),
    Reshape(Var),
    CumSumExclusive(Var),
    CumLogSumExp(Var),
    LogSumExp(Var),
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::OuterSum(..) => "outer_sum",
            Op::Sigmoid(..) => "sigmoid",
            Op::SigmoidClamped(..) => "sigmoid_clamped",
            Op::Tanh(..) => "tanh",
            Op::Ln(..) => "ln",
            Op::Ln1m(..) => "ln_1m",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Pick(..) => "pick",
            Op::Reshape(..) => "reshape",
            Op::CumSumExclusive(..) => "cumsum_exclusive",
            Op::CumLogSumExp(..) => "cum_log_sum_exp",
            Op::LogSumExp(..) => "log_sum_exp",
            Op::Sum(..) => "sum",
        }
    }

    /// Log-domain ops may legitimately produce `-inf`.
    fn log_domain(&self) -> bool {
        matches!(
            self,
            Op::Ln(..)
                | Op::Ln1m(..)
                | Op::LogSoftmax(..)
                | Op::Pick(..)
                | Op::CumSumExclusive(..)
                | Op::CumLogSumExp(..)
                | Op::LogSumExp(..)
        )
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::AddRow(a, b) | Op::OuterSum(a, b) => vec![*a, *b],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::SigmoidClamped(a, ..)
            | Op::Tanh(a)
            | Op::Ln(a)
            | Op::Ln1m(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::Pick(a, _)
            | Op::Reshape(a)
            | Op::CumSumExclusive(a)
            | Op::CumLogSumExp(a)
            | Op::LogSumExp(a)
            | Op::Sum(a) => vec![*a],
        }
    }
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

struct Node<'a> {
    op: Op,
    value: Value<'a>,
}

impl Node<'_> {
    fn value(&self) -> &Tensor {
        match &self.value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

/// A single-threaded reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the backward sweep is a reverse scan. Parameter
/// leaves borrow their tensors from the caller's store.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    params: BTreeMap<String, Var>,
    precision: Precision,
}

impl<'a> Graph<'a> {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value()
    }

    /// The first element of a node's value; convenient for `1 × 1` results.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, op: Op, mut value: Tensor) -> Var {
        if self.precision == Precision::F32 && !op.log_domain() {
            value.round_f32();
        }
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t)
    }

    /// A non-trainable leaf that borrows its value.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value: Value::Borrowed(t),
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf. Registering the same name twice returns the
    /// existing node.
    pub fn param(&mut self, name: &str, t: &'a Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param,
            value: Value::Borrowed(t),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::contract(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |p, q| p + q);
        Ok(self.push(Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |p, q| p - q);
        Ok(self.push(Op::Sub(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |p, q| p * q);
        Ok(self.push(Op::Mul(a, b), t))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), t)
    }

    /// `(m × k) · (k × n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k, n) = (x.rows(), x.cols(), y.cols());
        if y.rows() != k {
            return Err(Error::contract(format!(
                "matmul: {:?} · {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(x.data(), y.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), t))
    }

    /// Adds a `1 × d` row to every row of an `n × d` matrix.
    pub fn add_row(&mut self, m: Var, r: Var) -> Result<Var> {
        let (x, row) = (self.value(m), self.value(r));
        if row.rows() != 1 || row.cols() != x.cols() {
            return Err(Error::contract(format!(
                "add_row: {:?} + {:?}",
                x.shape(),
                row.shape()
            )));
        }
        let d = x.cols();
        let mut out = x.data().to_vec();
        for chunk in out.chunks_mut(d) {
            for (o, &b) in chunk.iter_mut().zip(row.data()) {
                *o += b;
            }
        }
        let t = Tensor::new(vec![x.rows(), d], out)?;
        Ok(self.push(Op::AddRow(m, r), t))
    }

    /// Pairwise row sums: row `p·Q + q` of the result is `a[p] + b[q]`.
    pub fn outer_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.cols() {
            return Err(Error::contract(format!(
                "outer_sum: {:?} ⊕ {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let (p, q, d) = (x.rows(), y.rows(), x.cols());
        let mut out = Vec::with_capacity(p * q * d);
        for i in 0..p {
            let xr = x.row_slice(i);
            for j in 0..q {
                out.extend(xr.iter().zip(y.row_slice(j)).map(|(u, v)| u + v));
            }
        }
        let t = Tensor::new(vec![p * q, d], out)?;
        Ok(self.push(Op::OuterSum(a, b), t))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), t)
    }

    /// Sigmoid followed by clamping into `[lo, hi]`; zero gradient where clamped.
    pub fn sigmoid_clamped(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(|x| sigmoid(x).clamp(lo, hi));
        self.push(Op::SigmoidClamped(a, lo, hi), t)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), t)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), t)
    }

    /// `ln(1 − x)`.
    pub fn ln_1m(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| (-x).ln_1p());
        self.push(Op::Ln1m(a), t)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if len == 0 || start + len > x.rows() {
            return Err(Error::contract(format!(
                "slice_rows {start}..{} of {:?}",
                start + len,
                x.shape()
            )));
        }
        let c = x.cols();
        let data = x.data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(vec![len, c], data)?;
        Ok(self.push(Op::SliceRows(a, start), t))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        self.slice_rows(a, r, 1)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if len == 0 || start + len > x.cols() {
            return Err(Error::contract(format!(
                "slice_cols {start}..{} of {:?}",
                start + len,
                x.shape()
            )));
        }
        let mut data = Vec::with_capacity(x.rows() * len);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row_slice(r)[start..start + len]);
        }
        let t = Tensor::new(vec![x.rows(), len], data)?;
        Ok(self.push(Op::SliceCols(a, start), t))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows: no inputs"))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            if x.cols() != c {
                return Err(Error::contract("concat_rows: column mismatch"));
            }
            rows += x.rows();
            data.extend_from_slice(x.data());
        }
        let t = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), t))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols: no inputs"))?;
        let r = self.value(*first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::contract("concat_cols: row mismatch"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(row));
            }
        }
        let t = Tensor::new(vec![r, total], data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), t))
    }

    /// Embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let x = self.value(table);
        if ids.is_empty() {
            return Err(Error::contract("gather_rows: no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::contract(format!(
                "gather_rows: id {bad} out of range for {} rows",
                x.rows()
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * x.cols());
        for &i in ids {
            data.extend_from_slice(x.row_slice(i));
        }
        let t = Tensor::new(vec![ids.len(), x.cols()], data)?;
        Ok(self.push(Op::GatherRows(table, ids.to_vec()), t))
    }

    fn check_mask(&self, a: Var, mask: Option<&[bool]>) -> Result<()> {
        if let Some(m) = mask {
            if m.len() != self.value(a).cols() {
                return Err(Error::contract("softmax mask length != row width"));
            }
            if m.iter().all(|&b| b) {
                return Err(Error::contract("softmax mask hides every index"));
            }
        }
        Ok(())
    }

    /// Row-wise softmax. Masked (`true`) indices get probability exactly 0.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.check_mask(a, mask)?;
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            data.extend(softmax_masked(x.row_slice(r), mask));
        }
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(Op::Softmax(a, mask.map(<[bool]>::to_vec)), t))
    }

    /// Row-wise log-softmax. Masked indices get `-inf`.
    pub fn log_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.check_mask(a, mask)?;
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            data.extend(log_softmax_masked(x.row_slice(r), mask));
        }
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(Op::LogSoftmax(a, mask.map(<[bool]>::to_vec)), t))
    }

    /// One entry per row: `out[r] = a[r, idx[r]]`, as an `n × 1` column.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if idx.len() != x.rows() || idx.iter().any(|&i| i >= x.cols()) {
            return Err(Error::contract("pick: index list does not fit"));
        }
        let data = idx.iter().enumerate().map(|(r, &c)| x.get(r, c)).collect();
        let t = Tensor::new(vec![idx.len(), 1], data)?;
        Ok(self.push(Op::Pick(a, idx.to_vec()), t))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(Op::Reshape(a), t))
    }

    /// Within each row: `out[c] = Σ_{k<c} a[k]` (so `out[0] = 0`).
    pub fn cumsum_exclusive(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            let mut acc = 0.0;
            for &v in x.row_slice(r) {
                data.push(acc);
                acc += v;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(Op::CumSumExclusive(a), t)
    }

    /// Within each row: `out[c] = log Σ_{k≤c} exp(a[k])`.
    pub fn cum_log_sum_exp(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            let mut acc = f64::NEG_INFINITY;
            for &v in x.row_slice(r) {
                acc = log_add_exp(acc, v);
                data.push(acc);
            }
        }
        let t = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(Op::CumLogSumExp(a), t)
    }

    /// `log Σ exp(a)` over all entries, as a `1 × 1` tensor.
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let v = log_sum_exp_slice(self.value(a).data());
        self.push(Op::LogSumExp(a), Tensor::scalar(v))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum();
        self.push(Op::Sum(a), Tensor::scalar(v))
    }

    /// Marks every node that `v` (transitively) depends on, including `v`.
    pub fn ancestors(&self, v: Var) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![v];
        while let Some(n) = stack.pop() {
            if std::mem::replace(&mut seen[n.0], true) {
                continue;
            }
            stack.extend(self.nodes[n.0].op.parents());
        }
        seen
    }

    /// First node holding a NaN, or a non-log-domain node holding an infinity.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            let vals = n.value().data();
            let bad = vals.iter().any(|x| x.is_nan())
                || (!n.op.log_domain() && vals.iter().any(|x| x.is_infinite()));
            bad.then(|| (i, n.op.name()))
        })
    }

    /// Reverse sweep from a `1 × 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.data()[0].is_finite() {
            let (node, op) = self
                .first_non_finite()
                .unwrap_or((loss.0, self.nodes[loss.0].op.name()));
            return Err(Error::NonFinite { op, node });
        }

        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(idx, &g, &mut adj);
            adj[idx] = Some(g);
        }

        Ok(Gradients {
            adj,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = node.value();
        let val = |v: Var| self.nodes[v.0].value();
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                accumulate(adj, *a, elementwise(g, y, |p, q| p * q));
                accumulate(adj, *b, elementwise(g, x, |p, q| p * q));
            }
            Op::Scale(a, c) => accumulate(adj, *a, g.map(|x| x * c)),
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (m, k, n) = (x.rows(), x.cols(), y.cols());
                // dA = G · Bᵀ
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &g.data()[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &y.data()[p * n..(p + 1) * n];
                        ga[i * k + p] = dot(grow, brow);
                    }
                }
                // dB = Aᵀ · G
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g.data()[i * n..(i + 1) * n];
                    for p in 0..k {
                        let a_ip = x.data()[i * k + p];
                        if a_ip == 0.0 {
                            continue;
                        }
                        for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += a_ip * gv;
                        }
                    }
                }
                accumulate(adj, *a, Tensor::new(x.shape().to_vec(), ga).unwrap());
                accumulate(adj, *b, Tensor::new(y.shape().to_vec(), gb).unwrap());
            }
            Op::AddRow(m, r) => {
                let d = g.cols();
                let mut gr = vec![0.0; d];
                for chunk in g.data().chunks(d) {
                    for (o, &v) in gr.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                accumulate(adj, *m, g.clone());
                accumulate(adj, *r, Tensor::row(gr));
            }
            Op::OuterSum(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (p, q, d) = (x.rows(), y.rows(), x.cols());
                let mut ga = vec![0.0; p * d];
                let mut gb = vec![0.0; q * d];
                for i in 0..p {
                    for j in 0..q {
                        let grow = g.row_slice(i * q + j);
                        for t in 0..d {
                            ga[i * d + t] += grow[t];
                            gb[j * d + t] += grow[t];
                        }
                    }
                }
                accumulate(adj, *a, Tensor::new(x.shape().to_vec(), ga).unwrap());
                accumulate(adj, *b, Tensor::new(y.shape().to_vec(), gb).unwrap());
            }
            Op::Sigmoid(a) => {
                accumulate(adj, *a, elementwise(g, out, |gv, y| gv * y * (1.0 - y)));
            }
            Op::SigmoidClamped(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let x = val(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| {
                        let s = sigmoid(xv);
                        if s <= lo || s >= hi {
                            0.0
                        } else {
                            gv * s * (1.0 - s)
                        }
                    })
                    .collect();
                accumulate(adj, *a, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::Tanh(a) => accumulate(adj, *a, elementwise(g, out, |gv, y| gv * (1.0 - y * y))),
            Op::Ln(a) => accumulate(adj, *a, elementwise(g, val(*a), |gv, x| gv / x)),
            Op::Ln1m(a) => accumulate(adj, *a, elementwise(g, val(*a), |gv, x| -gv / (1.0 - x))),
            Op::SliceRows(a, start) => {
                let x = val(*a);
                let c = x.cols();
                let mut ga = Tensor::zeros(x.shape());
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                accumulate(adj, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(x.shape());
                let w = g.cols();
                for r in 0..x.rows() {
                    for c in 0..w {
                        ga.set(r, start + c, g.get(r, c));
                    }
                }
                accumulate(adj, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    let t = Tensor::new(val(p).shape().to_vec(), g.data()[offset..offset + n].to_vec())
                        .unwrap();
                    accumulate(adj, p, t);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut data = Vec::with_capacity(val(p).len());
                    for r in 0..g.rows() {
                        data.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                    }
                    accumulate(adj, p, Tensor::new(val(p).shape().to_vec(), data).unwrap());
                    offset += w;
                }
            }
            Op::GatherRows(table, ids) => {
                let x = val(*table);
                let c = x.cols();
                let mut gt = Tensor::zeros(x.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &v) in gt.data_mut()[id * c..(id + 1) * c]
                        .iter_mut()
                        .zip(g.row_slice(r))
                    {
                        *o += v;
                    }
                }
                accumulate(adj, *table, gt);
            }
            Op::Softmax(a, mask) => {
                let c = out.cols();
                let mut data = Vec::with_capacity(out.len());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row_slice(r), g.row_slice(r));
                    let inner = dot(y, gr);
                    for t in 0..c {
                        let masked = mask.as_ref().is_some_and(|m| m[t]);
                        data.push(if masked { 0.0 } else { y[t] * (gr[t] - inner) });
                    }
                }
                accumulate(adj, *a, Tensor::new(out.shape().to_vec(), data).unwrap());
            }
            Op::LogSoftmax(a, mask) => {
                let c = out.cols();
                let mut data = Vec::with_capacity(out.len());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row_slice(r), g.row_slice(r));
                    let total: f64 = (0..c)
                        .filter(|&t| !mask.as_ref().is_some_and(|m| m[t]))
                        .map(|t| gr[t])
                        .sum();
                    for t in 0..c {
                        let masked = mask.as_ref().is_some_and(|m| m[t]);
                        data.push(if masked { 0.0 } else { gr[t] - y[t].exp() * total });
                    }
                }
                accumulate(adj, *a, Tensor::new(out.shape().to_vec(), data).unwrap());
            }
            Op::Pick(a, idx) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(x.shape());
                for (r, &c) in idx.iter().enumerate() {
                    ga.set(r, c, g.data()[r]);
                }
                accumulate(adj, *a, ga);
            }
            Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                accumulate(adj, *a, g.clone().reshaped(shape).unwrap());
            }
            Op::CumSumExclusive(a) => {
                let c = g.cols();
                let mut data = Vec::with_capacity(g.len());
                for r in 0..g.rows() {
                    let gr = g.row_slice(r);
                    let mut suffix = vec![0.0; c];
                    let mut acc = 0.0;
                    for k in (0..c).rev() {
                        suffix[k] = acc;
                        acc += gr[k];
                    }
                    data.extend(suffix);
                }
                accumulate(adj, *a, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::CumLogSumExp(a) => {
                let x = val(*a);
                let c = x.cols();
                let mut data = Vec::with_capacity(x.len());
                for r in 0..x.rows() {
                    let (xr, yr, gr) = (x.row_slice(r), out.row_slice(r), g.row_slice(r));
                    for k in 0..c {
                        let mut acc = 0.0;
                        if xr[k] != f64::NEG_INFINITY {
                            for i in k..c {
                                if gr[i] != 0.0 && yr[i] != f64::NEG_INFINITY {
                                    acc += gr[i] * (xr[k] - yr[i]).exp();
                                }
                            }
                        }
                        data.push(acc);
                    }
                }
                accumulate(adj, *a, Tensor::new(x.shape().to_vec(), data).unwrap());
            }
            Op::LogSumExp(a) => {
                let y = out.data()[0];
                let gv = g.data()[0];
                let ga = val(*a).map(|x| {
                    if x == f64::NEG_INFINITY || y == f64::NEG_INFINITY {
                        0.0
                    } else {
                        gv * (x - y).exp()
                    }
                });
                accumulate(adj, *a, ga);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                accumulate(adj, *a, Tensor::full(val(*a).shape(), gv));
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(t) => t.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Adjoint of any node; `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.adj.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of the named parameter, if it was registered in the graph and
    /// reached by the sweep.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|&v| self.wrt(v))
    }

    /// One gradient per entry of `store`; unreachable parameters get zeros.
    pub fn for_store(&self, store: &super::ParamStore) -> BTreeMap<String, Tensor> {
        store
            .iter()
            .map(|(name, t)| {
                let g = self
                    .param(name)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.to_string(), g)
            })
            .collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += a_ip * bv;
            }
        }
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

/// `log(exp(a) + exp(b))` with exact `-inf` absorption.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub(crate) fn log_sum_exp_slice(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_masked(row: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    log_softmax_masked(row, mask).into_iter().map(f64::exp).collect()
}

pub(crate) fn log_softmax_masked(row: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let hidden = |t: usize| mask.is_some_and(|m| m[t]);
    let max = (0..row.len())
        .filter(|&t| !hidden(t))
        .map(|t| row[t])
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = (0..row.len())
        .filter(|&t| !hidden(t))
        .map(|t| (row[t] - max).exp())
        .sum();
    let log_z = max + z.ln();
    (0..row.len())
        .map(|t| {
            if hidden(t) {
                f64::NEG_INFINITY
            } else {
                row[t] - log_z
            }
        })
        .collect()
}
