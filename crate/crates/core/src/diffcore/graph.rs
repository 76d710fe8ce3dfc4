use std::collections::HashMap;

use super::{Gradients, ParamId, ParamSet, Tensor};
use crate::{Error, Result};

/// Fill value used for masked attention logits before softmax.
pub const MASK_FILL: f64 = -1e9;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Scales the backward rule of one op kind. Only used to build negative
/// controls for the finite-difference checker.
#[derive(Clone, Copy, Debug)]
pub struct Fault {
    pub op: &'static str,
    pub factor: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatVec(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var, f64),
    Concat(Vec<Var>),
    Slice(Var, usize),
    MaskFill(Var, Vec<bool>),
    Softmax(Var),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    Pick(Var, usize),
    Sum(Var),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatVec(..) => "matvec",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(..) => "log",
            Op::Concat(_) => "concat",
            Op::Slice(..) => "slice",
            Op::MaskFill(..) => "mask_fill",
            Op::Softmax(_) => "softmax",
            Op::GatherRows(..) => "gather_rows",
            Op::MeanRows(_) => "mean_rows",
            Op::Pick(..) => "pick",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node {
    // `None` for parameter nodes, whose value is read from the ParamSet.
    value: Option<Tensor>,
    op: Op,
}

/// A single forward pass recorded in topological order.
///
/// Every op validates shapes eagerly and returns [`Error::Shape`] on mismatch.
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    fault: Option<Fault>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn with_fault(params: &'p ParamSet, fault: Fault) -> Self {
        let mut g = Self::new(params);
        g.fault = Some(fault);
        g
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Copies the value of `v` into a new leaf; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Graph node for a trainable parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (ta.dims2(), tb.dims2()) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => return Err(Error::shape("matmul", ta.shape(), tb.shape())),
        };
        debug_assert_eq!(k, k2);
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = da[i * k + p];
                let brow = &db[p * n..(p + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += aip * b;
                }
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// `a · x` for a matrix `a` of shape `[m, n]` and a vector `x` of length `n`.
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (ta, tx) = (self.value(a), self.value(x));
        let (m, n) = match (ta.dims2(), tx.shape()) {
            (Some((m, n)), [n2]) if n == *n2 => (m, n),
            _ => return Err(Error::shape("matvec", ta.shape(), tx.shape())),
        };
        let (da, dx) = (ta.data(), tx.data());
        let out = (0..m)
            .map(|i| {
                da[i * n..(i + 1) * n]
                    .iter()
                    .zip(dx)
                    .map(|(w, v)| w * v)
                    .sum()
            })
            .collect();
        Ok(self.push(Tensor::vector(out), Op::MatVec(a, x)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta
            .dims2()
            .ok_or_else(|| Error::shape("transpose", ta.shape(), &[]))?;
        let d = ta.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds vector `v` to every row of matrix `m`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (self.value(m), self.value(v));
        let (rows, cols) = match (tm.dims2(), tv.shape()) {
            (Some((r, c)), [c2]) if c == *c2 => (r, c),
            _ => return Err(Error::shape("add_row", tm.shape(), tv.shape())),
        };
        let mut out = tm.data().to_vec();
        for r in 0..rows {
            for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(tv.data()) {
                *o += x;
            }
        }
        let t = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(t, Op::AddRow(m, v)))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| f(*x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// Natural log with inputs clamped below at `floor`.
    pub fn log(&mut self, a: Var, floor: f64) -> Var {
        self.map(a, |x| x.max(floor).ln(), Op::Log(a, floor))
    }

    /// Concatenates 1-D tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 1 {
                return Err(Error::shape("concat", t.shape(), &[]));
            }
            data.extend_from_slice(t.data());
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec())))
    }

    /// `a[start..start + len]` of a 1-D tensor.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 1 || start + len > ta.len() {
            return Err(Error::shape("slice", ta.shape(), &[start, len]));
        }
        let data = ta.data()[start..start + len].to_vec();
        Ok(self.push(Tensor::vector(data), Op::Slice(a, start)))
    }

    /// Replaces entries where `mask` is true with `fill`; those entries get no gradient.
    pub fn mask_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> Result<Var> {
        let ta = self.value(a);
        if ta.len() != mask.len() {
            return Err(Error::shape("mask_fill", ta.shape(), &[mask.len()]));
        }
        let data = ta
            .data()
            .iter()
            .zip(mask)
            .map(|(x, m)| if *m { fill } else { *x })
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MaskFill(a, mask.to_vec())))
    }

    /// Softmax of a 1-D tensor, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 1 {
            return Err(Error::shape("softmax", ta.shape(), &[]));
        }
        if ta.is_empty() {
            return Err(Error::Empty("softmax"));
        }
        let out = softmax(ta.data());
        Ok(self.push(Tensor::vector(out), Op::Softmax(a)))
    }

    /// Rows `ids` of a 2-D table, stacked into `[ids.len(), cols]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, cols) = tt
            .dims2()
            .ok_or_else(|| Error::shape("gather_rows", tt.shape(), &[]))?;
        if ids.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::TokenOutOfRange { id, vocab: rows });
            }
            data.extend_from_slice(tt.row(id));
        }
        let t = Tensor::matrix(ids.len(), cols, data)?;
        Ok(self.push(t, Op::GatherRows(table, ids.to_vec())))
    }

    /// Single row of a table as a 1-D tensor.
    pub fn row(&mut self, table: Var, id: usize) -> Result<Var> {
        let m = self.gather_rows(table, &[id])?;
        // Reshape in place: a 1×d gather and a d-vector share layout.
        let node = &mut self.nodes[m.0];
        let t = node.value.take().expect("gather has value");
        let cols = t.shape()[1];
        node.value = Some(Tensor::new(vec![cols], t.into_data())?);
        Ok(m)
    }

    /// Column-wise mean over the rows of a 2-D tensor.
    pub fn mean_rows(&mut self, m: Var) -> Result<Var> {
        let tm = self.value(m);
        let (rows, cols) = tm
            .dims2()
            .ok_or_else(|| Error::shape("mean_rows", tm.shape(), &[]))?;
        if rows == 0 {
            return Err(Error::Empty("mean_rows"));
        }
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, x) in out.iter_mut().zip(tm.row(r)) {
                *o += x;
            }
        }
        let inv = 1.0 / rows as f64;
        for o in &mut out {
            *o *= inv;
        }
        Ok(self.push(Tensor::vector(out), Op::MeanRows(m)))
    }

    /// Element `i` of a 1-D tensor as a scalar.
    pub fn pick(&mut self, a: Var, i: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 1 || i >= ta.len() {
            return Err(Error::shape("pick", ta.shape(), &[i]));
        }
        let v = ta.data()[i];
        Ok(self.push(Tensor::scalar(v), Op::Pick(a, i)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Sums scalars in order. An empty list yields a constant zero.
    pub fn add_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let mut it = xs.iter();
        let Some(&first) = it.next() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        let mut acc = first;
        for &x in it {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Nodes are visited exactly once, in reverse recording order. Gradients
    /// reaching parameter nodes are returned; the graph itself is not consumed,
    /// so calling this twice yields the same gradients twice.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::NotRecorded);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));
        let mut out = Gradients::new(self.params.len());

        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let Some(f) = self.fault {
                if f.op == node.op.kind() {
                    g.scale_in_place(f.factor);
                }
            }
            self.backprop_node(&node.op, Var(i), g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        op: &Op,
        this: Var,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) {
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::Param(id) => out.add(*id, g),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().unwrap();
                let n = tb.dims2().unwrap().1;
                let (da, db) = (ta.data(), tb.data());
                // dA = dC · Bᵀ
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        ga[i * k + p] = (0..n).map(|j| gd[i * n + j] * db[p * n + j]).sum();
                    }
                }
                // dB = Aᵀ · dC
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = da[i * k + p];
                        for j in 0..n {
                            gb[p * n + j] += aip * gd[i * n + j];
                        }
                    }
                }
                acc(grads, *a, ta.shape(), ga);
                acc(grads, *b, tb.shape(), gb);
            }
            Op::MatVec(a, x) => {
                let (ta, tx) = (self.value(*a), self.value(*x));
                let (m, n) = ta.dims2().unwrap();
                let (da, dx) = (ta.data(), tx.data());
                let mut ga = vec![0.0; m * n];
                let mut gx = vec![0.0; n];
                for i in 0..m {
                    let gi = gd[i];
                    let arow = &da[i * n..(i + 1) * n];
                    let garow = &mut ga[i * n..(i + 1) * n];
                    for j in 0..n {
                        garow[j] = gi * dx[j];
                        gx[j] += gi * arow[j];
                    }
                }
                acc(grads, *a, ta.shape(), ga);
                acc(grads, *x, tx.shape(), gx);
            }
            Op::Transpose(a) => {
                let ta = self.value(*a);
                let (m, n) = ta.dims2().unwrap();
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = gd[j * m + i];
                    }
                }
                acc(grads, *a, ta.shape(), ga);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.shape(), gd.to_vec());
                acc(grads, *b, g.shape(), gd.to_vec());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.shape(), gd.to_vec());
                acc(grads, *b, g.shape(), gd.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let ga = gd.iter().zip(db).map(|(g, y)| g * y).collect();
                let gb = gd.iter().zip(da).map(|(g, x)| g * x).collect();
                acc(grads, *a, g.shape(), ga);
                acc(grads, *b, g.shape(), gb);
            }
            Op::AddRow(m, v) => {
                let cols = self.value(*v).len();
                let mut gv = vec![0.0; cols];
                for row in gd.chunks(cols) {
                    for (o, x) in gv.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                acc(grads, *m, g.shape(), gd.to_vec());
                acc(grads, *v, &[cols], gv);
            }
            Op::Scale(a, c) => {
                acc(grads, *a, g.shape(), gd.iter().map(|x| x * c).collect());
            }
            Op::Tanh(a) => {
                let y = self.value(this).data();
                let ga = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                acc(grads, *a, g.shape(), ga);
            }
            Op::Sigmoid(a) => {
                let y = self.value(this).data();
                let ga = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                acc(grads, *a, g.shape(), ga);
            }
            Op::Log(a, floor) => {
                let x = self.value(*a).data();
                let ga = gd
                    .iter()
                    .zip(x)
                    .map(|(g, x)| if *x > *floor { g / x } else { 0.0 })
                    .collect();
                acc(grads, *a, g.shape(), ga);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(grads, p, &[n], gd[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Slice(a, start) => {
                let ta = self.value(*a);
                let mut ga = vec![0.0; ta.len()];
                ga[*start..*start + gd.len()].copy_from_slice(gd);
                acc(grads, *a, ta.shape(), ga);
            }
            Op::MaskFill(a, mask) => {
                let ga = gd
                    .iter()
                    .zip(mask)
                    .map(|(g, m)| if *m { 0.0 } else { *g })
                    .collect();
                acc(grads, *a, g.shape(), ga);
            }
            Op::Softmax(a) => {
                let y = self.value(this).data();
                let dot: f64 = gd.iter().zip(y).map(|(g, y)| g * y).sum();
                let ga = gd.iter().zip(y).map(|(g, y)| y * (g - dot)).collect();
                acc(grads, *a, g.shape(), ga);
            }
            Op::GatherRows(table, ids) => {
                let tt = self.value(*table);
                let cols = tt.dims2().unwrap().1;
                let mut gt = vec![0.0; tt.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for (o, x) in gt[id * cols..(id + 1) * cols]
                        .iter_mut()
                        .zip(&gd[r * cols..(r + 1) * cols])
                    {
                        *o += x;
                    }
                }
                acc(grads, *table, tt.shape(), gt);
            }
            Op::MeanRows(m) => {
                let tm = self.value(*m);
                let rows = tm.dims2().unwrap().0;
                let inv = 1.0 / rows as f64;
                let mut gm = Vec::with_capacity(tm.len());
                for _ in 0..rows {
                    gm.extend(gd.iter().map(|x| x * inv));
                }
                acc(grads, *m, tm.shape(), gm);
            }
            Op::Pick(a, i) => {
                let ta = self.value(*a);
                let mut ga = vec![0.0; ta.len()];
                ga[*i] = gd[0];
                acc(grads, *a, ta.shape(), ga);
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                acc(grads, *a, ta.shape(), vec![gd[0]; ta.len()]);
            }
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (o, x) in t.data_mut().iter_mut().zip(&data) {
                *o += x;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), data).expect("grad shape")),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax over a slice.
pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
