//! Wengert-list reverse-mode differentiation over [`Tensor`]s.
//!
//! Every primitive applied through a [`Graph`] appends one node holding its
//! output value and enough information to run its local backward rule.
//! [`Graph::backward`] walks the list in reverse, accumulates gradients
//! additively, and clears the tape.

use std::collections::HashMap;

use super::optim::Parameter;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is a single value
    Scalar,
    /// rhs is `[F]` or `[1, F]`, repeated for every row of lhs
    Row,
    /// rhs is `[R, 1]`, repeated across the columns of lhs
    Col,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Log(Var),
    Exp(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Concat(Var, Var),
    Reshape(Var),
    Transpose(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Operation tape. Create one per forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<u64, Var>,
}

/// Gradients produced by [`Graph::backward`] for every leaf that requires them.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Vec<f64>>,
    params: HashMap<u64, Var>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.leaves.get(&var).map(Vec::as_slice)
    }

    /// Adds the gradients of every bound parameter into its `grad` buffer.
    /// Parameters that were not part of the graph are left untouched.
    pub fn accumulate_into<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) {
        for p in params {
            let Some(var) = self.params.get(&p.id()) else {
                continue;
            };
            let Some(g) = self.leaves.get(var) else {
                continue;
            };
            p.accumulate_grad(g);
        }
    }
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Row-wise softmax of plain values.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(t.shape().to_vec());
    let c = t.cols();
    for (src, dst) in t.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        softmax_row(src, dst);
    }
    out
}

/// Softmax of a single vector.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    softmax_row(x, &mut out);
    out
}

/// `a[m×k] · b[k×n]`, accumulated into `out[m×n]`.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; its `requires_grad` flag is honoured.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds a trainable parameter; its gradient is reported by id after backward.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let v = self.push(p.value().clone(), Op::Leaf, true);
        self.params.insert(p.id(), v);
        v
    }

    /// Uses a parameter's current value as a constant (no gradient).
    pub fn frozen(&mut self, p: &Parameter) -> Var {
        self.constant(p.value().clone())
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return Ok(Bcast::Same);
        }
        if tb.numel() == 1 {
            return Ok(Bcast::Scalar);
        }
        let row_shape = tb.shape().len() == 1 || (tb.shape().len() == 2 && tb.shape()[0] == 1);
        if row_shape && tb.numel() == ta.cols() {
            return Ok(Bcast::Row);
        }
        if tb.shape().len() == 2 && tb.shape()[1] == 1 && tb.shape()[0] == ta.rows() {
            return Ok(Bcast::Col);
        }
        Err(Error::ShapeMismatch {
            op,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let bc = self.bcast(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        let bd = tb.data();
        let data: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bc {
                    Bcast::Same => bd[i],
                    Bcast::Scalar => bd[0],
                    Bcast::Row => bd[i % c],
                    Bcast::Col => bd[i / c],
                };
                f(x, y)
            })
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, op(a, b, bc), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.requires(a);
        self.push(out, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(a),
        )
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let rg = self.requires(a);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = Tensor::zeros(ta.shape().to_vec());
        let c = ta.cols();
        for (src, dst) in ta.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
            log_softmax_row(src, dst);
        }
        let rg = self.requires(a);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.requires(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.requires(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sums over the last axis, producing `[rows, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data: Vec<f64> = t.row_iter().map(|r| r.iter().sum()).collect();
        let n = data.len();
        let rg = self.requires(a);
        self.push(
            Tensor::new(vec![n, 1], data).expect("shape"),
            Op::SumRows(a),
            rg,
        )
    }

    /// Concatenates two matrices along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.rows() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (ca, cb) = (ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for (ra, rb) in ta.row_iter().zip(tb.row_iter()) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let out = Tensor::new(vec![ta.rows(), ca + cb], data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(shape.clone(), ta.data().to_vec()).map_err(|_| {
            Error::ShapeMismatch {
                op: "reshape",
                lhs: ta.shape().to_vec(),
                rhs: shape,
            }
        })?;
        let rg = self.requires(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !is_matrix(ta) {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: ta.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let src = ta.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.requires(a);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a), rg))
    }

    /// Back-propagates from a scalar `loss` and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let params = std::mem::take(&mut self.params);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            if !node.value.requires_grad() {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(Var(idx), g);
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
        }
        Ok(Gradients { leaves, params })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].value.requires_grad() {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
    f(slot);
}

/// Reduces a gradient of lhs shape down to the broadcast rhs shape.
fn reduce_bcast(g: &[f64], bc: Bcast, cols: usize, target: &mut [f64]) {
    match bc {
        Bcast::Same => {
            for (t, &v) in target.iter_mut().zip(g) {
                *t += v;
            }
        }
        Bcast::Scalar => target[0] += g.iter().sum::<f64>(),
        Bcast::Row => {
            for row in g.chunks(cols) {
                for (t, &v) in target.iter_mut().zip(row) {
                    *t += v;
                }
            }
        }
        Bcast::Col => {
            for (t, row) in target.iter_mut().zip(g.chunks(cols)) {
                *t += row.iter().sum::<f64>();
            }
        }
    }
}

fn bval(b: &[f64], bc: Bcast, i: usize, cols: usize) -> f64 {
    match bc {
        Bcast::Same => b[i],
        Bcast::Scalar => b[0],
        Bcast::Row => b[i % cols],
        Bcast::Col => b[i / cols],
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = node.value.data();
    let val = |v: Var| nodes[v.0].value.data();
    match node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let (ad, bd) = (ta.data(), tb.data());
            // dA = dC · Bᵀ
            acc(grads, nodes, a, |ga| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            });
            // dB = Aᵀ · dC
            acc(grads, nodes, b, |gb| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let gbrow = &mut gb[p * n..(p + 1) * n];
                        for (t, &gv) in gbrow.iter_mut().zip(grow) {
                            *t += av * gv;
                        }
                    }
                }
            });
        }
        Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let cols = nodes[a.0].value.cols();
            acc(grads, nodes, a, |ga| {
                for (t, &v) in ga.iter_mut().zip(g) {
                    *t += v;
                }
            });
            if sign < 0.0 {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                acc(grads, nodes, b, |gb| reduce_bcast(&neg, bc, cols, gb));
            } else {
                acc(grads, nodes, b, |gb| reduce_bcast(g, bc, cols, gb));
            }
        }
        Op::Mul(a, b, bc) => {
            let cols = nodes[a.0].value.cols();
            let (ad, bd) = (val(a), val(b));
            acc(grads, nodes, a, |ga| {
                for (i, t) in ga.iter_mut().enumerate() {
                    *t += g[i] * bval(bd, bc, i, cols);
                }
            });
            if nodes[b.0].value.requires_grad() {
                let local: Vec<f64> = g.iter().zip(ad).map(|(x, y)| x * y).collect();
                acc(grads, nodes, b, |gb| reduce_bcast(&local, bc, cols, gb));
            }
        }
        Op::Div(a, b, bc) => {
            let cols = nodes[a.0].value.cols();
            let (ad, bd) = (val(a), val(b));
            acc(grads, nodes, a, |ga| {
                for (i, t) in ga.iter_mut().enumerate() {
                    *t += g[i] / bval(bd, bc, i, cols);
                }
            });
            if nodes[b.0].value.requires_grad() {
                let local: Vec<f64> = (0..ad.len())
                    .map(|i| {
                        let y = bval(bd, bc, i, cols);
                        -g[i] * ad[i] / (y * y)
                    })
                    .collect();
                acc(grads, nodes, b, |gb| reduce_bcast(&local, bc, cols, gb));
            }
        }
        Op::Scale(a, c) => acc(grads, nodes, a, |ga| {
            for (t, &v) in ga.iter_mut().zip(g) {
                *t += c * v;
            }
        }),
        Op::AddScalar(a) | Op::Reshape(a) => acc(grads, nodes, a, |ga| {
            for (t, &v) in ga.iter_mut().zip(g) {
                *t += v;
            }
        }),
        Op::Relu(a) => {
            let x = val(a);
            acc(grads, nodes, a, |ga| {
                for i in 0..ga.len() {
                    if x[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            })
        }
        Op::ClampMin(a, floor) => {
            let x = val(a);
            acc(grads, nodes, a, |ga| {
                for i in 0..ga.len() {
                    if x[i] >= floor {
                        ga[i] += g[i];
                    }
                }
            })
        }
        Op::Tanh(a) => acc(grads, nodes, a, |ga| {
            for i in 0..ga.len() {
                ga[i] += g[i] * (1.0 - out[i] * out[i]);
            }
        }),
        Op::Sigmoid(a) => acc(grads, nodes, a, |ga| {
            for i in 0..ga.len() {
                ga[i] += g[i] * out[i] * (1.0 - out[i]);
            }
        }),
        Op::Sqrt(a) => acc(grads, nodes, a, |ga| {
            for i in 0..ga.len() {
                ga[i] += g[i] / (2.0 * out[i]);
            }
        }),
        Op::Log(a) => {
            let x = val(a);
            acc(grads, nodes, a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] / x[i];
                }
            })
        }
        Op::Exp(a) => acc(grads, nodes, a, |ga| {
            for i in 0..ga.len() {
                ga[i] += g[i] * out[i];
            }
        }),
        Op::Softmax(a) => {
            let c = node.value.cols();
            acc(grads, nodes, a, |ga| {
                for ((gr, yr), tr) in g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        tr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            })
        }
        Op::LogSoftmax(a) => {
            let c = node.value.cols();
            acc(grads, nodes, a, |ga| {
                for ((gr, lr), tr) in g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..c {
                        tr[j] += gr[j] - lr[j].exp() * gsum;
                    }
                }
            })
        }
        Op::Sum(a) => acc(grads, nodes, a, |ga| {
            for t in ga.iter_mut() {
                *t += g[0];
            }
        }),
        Op::Mean(a) => acc(grads, nodes, a, |ga| {
            let s = g[0] / ga.len().max(1) as f64;
            for t in ga.iter_mut() {
                *t += s;
            }
        }),
        Op::SumRows(a) => {
            let c = nodes[a.0].value.cols();
            acc(grads, nodes, a, |ga| {
                for (tr, &gv) in ga.chunks_mut(c).zip(g) {
                    for t in tr.iter_mut() {
                        *t += gv;
                    }
                }
            })
        }
        Op::Concat(a, b) => {
            let (ca, cb) = (nodes[a.0].value.cols(), nodes[b.0].value.cols());
            let w = ca + cb;
            acc(grads, nodes, a, |ga| {
                for (tr, gr) in ga.chunks_mut(ca).zip(g.chunks(w)) {
                    for j in 0..ca {
                        tr[j] += gr[j];
                    }
                }
            });
            acc(grads, nodes, b, |gb| {
                for (tr, gr) in gb.chunks_mut(cb).zip(g.chunks(w)) {
                    for j in 0..cb {
                        tr[j] += gr[ca + j];
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let (r, c) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            acc(grads, nodes, a, |ga| {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            })
        }
    }
}
