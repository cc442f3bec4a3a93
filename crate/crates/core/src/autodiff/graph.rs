use std::cell::{Ref, RefCell};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Affine(usize, usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    WeightedSum(usize, Tensor),
    LogSumExp(usize, usize),
    Broadcast(usize),
    Reshape(usize),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Concat(Vec<usize>, usize),
    StopGradient(usize),
    BernoulliLogLik(usize, Tensor),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Define-by-run computation graph. Nodes are appended in evaluation order,
/// so insertion order is a topological order.
///
/// A graph is confined to one thread; build a fresh one per minibatch.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

/// Result of [`Graph::backward`]: dLoss/dNode for every node that required a gradient.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of `shape` if nothing flowed into it.
    pub fn take(&mut self, var: Var<'_>) -> Tensor {
        let shape = var.shape();
        self.grads
            .get_mut(var.id)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(&shape))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, false)
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Input node ids of `var`'s op. Always smaller than `var.id()`.
    pub fn inputs(&self, var: Var<'_>) -> Vec<usize> {
        match &self.nodes.borrow()[var.id].op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Affine(a, b, c) => vec![*a, *b, *c],
            Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::WeightedSum(a, _)
            | Op::LogSumExp(a, _)
            | Op::Broadcast(a)
            | Op::Reshape(a)
            | Op::StopGradient(a)
            | Op::BernoulliLogLik(a, _) => vec![*a],
            Op::Slice { input, .. } => vec![*input],
            Op::Concat(ids, _) => ids.clone(),
        }
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(loss_value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(&nodes, &node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    match &mut grads[id] {
        Some(g) => g.add_assign(&delta),
        slot => *slot = Some(delta),
    }
}

fn elementwise(g: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
    let data = g.data().iter().enumerate().map(|(i, &v)| f(i, v)).collect();
    Tensor::new(g.shape().to_vec(), data).expect("same shape")
}

/// (outer, extent, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Strides of `input` viewed as broadcast to `target` (zero on broadcast dims).
fn broadcast_strides(input: &[usize], target: &[usize]) -> Vec<usize> {
    let pad = target.len() - input.len();
    let mut strides = vec![0; target.len()];
    let mut s = 1;
    for d in (0..input.len()).rev() {
        if input[d] != 1 {
            strides[d + pad] = s;
        }
        s *= input[d];
    }
    strides
}

/// Calls `f(out_index, in_index)` for every element of a broadcast.
fn for_each_broadcast(input: &[usize], target: &[usize], mut f: impl FnMut(usize, usize)) {
    let strides = broadcast_strides(input, target);
    let total: usize = target.iter().product();
    let mut counter = vec![0usize; target.len()];
    let mut src = 0usize;
    for out in 0..total {
        f(out, src);
        for d in (0..target.len()).rev() {
            counter[d] += 1;
            src += strides[d];
            if counter[d] < target[d] {
                break;
            }
            src -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
}

fn broadcast_compatible(input: &[usize], target: &[usize]) -> bool {
    if input.len() > target.len() {
        return false;
    }
    let pad = target.len() - input.len();
    input
        .iter()
        .enumerate()
        .all(|(d, &n)| n == 1 || n == target[d + pad])
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

fn backprop(nodes: &[Node], op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: usize| &nodes[id].value;
    let rg = |id: usize| nodes[id].requires_grad;
    match *op {
        Op::Leaf | Op::StopGradient(_) => {}
        Op::Add(a, b) => {
            if rg(a) {
                accumulate(grads, a, g.clone());
            }
            if rg(b) {
                accumulate(grads, b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if rg(a) {
                accumulate(grads, a, g.clone());
            }
            if rg(b) {
                accumulate(grads, b, g.map(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            if rg(a) {
                let bv = val(b).data();
                accumulate(grads, a, elementwise(g, |i, v| v * bv[i]));
            }
            if rg(b) {
                let av = val(a).data();
                accumulate(grads, b, elementwise(g, |i, v| v * av[i]));
            }
        }
        Op::MatMul(a, b) | Op::Affine(a, b, _) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if rg(a) {
                let mut da = Tensor::zeros(&[m, k]);
                gemm(m, n, k, g.data(), false, bv.data(), true, da.data_mut(), false);
                accumulate(grads, a, da);
            }
            if rg(b) {
                let mut db = Tensor::zeros(&[k, n]);
                gemm(k, m, n, av.data(), true, g.data(), false, db.data_mut(), false);
                accumulate(grads, b, db);
            }
            if let Op::Affine(_, _, bias) = *op {
                if rg(bias) {
                    let mut dbias = vec![0.0; n];
                    for row in g.data().chunks_exact(n) {
                        for (d, v) in dbias.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = val(bias).shape().to_vec();
                    accumulate(grads, bias, Tensor::new(shape, dbias).expect("bias shape"));
                }
            }
        }
        Op::Tanh(a) => {
            let y = out.data();
            accumulate(grads, a, elementwise(g, |i, v| v * (1.0 - y[i] * y[i])));
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            accumulate(grads, a, elementwise(g, |i, v| v * y[i] * (1.0 - y[i])));
        }
        Op::Exp(a) => {
            let y = out.data();
            accumulate(grads, a, elementwise(g, |i, v| v * y[i]));
        }
        Op::Log(a) => {
            let x = val(a).data();
            accumulate(grads, a, elementwise(g, |i, v| v / x[i]));
        }
        Op::Square(a) => {
            let x = val(a).data();
            accumulate(grads, a, elementwise(g, |i, v| 2.0 * v * x[i]));
        }
        Op::Neg(a) => accumulate(grads, a, g.map(|v| -v)),
        Op::Scale(a, c) => accumulate(grads, a, g.map(|v| v * c)),
        Op::Offset(a) => accumulate(grads, a, g.clone()),
        Op::Sum(a) | Op::Mean(a) => {
            let x = val(a);
            let mut scale = g.data()[0];
            if matches!(op, Op::Mean(_)) {
                scale /= x.len() as f64;
            }
            accumulate(grads, a, Tensor::full(x.shape(), scale));
        }
        Op::SumAxis(a, axis) => {
            let x = val(a);
            let (outer, n, inner) = split_axis(x.shape(), axis);
            let mut dx = Tensor::zeros(x.shape());
            let d = dx.data_mut();
            for o in 0..outer {
                for j in 0..n {
                    let base = (o * n + j) * inner;
                    d[base..base + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            accumulate(grads, a, dx);
        }
        Op::WeightedSum(a, ref w) => {
            let scale = g.data()[0];
            let wd = w.data();
            let dx = Tensor::new(w.shape().to_vec(), wd.iter().map(|wi| wi * scale).collect())
                .expect("weight shape");
            accumulate(grads, a, dx);
        }
        Op::LogSumExp(a, axis) => {
            let x = val(a);
            let (outer, n, inner) = split_axis(x.shape(), axis);
            let (xd, yd, gd) = (x.data(), out.data(), g.data());
            let mut dx = Tensor::zeros(x.shape());
            let d = dx.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let y = yd[o * inner + i];
                    if y == f64::NEG_INFINITY {
                        continue;
                    }
                    let gv = gd[o * inner + i];
                    for j in 0..n {
                        let idx = (o * n + j) * inner + i;
                        d[idx] = gv * (xd[idx] - y).exp();
                    }
                }
            }
            accumulate(grads, a, dx);
        }
        Op::Broadcast(a) => {
            let x = val(a);
            let mut dx = Tensor::zeros(x.shape());
            let d = dx.data_mut();
            let gd = g.data();
            for_each_broadcast(x.shape(), out.shape(), |o, i| d[i] += gd[o]);
            accumulate(grads, a, dx);
        }
        Op::Reshape(a) => {
            let shape = val(a).shape().to_vec();
            accumulate(grads, a, g.clone().reshape(&shape).expect("reshape back"));
        }
        Op::Slice { input, axis, start } => {
            let x = val(input);
            let (outer, n, inner) = split_axis(x.shape(), axis);
            let len = out.shape()[axis];
            let mut dx = Tensor::zeros(x.shape());
            let d = dx.data_mut();
            for o in 0..outer {
                let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                let dst = (o * n + start) * inner;
                d[dst..dst + len * inner].copy_from_slice(src);
            }
            accumulate(grads, input, dx);
        }
        Op::Concat(ref inputs, axis) => {
            let (outer, total, inner) = split_axis(out.shape(), axis);
            let mut offset = 0;
            for &id in inputs {
                let n = val(id).shape()[axis];
                if rg(id) {
                    let mut dx = Tensor::zeros(val(id).shape());
                    let d = dx.data_mut();
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        d[o * n * inner..(o + 1) * n * inner]
                            .copy_from_slice(&g.data()[src..src + n * inner]);
                    }
                    accumulate(grads, id, dx);
                }
                offset += n;
            }
        }
        Op::BernoulliLogLik(logits, ref targets) => {
            let l = val(logits);
            let cols = l.cols();
            let (ld, td, gd) = (l.data(), targets.data(), g.data());
            let dx = elementwise(l, |i, _| gd[i / cols] * (td[i] - sigmoid(ld[i])));
            accumulate(grads, logits, dx);
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value(self.id).shape().to_vec()
    }

    pub fn value(&self) -> Tensor {
        self.graph.value(self.id).clone()
    }

    /// Borrowed view of the forward value.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.graph.value(self.id))
    }

    pub fn item(&self) -> Option<f64> {
        self.graph.value(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let value = self.graph.value(self.id).map(f);
        let rg = self.requires_grad();
        self.graph.push(op, value, rg)
    }

    fn check_same(self, other: Var<'g>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::shape(op, &[&a, &b]));
        }
        Ok(())
    }

    fn binary(
        self,
        other: Var<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        self.check_same(other, name)?;
        let value = {
            let a = self.graph.value(self.id);
            let b = self.graph.value(other.id);
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(op, value, rg))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// (m, k) x (k, n) -> (m, n)
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::shape("matmul", &[&a, &b]));
        }
        let mut out = Tensor::zeros(&[a[0], b[1]]);
        {
            let (av, bv) = (self.graph.value(self.id), self.graph.value(other.id));
            gemm(a[0], a[1], b[1], av.data(), false, bv.data(), false, out.data_mut(), false);
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(Op::MatMul(self.id, other.id), out, rg))
    }

    /// `self . weight + bias`, with `bias` of shape (n) added to every row.
    pub fn affine(self, weight: Var<'g>, bias: Var<'g>) -> Result<Var<'g>> {
        let (a, w, b) = (self.shape(), weight.shape(), bias.shape());
        if a.len() != 2 || w.len() != 2 || a[1] != w[0] || b.iter().product::<usize>() != w[1] {
            return Err(Error::shape("affine", &[&a, &w, &b]));
        }
        let n = w[1];
        let mut out = Tensor::zeros(&[a[0], n]);
        {
            let (av, wv, bv) = (
                self.graph.value(self.id),
                self.graph.value(weight.id),
                self.graph.value(bias.id),
            );
            for row in out.data_mut().chunks_exact_mut(n) {
                row.copy_from_slice(bv.data());
            }
            gemm(a[0], a[1], n, av.data(), false, wv.data(), false, out.data_mut(), true);
        }
        let rg = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        Ok(self
            .graph
            .push(Op::Affine(self.id, weight.id, bias.id), out, rg))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Var<'g> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn neg(self) -> Var<'g> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn offset(self, c: f64) -> Var<'g> {
        self.unary(Op::Offset(self.id), |x| x + c)
    }

    pub fn sum(self) -> Var<'g> {
        let s = self.graph.value(self.id).data().iter().sum();
        let rg = self.requires_grad();
        self.graph.push(Op::Sum(self.id), Tensor::scalar(s), rg)
    }

    pub fn mean(self) -> Var<'g> {
        let m = {
            let v = self.graph.value(self.id);
            v.data().iter().sum::<f64>() / v.len() as f64
        };
        let rg = self.requires_grad();
        self.graph.push(Op::Mean(self.id), Tensor::scalar(m), rg)
    }

    fn reduce_axis(
        self,
        axis: usize,
        name: &'static str,
        f: impl Fn(&mut dyn Iterator<Item = f64>) -> f64,
    ) -> Result<Tensor> {
        let x = self.graph.value(self.id);
        if axis >= x.rank() {
            return Err(Error::shape(name, &[x.shape(), &[axis]]));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut it = (0..n).map(|j| xd[(o * n + j) * inner + i]);
                out.push(f(&mut it));
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Tensor::new(shape, out)
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        let out = self.reduce_axis(axis, "sum_axis", &|it: &mut dyn Iterator<Item = f64>| it.sum())?;
        let rg = self.requires_grad();
        Ok(self.graph.push(Op::SumAxis(self.id, axis), out, rg))
    }

    /// Numerically stable `log(sum(exp(x)))` over one axis (max-shifted).
    pub fn log_sum_exp(self, axis: usize) -> Result<Var<'g>> {
        let out = self.reduce_axis(axis, "log_sum_exp", &|it: &mut dyn Iterator<Item = f64>| {
            let vals: Vec<f64> = it.collect();
            log_sum_exp(&vals)
        })?;
        let rg = self.requires_grad();
        Ok(self.graph.push(Op::LogSumExp(self.id, axis), out, rg))
    }

    /// `sum(weights * self)` with `weights` held constant.
    pub fn weighted_sum(self, weights: &Tensor) -> Result<Var<'g>> {
        let s = {
            let x = self.graph.value(self.id);
            if x.shape() != weights.shape() {
                return Err(Error::shape("weighted_sum", &[x.shape(), weights.shape()]));
            }
            x.data().iter().zip(weights.data()).map(|(a, w)| a * w).sum()
        };
        let rg = self.requires_grad();
        Ok(self.graph.push(
            Op::WeightedSum(self.id, weights.clone()),
            Tensor::scalar(s),
            rg,
        ))
    }

    /// Numpy-style broadcast to `shape` (leading dims padded with 1).
    pub fn broadcast(self, shape: &[usize]) -> Result<Var<'g>> {
        let out = {
            let x = self.graph.value(self.id);
            if !broadcast_compatible(x.shape(), shape) {
                return Err(Error::shape("broadcast", &[x.shape(), shape]));
            }
            let mut data = vec![0.0; shape.iter().product()];
            let xd = x.data();
            for_each_broadcast(x.shape(), shape, |o, i| data[o] = xd[i]);
            Tensor::new(shape.to_vec(), data)?
        };
        let rg = self.requires_grad();
        Ok(self.graph.push(Op::Broadcast(self.id), out, rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.graph.value(self.id).clone().reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.graph.push(Op::Reshape(self.id), out, rg))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'g>> {
        let out = {
            let x = self.graph.value(self.id);
            if axis >= x.rank() || start > end || end > x.shape()[axis] {
                return Err(Error::shape("slice", &[x.shape(), &[axis, start, end]]));
            }
            let (outer, n, inner) = split_axis(x.shape(), axis);
            let len = end - start;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                data.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = len;
            Tensor::new(shape, data)?
        };
        let rg = self.requires_grad();
        Ok(self.graph.push(
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            out,
            rg,
        ))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", &[]))?;
        let graph = first.graph;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        let base = &shapes[0];
        let compatible = axis < base.len()
            && shapes.iter().all(|s| {
                s.len() == base.len()
                    && s.iter()
                        .zip(base)
                        .enumerate()
                        .all(|(d, (a, b))| d == axis || a == b)
            });
        if !compatible {
            let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
            return Err(Error::shape("concat", &refs));
        }
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let (outer, _, inner) = split_axis(base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = graph.value(p.id);
                let n = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let rg = parts.iter().any(|p| p.requires_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(graph.push(Op::Concat(ids, axis), Tensor::new(shape, data)?, rg))
    }

    /// Same value; no gradient flows back through this node.
    pub fn stop_gradient(self) -> Var<'g> {
        let value = self.graph.value(self.id).clone();
        self.graph.push(Op::StopGradient(self.id), value, false)
    }

    /// Row-wise Bernoulli log-likelihood `sum_d x_d log s(l_d) + (1-x_d) log(1-s(l_d))`
    /// of `targets` under logits `self`: (n, d) -> (n).
    pub fn bernoulli_log_lik(self, targets: Tensor) -> Result<Var<'g>> {
        let out = {
            let l = self.graph.value(self.id);
            if l.rank() != 2 || l.shape() != targets.shape() {
                return Err(Error::shape("bernoulli_log_lik", &[l.shape(), targets.shape()]));
            }
            let d = l.cols();
            let rows = l
                .data()
                .chunks_exact(d)
                .zip(targets.data().chunks_exact(d))
                .map(|(lr, xr)| {
                    lr.iter()
                        .zip(xr)
                        .map(|(&li, &xi)| xi * li - softplus(li))
                        .sum()
                })
                .collect();
            Tensor::vector(rows)
        };
        let rg = self.requires_grad();
        Ok(self
            .graph
            .push(Op::BernoulliLogLik(self.id, targets), out, rg))
    }
}

/// `log(sum(exp(x)))`, shifted by the max so it never overflows.
/// Returns `-inf` for empty or all-`-inf` input.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + x.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}
