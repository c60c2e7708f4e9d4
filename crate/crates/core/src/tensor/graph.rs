use std::cell::RefCell;

use super::kernels::{matmul_acc, matmul_nt_acc, matmul_tn_acc, permute, split_axis};
use super::{Real, Result, Tensor, TensorError};

pub type NodeId = usize;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: T },
    Gelu { x: NodeId },
    Softmax { x: NodeId, axis: usize },
    LogSoftmax { x: NodeId, axis: usize },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    SumAxis { x: NodeId, axis: usize },
    MeanAxis { x: NodeId, axis: usize },
    SumAll { x: NodeId },
    Reshape { x: NodeId },
    Permute { x: NodeId, perm: Vec<usize> },
    Concat { parts: Vec<NodeId>, axis: usize },
    Gather { x: NodeId, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Define-by-run tape. Nodes are appended in execution order, so node ids
/// are already a topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T> {
    graph: &'g Graph<T>,
    id: NodeId,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

fn suffix_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis < rank {
        Ok(())
    } else {
        Err(TensorError::InvalidAxis { op, axis, rank })
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let s = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let u = s * (x + c * x * x * x);
    let t = u.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * s * (one + T::of(3.0) * c * x * x);
    (y, dy)
}

/// Reduces `g` (shape of the broadcast output) onto a suffix operand of `nb` elements.
fn reduce_suffix<T: Real>(g: impl Iterator<Item = T>, nb: usize) -> Vec<T> {
    let mut out = vec![T::zero(); nb];
    for (i, v) in g.enumerate() {
        out[i % nb] = out[i % nb] + v;
    }
    out
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// A trainable leaf: backward accumulates into its gradient.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var<'_, T>) -> Tensor<T> {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn with_value<R>(&self, v: Var<'_, T>, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.id].value)
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.id];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let (value, ids) = {
            let nodes = self.nodes.borrow();
            let s0 = nodes[first.id].value.shape().to_vec();
            check_axis("concat", axis, s0.len())?;
            let mut total = 0;
            for p in parts {
                let s = nodes[p.id].value.shape();
                let ok = s.len() == s0.len()
                    && s.iter().zip(&s0).enumerate().all(|(d, (a, b))| d == axis || a == b);
                if !ok {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: s0.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let (outer, _, inner) = split_axis(&s0, axis);
            let mut shape = s0.clone();
            shape[axis] = total;
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.id].value;
                    let chunk = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            (
                Tensor::new(shape, data)?,
                parts.iter().map(|p| p.id).collect::<Vec<_>>(),
            )
        };
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::Concat { parts: ids, axis }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::NotScalar { shape });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            if matches!(nodes[id].op, Op::Leaf) {
                let node = &mut nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            let nodes = &*nodes;
            let mut send = |pid: NodeId, pg: Vec<T>| {
                if !nodes[pid].requires_grad {
                    return;
                }
                match &mut grads[pid] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(pg),
                }
            };
            let wants = |pid: NodeId| nodes[pid].requires_grad;
            let out = &nodes[id].value;
            match &nodes[id].op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul { a, b } => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (ash, bsh) = (av.shape(), bv.shape());
                    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                    let n = bsh[bsh.len() - 1];
                    let batch = av.numel() / (m * k);
                    let b_batched = bsh.len() > 2;
                    if wants(*a) {
                        let mut da = vec![T::zero(); av.numel()];
                        for i in 0..batch {
                            let bo = if b_batched { i * k * n } else { 0 };
                            matmul_nt_acc(
                                &g[i * m * n..(i + 1) * m * n],
                                &bv.data()[bo..bo + k * n],
                                &mut da[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                        send(*a, da);
                    }
                    if wants(*b) {
                        let mut db = vec![T::zero(); bv.numel()];
                        for i in 0..batch {
                            let bo = if b_batched { i * k * n } else { 0 };
                            matmul_tn_acc(
                                &av.data()[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                &mut db[bo..bo + k * n],
                                m,
                                k,
                                n,
                            );
                        }
                        send(*b, db);
                    }
                }
                Op::Add { a, b } => {
                    let nb = nodes[*b].value.numel();
                    if wants(*b) {
                        send(*b, reduce_suffix(g.iter().copied(), nb));
                    }
                    if wants(*a) {
                        send(*a, g);
                    }
                }
                Op::Sub { a, b } => {
                    let nb = nodes[*b].value.numel();
                    if wants(*b) {
                        send(*b, reduce_suffix(g.iter().map(|&x| -x), nb));
                    }
                    if wants(*a) {
                        send(*a, g);
                    }
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                    let nb = bv.len();
                    if wants(*a) {
                        let da = g.iter().enumerate().map(|(i, &x)| x * bv[i % nb]).collect();
                        send(*a, da);
                    }
                    if wants(*b) {
                        send(
                            *b,
                            reduce_suffix(g.iter().zip(av).map(|(&x, &y)| x * y), nb),
                        );
                    }
                }
                Op::Scale { x, c } => {
                    send(*x, g.iter().map(|&v| v * *c).collect());
                }
                Op::Gelu { x } => {
                    let xv = nodes[*x].value.data();
                    send(
                        *x,
                        g.iter().zip(xv).map(|(&gv, &xi)| gv * gelu_parts(xi).1).collect(),
                    );
                }
                Op::Softmax { x, axis } => {
                    let (outer, len, inner) = split_axis(out.shape(), *axis);
                    let y = out.data();
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    send(*x, dx);
                }
                Op::LogSoftmax { x, axis } => {
                    let (outer, len, inner) = split_axis(out.shape(), *axis);
                    let y = out.data();
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let gs: T = (0..len).map(|j| g[at(j)]).sum();
                            for j in 0..len {
                                dx[at(j)] = g[at(j)] - y[at(j)].exp() * gs;
                            }
                        }
                    }
                    send(*x, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = nodes[*gain].value.data();
                    let d = gv.len();
                    let rows = xhat.len() / d;
                    if wants(*gain) {
                        let mut dg = vec![T::zero(); d];
                        for r in 0..rows {
                            for j in 0..d {
                                dg[j] = dg[j] + g[r * d + j] * xhat[r * d + j];
                            }
                        }
                        send(*gain, dg);
                    }
                    if wants(*bias) {
                        send(*bias, reduce_suffix(g.iter().copied(), d));
                    }
                    if wants(*x) {
                        let mut dx = vec![T::zero(); xhat.len()];
                        let df = T::from_usize(d).unwrap();
                        for r in 0..rows {
                            let row = r * d..(r + 1) * d;
                            let dxh: Vec<T> = g[row.clone()].iter().zip(gv).map(|(&a, &b)| a * b).collect();
                            let s1: T = dxh.iter().copied().sum();
                            let s2: T = dxh.iter().zip(&xhat[row.clone()]).map(|(&a, &b)| a * b).sum();
                            for j in 0..d {
                                dx[r * d + j] =
                                    inv_std[r] / df * (df * dxh[j] - s1 - xhat[r * d + j] * s2);
                            }
                        }
                        send(*x, dx);
                    }
                }
                Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                    let xs = nodes[*x].value.shape();
                    let (outer, len, inner) = split_axis(xs, *axis);
                    let scale = if matches!(nodes[id].op, Op::MeanAxis { .. }) {
                        T::one() / T::from_usize(len).unwrap()
                    } else {
                        T::one()
                    };
                    let mut dx = vec![T::zero(); outer * len * inner];
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                dx[(o * len + j) * inner + i] = g[o * inner + i] * scale;
                            }
                        }
                    }
                    send(*x, dx);
                }
                Op::SumAll { x } => {
                    let n = nodes[*x].value.numel();
                    send(*x, vec![g[0]; n]);
                }
                Op::Reshape { x } => send(*x, g),
                Op::Permute { x, perm } => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (dx, _) = permute(&g, out.shape(), &inv);
                    send(*x, dx);
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = split_axis(out.shape(), *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p].value.shape()[*axis];
                        if wants(p) {
                            let mut dp = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let start = (o * total + offset) * inner;
                                dp.extend_from_slice(&g[start..start + len * inner]);
                            }
                            send(p, dp);
                        }
                        offset += len;
                    }
                }
                Op::Gather { x, indices } => {
                    let xv = &nodes[*x].value;
                    let width = xv.numel() / xv.shape()[0].max(1);
                    let mut dx = vec![T::zero(); xv.numel()];
                    for (r, &src) in indices.iter().enumerate() {
                        for j in 0..width {
                            dx[src * width + j] = dx[src * width + j] + g[r * width + j];
                        }
                    }
                    send(*x, dx);
                }
            }
        }
        Ok(())
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn id(self) -> NodeId {
        self.id
    }

    pub fn graph(self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(self) -> Tensor<T> {
        self.graph.value(self)
    }

    pub fn shape(self) -> Vec<usize> {
        self.graph.with_value(self, |t| t.shape().to_vec())
    }

    pub fn requires_grad(self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(self) -> Option<Tensor<T>> {
        self.graph.grad(self)
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'g, T> {
        self.graph.constant(self.value())
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        let rg = self.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn binary(self, other: Var<'g, T>, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        let rg = self.graph.rg(&[self.id, other.id]);
        self.graph.push(value, op, rg)
    }

    /// `[.., m, k] x [.., k, n]`. The right operand is either a plain matrix
    /// (shared across the batch) or carries the same leading extents.
    pub fn matmul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            let (ash, bsh) = (a.shape(), b.shape());
            let mismatch = || TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            };
            if ash.len() < 2 || bsh.len() < 2 {
                return Err(mismatch());
            }
            let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
            let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
            let b_batched = bsh.len() > 2;
            if k != k2 || (b_batched && ash[..ash.len() - 2] != bsh[..bsh.len() - 2]) {
                return Err(mismatch());
            }
            let batch = a.numel() / (m * k).max(1);
            let mut out = vec![T::zero(); batch * m * n];
            for i in 0..batch {
                let bo = if b_batched { i * k * n } else { 0 };
                matmul_acc(
                    &a.data()[i * m * k..(i + 1) * m * k],
                    &b.data()[bo..bo + k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            let mut shape = ash[..ash.len() - 2].to_vec();
            shape.extend([m, n]);
            Tensor::new(shape, out)?
        };
        Ok(self.binary(rhs, value, Op::MatMul { a: self.id, b: rhs.id }))
    }

    fn zip_with(
        self,
        rhs: Var<'g, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let nodes = self.graph.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
        suffix_broadcast(op, a.shape(), b.shape())?;
        let nb = b.numel();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % nb]))
            .collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    /// Elementwise sum; `rhs` may match a trailing suffix of `self`'s shape
    /// and is then broadcast over the leading axes.
    pub fn add(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        let v = self.zip_with(rhs, "add", |a, b| a + b)?;
        Ok(self.binary(rhs, v, Op::Add { a: self.id, b: rhs.id }))
    }

    pub fn sub(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        let v = self.zip_with(rhs, "sub", |a, b| a - b)?;
        Ok(self.binary(rhs, v, Op::Sub { a: self.id, b: rhs.id }))
    }

    pub fn mul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        let v = self.zip_with(rhs, "mul", |a, b| a * b)?;
        Ok(self.binary(rhs, v, Op::Mul { a: self.id, b: rhs.id }))
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        let v = self.graph.with_value(self, |t| t.map(|x| x * c));
        self.unary(v, Op::Scale { x: self.id, c })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'g, T> {
        let v = self.graph.with_value(self, |t| t.map(|x| gelu_parts(x).0));
        self.unary(v, Op::Gelu { x: self.id })
    }

    fn normalize_along(self, axis: usize, op: &'static str, log: bool) -> Result<Tensor<T>> {
        self.graph.with_value(self, |t| {
            check_axis(op, axis, t.rank())?;
            if !t.is_finite() {
                return Err(TensorError::NonFinite { op });
            }
            let (outer, len, inner) = split_axis(t.shape(), axis);
            let x = t.data();
            let mut y = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let mx = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                    let z: T = (0..len).map(|j| (x[at(j)] - mx).exp()).sum();
                    for j in 0..len {
                        y[at(j)] = if log {
                            x[at(j)] - mx - z.ln()
                        } else {
                            (x[at(j)] - mx).exp() / z
                        };
                    }
                }
            }
            Tensor::new(t.shape().to_vec(), y)
        })
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let v = self.normalize_along(axis, "softmax", false)?;
        Ok(self.unary(v, Op::Softmax { x: self.id, axis }))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let v = self.normalize_along(axis, "log_softmax", true)?;
        Ok(self.unary(v, Op::LogSoftmax { x: self.id, axis }))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (both `[d]`).
    pub fn layer_norm(self, gain: Var<'g, T>, bias: Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        let (value, xhat, inv_std) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id].value;
            let (g, b) = (&nodes[gain.id].value, &nodes[bias.id].value);
            let d = *x.shape().last().ok_or(TensorError::InvalidAxis {
                op: "layer_norm",
                axis: 0,
                rank: 0,
            })?;
            if g.shape() != [d] || b.shape() != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: x.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let rows = x.numel() / d.max(1);
            let df = T::from_usize(d).unwrap();
            let mut xhat = vec![T::zero(); x.numel()];
            let mut inv_std = vec![T::zero(); rows];
            let mut y = vec![T::zero(); x.numel()];
            for r in 0..rows {
                let row = &x.data()[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<T>() / df;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
                let inv = T::one() / (var + eps).sqrt();
                inv_std[r] = inv;
                for j in 0..d {
                    let h = (row[j] - mean) * inv;
                    xhat[r * d + j] = h;
                    y[r * d + j] = h * g.data()[j] + b.data()[j];
                }
            }
            (Tensor::new(x.shape().to_vec(), y)?, xhat, inv_std)
        };
        let rg = self.graph.rg(&[self.id, gain.id, bias.id]);
        Ok(self.graph.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Tensor<T>> {
        let op = if mean { "mean_axis" } else { "sum_axis" };
        self.graph.with_value(self, |t| {
            check_axis(op, axis, t.rank())?;
            let (outer, len, inner) = split_axis(t.shape(), axis);
            let scale = if mean {
                T::one() / T::from_usize(len).unwrap()
            } else {
                T::one()
            };
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] = out[o * inner + i] + t.data()[(o * len + j) * inner + i];
                    }
                }
            }
            out.iter_mut().for_each(|v| *v = *v * scale);
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            Tensor::new(shape, out)
        })
    }

    /// Sums out `axis` (the axis is removed).
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let v = self.reduce_axis(axis, false)?;
        Ok(self.unary(v, Op::SumAxis { x: self.id, axis }))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let v = self.reduce_axis(axis, true)?;
        Ok(self.unary(v, Op::MeanAxis { x: self.id, axis }))
    }

    /// Rank-0 sum of every element.
    pub fn sum_all(self) -> Var<'g, T> {
        let v = self.graph.with_value(self, |t| Tensor::scalar(t.sum()));
        self.unary(v, Op::SumAll { x: self.id })
    }

    pub fn mean_all(self) -> Var<'g, T> {
        let n = self.graph.with_value(self, |t| t.numel());
        self.sum_all().scale(T::one() / T::from_usize(n.max(1)).unwrap())
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'g, T>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape { x: self.id }))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'g, T>> {
        let v = self.graph.with_value(self, |t| {
            let mut seen = vec![false; t.rank()];
            let valid = perm.len() == t.rank()
                && perm.iter().all(|&p| p < t.rank() && !std::mem::replace(&mut seen[p], true));
            if !valid {
                return Err(TensorError::Invalid {
                    op: "permute",
                    msg: format!("{perm:?} is not a permutation of rank {}", t.rank()),
                });
            }
            let (data, shape) = permute(t.data(), t.shape(), perm);
            Tensor::new(shape, data)
        })?;
        Ok(self.unary(
            v,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps two axes.
    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'g, T>> {
        let rank = self.graph.with_value(self, |t| t.rank());
        check_axis("transpose", a.max(b), rank)?;
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Rows along axis 0 selected by `indices` (repeats allowed).
    pub fn gather(self, indices: &[usize]) -> Result<Var<'g, T>> {
        let v = self.graph.with_value(self, |t| t.select_rows(indices))?;
        Ok(self.unary(
            v,
            Op::Gather {
                x: self.id,
                indices: indices.to_vec(),
            },
        ))
    }
}
