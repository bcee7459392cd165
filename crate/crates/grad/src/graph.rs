use std::cell::{Cell, RefCell};
use std::ops::Range;

use crate::error::{GradError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

type NodeId = usize;

#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Affine { mul: f64 },
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Square,
    Sqrt,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(BinaryKind, NodeId, NodeId),
    Unary(UnaryKind, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumLast(NodeId),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Slice(NodeId, Range<usize>),
    Transpose(NodeId),
    GatherRows(NodeId, Vec<usize>),
    RowNorm(NodeId),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

impl Node {
    fn width(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

/// Record of primitive applications for one forward/backward pass.
///
/// Nodes are appended in evaluation order, so the append order is a
/// topological order and backward simply walks it in reverse. A graph can
/// be differentiated once; build a new one for the next pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<Vec<(ParamId, NodeId)>>,
    consumed: Cell<bool>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let nodes = self.graph.nodes.borrow();
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &nodes[self.id].shape)
            .finish()
    }
}

/// Result of [`Graph::backward`]: gradients of every grad-enabled leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
    bound: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by `variable` or `param`.
    pub fn wrt(&self, var: Var<'_>) -> Option<&[f64]> {
        self.leaves.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.bound
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, node)| self.leaves.get(node))
            .and_then(|g| g.as_deref())
    }
}

fn width_of(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by backward.
    pub fn variable(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Binds a stored parameter as a leaf. Binding the same id twice returns
    /// the same node, so recurrent unrolls share one gradient slot.
    pub fn param<'g>(&'g self, store: &ParamStore, id: ParamId) -> Var<'g> {
        if let Some(&(_, node)) = self.bound.borrow().iter().find(|(p, _)| *p == id) {
            return Var {
                graph: self,
                id: node,
            };
        }
        let t = store.get(id);
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.grad_enabled(),
        );
        self.bound.borrow_mut().push((id, v.id));
        v
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let nodes = self.nodes.borrow();
        let first = parts.first().ok_or(GradError::Domain {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        for p in parts {
            if !std::ptr::eq(p.graph, self) {
                return Err(GradError::ForeignVar);
            }
        }
        let lead = &nodes[first.id].shape;
        let lead = &lead[..lead.len().saturating_sub(1)];
        let rows: usize = lead.iter().product();
        let mut total = 0;
        for p in parts {
            let s = &nodes[p.id].shape;
            if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
                return Err(GradError::ShapeMismatch {
                    op: "concat",
                    lhs: nodes[first.id].shape.clone(),
                    rhs: s.clone(),
                });
            }
            total += width_of(s);
        }
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let n = &nodes[p.id];
                let w = n.width();
                value.extend_from_slice(&n.value[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        let ids = parts.iter().map(|p| p.id).collect();
        drop(nodes);
        Ok(self.push(shape, value, Op::Concat(ids), rg))
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.graph, self) {
            return Err(GradError::ForeignVar);
        }
        if self.consumed.get() {
            return Err(GradError::GraphConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(GradError::NonScalarLoss(root.shape.clone()));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        let mut leaves: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if root.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            propagate(&nodes, node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaves[id] = Some(g);
            }
        }

        // Grad-enabled leaves the loss never reached get explicit zeros.
        for (id, n) in nodes.iter().enumerate() {
            if n.requires_grad && matches!(n.op, Op::Leaf) && leaves[id].is_none() {
                leaves[id] = Some(vec![0.0; n.value.len()]);
            }
        }

        Ok(Gradients {
            leaves,
            bound: self.bound.borrow().clone(),
        })
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let a_scalar = av.len() == 1;
            let b_scalar = bv.len() == 1;
            let ia = |k: usize| if a_scalar { 0 } else { k };
            let ib = |k: usize| if b_scalar { 0 } else { k };
            if let Some(da) = slot(grads, nodes, *a) {
                for (k, gk) in g.iter().enumerate() {
                    da[ia(k)] += match kind {
                        BinaryKind::Add | BinaryKind::Sub => *gk,
                        BinaryKind::Mul => gk * bv[ib(k)],
                        BinaryKind::Div => gk / bv[ib(k)],
                    };
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for (k, gk) in g.iter().enumerate() {
                    db[ib(k)] += match kind {
                        BinaryKind::Add => *gk,
                        BinaryKind::Sub => -gk,
                        BinaryKind::Mul => gk * av[ia(k)],
                        BinaryKind::Div => -gk * av[ia(k)] / (bv[ib(k)] * bv[ib(k)]),
                    };
                }
            }
        }
        Op::Unary(kind, a) => {
            let av = &nodes[*a].value;
            let out = &node.value;
            if let Some(da) = slot(grads, nodes, *a) {
                for k in 0..g.len() {
                    da[k] += g[k]
                        * match kind {
                            UnaryKind::Affine { mul } => *mul,
                            UnaryKind::Exp => out[k],
                            UnaryKind::Log => 1.0 / av[k],
                            UnaryKind::Tanh => 1.0 - out[k] * out[k],
                            UnaryKind::Sigmoid => out[k] * (1.0 - out[k]),
                            UnaryKind::Softplus => sigmoid(av[k]),
                            UnaryKind::Square => 2.0 * av[k],
                            UnaryKind::Sqrt => {
                                if out[k] > 0.0 {
                                    0.5 / out[k]
                                } else {
                                    0.0
                                }
                            }
                        };
                }
            }
        }
        Op::Sum(a) | Op::Mean(a) => {
            let n = nodes[*a].value.len();
            let scale = if matches!(node.op, Op::Mean(_)) {
                g[0] / n as f64
            } else {
                g[0]
            };
            if let Some(da) = slot(grads, nodes, *a) {
                da.iter_mut().for_each(|d| *d += scale);
            }
        }
        Op::SumLast(a) => {
            let w = nodes[*a].width();
            if let Some(da) = slot(grads, nodes, *a) {
                for (r, gr) in g.iter().enumerate() {
                    da[r * w..(r + 1) * w].iter_mut().for_each(|d| *d += gr);
                }
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            if let Some(da) = slot(grads, nodes, *a) {
                // dA = G B^T
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        let mut s = 0.0;
                        for j in 0..n {
                            s += grow[j] * brow[j];
                        }
                        da[i * k + p] += s;
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                // dB = A^T G
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let drow = &mut db[p * n..(p + 1) * n];
                        for j in 0..n {
                            drow[j] += aip * grow[j];
                        }
                    }
                }
            }
        }
        Op::AddBias(a, b) => {
            let w = node.width();
            if let Some(da) = slot(grads, nodes, *a) {
                da.iter_mut().zip(g).for_each(|(d, gk)| *d += gk);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for row in g.chunks(w) {
                    db.iter_mut().zip(row).for_each(|(d, gk)| *d += gk);
                }
            }
        }
        Op::Concat(parts) => {
            let total = node.width();
            let rows = g.len() / total.max(1);
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].width();
                if let Some(dp) = slot(grads, nodes, p) {
                    for r in 0..rows {
                        let src = &g[r * total + offset..r * total + offset + w];
                        dp[r * w..(r + 1) * w]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, gk)| *d += gk);
                    }
                }
                offset += w;
            }
        }
        Op::Slice(a, range) => {
            let w_in = nodes[*a].width();
            let w_out = range.len();
            if let Some(da) = slot(grads, nodes, *a) {
                for (r, row) in g.chunks(w_out.max(1)).enumerate() {
                    let dst = &mut da[r * w_in + range.start..r * w_in + range.end];
                    dst.iter_mut().zip(row).for_each(|(d, gk)| *d += gk);
                }
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            if let Some(da) = slot(grads, nodes, *a) {
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::GatherRows(a, idx) => {
            let w = nodes[*a].width();
            if let Some(da) = slot(grads, nodes, *a) {
                for (r, &src) in idx.iter().enumerate() {
                    let row = &g[r * w..(r + 1) * w];
                    da[src * w..(src + 1) * w]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(d, gk)| *d += gk);
                }
            }
        }
        Op::RowNorm(a) => {
            let w = nodes[*a].width();
            let av = &nodes[*a].value;
            let out = &node.value;
            if let Some(da) = slot(grads, nodes, *a) {
                for (r, gr) in g.iter().enumerate() {
                    if out[r] == 0.0 {
                        continue;
                    }
                    let scale = gr / out[r];
                    for j in 0..w {
                        da[r * w + j] += scale * av[r * w + j];
                    }
                }
            }
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape invariant")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        assert_eq!(n.value.len(), 1, "item() on shape {:?}", n.shape);
        n.value[0]
    }

    fn same_graph(&self, other: &Var<'g>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(GradError::ForeignVar)
        }
    }

    fn binary(self, other: Var<'g>, kind: BinaryKind, op: &'static str) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let b = &nodes[other.id];
        let (la, lb) = (a.value.len(), b.value.len());
        let shape = if a.shape == b.shape || lb == 1 {
            a.shape.clone()
        } else if la == 1 {
            b.shape.clone()
        } else {
            return Err(GradError::ShapeMismatch {
                op,
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        };
        if let BinaryKind::Div = kind {
            if b.value.iter().any(|&v| v == 0.0) {
                return Err(GradError::Domain {
                    op,
                    detail: "division by zero".into(),
                });
            }
        }
        let n = la.max(lb);
        let mut value = Vec::with_capacity(n);
        for k in 0..n {
            let x = a.value[if la == 1 { 0 } else { k }];
            let y = b.value[if lb == 1 { 0 } else { k }];
            value.push(match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            });
        }
        let rg = a.requires_grad || b.requires_grad;
        drop(nodes);
        Ok(self
            .graph
            .push(shape, value, Op::Binary(kind, self.id, other.id), rg))
    }

    /// Elementwise sum; either side may be a one-element scalar.
    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Div, "div")
    }

    fn unary(self, kind: UnaryKind, f: impl Fn(f64) -> f64) -> Var<'g> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let value = a.value.iter().map(|&v| f(v)).collect();
        let (shape, rg) = (a.shape.clone(), a.requires_grad);
        drop(nodes);
        self.graph.push(shape, value, Op::Unary(kind, self.id), rg)
    }

    fn check_domain(&self, op: &'static str, ok: impl Fn(f64) -> bool, what: &str) -> Result<()> {
        let nodes = self.graph.nodes.borrow();
        match nodes[self.id].value.iter().find(|&&v| !ok(v)) {
            Some(v) => Err(GradError::Domain {
                op,
                detail: format!("{what}, got {v}"),
            }),
            None => Ok(()),
        }
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(UnaryKind::Affine { mul: c }, |v| v * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(UnaryKind::Affine { mul: 1.0 }, |v| v + c)
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(UnaryKind::Exp, f64::exp)
    }

    pub fn log(self) -> Result<Var<'g>> {
        self.check_domain("log", |v| v > 0.0, "argument must be positive")?;
        Ok(self.unary(UnaryKind::Log, f64::ln))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(UnaryKind::Tanh, f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(UnaryKind::Sigmoid, sigmoid)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'g> {
        self.unary(UnaryKind::Softplus, softplus)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(UnaryKind::Square, |v| v * v)
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(self) -> Result<Var<'g>> {
        self.check_domain("sqrt", |v| v >= 0.0, "argument must be nonnegative")?;
        Ok(self.unary(UnaryKind::Sqrt, f64::sqrt))
    }

    pub fn sum(self) -> Var<'g> {
        let s = self.graph.nodes.borrow()[self.id].value.iter().sum();
        let rg = self.requires_grad();
        self.graph.push(Vec::new(), vec![s], Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'g> {
        let nodes = self.graph.nodes.borrow();
        let v = &nodes[self.id].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = nodes[self.id].requires_grad;
        drop(nodes);
        self.graph.push(Vec::new(), vec![m], Op::Mean(self.id), rg)
    }

    /// Sums over the last axis, keeping it with extent 1.
    pub fn sum_last(self) -> Var<'g> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let w = a.width().max(1);
        let value: Vec<f64> = a.value.chunks(w).map(|c| c.iter().sum()).collect();
        let mut shape = a.shape.clone();
        match shape.last_mut() {
            Some(l) => *l = 1,
            None => shape.push(1),
        }
        let rg = a.requires_grad;
        drop(nodes);
        self.graph.push(shape, value, Op::SumLast(self.id), rg)
    }

    /// Matrix product of two 2-D operands.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let b = &nodes[other.id];
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            let out = &mut value[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a.value[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b.value[p * n..(p + 1) * n];
                for j in 0..n {
                    out[j] += aip * brow[j];
                }
            }
        }
        let rg = a.requires_grad || b.requires_grad;
        drop(nodes);
        Ok(self
            .graph
            .push(vec![m, n], value, Op::MatMul(self.id, other.id), rg))
    }

    /// Adds a vector to every row (last-axis bias).
    pub fn add_bias(self, bias: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&bias)?;
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let b = &nodes[bias.id];
        let w = a.width();
        if b.value.len() != w || b.shape.len() > 1 && b.shape.iter().filter(|&&d| d != 1).count() > 1 {
            return Err(GradError::ShapeMismatch {
                op: "add_bias",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let mut value = a.value.clone();
        for row in value.chunks_mut(w.max(1)) {
            row.iter_mut().zip(&b.value).for_each(|(x, y)| *x += y);
        }
        let (shape, rg) = (a.shape.clone(), a.requires_grad || b.requires_grad);
        drop(nodes);
        Ok(self
            .graph
            .push(shape, value, Op::AddBias(self.id, bias.id), rg))
    }

    /// Columns `range` of the last axis.
    pub fn slice_last(self, range: Range<usize>) -> Result<Var<'g>> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let w = a.width();
        if range.start > range.end || range.end > w || a.shape.is_empty() {
            return Err(GradError::ShapeMismatch {
                op: "slice",
                lhs: a.shape.clone(),
                rhs: vec![range.start, range.end],
            });
        }
        let rows = a.value.len() / w.max(1);
        let mut value = Vec::with_capacity(rows * range.len());
        for r in 0..rows {
            value.extend_from_slice(&a.value[r * w + range.start..r * w + range.end]);
        }
        let mut shape = a.shape.clone();
        *shape.last_mut().unwrap() = range.len();
        let rg = a.requires_grad;
        drop(nodes);
        Ok(self.graph.push(shape, value, Op::Slice(self.id, range), rg))
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        if a.shape.len() != 2 {
            return Err(GradError::ShapeMismatch {
                op: "transpose",
                lhs: a.shape.clone(),
                rhs: vec![],
            });
        }
        let (m, n) = (a.shape[0], a.shape[1]);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = a.value[i * n + j];
            }
        }
        let rg = a.requires_grad;
        drop(nodes);
        Ok(self.graph.push(vec![n, m], value, Op::Transpose(self.id), rg))
    }

    /// Selects rows (of a 2-D operand) by index; indices may repeat.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'g>> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        if a.shape.len() != 2 {
            return Err(GradError::ShapeMismatch {
                op: "gather_rows",
                lhs: a.shape.clone(),
                rhs: vec![idx.len()],
            });
        }
        let (rows, w) = (a.shape[0], a.shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(GradError::Domain {
                op: "gather_rows",
                detail: format!("row {bad} out of range for {rows} rows"),
            });
        }
        let mut value = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            value.extend_from_slice(&a.value[i * w..(i + 1) * w]);
        }
        let rg = a.requires_grad;
        drop(nodes);
        Ok(self.graph.push(
            vec![idx.len(), w],
            value,
            Op::GatherRows(self.id, idx.to_vec()),
            rg,
        ))
    }

    /// Euclidean norm of each last-axis row. The gradient at a zero row is
    /// taken as zero.
    pub fn row_norm(self) -> Var<'g> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let w = a.width().max(1);
        let value: Vec<f64> = a
            .value
            .chunks(w)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut shape = a.shape.clone();
        match shape.last_mut() {
            Some(l) => *l = 1,
            None => shape.push(1),
        }
        let rg = a.requires_grad;
        drop(nodes);
        self.graph.push(shape, value, Op::RowNorm(self.id), rg)
    }
}
