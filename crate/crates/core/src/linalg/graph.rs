//! Define-by-run computation tape with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so every parent id is smaller
//! than its child's id and a single reverse sweep visits each node once.
//! Leaves may be rebound between evaluations; rebinding drops every cached
//! intermediate value.

use std::fmt;

use thiserror::Error;

use super::tensor::{Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Identifies the node created by [`DiffGraph::stop_grad`] and the node it wraps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopGradientMark {
    pub node: NodeId,
    pub wrapped: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    AddBias,
    Scale,
    AddScalar,
    Relu,
    Exp,
    Log,
    Abs,
    Softmax,
    L2Normalize,
    Sum,
    Mean,
    SumRows,
    ConcatRows,
    StopGrad,
    PairwiseL1,
    MaskedLogSumExp,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("leaf {node} has no bound value")]
    UnboundLeaf { node: NodeId },
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { node: NodeId, op: OpKind },
    #[error("backward root {node} is not scalar (shape {shape:?})")]
    NotScalar { node: NodeId, shape: Vec<usize> },
    #[error("node {node} is not a leaf")]
    NotALeaf { node: NodeId },
    #[error("node {node} does not exist")]
    UnknownNode { node: NodeId },
    #[error("zero-norm row {row} at L2 normalization node {node}")]
    ZeroNorm { node: NodeId, row: usize },
    #[error("shape error at node {node}: {source}")]
    Shape {
        node: NodeId,
        #[source]
        source: TensorError,
    },
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId, T),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Abs(NodeId),
    Softmax { input: NodeId, block: usize },
    L2Normalize(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    ConcatRows(NodeId, NodeId),
    StopGrad(NodeId),
    PairwiseL1(NodeId, NodeId),
    MaskedLogSumExp { input: NodeId, mask: Vec<bool> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Relu(..) => OpKind::Relu,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Abs(..) => OpKind::Abs,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::L2Normalize(..) => OpKind::L2Normalize,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumRows(..) => OpKind::SumRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::StopGrad(..) => OpKind::StopGrad,
            Op::PairwiseL1(..) => OpKind::PairwiseL1,
            Op::MaskedLogSumExp { .. } => OpKind::MaskedLogSumExp,
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::ConcatRows(a, b)
            | Op::PairwiseL1(a, b) => vec![a, b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Abs(a)
            | Op::L2Normalize(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::StopGrad(a) => vec![a],
            Op::Softmax { input, .. } | Op::MaskedLogSumExp { input, .. } => vec![input],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
}

/// Append-only computation tape.
#[derive(Debug, Clone, Default)]
pub struct DiffGraph<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`DiffGraph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    adjoints: Vec<Option<Tensor<T>>>,
    shapes: Vec<Option<Vec<usize>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Adjoint of `id`; nodes the root does not depend on get a zero tensor.
    pub fn get(&self, id: NodeId) -> Tensor<T> {
        match self.adjoints.get(id.0) {
            Some(Some(t)) => t.clone(),
            _ => {
                let shape = self
                    .shapes
                    .get(id.0)
                    .cloned()
                    .flatten()
                    .unwrap_or_default();
                Tensor::zeros(&shape)
            }
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor<T> {
        match self.adjoints.get_mut(id.0).and_then(Option::take) {
            Some(t) => t,
            None => self.get(id),
        }
    }
}

fn sign<T: Scalar>(x: T) -> T {
    // d|x|/dx at 0 is taken as 0.
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl<T: Scalar> DiffGraph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>) -> NodeId {
        for p in op.parents() {
            assert!(p.0 < self.nodes.len(), "parent {p} not yet recorded");
        }
        self.nodes.push(Node { op, value: None });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf with a bound value.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        let id = self.push(Op::Leaf);
        self.nodes[id.0].value = Some(value);
        id
    }

    /// Leaf that must be bound before evaluation.
    pub fn placeholder(&mut self) -> NodeId {
        self.push(Op::Leaf)
    }

    pub fn bind(&mut self, id: NodeId, value: Tensor<T>) -> Result<(), DiffError> {
        let node = self.nodes.get(id.0).ok_or(DiffError::UnknownNode { node: id })?;
        if !matches!(node.op, Op::Leaf) {
            return Err(DiffError::NotALeaf { node: id });
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.value = None;
            }
        }
        self.nodes[id.0].value = Some(value);
        Ok(())
    }

    /// Cached value, if the node is a bound leaf or has been evaluated.
    pub fn value(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes.get(id.0).and_then(|n| n.value.as_ref())
    }

    pub fn op_kind(&self, id: NodeId) -> Option<OpKind> {
        self.nodes.get(id.0).map(|n| n.op.kind())
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes.get(id.0).map(|n| n.op.parents()).unwrap_or_default()
    }

    pub fn stop_gradient_mark(&self, id: NodeId) -> Option<StopGradientMark> {
        match self.nodes.get(id.0)?.op {
            Op::StopGrad(wrapped) => Some(StopGradientMark { node: id, wrapped }),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    /// Adds a length-`C` bias to every row of an `R × C` matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias(a, bias))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        self.push(Op::AddScalar(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Abs(a))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax {
            input: a,
            block: 0,
        })
    }

    /// Softmax applied independently to each contiguous block of `block`
    /// entries within a row.
    pub fn block_softmax(&mut self, a: NodeId, block: usize) -> NodeId {
        self.push(Op::Softmax { input: a, block })
    }

    /// Divides every row by its L2 norm.
    pub fn l2_normalize(&mut self, a: NodeId) -> NodeId {
        self.push(Op::L2Normalize(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    /// Sums each row, producing a length-`R` vector.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumRows(a))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::ConcatRows(a, b))
    }

    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        self.push(Op::StopGrad(a))
    }

    /// `out[i][k] = Σⱼ |x[i][j] − y[k][j]|`.
    pub fn pairwise_l1(&mut self, x: NodeId, y: NodeId) -> NodeId {
        self.push(Op::PairwiseL1(x, y))
    }

    /// Row-wise log-sum-exp restricted to entries where `mask` is true.
    /// `mask` is row-major with the same element count as the input.
    pub fn masked_logsumexp(&mut self, a: NodeId, mask: Vec<bool>) -> NodeId {
        self.push(Op::MaskedLogSumExp { input: a, mask })
    }

    fn needed(&self, root: NodeId) -> Vec<bool> {
        let mut needed = vec![false; root.0 + 1];
        needed[root.0] = true;
        for i in (0..=root.0).rev() {
            if needed[i] {
                for p in self.nodes[i].op.parents() {
                    needed[p.0] = true;
                }
            }
        }
        needed
    }

    /// Evaluates `root`, reusing cached intermediates.
    pub fn forward(&mut self, root: NodeId) -> Result<&Tensor<T>, DiffError> {
        if root.0 >= self.nodes.len() {
            return Err(DiffError::UnknownNode { node: root });
        }
        let needed = self.needed(root);
        for i in 0..=root.0 {
            if !needed[i] || self.nodes[i].value.is_some() {
                continue;
            }
            let id = NodeId(i);
            if matches!(self.nodes[i].op, Op::Leaf) {
                return Err(DiffError::UnboundLeaf { node: id });
            }
            let v = self.eval(id)?;
            if !v.is_finite() {
                return Err(DiffError::NonFinite {
                    node: id,
                    op: self.nodes[i].op.kind(),
                });
            }
            self.nodes[i].value = Some(v);
        }
        Ok(self.nodes[root.0].value.as_ref().expect("evaluated"))
    }

    fn val(&self, id: NodeId) -> &Tensor<T> {
        self.nodes[id.0].value.as_ref().expect("parent evaluated")
    }

    fn eval(&self, id: NodeId) -> Result<Tensor<T>, DiffError> {
        let shape_err = |source| DiffError::Shape { node: id, source };
        let out = match &self.nodes[id.0].op {
            Op::Leaf => unreachable!("leaves are bound, not evaluated"),
            Op::MatMul(a, b) => self.val(*a).matmul(self.val(*b)).map_err(shape_err)?,
            Op::Transpose(a) => self.val(*a).transpose(),
            Op::Add(a, b) => self.val(*a).add(self.val(*b)).map_err(shape_err)?,
            Op::Sub(a, b) => self.val(*a).sub(self.val(*b)).map_err(shape_err)?,
            Op::Mul(a, b) => self
                .val(*a)
                .zip_map(self.val(*b), "mul", |x, y| x * y)
                .map_err(shape_err)?,
            Op::AddBias(a, b) => {
                let (x, bias) = (self.val(*a), self.val(*b));
                if bias.len() != x.cols() {
                    return Err(shape_err(TensorError::ShapeMismatch {
                        op: "add_bias",
                        lhs: x.shape().to_vec(),
                        rhs: bias.shape().to_vec(),
                    }));
                }
                let mut out = x.clone();
                for r in 0..out.rows() {
                    for (o, &b) in out.row_mut(r).iter_mut().zip(bias.data()) {
                        *o += b;
                    }
                }
                out
            }
            Op::Scale(a, c) => self.val(*a).scale(*c),
            Op::AddScalar(a, c) => self.val(*a).map(|v| v + *c),
            Op::Relu(a) => self.val(*a).map(|v| v.max(T::zero())),
            Op::Exp(a) => self.val(*a).map(T::exp),
            Op::Log(a) => self.val(*a).map(T::ln),
            Op::Abs(a) => self.val(*a).map(T::abs),
            Op::Softmax { input, block } => {
                let x = self.val(*input);
                let block = if *block == 0 { x.cols() } else { *block };
                if block == 0 || x.cols() % block != 0 {
                    return Err(shape_err(TensorError::ShapeMismatch {
                        op: "block_softmax",
                        lhs: x.shape().to_vec(),
                        rhs: vec![block],
                    }));
                }
                let mut out = x.clone();
                for chunk in out.data_mut().chunks_mut(block) {
                    softmax_in_place(chunk);
                }
                out
            }
            Op::L2Normalize(a) => {
                let mut out = self.val(*a).clone();
                for r in 0..out.rows() {
                    let row = out.row_mut(r);
                    let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if norm == T::zero() {
                        return Err(DiffError::ZeroNorm { node: id, row: r });
                    }
                    row.iter_mut().for_each(|v| *v = *v / norm);
                }
                out
            }
            Op::Sum(a) => Tensor::scalar(self.val(*a).sum()),
            Op::Mean(a) => {
                let x = self.val(*a);
                Tensor::scalar(x.sum() / T::from_usize_lossy(x.len().max(1)))
            }
            Op::SumRows(a) => {
                let x = self.val(*a);
                Tensor::vector((0..x.rows()).map(|r| x.row(r).iter().copied().sum()).collect())
            }
            Op::ConcatRows(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                if x.cols() != y.cols() {
                    return Err(shape_err(TensorError::ShapeMismatch {
                        op: "concat_rows",
                        lhs: x.shape().to_vec(),
                        rhs: y.shape().to_vec(),
                    }));
                }
                let mut data = x.data().to_vec();
                data.extend_from_slice(y.data());
                Tensor::matrix(x.rows() + y.rows(), x.cols(), data).map_err(shape_err)?
            }
            Op::StopGrad(a) => self.val(*a).clone(),
            Op::PairwiseL1(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                if x.cols() != y.cols() {
                    return Err(shape_err(TensorError::ShapeMismatch {
                        op: "pairwise_l1",
                        lhs: x.shape().to_vec(),
                        rhs: y.shape().to_vec(),
                    }));
                }
                let (n, m) = (x.rows(), y.rows());
                let mut data = Vec::with_capacity(n * m);
                for i in 0..n {
                    let xi = x.row(i);
                    for k in 0..m {
                        data.push(
                            xi.iter()
                                .zip(y.row(k))
                                .map(|(&p, &q)| (p - q).abs())
                                .sum(),
                        );
                    }
                }
                Tensor::matrix(n, m, data).map_err(shape_err)?
            }
            Op::MaskedLogSumExp { input, mask } => {
                let x = self.val(*input);
                if mask.len() != x.len() {
                    return Err(shape_err(TensorError::ShapeMismatch {
                        op: "masked_logsumexp",
                        lhs: x.shape().to_vec(),
                        rhs: vec![mask.len()],
                    }));
                }
                let c = x.cols();
                let out = (0..x.rows())
                    .map(|r| {
                        let m = &mask[r * c..(r + 1) * c];
                        let row = x.row(r);
                        let max = row
                            .iter()
                            .zip(m)
                            .filter(|(_, &keep)| keep)
                            .fold(T::neg_infinity(), |acc, (&v, _)| acc.max(v));
                        if max == T::neg_infinity() {
                            return max;
                        }
                        let s: T = row
                            .iter()
                            .zip(m)
                            .filter(|(_, &keep)| keep)
                            .map(|(&v, _)| (v - max).exp())
                            .sum();
                        max + s.ln()
                    })
                    .collect();
                Tensor::vector(out)
            }
        };
        Ok(out)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients<T>, DiffError> {
        let root_shape = self.forward(root)?.shape().to_vec();
        if !self.val(root).is_scalar() {
            return Err(DiffError::NotScalar {
                node: root,
                shape: root_shape,
            });
        }
        let needed = self.needed(root);
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Tensor::full(&root_shape, T::one()));

        for i in (0..=root.0).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = adj[i].take() else {
                continue;
            };
            self.propagate(NodeId(i), &g, &mut adj)?;
            adj[i] = Some(g);
        }

        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.as_ref().map(|v| v.shape().to_vec()))
            .collect();
        Ok(Gradients {
            adjoints: adj,
            shapes,
        })
    }

    fn accumulate(
        &self,
        adj: &mut [Option<Tensor<T>>],
        id: NodeId,
        contrib: Tensor<T>,
    ) -> Result<(), DiffError> {
        let shape = self.val(id).shape().to_vec();
        let contrib = contrib
            .reshape(shape)
            .map_err(|source| DiffError::Shape { node: id, source })?;
        match &mut adj[id.0] {
            Some(existing) => existing
                .axpy(T::one(), &contrib)
                .map_err(|source| DiffError::Shape { node: id, source })?,
            slot @ None => *slot = Some(contrib),
        }
        Ok(())
    }

    fn propagate(
        &self,
        id: NodeId,
        g: &Tensor<T>,
        adj: &mut [Option<Tensor<T>>],
    ) -> Result<(), DiffError> {
        let shape_err = |source| DiffError::Shape { node: id, source };
        match &self.nodes[id.0].op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::MatMul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let gx = g.matmul(&y.transpose()).map_err(shape_err)?;
                let gy = x.transpose().matmul(g).map_err(shape_err)?;
                self.accumulate(adj, *a, gx)?;
                self.accumulate(adj, *b, gy)?;
            }
            Op::Transpose(a) => self.accumulate(adj, *a, g.transpose())?,
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone())?;
                self.accumulate(adj, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone())?;
                self.accumulate(adj, *b, g.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let gx = g.zip_map(y, "mul", |p, q| p * q).map_err(shape_err)?;
                let gy = g.zip_map(x, "mul", |p, q| p * q).map_err(shape_err)?;
                self.accumulate(adj, *a, gx)?;
                self.accumulate(adj, *b, gy)?;
            }
            Op::AddBias(a, b) => {
                let mut gb = vec![T::zero(); g.cols()];
                for r in 0..g.rows() {
                    for (acc, &v) in gb.iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                self.accumulate(adj, *a, g.clone())?;
                self.accumulate(adj, *b, Tensor::vector(gb))?;
            }
            Op::Scale(a, c) => self.accumulate(adj, *a, g.scale(*c))?,
            Op::AddScalar(a, _) => self.accumulate(adj, *a, g.clone())?,
            Op::Relu(a) => {
                let gx = g
                    .zip_map(self.val(*a), "relu", |p, x| if x > T::zero() { p } else { T::zero() })
                    .map_err(shape_err)?;
                self.accumulate(adj, *a, gx)?;
            }
            Op::Exp(a) => {
                let gx = g
                    .zip_map(self.val(id), "exp", |p, y| p * y)
                    .map_err(shape_err)?;
                self.accumulate(adj, *a, gx)?;
            }
            Op::Log(a) => {
                let gx = g
                    .zip_map(self.val(*a), "log", |p, x| p / x)
                    .map_err(shape_err)?;
                self.accumulate(adj, *a, gx)?;
            }
            Op::Abs(a) => {
                let gx = g
                    .zip_map(self.val(*a), "abs", |p, x| p * sign(x))
                    .map_err(shape_err)?;
                self.accumulate(adj, *a, gx)?;
            }
            Op::Softmax { input, block } => {
                let y = self.val(id);
                let block = if *block == 0 { y.cols() } else { *block };
                let mut gx = g.clone();
                for (gc, yc) in gx.data_mut().chunks_mut(block).zip(y.data().chunks(block)) {
                    let dot: T = gc.iter().zip(yc).map(|(&p, &q)| p * q).sum();
                    for (p, &q) in gc.iter_mut().zip(yc) {
                        *p = q * (*p - dot);
                    }
                }
                self.accumulate(adj, *input, gx)?;
            }
            Op::L2Normalize(a) => {
                let x = self.val(*a);
                let y = self.val(id);
                let mut gx = g.clone();
                for r in 0..x.rows() {
                    let norm = x.row(r).iter().map(|&v| v * v).sum::<T>().sqrt();
                    let yr = y.row(r);
                    let dot: T = g.row(r).iter().zip(yr).map(|(&p, &q)| p * q).sum();
                    for (p, &q) in gx.row_mut(r).iter_mut().zip(yr) {
                        *p = (*p - q * dot) / norm;
                    }
                }
                self.accumulate(adj, *a, gx)?;
            }
            Op::Sum(a) => {
                let x = self.val(*a);
                let s = g.data()[0];
                self.accumulate(adj, *a, Tensor::full(x.shape(), s))?;
            }
            Op::Mean(a) => {
                let x = self.val(*a);
                let s = g.data()[0] / T::from_usize_lossy(x.len().max(1));
                self.accumulate(adj, *a, Tensor::full(x.shape(), s))?;
            }
            Op::SumRows(a) => {
                let x = self.val(*a);
                let mut gx = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    let v = g.data()[r];
                    gx.row_mut(r).iter_mut().for_each(|p| *p = v);
                }
                self.accumulate(adj, *a, gx)?;
            }
            Op::ConcatRows(a, b) => {
                let split = self.val(*a).len();
                let (ga, gb) = g.data().split_at(split);
                self.accumulate(adj, *a, Tensor::vector(ga.to_vec()))?;
                self.accumulate(adj, *b, Tensor::vector(gb.to_vec()))?;
            }
            Op::PairwiseL1(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let (n, m, d) = (x.rows(), y.rows(), x.cols());
                let mut gx = vec![T::zero(); n * d];
                let mut gy = vec![T::zero(); m * d];
                for i in 0..n {
                    let xi = x.row(i);
                    for k in 0..m {
                        let w = g.data()[i * m + k];
                        if w == T::zero() {
                            continue;
                        }
                        let yk = y.row(k);
                        for j in 0..d {
                            let s = w * sign(xi[j] - yk[j]);
                            gx[i * d + j] += s;
                            gy[k * d + j] -= s;
                        }
                    }
                }
                self.accumulate(adj, *a, Tensor::vector(gx))?;
                self.accumulate(adj, *b, Tensor::vector(gy))?;
            }
            Op::MaskedLogSumExp { input, mask } => {
                let x = self.val(*input);
                let out = self.val(id);
                let c = x.cols();
                let mut gx = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    let lse = out.data()[r];
                    let gr = g.data()[r];
                    let m = &mask[r * c..(r + 1) * c];
                    for ((p, &v), &keep) in gx.row_mut(r).iter_mut().zip(x.row(r)).zip(m) {
                        if keep {
                            *p = gr * (v - lse).exp();
                        }
                    }
                }
                self.accumulate(adj, *input, gx)?;
            }
        }
        Ok(())
    }

    /// Compares the analytic gradient of scalar `root` with respect to
    /// `leaf` against central differences with step `h`.
    ///
    /// Returns `maxᵢ |analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
    pub fn grad_check(&mut self, root: NodeId, leaf: NodeId, h: T) -> Result<T, DiffError> {
        let analytic = self.backward(root)?.get(leaf);
        let original = self
            .value(leaf)
            .cloned()
            .ok_or(DiffError::UnboundLeaf { node: leaf })?;
        let two_h = h + h;
        let floor = T::lit(1e-12);
        let mut worst = T::zero();
        for i in 0..original.len() {
            let mut plus = original.clone();
            plus.data_mut()[i] += h;
            self.bind(leaf, plus)?;
            let f_plus = self.forward(root)?.data()[0];
            let mut minus = original.clone();
            minus.data_mut()[i] -= h;
            self.bind(leaf, minus)?;
            let f_minus = self.forward(root)?.data()[0];
            let numeric = (f_plus - f_minus) / two_h;
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + floor);
            worst = worst.max(err);
        }
        self.bind(leaf, original)?;
        Ok(worst)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let max = xs.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in xs.iter_mut() {
        *v = *v / total;
    }
}
