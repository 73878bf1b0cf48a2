//! Append-only tape for reverse-mode differentiation.
//!
//! Nodes are evaluated eagerly on insertion, reusing the same matrix kernels
//! as the pure forward paths, so graph and non-graph routes agree bitwise.
//! The op set is exactly what the encoder and the loss heads need; anything
//! else composes out of these.

use std::collections::BTreeMap;

use super::matrix::{softmax_row, Matrix};
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::Real;

/// Handle into a [`Graph`]; only valid for the graph that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F: Scalar> {
    /// Leaf; `grad` decides whether backward reports a gradient for it.
    Leaf {
        grad: bool,
    },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// Element-wise sum; rhs may be a single row broadcast over lhs rows.
    Add(NodeId, NodeId),
    /// Element-wise product of same-shape operands.
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    Tanh(NodeId),
    /// Row-wise projection onto the unit sphere.
    RowNormalize(NodeId),
    /// Row-wise temperature softmax.
    SoftmaxRow(NodeId, F),
    Log(NodeId),
    /// Scalar (1x1) sum of all entries.
    Sum(NodeId),
    /// Removes entry (i, i) from every row of a square matrix: NxN -> Nx(N-1).
    DropDiagonal(NodeId),
}

impl<F: Scalar> Op<F> {
    fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf { .. } => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::RowNormalize(a)
            | Op::SoftmaxRow(a, _)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::DropDiagonal(a) => vec![a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<F: Scalar> {
    op: Op<F>,
    value: Matrix<F>,
    /// True when this node is, or depends on, a gradient leaf.
    requires_grad: bool,
}

/// Reverse-mode tape. Build the expression with the typed constructors, then
/// call [`Graph::backward`] on a scalar root.
#[derive(Debug, Default)]
pub struct Graph<F: Scalar = Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that participates in differentiation.
    pub fn input(&mut self, value: Matrix<F>) -> NodeId {
        self.push(Op::Leaf { grad: true }, value, true)
    }

    /// Leaf treated as fixed data (pooling matrices, dropout masks, labels).
    pub fn constant(&mut self, value: Matrix<F>) -> NodeId {
        self.push(Op::Leaf { grad: false }, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix<F> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<F>, value: Matrix<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check_id(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "node id {} out of range for graph of {} nodes",
                id.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    fn unary(&mut self, parent: NodeId, value: Matrix<F>, op: Op<F>) -> Result<NodeId> {
        self.check_id(parent)?;
        let requires = self.nodes[parent.0].requires_grad;
        Ok(self.push(op, value, requires))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.check_id(b)?;
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let requires = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Op::MatMul(a, b), value, requires))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        let value = self.nodes[a.0].value.transpose();
        self.unary(a, value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.check_id(b)?;
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        let requires = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Op::Add(a, b), value, requires))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.check_id(b)?;
        let value = self.nodes[a.0].value.hadamard(&self.nodes[b.0].value)?;
        let requires = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Op::Mul(a, b), value, requires))
    }

    pub fn scale(&mut self, a: NodeId, factor: F) -> Result<NodeId> {
        self.check_id(a)?;
        if !factor.is_finite() {
            return Err(Error::NonFinite("scale factor".into()));
        }
        let value = self.nodes[a.0].value.scale(factor);
        self.unary(a, value, Op::Scale(a, factor))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        let value = self.nodes[a.0].value.map(|v| v.tanh());
        self.unary(a, value, Op::Tanh(a))
    }

    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        let value = self.nodes[a.0].value.l2_normalize_rows()?;
        self.unary(a, value, Op::RowNormalize(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId, temperature: F) -> Result<NodeId> {
        self.check_id(a)?;
        let value = self.nodes[a.0].value.softmax_rows(temperature)?;
        self.unary(a, value, Op::SoftmaxRow(a, temperature))
    }

    /// Natural log; the domain (strictly positive entries) is enforced by the
    /// finiteness check on the result.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        let value = self.nodes[a.0].value.map(|v| v.ln());
        value.check_finite("log")?;
        self.unary(a, value, Op::Log(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        let total = self.nodes[a.0].value.sum();
        let value = Matrix::new(1, 1, vec![total])?;
        self.unary(a, value, Op::Sum(a))
    }

    pub fn drop_diagonal(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        let src = &self.nodes[a.0].value;
        let n = src.rows();
        if src.cols() != n || n < 2 {
            return Err(Error::Contract(format!(
                "drop_diagonal needs a square matrix with n >= 2, got {}x{}",
                src.rows(),
                src.cols()
            )));
        }
        let mut out = Matrix::zeros(n, n - 1);
        for i in 0..n {
            for j in 0..n {
                match j.cmp(&i) {
                    std::cmp::Ordering::Less => out.set(i, j, src.get(i, j)),
                    std::cmp::Ordering::Greater => out.set(i, j - 1, src.get(i, j)),
                    std::cmp::Ordering::Equal => {}
                }
            }
        }
        self.unary(a, out, Op::DropDiagonal(a))
    }

    /// Gradients of a scalar root with respect to every reachable gradient
    /// leaf, keyed by leaf id.
    pub fn backward(&self, root: NodeId) -> Result<BTreeMap<NodeId, Matrix<F>>> {
        self.check_id(root)?;
        let root_value = &self.nodes[root.0].value;
        if root_value.rows() != 1 || root_value.cols() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be 1x1, got {}x{}",
                root_value.rows(),
                root_value.cols()
            )));
        }
        // The public constructors only ever reference earlier nodes; a parent
        // at or after its child means the tape was corrupted.
        for (i, node) in self.nodes.iter().enumerate() {
            for p in node.op.parents() {
                if p.0 >= i {
                    return Err(Error::Contract(format!(
                        "tape is not topologically ordered: node {i} references node {}",
                        p.0
                    )));
                }
            }
        }

        let mut reachable = vec![false; self.nodes.len()];
        let mut stack = vec![root.0];
        while let Some(i) = stack.pop() {
            if reachable[i] {
                continue;
            }
            reachable[i] = true;
            for p in self.nodes[i].op.parents() {
                stack.push(p.0);
            }
        }

        let mut adjoints: Vec<Option<Matrix<F>>> = vec![None; self.nodes.len()];
        adjoints[root.0] = Some(Matrix::filled(1, 1, F::one()));

        for i in (0..=root.0).rev() {
            if !reachable[i] || !self.nodes[i].requires_grad {
                continue;
            }
            let adj = match adjoints[i].take() {
                Some(adj) => adj,
                None => continue,
            };
            self.accumulate_parents(i, &adj, &mut adjoints)?;
            adjoints[i] = Some(adj);
        }

        let mut grads = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { grad: true } = node.op {
                if reachable[i] {
                    let adj = adjoints[i]
                        .take()
                        .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()));
                    grads.insert(NodeId(i), adj);
                }
            }
        }
        Ok(grads)
    }

    fn add_into(
        slot: &mut Option<Matrix<F>>,
        rows: usize,
        cols: usize,
        contribution: Matrix<F>,
    ) -> Result<()> {
        match slot {
            Some(existing) => *existing = existing.add(&contribution)?,
            None => {
                debug_assert!(contribution.rows() == rows && contribution.cols() == cols);
                *slot = Some(contribution);
            }
        }
        Ok(())
    }

    fn accumulate_parents(
        &self,
        i: usize,
        adj: &Matrix<F>,
        adjoints: &mut [Option<Matrix<F>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let send = |target: NodeId,
                    contribution: Matrix<F>,
                    adjoints: &mut [Option<Matrix<F>>]|
         -> Result<()> {
            if !self.nodes[target.0].requires_grad {
                return Ok(());
            }
            let shape = (
                self.nodes[target.0].value.rows(),
                self.nodes[target.0].value.cols(),
            );
            Self::add_into(&mut adjoints[target.0], shape.0, shape.1, contribution)
        };

        match node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                send(a, adj.matmul(&bv.transpose())?, adjoints)?;
                send(b, av.transpose().matmul(adj)?, adjoints)?;
            }
            Op::Transpose(a) => {
                send(a, adj.transpose(), adjoints)?;
            }
            Op::Add(a, b) => {
                send(a, adj.clone(), adjoints)?;
                let bv = &self.nodes[b.0].value;
                if bv.same_shape(&self.nodes[a.0].value) {
                    send(b, adj.clone(), adjoints)?;
                } else {
                    // rhs was a broadcast row: fold the adjoint over rows.
                    let mut folded = Matrix::zeros(1, adj.cols());
                    for r in 0..adj.rows() {
                        for c in 0..adj.cols() {
                            folded.set(0, c, folded.get(0, c) + adj.get(r, c));
                        }
                    }
                    send(b, folded, adjoints)?;
                }
            }
            Op::Mul(a, b) => {
                send(a, adj.hadamard(&self.nodes[b.0].value)?, adjoints)?;
                send(b, adj.hadamard(&self.nodes[a.0].value)?, adjoints)?;
            }
            Op::Scale(a, factor) => {
                send(a, adj.scale(factor), adjoints)?;
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let one = F::one();
                let d = adj.hadamard(&y.map(|v| one - v * v))?;
                send(a, d, adjoints)?;
            }
            Op::RowNormalize(a) => {
                let x = &self.nodes[a.0].value;
                let y = &node.value;
                let norms = x.row_norms();
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for (r, &norm) in norms.iter().enumerate() {
                    let mut dot = F::zero();
                    for c in 0..x.cols() {
                        dot = dot + adj.get(r, c) * y.get(r, c);
                    }
                    let inv = F::one() / norm;
                    for c in 0..x.cols() {
                        d.set(r, c, (adj.get(r, c) - dot * y.get(r, c)) * inv);
                    }
                }
                send(a, d, adjoints)?;
            }
            Op::SoftmaxRow(a, temperature) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let mut dot = F::zero();
                    for c in 0..y.cols() {
                        dot = dot + adj.get(r, c) * y.get(r, c);
                    }
                    for c in 0..y.cols() {
                        d.set(r, c, y.get(r, c) * (adj.get(r, c) - dot) / temperature);
                    }
                }
                send(a, d, adjoints)?;
            }
            Op::Log(a) => {
                let x = &self.nodes[a.0].value;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for c in 0..x.cols() {
                        d.set(r, c, adj.get(r, c) / x.get(r, c));
                    }
                }
                send(a, d, adjoints)?;
            }
            Op::Sum(a) => {
                let x = &self.nodes[a.0].value;
                let g = adj.get(0, 0);
                send(a, Matrix::filled(x.rows(), x.cols(), g), adjoints)?;
            }
            Op::DropDiagonal(a) => {
                let n = self.nodes[a.0].value.rows();
                let mut d = Matrix::zeros(n, n);
                for r in 0..n {
                    for c in 0..n - 1 {
                        let src_col = if c < r { c } else { c + 1 };
                        d.set(r, src_col, adj.get(r, c));
                    }
                }
                send(a, d, adjoints)?;
            }
        }
        Ok(())
    }

    /// Test-only corruption hook: rewires node `child` to claim `parent`.
    #[cfg(test)]
    fn corrupt_edge(&mut self, child: usize, parent: usize) {
        self.nodes[child].op = Op::Transpose(NodeId(parent));
    }
}

/// Convenience: softmax of an off-diagonal row layout, used by loss code that
/// stays outside the graph.
pub fn softmax_off_diagonal<F: Scalar>(row: &[F], temperature: F) -> Result<Vec<F>> {
    softmax_row(row, temperature)
}
