//! Training objectives: in-batch contrastive loss, temperature-scaled
//! distillation cross-entropy over off-diagonal logits, and their weighted
//! combination.
//!
//! Every loss exists in two routes that share the same kernels: a pure
//! scalar evaluation and a tape construction for gradients. The contrastive
//! softmax ranges over the full row including the positive; distillation
//! excludes the diagonal. Both index ranges are load-bearing and fixed.

use crate::encoder::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::numeric::{softmax_row, Graph, Matrix, NodeId};
use crate::Real;

/// Slack allowed on the cosine range check of logit entries.
const LOGIT_RANGE_TOL: Real = 1e-9;

/// Provenance of a logit matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitSource {
    Student,
    Teacher(usize),
    Averaged,
}

/// Square matrix of cosine similarities; entry (i, j) compares view-1 row i
/// with view-2 row j, so the diagonal holds the positive pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    values: Matrix,
    source: LogitSource,
}

impl LogitMatrix {
    /// Validates squareness and the cosine range [-1, 1] (within 1e-9).
    /// Any batch use downstream needs N >= 2; a 1x1 matrix is only legal for
    /// the degenerate contrastive case.
    pub fn new(values: Matrix, source: LogitSource) -> Result<Self> {
        if values.rows() != values.cols() {
            return Err(Error::Contract(format!(
                "logit matrix must be square, got {}x{}",
                values.rows(),
                values.cols()
            )));
        }
        for r in 0..values.rows() {
            for c in 0..values.cols() {
                let v = values.get(r, c);
                if !(-1.0 - LOGIT_RANGE_TOL..=1.0 + LOGIT_RANGE_TOL).contains(&v) {
                    return Err(Error::Contract(format!(
                        "logit ({r}, {c}) = {v} outside the cosine range [-1, 1]"
                    )));
                }
            }
        }
        Ok(LogitMatrix { values, source })
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn source(&self) -> LogitSource {
        self.source
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    /// Row i with entry (i, i) removed: the j != i slice distillation uses.
    pub fn off_diagonal_row(&self, i: usize) -> Vec<Real> {
        let mut out = Vec::with_capacity(self.n() - 1);
        for j in 0..self.n() {
            if j != i {
                out.push(self.values.get(i, j));
            }
        }
        out
    }
}

/// Hyperparameters shared by distillation-style runs.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// Contrastive temperature.
    pub tau: Real,
    /// Student softmax temperature in the distillation term.
    pub tau_s: Real,
    /// Teacher softmax temperature in the distillation term.
    pub tau_t: Real,
    /// Weight of the distillation term.
    pub lambda: Real,
    /// Group-size trade-off for cumulative-probability grouping.
    pub p: Real,
    pub batch_size: usize,
    /// Self-training rounds.
    pub rounds: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau: 0.05,
            tau_s: 0.02,
            tau_t: 0.01,
            lambda: 1.0,
            p: 0.1,
            batch_size: 64,
            rounds: 1,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau", self.tau),
            ("tau_s", self.tau_s),
            ("tau_t", self.tau_t),
        ] {
            if !(v > 0.0) {
                return Err(Error::parameter(
                    name,
                    format!("temperature must be > 0, got {v}"),
                ));
            }
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::parameter(
                "lambda",
                format!("must be >= 0, got {}", self.lambda),
            ));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::parameter(
                "p",
                format!("must be in (0, 1], got {}", self.p),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::parameter("batch_size", "must be >= 2"));
        }
        if self.rounds < 1 {
            return Err(Error::parameter("rounds", "must be >= 1"));
        }
        Ok(())
    }
}

/// Cosine logits of two normalized views: `view1 * view2^T`.
pub fn similarity_logits(
    view1: &EmbeddingBatch,
    view2: &EmbeddingBatch,
    source: LogitSource,
) -> Result<LogitMatrix> {
    if !view1.view.same_shape(&view2.view) {
        return Err(Error::Shape {
            op: "similarity_logits",
            left_rows: view1.view.rows(),
            left_cols: view1.view.cols(),
            right_rows: view2.view.rows(),
            right_cols: view2.view.cols(),
        });
    }
    let values = view1.view.matmul(&view2.view.transpose())?;
    LogitMatrix::new(values, source)
}

/// Mean over rows of -log softmax(row / tau) at the diagonal; the softmax
/// denominator spans the whole row, positives included.
pub fn contrastive_loss(logits: &LogitMatrix, tau: Real) -> Result<Real> {
    if !(tau > 0.0) {
        return Err(Error::parameter("tau", format!("must be > 0, got {tau}")));
    }
    let n = logits.n();
    let mut total = 0.0;
    for i in 0..n {
        let probs = softmax_row(logits.values.row(i), tau)?;
        total += -probs[i].ln();
    }
    Ok(total / n as Real)
}

/// Teacher target rows: softmax at `tau_t` over each off-diagonal row.
/// Returns an N x (N-1) matrix aligned with the drop-diagonal layout.
pub fn teacher_weights(teacher: &LogitMatrix, tau_t: Real) -> Result<Matrix> {
    if teacher.n() < 2 {
        return Err(Error::Contract("distillation needs N >= 2".into()));
    }
    let n = teacher.n();
    let mut q = Matrix::zeros(n, n - 1);
    for i in 0..n {
        let row = softmax_row(&teacher.off_diagonal_row(i), tau_t)?;
        q.row_mut(i).copy_from_slice(&row);
    }
    Ok(q)
}

/// Mean over rows of the cross-entropy between teacher and student
/// off-diagonal softmax distributions.
pub fn distill_loss(
    student: &LogitMatrix,
    teacher: &LogitMatrix,
    tau_s: Real,
    tau_t: Real,
) -> Result<Real> {
    if student.n() != teacher.n() {
        return Err(Error::Shape {
            op: "distill_loss",
            left_rows: student.n(),
            left_cols: student.n(),
            right_rows: teacher.n(),
            right_cols: teacher.n(),
        });
    }
    if student.n() < 2 {
        return Err(Error::Contract("distillation needs N >= 2".into()));
    }
    let n = student.n();
    let q = teacher_weights(teacher, tau_t)?;
    let mut total = 0.0;
    for i in 0..n {
        let p = softmax_row(&student.off_diagonal_row(i), tau_s)?;
        let mut row_loss = 0.0;
        for (j, pj) in p.iter().enumerate() {
            row_loss += -q.get(i, j) * pj.ln();
        }
        total += row_loss;
    }
    Ok(total / n as Real)
}

/// `cl + lambda * distill`.
pub fn combined_loss(cl: Real, distill: Real, lambda: Real) -> Result<Real> {
    if !cl.is_finite() || !distill.is_finite() {
        return Err(Error::NonFinite(format!(
            "combined loss inputs: cl = {cl}, distill = {distill}"
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::parameter(
            "lambda",
            format!("must be >= 0, got {lambda}"),
        ));
    }
    Ok(cl + lambda * distill)
}

/// Graph node for the cosine logits of two normalized embedding nodes.
pub fn similarity_node(graph: &mut Graph, view1: NodeId, view2: NodeId) -> Result<NodeId> {
    let v2t = graph.transpose(view2)?;
    graph.matmul(view1, v2t)
}

/// Graph construction of [`contrastive_loss`] over an N x N logits node.
pub fn contrastive_loss_node(graph: &mut Graph, logits: NodeId, tau: Real) -> Result<NodeId> {
    let n = graph.value(logits).rows();
    if graph.value(logits).cols() != n {
        return Err(Error::Contract("contrastive logits must be square".into()));
    }
    let probs = graph.softmax_rows(logits, tau)?;
    let logp = graph.log(probs)?;
    let picker = Matrix::identity(n).scale(-1.0 / n as Real);
    let mask = graph.constant(picker);
    let picked = graph.mul(logp, mask)?;
    graph.sum(picked)
}

/// Graph construction of [`distill_loss`] against fixed teacher targets
/// (an N x (N-1) matrix from [`teacher_weights`], already reflecting any
/// logit shuffling or averaging).
pub fn distill_loss_node(
    graph: &mut Graph,
    student_logits: NodeId,
    teacher_q: &Matrix,
    tau_s: Real,
) -> Result<NodeId> {
    let n = graph.value(student_logits).rows();
    if teacher_q.rows() != n || teacher_q.cols() != n - 1 {
        return Err(Error::Contract(format!(
            "teacher targets must be {n}x{}, got {}x{}",
            n - 1,
            teacher_q.rows(),
            teacher_q.cols()
        )));
    }
    let off = graph.drop_diagonal(student_logits)?;
    let probs = graph.softmax_rows(off, tau_s)?;
    let logp = graph.log(probs)?;
    let weights = graph.constant(teacher_q.scale(-1.0 / n as Real));
    let weighted = graph.mul(logp, weights)?;
    graph.sum(weighted)
}
