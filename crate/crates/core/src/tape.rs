//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive application in execution order, which
//! is already a topological order, so the backward pass is a single reverse
//! sweep. The primitive set is exactly what the attention layers and the
//! cross-entropy training loss need: matmul, transpose, add, leaky-relu,
//! row gather, weighted scatter-sum, segment softmax, a per-row mask select,
//! and masked softmax cross-entropy.
//!
//! Gradients are exact reverse-mode derivatives of the recorded float
//! computation; [`finite_difference_grad`] provides the independent
//! central-difference oracle used to verify them.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;
use crate::tensor::{matmul_into, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TapeError {
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    LengthMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    /// A segment with no entries: a node with no neighbors and no self-loop.
    EmptySegment {
        segment: usize,
    },
    NonScalarLoss {
        shape: (usize, usize),
    },
    EmptyMask,
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
}

impl fmt::Display for TapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapeError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            TapeError::IndexOutOfRange { op, index, bound } => {
                write!(f, "{op}: index {index} out of range (bound {bound})")
            }
            TapeError::LengthMismatch { op, expected, got } => {
                write!(f, "{op}: expected length {expected}, got {got}")
            }
            TapeError::EmptySegment { segment } => {
                write!(
                    f,
                    "segment {segment} is empty: node has no neighbors and no self-loop"
                )
            }
            TapeError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            TapeError::EmptyMask => write!(f, "cross-entropy mask selects no rows"),
            TapeError::LabelOutOfRange {
                row,
                label,
                classes,
            } => {
                write!(f, "label {label} at row {row} exceeds {classes} classes")
            }
        }
    }
}

impl core::error::Error for TapeError {}

enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    GatherRows {
        x: NodeId,
        idx: Rc<Vec<usize>>,
    },
    ScatterWeightedSum {
        m: NodeId,
        w: NodeId,
        seg: Rc<Vec<usize>>,
    },
    SegmentSoftmax {
        scores: NodeId,
        seg: Rc<Vec<usize>>,
        num_segments: usize,
    },
    SelectByMask {
        a: NodeId,
        b: NodeId,
        mask: Rc<Vec<bool>>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Rc<Vec<usize>>,
        mask: Rc<Vec<bool>>,
        /// Saved softmax probabilities for the backward rule.
        probs: Tensor,
        masked_rows: usize,
    },
    Sum {
        x: NodeId,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Ordered record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`]. Nodes that have no
/// path to the loss read back as zero tensors.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn get_ref(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Register a leaf (parameter or input).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(TapeError::ShapeMismatch {
                op: "matmul",
                lhs: (ar, ac),
                rhs: (br, bc),
            });
        }
        let mut out = Tensor::zeros(ar, bc);
        matmul_into(self.value(a), self.value(b), &mut out);
        Ok(self.push(Op::MatMul { a, b }, out))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).transposed();
        self.push(Op::Transpose { x }, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TapeError::ShapeMismatch {
                op: "add",
                lhs: self.value(a).shape(),
                rhs: self.value(b).shape(),
            });
        }
        let (r, c) = self.value(a).shape();
        let mut out = Tensor::zeros(r, c);
        for ((o, &x), &y) in out
            .data_mut()
            .iter_mut()
            .zip(self.value(a).data())
            .zip(self.value(b).data())
        {
            *o = x + y;
        }
        Ok(self.push(Op::Add { a, b }, out))
    }

    /// Elementwise `max(x, 0) + slope * min(x, 0)`. Positive-homogeneous for
    /// every slope >= 0; `slope == 0` is plain ReLU.
    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let (r, c) = self.value(x).shape();
        let mut out = Tensor::zeros(r, c);
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(x).data()) {
            *o = if v >= 0.0 { v } else { slope * v };
        }
        self.push(Op::LeakyRelu { x, slope }, out)
    }

    /// Rows of `x` selected by `idx` (output row e = x[idx[e], :]).
    pub fn gather_rows(&mut self, x: NodeId, idx: Rc<Vec<usize>>) -> Result<NodeId, TapeError> {
        let (rows, cols) = self.value(x).shape();
        let mut out = Tensor::zeros(idx.len(), cols);
        for (e, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(TapeError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            out.row_mut(e).copy_from_slice(self.value(x).row(i));
        }
        Ok(self.push(Op::GatherRows { x, idx }, out))
    }

    /// Output row v = sum over edges e with seg[e] == v of w[e] * m[e, :].
    pub fn scatter_weighted_sum(
        &mut self,
        m: NodeId,
        w: NodeId,
        seg: Rc<Vec<usize>>,
        num_nodes: usize,
    ) -> Result<NodeId, TapeError> {
        let (edges, cols) = self.value(m).shape();
        let (wr, wc) = self.value(w).shape();
        if (wr, wc) != (edges, 1) {
            return Err(TapeError::ShapeMismatch {
                op: "scatter_weighted_sum",
                lhs: (edges, 1),
                rhs: (wr, wc),
            });
        }
        if seg.len() != edges {
            return Err(TapeError::LengthMismatch {
                op: "scatter_weighted_sum",
                expected: edges,
                got: seg.len(),
            });
        }
        let mut out = Tensor::zeros(num_nodes, cols);
        for e in 0..edges {
            let v = seg[e];
            if v >= num_nodes {
                return Err(TapeError::IndexOutOfRange {
                    op: "scatter_weighted_sum",
                    index: v,
                    bound: num_nodes,
                });
            }
            let we = self.value(w).data()[e];
            let src_row = self.value(m).row(e).to_vec();
            let dst = out.row_mut(v);
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += we * s;
            }
        }
        Ok(self.push(Op::ScatterWeightedSum { m, w, seg }, out))
    }

    /// Softmax within each segment, with per-segment max subtraction.
    /// Errors if any segment in `0..num_segments` has no entries.
    pub fn segment_softmax(
        &mut self,
        scores: NodeId,
        seg: Rc<Vec<usize>>,
        num_segments: usize,
    ) -> Result<NodeId, TapeError> {
        self.segment_softmax_impl(scores, seg, num_segments, false)
    }

    /// Like [`Tape::segment_softmax`] but tolerates empty segments, which
    /// simply produce no output entries. Used when evaluating layers on
    /// graphs that legitimately contain isolated, self-loop-free nodes.
    pub fn segment_softmax_allow_empty(
        &mut self,
        scores: NodeId,
        seg: Rc<Vec<usize>>,
        num_segments: usize,
    ) -> Result<NodeId, TapeError> {
        self.segment_softmax_impl(scores, seg, num_segments, true)
    }

    fn segment_softmax_impl(
        &mut self,
        scores: NodeId,
        seg: Rc<Vec<usize>>,
        num_segments: usize,
        allow_empty: bool,
    ) -> Result<NodeId, TapeError> {
        let (edges, cols) = self.value(scores).shape();
        if cols != 1 {
            return Err(TapeError::ShapeMismatch {
                op: "segment_softmax",
                lhs: (edges, 1),
                rhs: (edges, cols),
            });
        }
        if seg.len() != edges {
            return Err(TapeError::LengthMismatch {
                op: "segment_softmax",
                expected: edges,
                got: seg.len(),
            });
        }
        let mut max = vec![f64::NEG_INFINITY; num_segments];
        for (e, &s) in seg.iter().enumerate() {
            if s >= num_segments {
                return Err(TapeError::IndexOutOfRange {
                    op: "segment_softmax",
                    index: s,
                    bound: num_segments,
                });
            }
            let v = self.value(scores).data()[e];
            if v > max[s] {
                max[s] = v;
            }
        }
        if !allow_empty {
            if let Some(s) = max.iter().position(|m| m.is_infinite()) {
                return Err(TapeError::EmptySegment { segment: s });
            }
        }
        let mut out = Tensor::zeros(edges, 1);
        let mut denom = vec![0.0f64; num_segments];
        for e in 0..edges {
            let x = math::exp(self.value(scores).data()[e] - max[seg[e]]);
            out.data_mut()[e] = x;
            denom[seg[e]] += x;
        }
        for e in 0..edges {
            out.data_mut()[e] /= denom[seg[e]];
        }
        Ok(self.push(
            Op::SegmentSoftmax {
                scores,
                seg,
                num_segments,
            },
            out,
        ))
    }

    /// Row-wise select between two single-column tensors:
    /// out[e] = if mask[e] { b[e] } else { a[e] }.
    pub fn select_by_mask(
        &mut self,
        a: NodeId,
        b: NodeId,
        mask: Rc<Vec<bool>>,
    ) -> Result<NodeId, TapeError> {
        let (rows, cols) = self.value(a).shape();
        if self.value(b).shape() != (rows, cols) || cols != 1 {
            return Err(TapeError::ShapeMismatch {
                op: "select_by_mask",
                lhs: (rows, cols),
                rhs: self.value(b).shape(),
            });
        }
        if mask.len() != rows {
            return Err(TapeError::LengthMismatch {
                op: "select_by_mask",
                expected: rows,
                got: mask.len(),
            });
        }
        let mut out = Tensor::zeros(rows, 1);
        for e in 0..rows {
            out.data_mut()[e] = if mask[e] {
                self.value(b).data()[e]
            } else {
                self.value(a).data()[e]
            };
        }
        Ok(self.push(Op::SelectByMask { a, b, mask }, out))
    }

    /// Mean over masked rows of -log softmax(logits)[label]. Scalar output.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: Rc<Vec<usize>>,
        mask: Rc<Vec<bool>>,
    ) -> Result<NodeId, TapeError> {
        let (rows, classes) = self.value(logits).shape();
        if labels.len() != rows {
            return Err(TapeError::LengthMismatch {
                op: "softmax_cross_entropy",
                expected: rows,
                got: labels.len(),
            });
        }
        if mask.len() != rows {
            return Err(TapeError::LengthMismatch {
                op: "softmax_cross_entropy",
                expected: rows,
                got: mask.len(),
            });
        }
        let masked_rows = mask.iter().filter(|&&m| m).count();
        if masked_rows == 0 {
            return Err(TapeError::EmptyMask);
        }
        let mut probs = Tensor::zeros(rows, classes);
        let mut loss = 0.0;
        for r in 0..rows {
            if labels[r] >= classes {
                return Err(TapeError::LabelOutOfRange {
                    row: r,
                    label: labels[r],
                    classes,
                });
            }
            let row = self.value(logits).row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for c in 0..classes {
                let x = math::exp(row[c] - m);
                probs.set(r, c, x);
                denom += x;
            }
            for c in 0..classes {
                let p = probs.get(r, c) / denom;
                probs.set(r, c, p);
            }
            if mask[r] {
                loss -= math::ln(probs.get(r, labels[r]));
            }
        }
        loss /= masked_rows as f64;
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                mask,
                probs,
                masked_rows,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Sum of all entries; scalar output.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum { x }, Tensor::scalar(total))
    }

    /// Reverse sweep from a scalar loss node. Returns exact gradients for
    /// every node; leaves not on any path to the loss read back as zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TapeError> {
        if self.value(loss).shape() != (1, 1) {
            return Err(TapeError::NonScalarLoss {
                shape: self.value(loss).shape(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            self.apply_backward(id, &grad, &mut grads);
            grads[id] = Some(grad);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            grads,
        })
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        match &mut grads[id.0] {
            Some(existing) => {
                for (dst, src) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *dst += src;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn apply_backward(&self, id: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                // dA = G * B^T, dB = A^T * G
                let bt = self.value(*b).transposed();
                let mut da = Tensor::zeros(self.value(*a).rows(), self.value(*a).cols());
                matmul_into(grad, &bt, &mut da);
                Self::accumulate(grads, *a, da);
                let at = self.value(*a).transposed();
                let mut db = Tensor::zeros(self.value(*b).rows(), self.value(*b).cols());
                matmul_into(&at, grad, &mut db);
                Self::accumulate(grads, *b, db);
            }
            Op::Transpose { x } => {
                Self::accumulate(grads, *x, grad.transposed());
            }
            Op::Add { a, b } => {
                Self::accumulate(grads, *a, grad.clone());
                Self::accumulate(grads, *b, grad.clone());
            }
            Op::LeakyRelu { x, slope } => {
                let input = self.value(*x);
                let mut dx = Tensor::zeros(input.rows(), input.cols());
                // Subgradient at exactly 0 is the positive-side slope, so the
                // homogeneity identity phi(x) = x * phi'(x) holds everywhere.
                for ((d, &g), &v) in dx
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(input.data())
                {
                    *d = if v >= 0.0 { g } else { slope * g };
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::GatherRows { x, idx } => {
                let (rows, cols) = self.value(*x).shape();
                let mut dx = Tensor::zeros(rows, cols);
                for (e, &i) in idx.iter().enumerate() {
                    let g_row = grad.row(e);
                    let dst = dx.row_mut(i);
                    for (d, &g) in dst.iter_mut().zip(g_row) {
                        *d += g;
                    }
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::ScatterWeightedSum { m, w, seg } => {
                let mval = self.value(*m);
                let wval = self.value(*w);
                let (edges, cols) = mval.shape();
                let mut dm = Tensor::zeros(edges, cols);
                let mut dw = Tensor::zeros(edges, 1);
                for e in 0..edges {
                    let g_row = grad.row(seg[e]);
                    let we = wval.data()[e];
                    let m_row = mval.row(e);
                    let dm_row = dm.row_mut(e);
                    let mut dot = 0.0;
                    for c in 0..cols {
                        dm_row[c] = we * g_row[c];
                        dot += m_row[c] * g_row[c];
                    }
                    dw.data_mut()[e] = dot;
                }
                Self::accumulate(grads, *m, dm);
                Self::accumulate(grads, *w, dw);
            }
            Op::SegmentSoftmax {
                scores,
                seg,
                num_segments,
            } => {
                // dScores[e] = alpha[e] * (g[e] - sum_{e' in seg} g[e'] alpha[e'])
                let alpha = &self.nodes[id].value;
                let edges = alpha.rows();
                let mut seg_dot = vec![0.0f64; *num_segments];
                for e in 0..edges {
                    seg_dot[seg[e]] += grad.data()[e] * alpha.data()[e];
                }
                let mut ds = Tensor::zeros(edges, 1);
                for e in 0..edges {
                    ds.data_mut()[e] = alpha.data()[e] * (grad.data()[e] - seg_dot[seg[e]]);
                }
                Self::accumulate(grads, *scores, ds);
            }
            Op::SelectByMask { a, b, mask } => {
                let rows = mask.len();
                let mut da = Tensor::zeros(rows, 1);
                let mut db = Tensor::zeros(rows, 1);
                for e in 0..rows {
                    if mask[e] {
                        db.data_mut()[e] = grad.data()[e];
                    } else {
                        da.data_mut()[e] = grad.data()[e];
                    }
                }
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                mask,
                probs,
                masked_rows,
            } => {
                let g = grad.scalar_value() / *masked_rows as f64;
                let (rows, classes) = probs.shape();
                let mut dl = Tensor::zeros(rows, classes);
                for r in 0..rows {
                    if !mask[r] {
                        continue;
                    }
                    for c in 0..classes {
                        let onehot = if c == labels[r] { 1.0 } else { 0.0 };
                        dl.set(r, c, g * (probs.get(r, c) - onehot));
                    }
                }
                Self::accumulate(grads, *logits, dl);
            }
            Op::Sum { x } => {
                let (r, c) = self.value(*x).shape();
                let mut dx = Tensor::zeros(r, c);
                dx.data_mut().fill(grad.scalar_value());
                Self::accumulate(grads, *x, dx);
            }
        }
    }
}

/// Central finite differences: (f(x + h e_i) - f(x - h e_i)) / (2h) per
/// coordinate. The oracle only evaluates `f` forward, so it is independent
/// of the backward rules it is used to check.
pub fn finite_difference_grad<F>(f: F, theta: &Tensor, h: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    let mut grad = Tensor::zeros(theta.rows(), theta.cols());
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// L2-relative error between an autodiff gradient and its oracle.
pub fn relative_error(got: &Tensor, oracle: &Tensor) -> f64 {
    debug_assert_eq!(got.shape(), oracle.shape());
    let mut diff_sq = 0.0;
    let mut ref_sq = 0.0;
    for (&g, &o) in got.data().iter().zip(oracle.data()) {
        diff_sq += (g - o) * (g - o);
        ref_sq += o * o;
    }
    math::sqrt(diff_sq) / math::sqrt(ref_sq).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    const FD_STEP: f64 = 1e-5;

    fn random_tensor(rng: &mut SplitMix64, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(101);
        let a0 = random_tensor(&mut rng, 3, 4);
        let b0 = random_tensor(&mut rng, 4, 2);

        let eval = |a: &Tensor| {
            let mut tape = Tape::new();
            let a_id = tape.leaf(a.clone());
            let b_id = tape.leaf(b0.clone());
            let c = tape.matmul(a_id, b_id).unwrap();
            let loss = tape.sum(c);
            tape.value(loss).scalar_value()
        };
        let oracle = finite_difference_grad(eval, &a0, FD_STEP);

        let mut tape = Tape::new();
        let a_id = tape.leaf(a0.clone());
        let b_id = tape.leaf(b0.clone());
        let c = tape.matmul(a_id, b_id).unwrap();
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        assert!(relative_error(&grads.get(a_id), &oracle) < 1e-6);
    }

    #[test]
    fn leaky_relu_basics() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::col_vec(&[-1.0, 0.0, 2.0]));
        let y = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.value(y).data(), &[-0.2, 0.0, 2.0]);
        let z = tape.leaky_relu(x, 0.0);
        assert_eq!(tape.value(z).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn leaky_relu_positive_homogeneity() {
        let mut rng = SplitMix64::new(5);
        for _ in 0..10 {
            let x = random_tensor(&mut rng, 4, 3);
            for &a in &[0.5, 2.0, 10.0] {
                let mut scaled = x.clone();
                scaled.scale_in_place(a);
                let mut tape = Tape::new();
                let xi = tape.leaf(x.clone());
                let si = tape.leaf(scaled);
                let fx = tape.leaky_relu(xi, 0.2);
                let fs = tape.leaky_relu(si, 0.2);
                for (l, r) in tape.value(fs).data().iter().zip(tape.value(fx).data()) {
                    let rel = (l - a * r).abs() / (a * r).abs().max(1e-14);
                    assert!(rel < 1e-14, "homogeneity violated: {l} vs {}", a * r);
                }
            }
        }
    }

    #[test]
    fn segment_softmax_hand_values() {
        let mut tape = Tape::new();
        let seg = Rc::new(vec![0usize, 0, 0]);
        let s = tape.leaf(Tensor::col_vec(&[0.0, 0.0, 0.0]));
        let a = tape.segment_softmax(s, seg.clone(), 1).unwrap();
        for &v in tape.value(a).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let s2 = tape.leaf(Tensor::col_vec(&[2.0f64.ln(), 0.0, 0.0]));
        let a2 = tape.segment_softmax(s2, seg, 1).unwrap();
        let got = tape.value(a2).data();
        assert!((got[0] - 0.5).abs() < 1e-12);
        assert!((got[1] - 0.25).abs() < 1e-12);
        assert!((got[2] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn segment_softmax_shift_invariance_and_normalization() {
        let mut rng = SplitMix64::new(17);
        let seg = Rc::new(vec![0usize, 0, 1, 1, 1]);
        let scores = random_tensor(&mut rng, 5, 1);
        let mut shifted = scores.clone();
        // Add a constant per segment.
        for (e, &s) in seg.iter().enumerate() {
            shifted.data_mut()[e] += if s == 0 { 7.5 } else { -3.25 };
        }
        let mut tape = Tape::new();
        let a = tape.leaf(scores);
        let b = tape.leaf(shifted);
        let sa = tape.segment_softmax(a, seg.clone(), 2).unwrap();
        let sb = tape.segment_softmax(b, seg.clone(), 2).unwrap();
        for (x, y) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut sums = [0.0f64; 2];
        for (e, &s) in seg.iter().enumerate() {
            let v = tape.value(sa).data()[e];
            assert!(v > 0.0 && v <= 1.0);
            sums[s] += v;
        }
        for s in sums {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn segment_softmax_rejects_empty_segment() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::col_vec(&[1.0, 2.0]));
        let err = tape
            .segment_softmax(s, Rc::new(vec![0, 2]), 3)
            .unwrap_err();
        assert_eq!(err, TapeError::EmptySegment { segment: 1 });
        // Permissive variant tolerates the hole.
        let ok = tape
            .segment_softmax_allow_empty(s, Rc::new(vec![0, 2]), 3)
            .unwrap();
        assert_eq!(tape.value(ok).data(), &[1.0, 1.0]);
    }

    #[test]
    fn gather_scatter_identity_and_convexity() {
        // Single node with a self-loop and weight 1: output row equals input.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap());
        let idx = Rc::new(vec![0usize]);
        let gathered = tape.gather_rows(x, idx.clone()).unwrap();
        let w = tape.leaf(Tensor::col_vec(&[1.0]));
        let out = tape
            .scatter_weighted_sum(gathered, w, Rc::new(vec![0]), 1)
            .unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, -1.0, 2.0]);

        // Two equal rows with weights (0.5, 0.5) reproduce the row.
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::from_vec(2, 2, vec![3.0, -1.0, 3.0, -1.0]).unwrap());
        let w = tape.leaf(Tensor::col_vec(&[0.5, 0.5]));
        let out = tape
            .scatter_weighted_sum(m, w, Rc::new(vec![0, 0]), 1)
            .unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, -1.0]);
    }

    /// Weighted scalar readout on the tape: loss = row_w * (out * col_w),
    /// a 1x1 node. Gives every output entry a distinct weight so gradient
    /// checks are not fooled by symmetric cancellations.
    fn readout(tape: &mut Tape, out: NodeId, row_w: &[f64], col_w: &[f64]) -> NodeId {
        let r = tape.leaf(Tensor::from_vec(1, row_w.len(), row_w.to_vec()).unwrap());
        let c = tape.leaf(Tensor::col_vec(col_w));
        let t = tape.matmul(out, c).unwrap();
        tape.matmul(r, t).unwrap()
    }

    #[test]
    fn scatter_weight_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(33);
        let m0 = random_tensor(&mut rng, 6, 3);
        let w0 = random_tensor(&mut rng, 6, 1);
        let seg = Rc::new(vec![0usize, 0, 1, 1, 2, 2]);
        let row_w: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let col_w: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();

        let eval = |w: &Tensor| {
            let mut tape = Tape::new();
            let m_id = tape.leaf(m0.clone());
            let w_id = tape.leaf(w.clone());
            let out = tape
                .scatter_weighted_sum(m_id, w_id, seg.clone(), 3)
                .unwrap();
            let loss = readout(&mut tape, out, &row_w, &col_w);
            tape.value(loss).scalar_value()
        };
        let oracle = finite_difference_grad(eval, &w0, FD_STEP);

        let mut tape = Tape::new();
        let m_id = tape.leaf(m0.clone());
        let w_id = tape.leaf(w0.clone());
        let out = tape
            .scatter_weighted_sum(m_id, w_id, seg.clone(), 3)
            .unwrap();
        let loss = readout(&mut tape, out, &row_w, &col_w);
        let grads = tape.backward(loss).unwrap();
        assert!(relative_error(&grads.get(w_id), &oracle) < 1e-6);
        assert!(relative_error(
            &grads.get(m_id),
            &finite_difference_grad(
                |m: &Tensor| {
                    let mut tape = Tape::new();
                    let m_id = tape.leaf(m.clone());
                    let w_id = tape.leaf(w0.clone());
                    let out = tape
                        .scatter_weighted_sum(m_id, w_id, seg.clone(), 3)
                        .unwrap();
                    let loss = readout(&mut tape, out, &row_w, &col_w);
                    tape.value(loss).scalar_value()
                },
                &m0,
                FD_STEP
            )
        ) < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_c() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(5, 4));
        let labels = Rc::new(vec![0usize, 1, 2, 3, 0]);
        let mask = Rc::new(vec![true; 5]);
        let loss = tape.softmax_cross_entropy(logits, labels, mask).unwrap();
        assert!((tape.value(loss).scalar_value() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_decreases_with_margin() {
        let mut prev = f64::INFINITY;
        for &margin in &[1.0, 10.0, 100.0] {
            let mut tape = Tape::new();
            let mut logits = Tensor::zeros(3, 4);
            for r in 0..3 {
                logits.set(r, r % 4, margin);
            }
            let l = tape.leaf(logits);
            let labels = Rc::new(vec![0usize, 1, 2]);
            let mask = Rc::new(vec![true; 3]);
            let loss = tape.softmax_cross_entropy(l, labels, mask).unwrap();
            let v = tape.value(loss).scalar_value();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn cross_entropy_rejects_empty_mask_and_bad_labels() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(2, 3));
        assert_eq!(
            tape.softmax_cross_entropy(logits, Rc::new(vec![0, 1]), Rc::new(vec![false, false])),
            Err(TapeError::EmptyMask)
        );
        assert!(matches!(
            tape.softmax_cross_entropy(logits, Rc::new(vec![0, 5]), Rc::new(vec![true, true])),
            Err(TapeError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(71);
        let logits0 = random_tensor(&mut rng, 6, 4);
        let labels = Rc::new(vec![0usize, 3, 1, 2, 2, 0]);
        let mask = Rc::new(vec![true, false, true, true, false, true]);

        let eval = |l: &Tensor| {
            let mut tape = Tape::new();
            let li = tape.leaf(l.clone());
            let loss = tape
                .softmax_cross_entropy(li, labels.clone(), mask.clone())
                .unwrap();
            tape.value(loss).scalar_value()
        };
        let oracle = finite_difference_grad(eval, &logits0, FD_STEP);

        let mut tape = Tape::new();
        let li = tape.leaf(logits0.clone());
        let loss = tape
            .softmax_cross_entropy(li, labels.clone(), mask.clone())
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(relative_error(&grads.get(li), &oracle) < 1e-6);
    }

    #[test]
    fn backward_of_sum_is_ones_and_unused_params_zero() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let unused = tape.leaf(Tensor::zeros(3, 3));
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).data(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(grads.get(unused), Tensor::zeros(3, 3));
        assert!(grads.get_ref(unused).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(2, 2));
        assert!(matches!(
            tape.backward(w),
            Err(TapeError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn finite_difference_sanity() {
        // f(theta) = theta^2 at theta = 3 -> 6.
        let f = |t: &Tensor| t.scalar_value() * t.scalar_value();
        let g = finite_difference_grad(f, &Tensor::scalar(3.0), FD_STEP);
        assert!((g.scalar_value() - 6.0).abs() < 1e-8);

        // Linear f: exact and independent of h.
        let lin = |t: &Tensor| 2.5 * t.scalar_value() - 1.0;
        for &h in &[1e-3, 1e-5, 1e-7] {
            let g = finite_difference_grad(lin, &Tensor::scalar(0.7), h);
            assert!((g.scalar_value() - 2.5).abs() < 1e-9);
        }
    }

    /// Randomized finite-difference sweep: 20 instances per differentiable
    /// primitive, rel. err < 1e-5 in float64.
    #[test]
    fn every_primitive_passes_randomized_fd_checks() {
        let mut rng = SplitMix64::new(2024);
        for instance in 0..20 {
            let rows = 3 + rng.next_usize(3);
            let cols = 2 + rng.next_usize(3);
            let x0 = random_tensor(&mut rng, rows, cols);
            let y0 = random_tensor(&mut rng, rows, cols);
            let m0 = random_tensor(&mut rng, cols, rows);
            let row_w: Vec<f64> = (0..rows).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let col_w: Vec<f64> = (0..rows).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let slope = 0.2;

            // Dense path: transpose(leaky_relu(x + y) * m), weighted readout.
            // Exercises add, leaky_relu, matmul, transpose.
            let dense = |x: &Tensor| -> (Tape, NodeId, NodeId) {
                let mut tape = Tape::new();
                let xi = tape.leaf(x.clone());
                let yi = tape.leaf(y0.clone());
                let mi = tape.leaf(m0.clone());
                let s = tape.add(xi, yi).unwrap();
                let a = tape.leaky_relu(s, slope);
                let p = tape.matmul(a, mi).unwrap();
                let t = tape.transpose(p);
                let loss = readout(&mut tape, t, &row_w, &col_w);
                (tape, xi, loss)
            };
            let oracle = finite_difference_grad(
                |x| {
                    let (tape, _, loss) = dense(x);
                    tape.value(loss).scalar_value()
                },
                &x0,
                FD_STEP,
            );
            let (tape, xi, loss) = dense(&x0);
            let grads = tape.backward(loss).unwrap();
            let rel = relative_error(&grads.get(xi), &oracle);
            assert!(rel < 1e-5, "dense path instance {instance}: rel err {rel}");

            // Sparse path: select + segment softmax + scatter over a small
            // edge set, checked w.r.t. both score inputs.
            let seg = Rc::new(vec![0usize, 0, 1, 1, 1, 2]);
            let mask = Rc::new(vec![true, false, true, false, false, true]);
            let scores0 = random_tensor(&mut rng, 6, 1);
            let alt0 = random_tensor(&mut rng, 6, 1);
            let feats0 = random_tensor(&mut rng, 6, 2);
            let srow: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let scol: Vec<f64> = (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let sparse = |sc: &Tensor, alt: &Tensor| -> (Tape, NodeId, NodeId, NodeId) {
                let mut tape = Tape::new();
                let sc_id = tape.leaf(sc.clone());
                let alt_id = tape.leaf(alt.clone());
                let sel = tape.select_by_mask(sc_id, alt_id, mask.clone()).unwrap();
                let alpha = tape.segment_softmax(sel, seg.clone(), 3).unwrap();
                let f_id = tape.leaf(feats0.clone());
                let out = tape
                    .scatter_weighted_sum(f_id, alpha, seg.clone(), 3)
                    .unwrap();
                let loss = readout(&mut tape, out, &srow, &scol);
                (tape, sc_id, alt_id, loss)
            };
            let oracle_sc = finite_difference_grad(
                |sc| {
                    let (tape, _, _, loss) = sparse(sc, &alt0);
                    tape.value(loss).scalar_value()
                },
                &scores0,
                FD_STEP,
            );
            let oracle_alt = finite_difference_grad(
                |alt| {
                    let (tape, _, _, loss) = sparse(&scores0, alt);
                    tape.value(loss).scalar_value()
                },
                &alt0,
                FD_STEP,
            );
            let (tape, sc_id, alt_id, loss) = sparse(&scores0, &alt0);
            let grads = tape.backward(loss).unwrap();
            let rel_sc = relative_error(&grads.get(sc_id), &oracle_sc);
            let rel_alt = relative_error(&grads.get(alt_id), &oracle_alt);
            assert!(rel_sc < 1e-5, "softmax path instance {instance}: {rel_sc}");
            assert!(rel_alt < 1e-5, "select path instance {instance}: {rel_alt}");
        }
    }
}
