//! Reverse-mode differentiation over a recorded operation tape.
//!
//! The tape is rebuilt for every training step (define-by-run). Each node
//! stores its operation, parent ids, and computed value; parents always have
//! smaller ids than children, so a single reverse sweep propagates gradients
//! visiting each node exactly once. Values are immutable once recorded.
//!
//! Most operations view tensors as `(rows, cols)` with `cols` the last axis;
//! column-indexed ops (gather / scatter / concat) and the per-row quaternion
//! ops act within each row independently.

use crate::tensor::{self, Tensor};
use thiserror::Error;

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: non-finite value in result")]
    NonFinite { op: &'static str },
    #[error("{op}: {detail}")]
    BadOperand { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

#[derive(Debug, Clone)]
enum Op {
    /// Input value; `param` marks leaves whose gradients callers will read.
    Leaf { param: bool },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    /// Elementwise product; either side may be a scalar broadcast.
    Mul { a: NodeId, b: NodeId },
    ScalarMul { a: NodeId, c: f64 },
    /// `(r,c) + (c)` with the vector added to every row.
    AddRowVec { a: NodeId, v: NodeId },
    Matmul { a: NodeId, b: NodeId },
    /// Concatenate along the last axis.
    Concat { a: NodeId, b: NodeId },
    /// Select columns `idx` from each row.
    GatherCols { a: NodeId, idx: Vec<usize> },
    /// Place column `j` of the input at column `idx[j]` of a zero row.
    ScatterCols { a: NodeId, idx: Vec<usize>, out_cols: usize },
    Tanh { a: NodeId },
    Sigmoid { a: NodeId },
    Relu { a: NodeId },
    Exp { a: NodeId },
    Log { a: NodeId },
    Softplus { a: NodeId },
    Sum { a: NodeId },
    Mean { a: NodeId },
    /// Sum of squared entries.
    SqNorm { a: NodeId },
    /// Normalize each 4-wide block of each row to unit length.
    NormalizeQuatBlocks { a: NodeId },
    /// Row-wise Hamilton product of two `(r,4)` tensors.
    QuatMulRows { a: NodeId, b: NodeId },
    /// Rotate the fixed vector `v` by each unit-quaternion row of `(r,4)`.
    RotateRows { q: NodeId, v: [f64; 3] },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients produced by one backward sweep; indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a node, zeros if no path to the loss reached it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

/// The recorded computation graph for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    fn push_checked(&mut self, name: &'static str, op: Op, value: Tensor) -> Result<NodeId, TapeError> {
        if !value.all_finite() {
            return Err(TapeError::NonFinite { op: name });
        }
        Ok(self.push(op, value))
    }

    /// Record an input; gradients flow to it but are not reported as params.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: false }, value)
    }

    /// Record a parameter leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: true }, value)
    }

    // ── Elementwise and linear ops ───────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary_elementwise("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary_elementwise("sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary_elementwise("mul", a, b, |x, y| x * y)
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, TapeError> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            Tensor::new(
                va.shape().to_vec(),
                va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect(),
            )
        } else if vb.is_scalar() {
            let s = vb.item();
            Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| f(*x, s)).collect())
        } else if va.is_scalar() {
            let s = va.item();
            Tensor::new(vb.shape().to_vec(), vb.data().iter().map(|y| f(s, *y)).collect())
        } else {
            return Err(TapeError::ShapeMismatch {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        };
        let op = match name {
            "add" => Op::Add { a, b },
            "sub" => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        self.push_checked(name, op, value)
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> Result<NodeId, TapeError> {
        let va = self.value(a);
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect());
        self.push_checked("scalar_mul", Op::ScalarMul { a, c }, value)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.scalar_mul(a, -1.0)
    }

    pub fn add_row_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId, TapeError> {
        let (va, vv) = (self.value(a), self.value(v));
        if vv.shape().len() != 1 || vv.cols() != va.cols() {
            return Err(TapeError::ShapeMismatch {
                op: "add_row_vec",
                lhs: va.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        let cols = va.cols();
        let mut data = va.data().to_vec();
        for row in data.chunks_exact_mut(cols.max(1)) {
            for (x, y) in row.iter_mut().zip(vv.data()) {
                *x += y;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data);
        self.push_checked("add_row_vec", Op::AddRowVec { a, v }, value)
    }

    /// `a @ b`. `b` must be 2-D; a 1-D `a` is treated as a single row and the
    /// result stays 1-D.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (va, vb) = (self.value(a), self.value(b));
        let mismatch = || TapeError::ShapeMismatch {
            op: "matmul",
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        };
        if vb.shape().len() != 2 || va.shape().len() > 2 || va.shape().is_empty() {
            return Err(mismatch());
        }
        let (m, k) = (va.rows(), va.cols());
        let (kb, n) = (vb.shape()[0], vb.shape()[1]);
        if k != kb {
            return Err(mismatch());
        }
        let out = tensor::matmul(va.data(), vb.data(), m, k, n);
        let shape = if va.shape().len() == 1 { vec![n] } else { vec![m, n] };
        self.push_checked("matmul", Op::Matmul { a, b }, Tensor::new(shape, out))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (la, lb) = (va.shape(), vb.shape());
        if la.len() != lb.len() || la[..la.len() - 1] != lb[..lb.len() - 1] {
            return Err(TapeError::ShapeMismatch {
                op: "concat",
                lhs: la.to_vec(),
                rhs: lb.to_vec(),
            });
        }
        let (ca, cb) = (va.cols(), vb.cols());
        let rows = va.rows();
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&vb.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = la.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        self.push_checked("concat", Op::Concat { a, b }, Tensor::new(shape, data))
    }

    pub fn gather_cols(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId, TapeError> {
        let va = self.value(a);
        let cols = va.cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(TapeError::BadOperand {
                op: "gather_cols",
                detail: format!("index {bad} out of range for {cols} columns"),
            });
        }
        let rows = va.rows();
        let mut data = Vec::with_capacity(rows * idx.len());
        for r in 0..rows {
            let row = &va.data()[r * cols..(r + 1) * cols];
            data.extend(idx.iter().map(|&i| row[i]));
        }
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = idx.len();
        self.push_checked(
            "gather_cols",
            Op::GatherCols { a, idx: idx.to_vec() },
            Tensor::new(shape, data),
        )
    }

    /// Contiguous column range, a gather with `from..to`.
    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> Result<NodeId, TapeError> {
        let idx: Vec<usize> = (from..to).collect();
        self.gather_cols(a, &idx)
    }

    pub fn scatter_cols(&mut self, a: NodeId, idx: &[usize], out_cols: usize) -> Result<NodeId, TapeError> {
        let va = self.value(a);
        if va.cols() != idx.len() {
            return Err(TapeError::ShapeMismatch {
                op: "scatter_cols",
                lhs: va.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut seen = vec![false; out_cols];
        for &i in idx {
            if i >= out_cols || seen[i] {
                return Err(TapeError::BadOperand {
                    op: "scatter_cols",
                    detail: format!("indices must be distinct and < {out_cols}, got {idx:?}"),
                });
            }
            seen[i] = true;
        }
        let rows = va.rows();
        let in_cols = va.cols();
        let mut data = vec![0.0; rows * out_cols];
        for r in 0..rows {
            let row = &va.data()[r * in_cols..(r + 1) * in_cols];
            let out_row = &mut data[r * out_cols..(r + 1) * out_cols];
            for (j, &i) in idx.iter().enumerate() {
                out_row[i] = row[j];
            }
        }
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = out_cols;
        self.push_checked(
            "scatter_cols",
            Op::ScatterCols { a, idx: idx.to_vec(), out_cols },
            Tensor::new(shape, data),
        )
    }

    // ── Nonlinearities ───────────────────────────────────────────────────

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary("tanh", a, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary("sigmoid", a, sigmoid)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary("exp", a, f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary("log", a, f64::ln)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary("softplus", a, softplus)
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: NodeId,
        f: impl Fn(f64) -> f64,
    ) -> Result<NodeId, TapeError> {
        let va = self.value(a);
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| f(*x)).collect());
        let op = match name {
            "tanh" => Op::Tanh { a },
            "sigmoid" => Op::Sigmoid { a },
            "relu" => Op::Relu { a },
            "exp" => Op::Exp { a },
            "log" => Op::Log { a },
            _ => Op::Softplus { a },
        };
        self.push_checked(name, op, value)
    }

    // ── Reductions ───────────────────────────────────────────────────────

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let s = self.value(a).data().iter().sum();
        self.push_checked("sum", Op::Sum { a }, Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let va = self.value(a);
        if va.numel() == 0 {
            return Err(TapeError::BadOperand { op: "mean", detail: "empty tensor".into() });
        }
        let s: f64 = va.data().iter().sum::<f64>() / va.numel() as f64;
        self.push_checked("mean", Op::Mean { a }, Tensor::scalar(s))
    }

    pub fn sq_norm(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        self.push_checked("sq_norm", Op::SqNorm { a }, Tensor::scalar(s))
    }

    // ── Quaternion ops for the kinematic loss ────────────────────────────

    /// Normalize every 4-wide block of every row to unit length.
    pub fn normalize_quat_blocks(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let va = self.value(a);
        if va.cols() % 4 != 0 {
            return Err(TapeError::BadOperand {
                op: "normalize_quat_blocks",
                detail: format!("columns {} not a multiple of 4", va.cols()),
            });
        }
        let mut data = va.data().to_vec();
        for q in data.chunks_exact_mut(4) {
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            for x in q {
                *x /= n;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data);
        self.push_checked("normalize_quat_blocks", Op::NormalizeQuatBlocks { a }, value)
    }

    /// Row-wise Hamilton product of `(r,4)` tensors.
    pub fn quat_mul_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.cols() != 4 {
            return Err(TapeError::ShapeMismatch {
                op: "quat_mul_rows",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(va.numel());
        for (qa, qb) in va.data().chunks_exact(4).zip(vb.data().chunks_exact(4)) {
            data.extend_from_slice(&hamilton(qa, qb));
        }
        let value = Tensor::new(va.shape().to_vec(), data);
        self.push_checked("quat_mul_rows", Op::QuatMulRows { a, b }, value)
    }

    /// Rotate the constant vector `v` by each quaternion row. Rows are
    /// assumed unit-norm; the recorded polynomial is differentiated exactly,
    /// so gradients are correct even slightly off the unit sphere.
    pub fn rotate_rows(&mut self, q: NodeId, v: [f64; 3]) -> Result<NodeId, TapeError> {
        let vq = self.value(q);
        if vq.cols() != 4 {
            return Err(TapeError::BadOperand {
                op: "rotate_rows",
                detail: format!("expected 4 columns, got {:?}", vq.shape()),
            });
        }
        let rows = vq.rows();
        let mut data = Vec::with_capacity(rows * 3);
        for quat in vq.data().chunks_exact(4) {
            data.extend_from_slice(&rotate(quat, v));
        }
        let mut shape = vq.shape().to_vec();
        *shape.last_mut().unwrap() = 3;
        self.push_checked("rotate_rows", Op::RotateRows { q, v }, Tensor::new(shape, data))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Gradients of the scalar `loss` with respect to every reachable node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TapeError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TapeError::NonScalarLoss { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(d_out) = grads[id].take() else { continue };
            self.backprop_node(id, &d_out, &mut grads);
            grads[id] = Some(d_out);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|data| Tensor::new(self.nodes[i].value.shape().to_vec(), data)))
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, d_out: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let acc = |grads: &mut [Option<Vec<f64>>], target: NodeId, contrib: &[f64]| {
            let slot = &mut grads[target.0];
            match slot {
                Some(g) => {
                    for (x, y) in g.iter_mut().zip(contrib) {
                        *x += y;
                    }
                }
                None => *slot = Some(contrib.to_vec()),
            }
        };

        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add { a, b } => {
                self.acc_broadcast(grads, *a, d_out, None);
                self.acc_broadcast(grads, *b, d_out, None);
            }
            Op::Sub { a, b } => {
                self.acc_broadcast(grads, *a, d_out, None);
                let neg: Vec<f64> = d_out.iter().map(|x| -x).collect();
                self.acc_broadcast(grads, *b, &neg, None);
            }
            Op::Mul { a, b } => {
                self.acc_broadcast(grads, *a, d_out, Some(*b));
                self.acc_broadcast(grads, *b, d_out, Some(*a));
            }
            Op::ScalarMul { a, c } => {
                let g: Vec<f64> = d_out.iter().map(|x| x * c).collect();
                acc(grads, *a, &g);
            }
            Op::AddRowVec { a, v } => {
                acc(grads, *a, d_out);
                let cols = self.value(*v).numel();
                let mut gv = vec![0.0; cols];
                for row in d_out.chunks_exact(cols.max(1)) {
                    for (g, x) in gv.iter_mut().zip(row) {
                        *g += x;
                    }
                }
                acc(grads, *v, &gv);
            }
            Op::Matmul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.rows(), va.cols());
                let n = vb.shape()[1];
                // d_a = d_out @ b^T, d_b = a^T @ d_out
                let da = tensor::matmul_a_bt(d_out, vb.data(), m, n, k);
                let db = tensor::matmul_at_b(va.data(), d_out, m, k, n);
                acc(grads, *a, &da);
                acc(grads, *b, &db);
            }
            Op::Concat { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (ca, cb) = (va.cols(), vb.cols());
                let rows = va.rows();
                let mut ga = vec![0.0; va.numel()];
                let mut gb = vec![0.0; vb.numel()];
                for r in 0..rows {
                    let row = &d_out[r * (ca + cb)..(r + 1) * (ca + cb)];
                    ga[r * ca..(r + 1) * ca].copy_from_slice(&row[..ca]);
                    gb[r * cb..(r + 1) * cb].copy_from_slice(&row[ca..]);
                }
                acc(grads, *a, &ga);
                acc(grads, *b, &gb);
            }
            Op::GatherCols { a, idx } => {
                let va = self.value(*a);
                let cols = va.cols();
                let rows = va.rows();
                let mut ga = vec![0.0; va.numel()];
                for r in 0..rows {
                    let d_row = &d_out[r * idx.len()..(r + 1) * idx.len()];
                    let g_row = &mut ga[r * cols..(r + 1) * cols];
                    for (j, &i) in idx.iter().enumerate() {
                        g_row[i] += d_row[j];
                    }
                }
                acc(grads, *a, &ga);
            }
            Op::ScatterCols { a, idx, out_cols } => {
                let va = self.value(*a);
                let rows = va.rows();
                let in_cols = va.cols();
                let mut ga = vec![0.0; va.numel()];
                for r in 0..rows {
                    let d_row = &d_out[r * out_cols..(r + 1) * out_cols];
                    let g_row = &mut ga[r * in_cols..(r + 1) * in_cols];
                    for (j, &i) in idx.iter().enumerate() {
                        g_row[j] = d_row[i];
                    }
                }
                acc(grads, *a, &ga);
            }
            Op::Tanh { a } => {
                let y = node.value.data();
                let g: Vec<f64> = d_out.iter().zip(y).map(|(d, y)| d * (1.0 - y * y)).collect();
                acc(grads, *a, &g);
            }
            Op::Sigmoid { a } => {
                let y = node.value.data();
                let g: Vec<f64> = d_out.iter().zip(y).map(|(d, y)| d * y * (1.0 - y)).collect();
                acc(grads, *a, &g);
            }
            Op::Relu { a } => {
                let x = self.value(*a).data();
                let g: Vec<f64> =
                    d_out.iter().zip(x).map(|(d, x)| if *x > 0.0 { *d } else { 0.0 }).collect();
                acc(grads, *a, &g);
            }
            Op::Exp { a } => {
                let y = node.value.data();
                let g: Vec<f64> = d_out.iter().zip(y).map(|(d, y)| d * y).collect();
                acc(grads, *a, &g);
            }
            Op::Log { a } => {
                let x = self.value(*a).data();
                let g: Vec<f64> = d_out.iter().zip(x).map(|(d, x)| d / x).collect();
                acc(grads, *a, &g);
            }
            Op::Softplus { a } => {
                let x = self.value(*a).data();
                let g: Vec<f64> = d_out.iter().zip(x).map(|(d, x)| d * sigmoid(*x)).collect();
                acc(grads, *a, &g);
            }
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                acc(grads, *a, &vec![d_out[0]; n]);
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel();
                acc(grads, *a, &vec![d_out[0] / n as f64; n]);
            }
            Op::SqNorm { a } => {
                let x = self.value(*a).data();
                let g: Vec<f64> = x.iter().map(|x| 2.0 * x * d_out[0]).collect();
                acc(grads, *a, &g);
            }
            Op::NormalizeQuatBlocks { a } => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let mut g = vec![0.0; x.len()];
                for ((gq, xq), (yq, dq)) in g
                    .chunks_exact_mut(4)
                    .zip(x.chunks_exact(4))
                    .zip(y.chunks_exact(4).zip(d_out.chunks_exact(4)))
                {
                    let n = (xq[0] * xq[0] + xq[1] * xq[1] + xq[2] * xq[2] + xq[3] * xq[3]).sqrt();
                    let dot = yq.iter().zip(dq).map(|(y, d)| y * d).sum::<f64>();
                    for i in 0..4 {
                        gq[i] = (dq[i] - yq[i] * dot) / n;
                    }
                }
                acc(grads, *a, &g);
            }
            Op::QuatMulRows { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut ga = vec![0.0; va.numel()];
                let mut gb = vec![0.0; vb.numel()];
                for (((qa, qb), d), (ga_q, gb_q)) in va
                    .data()
                    .chunks_exact(4)
                    .zip(vb.data().chunks_exact(4))
                    .zip(d_out.chunks_exact(4))
                    .zip(ga.chunks_exact_mut(4).zip(gb.chunks_exact_mut(4)))
                {
                    // c = R(b) a = L(a) b; pull back through the transposes.
                    let (bw, bx, by, bz) = (qb[0], qb[1], qb[2], qb[3]);
                    ga_q[0] = bw * d[0] + bx * d[1] + by * d[2] + bz * d[3];
                    ga_q[1] = -bx * d[0] + bw * d[1] - bz * d[2] + by * d[3];
                    ga_q[2] = -by * d[0] + bz * d[1] + bw * d[2] - bx * d[3];
                    ga_q[3] = -bz * d[0] - by * d[1] + bx * d[2] + bw * d[3];
                    let (aw, ax, ay, az) = (qa[0], qa[1], qa[2], qa[3]);
                    gb_q[0] = aw * d[0] + ax * d[1] + ay * d[2] + az * d[3];
                    gb_q[1] = -ax * d[0] + aw * d[1] + az * d[2] - ay * d[3];
                    gb_q[2] = -ay * d[0] - az * d[1] + aw * d[2] + ax * d[3];
                    gb_q[3] = -az * d[0] + ay * d[1] - ax * d[2] + aw * d[3];
                }
                acc(grads, *a, &ga);
                acc(grads, *b, &gb);
            }
            Op::RotateRows { q, v } => {
                let vq = self.value(*q);
                let mut gq = vec![0.0; vq.numel()];
                for ((quat, d), g) in vq
                    .data()
                    .chunks_exact(4)
                    .zip(d_out.chunks_exact(3))
                    .zip(gq.chunks_exact_mut(4))
                {
                    let w = quat[0];
                    let u = [quat[1], quat[2], quat[3]];
                    let t = scale3(cross(u, *v), 2.0);
                    let d_p = [d[0], d[1], d[2]];
                    g[0] = dot3(t, d_p);
                    // d_u = 2w (v x d_p) + t x d_p + 2 v x (d_p x u)
                    let term1 = scale3(cross(*v, d_p), 2.0 * w);
                    let term2 = cross(t, d_p);
                    let term3 = scale3(cross(*v, cross(d_p, u)), 2.0);
                    for i in 0..3 {
                        g[1 + i] = term1[i] + term2[i] + term3[i];
                    }
                }
                acc(grads, *q, &gq);
            }
        }
    }

    /// Accumulate `d` into `target`, collapsing to a scalar sum when the
    /// target was broadcast. For `Mul`, `other` is the co-factor.
    fn acc_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: NodeId,
        d: &[f64],
        other: Option<NodeId>,
    ) {
        let tn = self.value(target).numel();
        let contrib: Vec<f64> = match other {
            None => {
                if tn == d.len() {
                    d.to_vec()
                } else {
                    vec![d.iter().sum()]
                }
            }
            Some(o) => {
                let ov = self.value(o);
                if tn == d.len() {
                    if ov.numel() == d.len() {
                        d.iter().zip(ov.data()).map(|(x, y)| x * y).collect()
                    } else {
                        let s = ov.item();
                        d.iter().map(|x| x * s).collect()
                    }
                } else {
                    vec![d.iter().zip(ov.data()).map(|(x, y)| x * y).sum()]
                }
            }
        };
        let slot = &mut grads[target.0];
        match slot {
            Some(g) => {
                for (x, y) in g.iter_mut().zip(&contrib) {
                    *x += y;
                }
            }
            None => *slot = Some(contrib),
        }
    }

    /// Ids of all parameter leaves in registration order.
    pub fn param_ids(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf { param: true }))
            .map(|(i, _)| NodeId(i))
            .collect()
    }
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

fn hamilton(a: &[f64], b: &[f64]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// `v` rotated by quaternion `q = (w, x, y, z)`: `v + w*t + u x t`, `t = 2 u x v`.
fn rotate(q: &[f64], v: [f64; 3]) -> [f64; 3] {
    let w = q[0];
    let u = [q[1], q[2], q[3]];
    let t = scale3(cross(u, v), 2.0);
    let c = cross(u, t);
    [v[0] + w * t[0] + c[0], v[1] + w * t[1] + c[1], v[2] + w * t[2] + c[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}
