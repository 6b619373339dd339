#![allow(clippy::needless_range_loop)]

use rand::Rng;

use super::{Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    /// out = a @ b, a: [m,k], b: [k,n]
    Matmul { a: NodeId, b: NodeId },
    /// out[g] = a[g] @ b[g], a: [g,m,k], b: [g,k,n]
    Bmm { a: NodeId, b: NodeId },
    /// out[g] = a[g] @ b[g]^T, a: [g,m,k], b: [g,n,k]
    BmmTransposeB { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// x: [r,c] plus bias [c] broadcast over rows
    AddBias { x: NodeId, bias: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: T },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Relu { x: NodeId },
    Softmax { x: NodeId, axis: usize },
    /// Softmax over the last axis restricted to mask-true entries;
    /// masked entries get exactly zero weight.
    MaskedSoftmax { x: NodeId, mask: Vec<bool> },
    /// Mean negative log-likelihood over mask-true rows, via log-sum-exp.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        mask: Vec<bool>,
    },
    /// Row gather from an embedding table; backward scatter-adds.
    Embedding { table: NodeId, ids: Vec<u32> },
    ConcatCols { a: NodeId, b: NodeId },
    SliceCols { x: NodeId, from: usize, to: usize },
    Transpose { x: NodeId },
    Reshape { x: NodeId },
    /// Each row of x repeated `k` times consecutively.
    RepeatRows { x: NodeId, k: usize },
    GatherRows { x: NodeId, indices: Vec<usize> },
    StackRows { xs: Vec<NodeId> },
    /// [b*t, h*d] -> [b*h, t, d]
    SplitHeads { x: NodeId, batch: usize, time: usize, heads: usize },
    /// [b*h, t, d] -> [b*t, h*d]
    MergeHeads { x: NodeId, batch: usize, time: usize, heads: usize },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout { x: NodeId, keep: Vec<bool>, scale: T },
    Sum { x: NodeId },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Records forward operations and replays them in reverse for gradients.
///
/// A tape belongs to one forward/backward cycle of one training run.
/// Operations are appended in execution order, so inputs always precede
/// their consumers and a single reverse sweep visits each node once.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Gradient of a node, zeros if no gradient flowed to it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Vec<T> {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => vec![T::zero(); self.nodes[id.0].value.numel()],
        }
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[T] {
        self.nodes[id.0].value.data()
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        id
    }

    fn push_checked(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        needs_grad: bool,
        op: Op<T>,
    ) -> Result<NodeId, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        Ok(self.push(value, needs_grad, op))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Non-differentiable input (data, masks, positional tables).
    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId, TensorError> {
        self.push_checked("constant", value, false, Op::Leaf)
    }

    /// Differentiable leaf; gradients accumulate here during backward.
    pub fn param(&mut self, value: Tensor<T>) -> Result<NodeId, TensorError> {
        self.push_checked("param", value, true, Op::Leaf)
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_nn(self.data(a), self.data(b), m, k, n);
        let value = Tensor::from_vec(vec![m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        self.push_checked("matmul", value, needs, Op::Matmul { a, b })
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); g * m * n];
        for i in 0..g {
            let block = matmul_nn(
                &self.data(a)[i * m * k..(i + 1) * m * k],
                &self.data(b)[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            );
            out[i * m * n..(i + 1) * m * n].copy_from_slice(&block);
        }
        let value = Tensor::from_vec(vec![g, m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        self.push_checked("bmm", value, needs, Op::Bmm { a, b })
    }

    pub fn bmm_transpose_b(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm_transpose_b",
                lhs: sa,
                rhs: sb,
            });
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![T::zero(); g * m * n];
        for i in 0..g {
            let block = matmul_nt(
                &self.data(a)[i * m * k..(i + 1) * m * k],
                &self.data(b)[i * n * k..(i + 1) * n * k],
                m,
                k,
                n,
            );
            out[i * m * n..(i + 1) * m * n].copy_from_slice(&block);
        }
        let value = Tensor::from_vec(vec![g, m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        self.push_checked("bmm_transpose_b", value, needs, Op::BmmTransposeB { a, b })
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Contract {
                op: "transpose",
                msg: format!("expected rank-2 tensor, got shape {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::from_vec(vec![c, r], out)?;
        let needs = self.needs(x);
        self.push_checked("transpose", value, needs, Op::Transpose { x })
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: sa,
                rhs: sb,
            });
        }
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_vec(sa, out)?;
        let needs = self.needs(a) || self.needs(b);
        self.push_checked(op_name, value, needs, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        let cols = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let b = self.data(bias).to_vec();
        let out: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % cols])
            .collect();
        let value = Tensor::from_vec(sx, out)?;
        let needs = self.needs(x) || self.needs(bias);
        self.push_checked("add_bias", value, needs, Op::AddBias { x, bias })
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> Result<NodeId, TensorError> {
        let out: Vec<T> = self.data(x).iter().map(|&v| v * factor).collect();
        let value = Tensor::from_vec(self.shape(x).to_vec(), out)?;
        let needs = self.needs(x);
        self.push_checked("scale", value, needs, Op::Scale { x, factor })
    }

    fn unary(
        &mut self,
        op_name: &'static str,
        x: NodeId,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<NodeId, TensorError> {
        let out: Vec<T> = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::from_vec(self.shape(x).to_vec(), out)?;
        let needs = self.needs(x);
        self.push_checked(op_name, value, needs, op)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.unary("sigmoid", x, sigmoid_scalar, Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.unary("relu", x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu { x })
    }

    // ── Probability / loss ───────────────────────────────────────────

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..n {
                    max = max.max(src[idx(j)]);
                }
                let mut sum = T::zero();
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[idx(j)] = out[idx(j)] / sum;
                }
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        let needs = self.needs(x);
        self.push_checked("softmax", value, needs, Op::Softmax { x, axis })
    }

    /// Softmax over the last axis where only mask-true entries carry mass.
    /// Masked entries are exactly zero in the output.
    pub fn masked_softmax(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId, TensorError> {
        let shape = self.shape(x).to_vec();
        let numel: usize = shape.iter().product();
        if mask.len() != numel {
            return Err(TensorError::Contract {
                op: "masked_softmax",
                msg: format!("mask length {} != tensor size {}", mask.len(), numel),
            });
        }
        let cols = *shape.last().unwrap();
        let rows = numel / cols;
        let src = self.data(x);
        let mut out = vec![T::zero(); numel];
        for r in 0..rows {
            let base = r * cols;
            let mut max = T::neg_infinity();
            for j in 0..cols {
                if mask[base + j] {
                    max = max.max(src[base + j]);
                }
            }
            if max == T::neg_infinity() {
                return Err(TensorError::DegenerateInput {
                    op: "masked_softmax",
                    msg: format!("row {r} is fully masked"),
                });
            }
            let mut sum = T::zero();
            for j in 0..cols {
                if mask[base + j] {
                    let e = (src[base + j] - max).exp();
                    out[base + j] = e;
                    sum += e;
                }
            }
            for j in 0..cols {
                if mask[base + j] {
                    out[base + j] /= sum;
                }
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        let needs = self.needs(x);
        self.push_checked(
            "masked_softmax",
            value,
            needs,
            Op::MaskedSoftmax {
                x,
                mask: mask.to_vec(),
            },
        )
    }

    /// Mean negative log-likelihood of `targets` under `logits` over
    /// mask-true rows. Uses log-sum-exp directly, never an explicit
    /// softmax-then-log.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        mask: &[bool],
    ) -> Result<NodeId, TensorError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Contract {
                op: "cross_entropy",
                msg: format!("expected [rows, vocab] logits, got shape {shape:?}"),
            });
        }
        let (rows, vocab) = (shape[0], shape[1]);
        if targets.len() != rows || mask.len() != rows {
            return Err(TensorError::Contract {
                op: "cross_entropy",
                msg: format!(
                    "logits have {} rows but {} targets / {} mask entries",
                    rows,
                    targets.len(),
                    mask.len()
                ),
            });
        }
        let n_valid = mask.iter().filter(|&&m| m).count();
        if n_valid == 0 {
            return Err(TensorError::DegenerateInput {
                op: "cross_entropy",
                msg: "all positions are padding".into(),
            });
        }
        let src = self.data(logits);
        let mut total = T::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let t = targets[r] as usize;
            if t >= vocab {
                return Err(TensorError::Contract {
                    op: "cross_entropy",
                    msg: format!("target id {t} out of range for vocab {vocab} (row {r})"),
                });
            }
            let row = &src[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            total += max + sum.ln() - row[t];
        }
        let loss = total / T::from_f64(n_valid as f64);
        let value = Tensor::scalar(loss);
        let needs = self.needs(logits);
        self.push_checked(
            "cross_entropy",
            value,
            needs,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        )
    }

    // ── Gather / reshape ─────────────────────────────────────────────

    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId, TensorError> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Contract {
                op: "embedding",
                msg: format!("expected [vocab, dim] table, got shape {s:?}"),
            });
        }
        let (vocab, dim) = (s[0], s[1]);
        let mut out = vec![T::zero(); ids.len() * dim];
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= vocab {
                return Err(TensorError::Contract {
                    op: "embedding",
                    msg: format!("token id {id} out of range for vocab {vocab}"),
                });
            }
            out[i * dim..(i + 1) * dim].copy_from_slice(&self.data(table)[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::from_vec(vec![ids.len(), dim], out)?;
        let needs = self.needs(table);
        self.push_checked(
            "embedding",
            value,
            needs,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: sa,
                rhs: sb,
            });
        }
        let (r, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); r * (ca + cb)];
        for i in 0..r {
            out[i * (ca + cb)..i * (ca + cb) + ca]
                .copy_from_slice(&self.data(a)[i * ca..(i + 1) * ca]);
            out[i * (ca + cb) + ca..(i + 1) * (ca + cb)]
                .copy_from_slice(&self.data(b)[i * cb..(i + 1) * cb]);
        }
        let value = Tensor::from_vec(vec![r, ca + cb], out)?;
        let needs = self.needs(a) || self.needs(b);
        self.push_checked("concat_cols", value, needs, Op::ConcatCols { a, b })
    }

    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || from >= to || to > s[1] {
            return Err(TensorError::Contract {
                op: "slice_cols",
                msg: format!("slice {from}..{to} invalid for shape {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let w = to - from;
        let mut out = vec![T::zero(); r * w];
        for i in 0..r {
            out[i * w..(i + 1) * w].copy_from_slice(&self.data(x)[i * c + from..i * c + to]);
        }
        let value = Tensor::from_vec(vec![r, w], out)?;
        let needs = self.needs(x);
        self.push_checked("slice_cols", value, needs, Op::SliceCols { x, from, to })
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(TensorError::Contract {
                op: "reshape",
                msg: format!(
                    "cannot reshape {:?} ({} elements) to {:?}",
                    self.shape(x),
                    self.data(x).len(),
                    shape
                ),
            });
        }
        let value = Tensor::from_vec(shape, self.data(x).to_vec())?;
        let needs = self.needs(x);
        self.push_checked("reshape", value, needs, Op::Reshape { x })
    }

    pub fn repeat_rows(&mut self, x: NodeId, k: usize) -> Result<NodeId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || k == 0 {
            return Err(TensorError::Contract {
                op: "repeat_rows",
                msg: format!("need rank-2 input and k >= 1, got shape {s:?}, k={k}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let mut out = vec![T::zero(); r * k * c];
        for i in 0..r {
            let row = &self.data(x)[i * c..(i + 1) * c];
            for j in 0..k {
                let dst = (i * k + j) * c;
                out[dst..dst + c].copy_from_slice(row);
            }
        }
        let value = Tensor::from_vec(vec![r * k, c], out)?;
        let needs = self.needs(x);
        self.push_checked("repeat_rows", value, needs, Op::RepeatRows { x, k })
    }

    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Contract {
                op: "gather_rows",
                msg: format!("expected rank-2 input, got shape {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let mut out = vec![T::zero(); indices.len() * c];
        for (i, &idx) in indices.iter().enumerate() {
            if idx >= r {
                return Err(TensorError::Contract {
                    op: "gather_rows",
                    msg: format!("row index {idx} out of range for {r} rows"),
                });
            }
            out[i * c..(i + 1) * c].copy_from_slice(&self.data(x)[idx * c..(idx + 1) * c]);
        }
        let value = Tensor::from_vec(vec![indices.len(), c], out)?;
        let needs = self.needs(x);
        self.push_checked(
            "gather_rows",
            value,
            needs,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
        )
    }

    /// Concatenate rank-2 nodes along rows, in argument order.
    pub fn stack_rows(&mut self, xs: &[NodeId]) -> Result<NodeId, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::Contract {
                op: "stack_rows",
                msg: "no inputs".into(),
            });
        }
        let c = self.shape(xs[0]).get(1).copied().unwrap_or(0);
        let mut rows = 0usize;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 2 || s[1] != c {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: self.shape(xs[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * c);
        for &x in xs {
            out.extend_from_slice(self.data(x));
        }
        let value = Tensor::from_vec(vec![rows, c], out)?;
        let needs = xs.iter().any(|&x| self.needs(x));
        self.push_checked("stack_rows", value, needs, Op::StackRows { xs: xs.to_vec() })
    }

    /// [batch*time, heads*head_dim] -> [batch*heads, time, head_dim]
    pub fn split_heads(
        &mut self,
        x: NodeId,
        batch: usize,
        time: usize,
        heads: usize,
    ) -> Result<NodeId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != batch * time || !s[1].is_multiple_of(heads) {
            return Err(TensorError::Contract {
                op: "split_heads",
                msg: format!("shape {s:?} incompatible with batch={batch} time={time} heads={heads}"),
            });
        }
        let hd = s[1] / heads;
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for t in 0..time {
                for h in 0..heads {
                    let src_base = (b * time + t) * heads * hd + h * hd;
                    let dst_base = ((b * heads + h) * time + t) * hd;
                    out[dst_base..dst_base + hd].copy_from_slice(&src[src_base..src_base + hd]);
                }
            }
        }
        let value = Tensor::from_vec(vec![batch * heads, time, hd], out)?;
        let needs = self.needs(x);
        self.push_checked("split_heads", value, needs, Op::SplitHeads { x, batch, time, heads })
    }

    /// [batch*heads, time, head_dim] -> [batch*time, heads*head_dim]
    pub fn merge_heads(
        &mut self,
        x: NodeId,
        batch: usize,
        time: usize,
        heads: usize,
    ) -> Result<NodeId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] != batch * heads || s[1] != time {
            return Err(TensorError::Contract {
                op: "merge_heads",
                msg: format!("shape {s:?} incompatible with batch={batch} time={time} heads={heads}"),
            });
        }
        let hd = s[2];
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for t in 0..time {
                for h in 0..heads {
                    let src_base = ((b * heads + h) * time + t) * hd;
                    let dst_base = (b * time + t) * heads * hd + h * hd;
                    out[dst_base..dst_base + hd].copy_from_slice(&src[src_base..src_base + hd]);
                }
            }
        }
        let value = Tensor::from_vec(vec![batch * time, heads * hd], out)?;
        let needs = self.needs(x);
        self.push_checked("merge_heads", value, needs, Op::MergeHeads { x, batch, time, heads })
    }

    // ── Normalization / regularization / reduction ───────────────────

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, TensorError> {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap_or(&0);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: s,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let rows = self.data(x).len() / c;
        let eps = T::from_f64(1e-5);
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut out = vec![T::zero(); src.len()];
        let mut normalized = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); rows];
        let denom = T::from_f64(c as f64);
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / denom;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / denom;
            let inv = (var + eps).sqrt().recip();
            inv_std[r] = inv;
            for j in 0..c {
                let nh = (row[j] - mean) * inv;
                normalized[r * c + j] = nh;
                out[r * c + j] = nh * g[j] + b[j];
            }
        }
        let value = Tensor::from_vec(s, out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push_checked(
            "layer_norm",
            value,
            needs,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        )
    }

    /// Inverted dropout: kept entries scaled by 1/(1-rate). `rate == 0`
    /// is the identity and records nothing.
    pub fn dropout<R: Rng>(
        &mut self,
        x: NodeId,
        rate: f64,
        rng: &mut R,
    ) -> Result<NodeId, TensorError> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(TensorError::Contract {
                op: "dropout",
                msg: format!("rate {rate} must be in [0, 1)"),
            });
        }
        let n = self.data(x).len();
        let keep: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() >= rate).collect();
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let out: Vec<T> = self
            .data(x)
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { T::zero() })
            .collect();
        let value = Tensor::from_vec(self.shape(x).to_vec(), out)?;
        let needs = self.needs(x);
        self.push_checked("dropout", value, needs, Op::Dropout { x, keep, scale })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let total: T = self.data(x).iter().copied().sum();
        let value = Tensor::scalar(total);
        let needs = self.needs(x);
        self.push_checked("sum", value, needs, Op::Sum { x })
    }

    // ── Backward ─────────────────────────────────────────────────────

    fn accumulate(&mut self, id: NodeId, delta: &[T]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let n = self.nodes[id.0].value.numel();
        debug_assert_eq!(delta.len(), n, "gradient size mismatch");
        let grad = self.nodes[id.0].grad.get_or_insert_with(|| vec![T::zero(); n]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    /// Reverse sweep from a scalar loss. Each node is visited exactly once;
    /// gradients accumulate into every `param` leaf that participated.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::Contract {
                op: "backward",
                msg: format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            });
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            self.backward_node(i)?;
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize) -> Result<(), TensorError> {
        let d_out = self.nodes[i].grad.clone().expect("grad present");
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let da = matmul_nt(&d_out, self.data(b), m, n, k);
                self.accumulate(a, &da);
                let db = matmul_tn(self.data(a), &d_out, m, k, n);
                self.accumulate(b, &db);
            }
            Op::Bmm { a, b } => {
                let (g, m, k) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
                let n = self.shape(b)[2];
                let mut da = vec![T::zero(); g * m * k];
                let mut db = vec![T::zero(); g * k * n];
                for gi in 0..g {
                    let dc = &d_out[gi * m * n..(gi + 1) * m * n];
                    let block_a = matmul_nt(dc, &self.data(b)[gi * k * n..(gi + 1) * k * n], m, n, k);
                    da[gi * m * k..(gi + 1) * m * k].copy_from_slice(&block_a);
                    let block_b = matmul_tn(&self.data(a)[gi * m * k..(gi + 1) * m * k], dc, m, k, n);
                    db[gi * k * n..(gi + 1) * k * n].copy_from_slice(&block_b);
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::BmmTransposeB { a, b } => {
                // c[g] = a[g] @ b[g]^T; da = dc @ b, db = dc^T @ a
                let (g, m, k) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
                let n = self.shape(b)[1];
                let mut da = vec![T::zero(); g * m * k];
                let mut db = vec![T::zero(); g * n * k];
                for gi in 0..g {
                    let dc = &d_out[gi * m * n..(gi + 1) * m * n];
                    let block_a = matmul_nn(dc, &self.data(b)[gi * n * k..(gi + 1) * n * k], m, n, k);
                    da[gi * m * k..(gi + 1) * m * k].copy_from_slice(&block_a);
                    let block_b = matmul_tn(dc, &self.data(a)[gi * m * k..(gi + 1) * m * k], m, n, k);
                    db[gi * n * k..(gi + 1) * n * k].copy_from_slice(&block_b);
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Add { a, b } => {
                self.accumulate(a, &d_out);
                self.accumulate(b, &d_out);
            }
            Op::AddBias { x, bias } => {
                self.accumulate(x, &d_out);
                let c = self.shape(bias)[0];
                let mut db = vec![T::zero(); c];
                for (i, &d) in d_out.iter().enumerate() {
                    db[i % c] += d;
                }
                self.accumulate(bias, &db);
            }
            Op::Sub { a, b } => {
                self.accumulate(a, &d_out);
                let neg: Vec<T> = d_out.iter().map(|&d| -d).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<T> = d_out.iter().zip(self.data(b)).map(|(&d, &v)| d * v).collect();
                let db: Vec<T> = d_out.iter().zip(self.data(a)).map(|(&d, &v)| d * v).collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Scale { x, factor } => {
                let dx: Vec<T> = d_out.iter().map(|&d| d * factor).collect();
                self.accumulate(x, &dx);
            }
            Op::Tanh { x } => {
                let y = self.nodes[i].value.data();
                let dx: Vec<T> = d_out
                    .iter()
                    .zip(y)
                    .map(|(&d, &y)| d * (T::one() - y * y))
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[i].value.data();
                let dx: Vec<T> = d_out
                    .iter()
                    .zip(y)
                    .map(|(&d, &y)| d * y * (T::one() - y))
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<T> = d_out
                    .iter()
                    .zip(self.data(x))
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Softmax { x, axis } => {
                let shape = self.nodes[i].value.shape().to_vec();
                let y = self.nodes[i].value.data();
                let n = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + ii;
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot += d_out[idx(j)] * y[idx(j)];
                        }
                        for j in 0..n {
                            dx[idx(j)] = y[idx(j)] * (d_out[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::MaskedSoftmax { x, mask } => {
                let y = self.nodes[i].value.data();
                let cols = *self.nodes[i].value.shape().last().unwrap();
                let rows = y.len() / cols;
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let base = r * cols;
                    let mut dot = T::zero();
                    for j in 0..cols {
                        if mask[base + j] {
                            dot += d_out[base + j] * y[base + j];
                        }
                    }
                    for j in 0..cols {
                        if mask[base + j] {
                            dx[base + j] = y[base + j] * (d_out[base + j] - dot);
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::CrossEntropy { logits, targets, mask } => {
                let seed = d_out[0];
                let shape = self.shape(logits).to_vec();
                let (rows, vocab) = (shape[0], shape[1]);
                let n_valid = mask.iter().filter(|&&m| m).count();
                let scale = seed / T::from_f64(n_valid as f64);
                let src = self.data(logits);
                let mut dx = vec![T::zero(); rows * vocab];
                for r in 0..rows {
                    if !mask[r] {
                        continue;
                    }
                    let row = &src[r * vocab..(r + 1) * vocab];
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for j in 0..vocab {
                        let e = (row[j] - max).exp();
                        dx[r * vocab + j] = e;
                        sum += e;
                    }
                    for j in 0..vocab {
                        dx[r * vocab + j] /= sum;
                    }
                    dx[r * vocab + targets[r] as usize] -= T::one();
                    for j in 0..vocab {
                        dx[r * vocab + j] *= scale;
                    }
                }
                self.accumulate(logits, &dx);
            }
            Op::Embedding { table, ids } => {
                let (vocab, dim) = (self.shape(table)[0], self.shape(table)[1]);
                let mut dt = vec![T::zero(); vocab * dim];
                for (row, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    for j in 0..dim {
                        dt[id * dim + j] += d_out[row * dim + j];
                    }
                }
                self.accumulate(table, &dt);
            }
            Op::ConcatCols { a, b } => {
                let (r, ca) = (self.shape(a)[0], self.shape(a)[1]);
                let cb = self.shape(b)[1];
                let mut da = vec![T::zero(); r * ca];
                let mut db = vec![T::zero(); r * cb];
                for rr in 0..r {
                    da[rr * ca..(rr + 1) * ca]
                        .copy_from_slice(&d_out[rr * (ca + cb)..rr * (ca + cb) + ca]);
                    db[rr * cb..(rr + 1) * cb]
                        .copy_from_slice(&d_out[rr * (ca + cb) + ca..(rr + 1) * (ca + cb)]);
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::SliceCols { x, from, to } => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                let w = to - from;
                let mut dx = vec![T::zero(); r * c];
                for rr in 0..r {
                    dx[rr * c + from..rr * c + to].copy_from_slice(&d_out[rr * w..(rr + 1) * w]);
                }
                self.accumulate(x, &dx);
            }
            Op::Transpose { x } => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                // d_out is [c, r]; transpose it back to [r, c].
                let mut dx = vec![T::zero(); r * c];
                for jj in 0..c {
                    for ii in 0..r {
                        dx[ii * c + jj] = d_out[jj * r + ii];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Reshape { x } => {
                self.accumulate(x, &d_out);
            }
            Op::RepeatRows { x, k } => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                let mut dx = vec![T::zero(); r * c];
                for ii in 0..r {
                    for j in 0..k {
                        let src = (ii * k + j) * c;
                        for cc in 0..c {
                            dx[ii * c + cc] += d_out[src + cc];
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::GatherRows { x, indices } => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                let mut dx = vec![T::zero(); r * c];
                for (row, &idx) in indices.iter().enumerate() {
                    for cc in 0..c {
                        dx[idx * c + cc] += d_out[row * c + cc];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::StackRows { xs } => {
                let mut offset = 0;
                for x in xs {
                    let n = self.nodes[x.0].value.numel();
                    let slice = d_out[offset..offset + n].to_vec();
                    self.accumulate(x, &slice);
                    offset += n;
                }
            }
            Op::SplitHeads { x, batch, time, heads } => {
                let hd = self.nodes[i].value.shape()[2];
                let mut dx = vec![T::zero(); d_out.len()];
                for b in 0..batch {
                    for t in 0..time {
                        for h in 0..heads {
                            let fwd_src = (b * time + t) * heads * hd + h * hd;
                            let fwd_dst = ((b * heads + h) * time + t) * hd;
                            dx[fwd_src..fwd_src + hd]
                                .copy_from_slice(&d_out[fwd_dst..fwd_dst + hd]);
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::MergeHeads { x, batch, time, heads } => {
                let hd = self.shape(x)[2];
                let mut dx = vec![T::zero(); d_out.len()];
                for b in 0..batch {
                    for t in 0..time {
                        for h in 0..heads {
                            let fwd_src = ((b * heads + h) * time + t) * hd;
                            let fwd_dst = (b * time + t) * heads * hd + h * hd;
                            dx[fwd_src..fwd_src + hd]
                                .copy_from_slice(&d_out[fwd_dst..fwd_dst + hd]);
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let c = self.shape(gamma)[0];
                let rows = normalized.len() / c;
                let g = self.data(gamma).to_vec();
                let denom = T::from_f64(c as f64);
                let mut dx = vec![T::zero(); normalized.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for r in 0..rows {
                    let base = r * c;
                    let mut mean_gd = T::zero();
                    let mut mean_gdx = T::zero();
                    for j in 0..c {
                        let gd = d_out[base + j] * g[j];
                        mean_gd += gd;
                        mean_gdx += gd * normalized[base + j];
                        dgamma[j] += d_out[base + j] * normalized[base + j];
                        dbeta[j] += d_out[base + j];
                    }
                    mean_gd /= denom;
                    mean_gdx /= denom;
                    for j in 0..c {
                        let gd = d_out[base + j] * g[j];
                        dx[base + j] =
                            (gd - mean_gd - normalized[base + j] * mean_gdx) * inv_std[r];
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }
            Op::Dropout { x, keep, scale } => {
                let dx: Vec<T> = d_out
                    .iter()
                    .zip(&keep)
                    .map(|(&d, &k)| if k { d * scale } else { T::zero() })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Sum { x } => {
                let n = self.nodes[x.0].value.numel();
                let dx = vec![d_out[0]; n];
                self.accumulate(x, &dx);
            }
        }
        Ok(())
    }
}

fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // Split on sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// a: [m,k], b: [n,k]; returns a @ b^T as [m,n].
fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// a: [p,m], b: [p,n]; returns a^T @ b as [m,n].
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], p: usize, m: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for q in 0..p {
        let arow = &a[q * m..(q + 1) * m];
        let brow = &b[q * n..(q + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}
