//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Leaves either borrow their
//! values (frozen parameters, shared across many tapes without copying) or own
//! them. A node requires a gradient iff it is a trainable leaf or depends on
//! one; backward only ever writes gradient buffers for such nodes, so frozen
//! leaves never receive a gradient slot.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Point-wise nonlinearities usable as the adapter activation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    Gelu,
    Tanh,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    /// Stable numeric id used in checkpoint headers.
    pub fn id(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Gelu => 1,
            Activation::Tanh => 2,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        match id {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Gelu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Tanh => "tanh",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    // a[m×k] · b[n×k]ᵀ
    MatMulNt { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Transpose { x: NodeId, rows: usize, cols: usize },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    AddRow { x: NodeId, b: NodeId, cols: usize },
    Act { x: NodeId, act: Activation },
    Softmax { x: NodeId, outer: usize, len: usize, inner: usize },
    MaskedSoftmax { x: NodeId, cols: usize },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, cols: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<f64>, cols: usize },
    GatherRows { table: NodeId, ids: Vec<usize>, cols: usize },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<(NodeId, usize)>, rows: usize, cols: usize },
    SliceCols { x: NodeId, start: usize, len: usize, cols: usize },
    SliceRows { x: NodeId, start: usize, len: usize, cols: usize },
    Sum { x: NodeId },
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

/// Ordered record of operations; inputs always precede the nodes using them.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::invalid(op, format!("expected a matrix, got shape {shape:?}"))),
    }
}

/// Rows/cols of any tensor viewed as a matrix over its last axis.
fn row_view(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let rows = shape.iter().product::<usize>() / cols.max(1);
    (rows, cols)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Vec<f64>,
        shape: Vec<usize>,
        op: Op,
        requires_grad: bool,
    ) -> Result<NodeId> {
        if cfg!(debug_assertions) && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        Ok(self.push_unchecked(Cow::Owned(value), shape, op, requires_grad, None))
    }

    fn push_unchecked(
        &mut self,
        value: Cow<'a, [f64]>,
        shape: Vec<usize>,
        op: Op,
        requires_grad: bool,
        name: Option<String>,
    ) -> NodeId {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
            name,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that takes part in the computation but never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push_unchecked(Cow::Owned(t.into_data()), shape, Op::Leaf, false, None)
    }

    /// Owned leaf; `requires_grad` is taken from the tensor.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        let rg = t.requires_grad;
        self.push_unchecked(Cow::Owned(t.into_data()), shape, Op::Leaf, rg, None)
    }

    /// Borrowed, named leaf. Named trainable leaves are reported by
    /// [`Tape::named_grads`] after backward.
    pub fn param(&mut self, name: &str, t: &'a Tensor, trainable: bool) -> NodeId {
        self.push_unchecked(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Leaf,
            trainable,
            Some(name.to_string()),
        )
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("tape node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Gradients of named trainable leaves, in tape order.
    pub fn named_grads(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.nodes.iter().zip(&self.grads).filter_map(|(n, g)| match (&n.name, g) {
            (Some(name), Some(g)) if n.requires_grad => Some((name.as_str(), g.as_slice())),
            _ => None,
        })
    }

    /// Drops all gradients so backward may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = matrix_dims("matmul", self.shape(a))?;
        let (k2, n) = matrix_dims("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        linalg::gemm_nn(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        self.push("matmul", out, vec![m, n], Op::MatMul { a, b, m, k, n }, rg)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = matrix_dims("matmul_nt", self.shape(a))?;
        let (n, k2) = matrix_dims("matmul_nt", self.shape(b))?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        linalg::gemm_nt(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        self.push("matmul_nt", out, vec![m, n], Op::MatMulNt { a, b, m, k, n }, rg)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = matrix_dims("transpose", self.shape(x))?;
        let out = linalg::transpose(self.value(x), rows, cols);
        let rg = self.rg(&[x]);
        self.push("transpose", out, vec![cols, rows], Op::Transpose { x, rows, cols }, rg)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push("add", out, shape, Op::Add { a, b }, rg)
    }

    /// Sums a non-empty list of same-shape nodes left to right.
    pub fn add_all(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = ids
            .split_first()
            .ok_or_else(|| Error::invalid("add_all", "empty operand list"))?;
        rest.iter().try_fold(first, |acc, &id| self.add(acc, id))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push("mul", out, shape, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push("scale", out, shape, Op::Scale { x, c }, rg)
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, cols) = row_view(self.shape(x));
        if self.shape(b) != [cols] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b);
        let out: Vec<f64> = self
            .value(x)
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(bias).map(|(v, bb)| v + bb))
            .collect();
        let rg = self.rg(&[x, b]);
        let shape = self.shape(x).to_vec();
        self.push("add_row", out, shape, Op::AddRow { x, b, cols }, rg)
    }

    pub fn activation(&mut self, x: NodeId, act: Activation) -> Result<NodeId> {
        let out: Vec<f64> = self.value(x).iter().map(|&v| act.apply(v)).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(act.name(), out, shape, Op::Act { x, act }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Gelu)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Tanh)
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push("softmax", out, shape, Op::Softmax { x, outer, len, inner }, rg)
    }

    /// Row-wise softmax where entries with `keep == false` get probability
    /// exactly zero. Every row must keep at least one entry.
    pub fn masked_softmax(&mut self, x: NodeId, keep: &[bool]) -> Result<NodeId> {
        let (rows, cols) = matrix_dims("masked_softmax", self.shape(x))?;
        if keep.len() != rows * cols {
            return Err(Error::invalid(
                "masked_softmax",
                format!("mask has {} entries for a {rows}×{cols} input", keep.len()),
            ));
        }
        let src = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mask = &keep[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::invalid("masked_softmax", format!("row {r} is fully masked")));
            }
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for ((d, &v), &k) in dst.iter_mut().zip(row).zip(mask) {
                if k {
                    *d = (v - max).exp();
                    sum += *d;
                }
            }
            dst.iter_mut().for_each(|d| *d /= sum);
        }
        let rg = self.rg(&[x]);
        self.push("masked_softmax", out, vec![rows, cols], Op::MaskedSoftmax { x, cols }, rg)
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias` (both of length = last-axis extent).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (rows, cols) = row_view(self.shape(x));
        for p in [gain, bias] {
            if self.shape(p) != [cols] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let n = cols as f64;
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            out,
            shape,
            Op::LayerNorm { x, gain, bias, cols, xhat, rstd },
            rg,
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (batch×vocab). Returns a one-element node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (rows, cols) = matrix_dims("cross_entropy", self.shape(logits))?;
        if targets.len() != rows {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("target id {t} out of range for vocab {cols}"),
            ));
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[t];
            for c in 0..cols {
                probs[r * cols + c] = (row[c] - lse).exp();
            }
        }
        loss /= rows as f64;
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            vec![loss],
            vec![1],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, cols },
            rg,
        )
    }

    /// Selects rows of a matrix by index (embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, cols) = matrix_dims("gather_rows", self.shape(table))?;
        if ids.is_empty() {
            return Err(Error::invalid("gather_rows", "no indices"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(
                "gather_rows",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        let src = self.value(table);
        let out: Vec<f64> = ids.iter().flat_map(|&i| src[i * cols..(i + 1) * cols].iter().copied()).collect();
        let rg = self.rg(&[table]);
        self.push(
            "gather_rows",
            out,
            vec![ids.len(), cols],
            Op::GatherRows { table, ids: ids.to_vec(), cols },
            rg,
        )
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "no operands"))?;
        let (_, cols) = matrix_dims("concat_rows", self.shape(first))?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = matrix_dims("concat_rows", self.shape(p))?;
            if c != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
        }
        let out: Vec<f64> = parts.iter().flat_map(|&p| self.value(p).iter().copied()).collect();
        let rg = self.rg(parts);
        self.push("concat_rows", out, vec![rows, cols], Op::ConcatRows { parts: parts.to_vec() }, rg)
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols", "no operands"))?;
        let (rows, _) = matrix_dims("concat_cols", self.shape(first))?;
        let mut spec = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims("concat_cols", self.shape(p))?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            spec.push((p, c));
        }
        let cols: usize = spec.iter().map(|(_, c)| c).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &(p, c) in &spec {
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let rg = self.rg(parts);
        self.push(
            "concat_cols",
            out,
            vec![rows, cols],
            Op::ConcatCols { parts: spec, rows, cols },
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = matrix_dims("slice_cols", self.shape(x))?;
        if len == 0 || start + len > cols {
            return Err(Error::invalid(
                "slice_cols",
                format!("columns {start}..{} out of range for {cols}", start + len),
            ));
        }
        let src = self.value(x);
        let out: Vec<f64> = (0..rows)
            .flat_map(|r| src[r * cols + start..r * cols + start + len].iter().copied())
            .collect();
        let rg = self.rg(&[x]);
        self.push("slice_cols", out, vec![rows, len], Op::SliceCols { x, start, len, cols }, rg)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = matrix_dims("slice_rows", self.shape(x))?;
        if len == 0 || start + len > rows {
            return Err(Error::invalid(
                "slice_rows",
                format!("rows {start}..{} out of range for {rows}", start + len),
            ));
        }
        let out = self.value(x)[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(&[x]);
        self.push("slice_rows", out, vec![len, cols], Op::SliceRows { x, start, len, cols }, rg)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", vec![s], vec![1], Op::Sum { x }, rg)
    }

    /// Runs reverse accumulation from a one-element `loss` node.
    ///
    /// Calling this twice without [`Tape::reset_grads`] is an error so that
    /// gradients are never silently accumulated twice.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            ));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            // Intermediate gradients stay inspectable after backward.
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let wants = |id: NodeId| nodes[id.0].requires_grad;
        let val = |id: NodeId| -> &[f64] { &nodes[id.0].value };
        let out = &nodes[i].value;

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    linalg::gemm_nt(g, val(b), m, n, k, slot(grads, a, m * k));
                }
                if wants(b) {
                    linalg::gemm_tn(val(a), g, m, k, n, slot(grads, b, k * n));
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                if wants(a) {
                    linalg::gemm_nn(g, val(b), m, n, k, slot(grads, a, m * k));
                }
                if wants(b) {
                    linalg::gemm_tn(g, val(a), m, n, k, slot(grads, b, n * k));
                }
            }
            &Op::Transpose { x, rows, cols } => {
                let gt = linalg::transpose(g, cols, rows);
                axpy(slot(grads, x, rows * cols), &gt, 1.0);
            }
            &Op::Add { a, b } => {
                for p in [a, b] {
                    if wants(p) {
                        axpy(slot(grads, p, g.len()), g, 1.0);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if wants(a) {
                    let vb = val(b);
                    let ga = slot(grads, a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * vb[j];
                    }
                }
                if wants(b) {
                    let va = val(a);
                    let gb = slot(grads, b, g.len());
                    for j in 0..g.len() {
                        gb[j] += g[j] * va[j];
                    }
                }
            }
            &Op::Scale { x, c } => axpy(slot(grads, x, g.len()), g, c),
            &Op::AddRow { x, b, cols } => {
                if wants(x) {
                    axpy(slot(grads, x, g.len()), g, 1.0);
                }
                if wants(b) {
                    let gb = slot(grads, b, cols);
                    for row in g.chunks_exact(cols) {
                        axpy(gb, row, 1.0);
                    }
                }
            }
            &Op::Act { x, act } => {
                let vx = val(x);
                let gx = slot(grads, x, g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * act.derivative(vx[j]);
                }
            }
            &Op::Softmax { x, outer, len, inner } => {
                let gx = slot(grads, x, g.len());
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + ii;
                        let dot: f64 = (0..len).map(|j| out[idx(j)] * g[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
            &Op::MaskedSoftmax { x, cols } => {
                let gx = slot(grads, x, g.len());
                for ((y, gr), dx) in out
                    .chunks_exact(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(gx.chunks_exact_mut(cols))
                {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[j] += y[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, cols, xhat, rstd } => {
                let (x, gain, bias, cols) = (*x, *gain, *bias, *cols);
                let gv = val(gain);
                let n = cols as f64;
                if wants(x) {
                    let gx = slot(grads, x, g.len());
                    let mut dxhat = vec![0.0; cols];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gv[c];
                            sum_d += dxhat[c];
                            sum_dx += dxhat[c] * xh[c];
                        }
                        let dst = &mut gx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dst[c] += rs / n * (n * dxhat[c] - sum_d - xh[c] * sum_dx);
                        }
                    }
                }
                if wants(gain) {
                    let gg = slot(grads, gain, cols);
                    for (gr, xh) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for c in 0..cols {
                            gg[c] += gr[c] * xh[c];
                        }
                    }
                }
                if wants(bias) {
                    let gb = slot(grads, bias, cols);
                    for gr in g.chunks_exact(cols) {
                        axpy(gb, gr, 1.0);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, cols } => {
                let cols = *cols;
                let scale = g[0] / targets.len() as f64;
                let gl = slot(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    for c in 0..cols {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        gl[r * cols + c] += scale * (probs[r * cols + c] - onehot);
                    }
                }
            }
            Op::GatherRows { table, ids, cols } => {
                let cols = *cols;
                let rows = nodes[table.0].shape[0];
                let gt = slot(grads, *table, rows * cols);
                for (r, &id) in ids.iter().enumerate() {
                    axpy(&mut gt[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols], 1.0);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if wants(p) {
                        axpy(slot(grads, p, len), &g[offset..offset + len], 1.0);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols { parts, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let mut offset = 0;
                for &(p, c) in parts {
                    if wants(p) {
                        let gp = slot(grads, p, rows * c);
                        for r in 0..rows {
                            axpy(
                                &mut gp[r * c..(r + 1) * c],
                                &g[r * cols + offset..r * cols + offset + c],
                                1.0,
                            );
                        }
                    }
                    offset += c;
                }
            }
            &Op::SliceCols { x, start, len, cols } => {
                let rows = g.len() / len;
                let gx = slot(grads, x, rows * cols);
                for r in 0..rows {
                    axpy(
                        &mut gx[r * cols + start..r * cols + start + len],
                        &g[r * len..(r + 1) * len],
                        1.0,
                    );
                }
            }
            &Op::SliceRows { x, start, len, cols } => {
                let total = nodes[x.0].value.len();
                let gx = slot(grads, x, total);
                axpy(&mut gx[start * cols..(start + len) * cols], g, 1.0);
            }
            &Op::Sum { x } => {
                let len = nodes[x.0].value.len();
                let gx = slot(grads, x, len);
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}
