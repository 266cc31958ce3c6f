//! Define-by-run computation graph.
//!
//! Each op evaluates eagerly when it is recorded, so the value of any node
//! is available as soon as the node exists. The reverse sweep builds the
//! adjoints out of the same ops, which makes gradients themselves
//! differentiable: differentiating a graph that contains gradient nodes
//! yields exact second derivatives.
//!
//! Conventions at kinks: `relu'(0) = 0`, `|x|'(0) = 0`, `leaky_relu'(0)` is the
//! negative-side slope, and the pairwise distance has zero gradient wherever
//! two rows coincide.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{AdError, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

/// Linear scatter between flat buffers: `out[dst[k]] += in[src[k]]`.
///
/// Covers gathering and scattering of individual entries; its adjoint is the
/// same map with `src` and `dst` swapped.
#[derive(Debug, Clone)]
pub struct SparseMap {
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
    in_shape: [usize; 2],
    out_shape: [usize; 2],
}

impl SparseMap {
    pub fn new(
        src: Vec<usize>,
        dst: Vec<usize>,
        in_shape: [usize; 2],
        out_shape: [usize; 2],
    ) -> Result<Self> {
        if src.len() != dst.len() {
            return Err(AdError::Invalid(format!(
                "sparse map with {} sources and {} destinations",
                src.len(),
                dst.len()
            )));
        }
        let in_len = in_shape[0] * in_shape[1];
        let out_len = out_shape[0] * out_shape[1];
        if let Some(&bad) = src.iter().find(|&&s| s >= in_len) {
            return Err(AdError::IndexOutOfRange {
                op: "sparse_map",
                index: bad,
                len: in_len,
            });
        }
        if let Some(&bad) = dst.iter().find(|&&d| d >= out_len) {
            return Err(AdError::IndexOutOfRange {
                op: "sparse_map",
                index: bad,
                len: out_len,
            });
        }
        Ok(Self {
            src: src.into(),
            dst: dst.into(),
            in_shape,
            out_shape,
        })
    }

    /// Scatter a `k x 1` column into the given `(row, col)` cells of an
    /// `out_shape` matrix. Entry `k` of the column lands on `cells[k]`.
    pub fn scatter_cells(cells: &[(usize, usize)], out_shape: [usize; 2]) -> Result<Self> {
        let src = (0..cells.len()).collect();
        let dst = cells.iter().map(|&(i, j)| i * out_shape[1] + j).collect();
        Self::new(src, dst, [cells.len(), 1], out_shape)
    }

    pub fn transpose(&self) -> Self {
        Self {
            src: self.dst.clone(),
            dst: self.src.clone(),
            in_shape: self.out_shape,
            out_shape: self.in_shape,
        }
    }

    fn apply(&self, input: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(self.out_shape[0], self.out_shape[1]);
        let src = input.data();
        let dst = out.data_mut();
        for (&s, &d) in self.src.iter().zip(self.dst.iter()) {
            dst[d] += src[s];
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Abs(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Recip(NodeId),
    MaskedSoftmax(NodeId),
    ConcatRows(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize },
    PadRows { a: NodeId, start: usize },
    PadCols { a: NodeId, start: usize },
    Transpose(NodeId),
    PairwiseDist(NodeId),
    FrobNorm(NodeId),
    GatherRows(NodeId, Arc<[usize]>),
    ScatterRows(NodeId, Arc<[usize]>),
    Sparse(NodeId, SparseMap),
    RowMax(NodeId, SparseMap),
    SumRows(NodeId),
    BroadcastRows(NodeId),
    SumCols(NodeId),
    BroadcastCols(NodeId),
    SumAll(NodeId),
    BroadcastScalar(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Abs(_) => "abs",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Recip(_) => "recip",
            Op::MaskedSoftmax(_) => "masked_softmax",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadRows { .. } => "pad_rows",
            Op::PadCols { .. } => "pad_cols",
            Op::Transpose(_) => "transpose",
            Op::PairwiseDist(_) => "pairwise_dist",
            Op::FrobNorm(_) => "frob_norm",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::Sparse(..) => "sparse_map",
            Op::RowMax(..) => "row_max",
            Op::SumRows(_) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::SumCols(_) => "sum_cols",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::SumAll(_) => "sum_all",
            Op::BroadcastScalar(..) => "broadcast_scalar",
        }
    }

    fn inputs(&self) -> [Option<NodeId>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            MatMul { a, b, .. } => [Some(a), Some(b)],
            Add(a, b) | Sub(a, b) | Mul(a, b) | ConcatRows(a, b) | ConcatCols(a, b) => {
                [Some(a), Some(b)]
            }
            Scale(a, _)
            | Abs(a)
            | Relu(a)
            | LeakyRelu(a, _)
            | Tanh(a)
            | Sigmoid(a)
            | Exp(a)
            | Recip(a)
            | Transpose(a)
            | PairwiseDist(a)
            | FrobNorm(a)
            | SumRows(a)
            | BroadcastRows(a)
            | SumCols(a)
            | BroadcastCols(a)
            | SumAll(a)
            | BroadcastScalar(a)
            | SliceRows { a, .. }
            | SliceCols { a, .. }
            | PadRows { a, .. }
            | PadCols { a, .. } => [Some(a), None],
            MaskedSoftmax(a) | GatherRows(a, _) | ScatterRows(a, _) | Sparse(a, _) | RowMax(a, _) => {
                [Some(a), None]
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every named parameter of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Gradient tensors in parameter registration order.
    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }
}

/// A single-threaded computation graph over [`Tensor`] values.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let id = self.leaf(value, true);
        self.params.push((name.into(), id));
        id
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn parameters(&self) -> &[(String, NodeId)] {
        &self.params
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Value of `root`. Ops evaluate as they are recorded, so this only
    /// reads the cached result.
    pub fn forward(&self, root: NodeId) -> &Tensor {
        self.value(root)
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        if !value.is_finite() {
            return Err(AdError::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        let requires_grad = op
            .inputs()
            .iter()
            .flatten()
            .any(|n| self.nodes[n.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(id)
    }

    fn shape(&self, id: NodeId) -> [usize; 2] {
        self.nodes[id.0].value.shape()
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> Result<NodeId> {
        let v = Tensor::matmul_t(self.value(a), ta, self.value(b), tb)?;
        self.push(Op::MatMul { a, b, ta, tb }, v)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    // ---- elementwise binary ----

    fn broadcast_binary(
        &self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return Ok(ta.zip_map(tb, f));
        }
        if tb.rows() == 1 && tb.cols() == ta.cols() {
            let c = ta.cols();
            let bias = tb.data();
            let mut out = ta.clone();
            for (k, v) in out.data_mut().iter_mut().enumerate() {
                *v = f(*v, bias[k % c]);
            }
            return Ok(out);
        }
        Err(AdError::ShapeMismatch {
            op: name,
            lhs: ta.shape(),
            rhs: tb.shape(),
        })
    }

    /// `a + b`; `b` may also be a `1 x C` row added to every row of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        self.push(Op::Add(a, b), v)
    }

    /// `a - b`, with the same row broadcast as [`Graph::add`].
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        self.push(Op::Sub(a, b), v)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(AdError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a),
                rhs: self.shape(b),
            });
        }
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    // ---- elementwise unary ----

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), v)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    /// Elementwise `1/x`, defined as 0 where `x == 0`.
    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x == 0.0 { 0.0 } else { 1.0 / x });
        self.push(Op::Recip(a), v)
    }

    /// Row-wise softmax over the entries where `mask` is true. Excluded
    /// entries get probability exactly 0; a fully excluded row is all zeros.
    pub fn masked_softmax(&mut self, a: NodeId, mask: Arc<[bool]>) -> Result<NodeId> {
        let t = self.value(a);
        if mask.len() != t.len() {
            return Err(AdError::ShapeMismatch {
                op: "masked_softmax",
                lhs: t.shape(),
                rhs: [mask.len(), 1],
            });
        }
        let [r, c] = t.shape();
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = t.row(i);
            let m = &mask[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out.data_mut()[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for j in 0..c {
                if m[j] {
                    o[j] = (row[j] - max).exp();
                    sum += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        self.push(Op::MaskedSoftmax(a), out)
    }

    // ---- structure ----

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[1] {
            return Err(AdError::ShapeMismatch {
                op: "concat_rows",
                lhs: sa,
                rhs: sb,
            });
        }
        let v = self.value(a).vstack(self.value(b))?;
        self.push(Op::ConcatRows(a, b), v)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[0] != sb[0] {
            return Err(AdError::ShapeMismatch {
                op: "concat_cols",
                lhs: sa,
                rhs: sb,
            });
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let v = Tensor::from_fn(sa[0], sa[1] + sb[1], |i, j| {
            if j < sa[1] {
                ta.get(i, j)
            } else {
                tb.get(i, j - sa[1])
            }
        });
        self.push(Op::ConcatCols(a, b), v)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if start + len > s[0] {
            return Err(AdError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                len: s[0],
            });
        }
        let c = s[1];
        let v = Tensor::new(len, c, self.value(a).data()[start * c..(start + len) * c].to_vec())?;
        self.push(Op::SliceRows { a, start }, v)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if start + len > s[1] {
            return Err(AdError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                len: s[1],
            });
        }
        let t = self.value(a);
        let v = Tensor::from_fn(s[0], len, |i, j| t.get(i, start + j));
        self.push(Op::SliceCols { a, start }, v)
    }

    /// Embeds `a` at row offset `start` of a zero matrix with `total` rows.
    pub fn pad_rows(&mut self, a: NodeId, start: usize, total: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if start + s[0] > total {
            return Err(AdError::IndexOutOfRange {
                op: "pad_rows",
                index: start + s[0],
                len: total,
            });
        }
        let mut v = Tensor::zeros(total, s[1]);
        v.data_mut()[start * s[1]..(start + s[0]) * s[1]].copy_from_slice(self.value(a).data());
        self.push(Op::PadRows { a, start }, v)
    }

    /// Embeds `a` at column offset `start` of a zero matrix with `total` columns.
    pub fn pad_cols(&mut self, a: NodeId, start: usize, total: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if start + s[1] > total {
            return Err(AdError::IndexOutOfRange {
                op: "pad_cols",
                index: start + s[1],
                len: total,
            });
        }
        let t = self.value(a);
        let v = Tensor::from_fn(s[0], total, |i, j| {
            if j >= start && j < start + s[1] {
                t.get(i, j - start)
            } else {
                0.0
            }
        });
        self.push(Op::PadCols { a, start }, v)
    }

    /// Row subset selection; indices may repeat.
    pub fn gather_rows(&mut self, a: NodeId, idx: Arc<[usize]>) -> Result<NodeId> {
        let n = self.shape(a)[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(AdError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: n,
            });
        }
        let v = self.value(a).select_rows(&idx);
        self.push(Op::GatherRows(a, idx), v)
    }

    /// Adds row `k` of `a` into row `idx[k]` of an `n`-row zero matrix.
    pub fn scatter_rows(&mut self, a: NodeId, idx: Arc<[usize]>, n: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if idx.len() != s[0] {
            return Err(AdError::ShapeMismatch {
                op: "scatter_rows",
                lhs: s,
                rhs: [idx.len(), s[1]],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(AdError::IndexOutOfRange {
                op: "scatter_rows",
                index: bad,
                len: n,
            });
        }
        let c = s[1];
        let mut v = Tensor::zeros(n, c);
        let src = self.value(a).data();
        for (k, &i) in idx.iter().enumerate() {
            let dst = &mut v.data_mut()[i * c..(i + 1) * c];
            for (d, s) in dst.iter_mut().zip(&src[k * c..(k + 1) * c]) {
                *d += s;
            }
        }
        self.push(Op::ScatterRows(a, idx), v)
    }

    pub fn sparse_map(&mut self, a: NodeId, map: SparseMap) -> Result<NodeId> {
        if self.shape(a) != map.in_shape {
            return Err(AdError::ShapeMismatch {
                op: "sparse_map",
                lhs: self.shape(a),
                rhs: map.in_shape,
            });
        }
        let v = map.apply(self.value(a));
        self.push(Op::Sparse(a, map), v)
    }

    /// Maximum of each row as an `N x 1` column. Gradient flows to the first
    /// maximal entry of each row.
    pub fn row_max(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let [r, c] = t.shape();
        if c == 0 {
            return Err(AdError::Invalid("row_max over zero columns".into()));
        }
        let mut vals = Vec::with_capacity(r);
        let mut dst = Vec::with_capacity(r);
        for i in 0..r {
            let row = t.row(i);
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            vals.push(row[best]);
            dst.push(i * c + best);
        }
        let adjoint = SparseMap::new((0..r).collect(), dst, [r, 1], [r, c])?;
        let v = Tensor::new(r, 1, vals)?;
        self.push(Op::RowMax(a, adjoint), v)
    }

    /// Column sums as a `1 x C` row.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let [r, c] = t.shape();
        let mut v = Tensor::zeros(1, c);
        for i in 0..r {
            for (o, x) in v.data_mut().iter_mut().zip(t.row(i)) {
                *o += x;
            }
        }
        self.push(Op::SumRows(a), v)
    }

    /// Repeats a `1 x C` row `n` times.
    pub fn broadcast_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if s[0] != 1 {
            return Err(AdError::ShapeMismatch {
                op: "broadcast_rows",
                lhs: s,
                rhs: [1, s[1]],
            });
        }
        let row = self.value(a).data().to_vec();
        let v = Tensor::from_fn(n, s[1], |_, j| row[j]);
        self.push(Op::BroadcastRows(a), v)
    }

    /// Row sums as an `N x 1` column.
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let r = t.rows();
        let v = Tensor::new(r, 1, (0..r).map(|i| t.row(i).iter().sum()).collect())?;
        self.push(Op::SumCols(a), v)
    }

    /// Repeats an `N x 1` column `c` times.
    pub fn broadcast_cols(&mut self, a: NodeId, c: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if s[1] != 1 {
            return Err(AdError::ShapeMismatch {
                op: "broadcast_cols",
                lhs: s,
                rhs: [s[0], 1],
            });
        }
        let t = self.value(a);
        let v = Tensor::from_fn(s[0], c, |i, _| t.get(i, 0));
        self.push(Op::BroadcastCols(a), v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::SumAll(a), v)
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, shape: [usize; 2]) -> Result<NodeId> {
        let s = self.shape(a);
        if s != [1, 1] {
            return Err(AdError::ShapeMismatch {
                op: "broadcast_scalar",
                lhs: s,
                rhs: [1, 1],
            });
        }
        let v = Tensor::full(shape[0], shape[1], self.value(a).item());
        self.push(Op::BroadcastScalar(a), v)
    }

    // ---- domain ops ----

    /// Euclidean distances between all pairs of rows, `N x N`, symmetric with
    /// a zero diagonal.
    pub fn pairwise_dist(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let n = t.rows();
        let mut v = Tensor::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let d = t
                    .row(i)
                    .iter()
                    .zip(t.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                v.set(i, j, d);
                v.set(j, i, d);
            }
        }
        self.push(Op::PairwiseDist(a), v)
    }

    /// Frobenius norm `||a||_F` as a `1 x 1` scalar.
    pub fn frob_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).frobenius_norm());
        self.push(Op::FrobNorm(a), v)
    }

    // ---- reverse sweep ----

    /// Gradients of the scalar `root` with respect to every registered
    /// parameter. Parameters not connected to `root` get zero tensors.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        let params: Vec<(String, NodeId)> = self.params.clone();
        let ids: Vec<NodeId> = params.iter().map(|(_, id)| *id).collect();
        let grads = self.grad(root, &ids)?;
        Ok(Gradients {
            names: params.into_iter().map(|(n, _)| n).collect(),
            tensors: grads.into_iter().map(|g| self.value(g).clone()).collect(),
        })
    }

    /// Gradient nodes of the scalar `root` with respect to `wrt`.
    ///
    /// The returned nodes live on this graph and can be used in further
    /// computation, including another call to `grad`.
    pub fn grad(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let shape = self.shape(root);
        if shape != [1, 1] {
            return Err(AdError::NonScalarRoot { shape });
        }
        let end = root.0 + 1;
        let mut adjoint: Vec<Option<NodeId>> = vec![None; end];
        if self.nodes[root.0].requires_grad {
            adjoint[root.0] = Some(self.constant(Tensor::scalar(1.0)));
        }
        for i in (0..end).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            for (input, contribution) in self.vjp(i, g)? {
                adjoint[input.0] = Some(match adjoint[input.0] {
                    None => contribution,
                    Some(prev) => self.add(prev, contribution)?,
                });
            }
        }
        wrt.iter()
            .map(|&w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let [r, c] = self.shape(w);
                    Ok(self.constant(Tensor::zeros(r, c)))
                }
            })
            .collect()
    }

    fn mask_constant(&mut self, a: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let m = self.value(a).map(f);
        self.constant(m)
    }

    /// Vector-Jacobian product of node `id` against upstream gradient `g`,
    /// for each input that requires grad.
    fn vjp(&mut self, id: usize, g: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        let op = self.nodes[id].op.clone();
        let y = NodeId(id);
        let wants = |graph: &Self, n: NodeId| graph.nodes[n.0].requires_grad;
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                if wants(self, a) {
                    let ga = match (ta, tb) {
                        (false, false) => self.matmul_t(g, false, b, true)?,
                        (false, true) => self.matmul_t(g, false, b, false)?,
                        (true, false) => self.matmul_t(b, false, g, true)?,
                        (true, true) => self.matmul_t(b, true, g, true)?,
                    };
                    out.push((a, ga));
                }
                if wants(self, b) {
                    let gb = match (ta, tb) {
                        (false, false) => self.matmul_t(a, true, g, false)?,
                        (false, true) => self.matmul_t(g, true, a, false)?,
                        (true, false) => self.matmul_t(a, false, g, false)?,
                        (true, true) => self.matmul_t(g, true, a, true)?,
                    };
                    out.push((b, gb));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(op, Op::Sub(..));
                if wants(self, a) {
                    out.push((a, g));
                }
                if wants(self, b) {
                    let mut gb = if self.shape(b) == self.shape(a) {
                        g
                    } else {
                        self.sum_rows(g)?
                    };
                    if negate {
                        gb = self.neg(gb)?;
                    }
                    out.push((b, gb));
                }
            }
            Op::Mul(a, b) => {
                if wants(self, a) {
                    out.push((a, self.mul(g, b)?));
                }
                if wants(self, b) {
                    out.push((b, self.mul(g, a)?));
                }
            }
            Op::Scale(a, c) => out.push((a, self.scale(g, c)?)),
            Op::Abs(a) => {
                let m = self.mask_constant(a, |x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                out.push((a, self.mul(g, m)?));
            }
            Op::Relu(a) => {
                let m = self.mask_constant(a, |x| if x > 0.0 { 1.0 } else { 0.0 });
                out.push((a, self.mul(g, m)?));
            }
            Op::LeakyRelu(a, slope) => {
                let m = self.mask_constant(a, |x| if x > 0.0 { 1.0 } else { slope });
                out.push((a, self.mul(g, m)?));
            }
            Op::Tanh(a) => {
                let p = self.mul(g, y)?;
                let q = self.mul(p, y)?;
                out.push((a, self.sub(g, q)?));
            }
            Op::Sigmoid(a) => {
                let p = self.mul(g, y)?;
                let q = self.mul(p, y)?;
                out.push((a, self.sub(p, q)?));
            }
            Op::Exp(a) => out.push((a, self.mul(g, y)?)),
            Op::Recip(a) => {
                let p = self.mul(g, y)?;
                let q = self.mul(p, y)?;
                out.push((a, self.neg(q)?));
            }
            Op::MaskedSoftmax(a) => {
                let c = self.shape(a)[1];
                let p = self.mul(y, g)?;
                let s = self.sum_cols(p)?;
                let b = self.broadcast_cols(s, c)?;
                let q = self.mul(y, b)?;
                out.push((a, self.sub(p, q)?));
            }
            Op::ConcatRows(a, b) => {
                let (ra, rb) = (self.shape(a)[0], self.shape(b)[0]);
                if wants(self, a) {
                    out.push((a, self.slice_rows(g, 0, ra)?));
                }
                if wants(self, b) {
                    out.push((b, self.slice_rows(g, ra, rb)?));
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.shape(a)[1], self.shape(b)[1]);
                if wants(self, a) {
                    out.push((a, self.slice_cols(g, 0, ca)?));
                }
                if wants(self, b) {
                    out.push((b, self.slice_cols(g, ca, cb)?));
                }
            }
            Op::SliceRows { a, start } => {
                let total = self.shape(a)[0];
                out.push((a, self.pad_rows(g, start, total)?));
            }
            Op::SliceCols { a, start } => {
                let total = self.shape(a)[1];
                out.push((a, self.pad_cols(g, start, total)?));
            }
            Op::PadRows { a, start } => {
                let len = self.shape(a)[0];
                out.push((a, self.slice_rows(g, start, len)?));
            }
            Op::PadCols { a, start } => {
                let len = self.shape(a)[1];
                out.push((a, self.slice_cols(g, start, len)?));
            }
            Op::Transpose(a) => out.push((a, self.transpose(g)?)),
            Op::PairwiseDist(a) => {
                // grad_i = sum_j w_ij (l_i - l_j),  w = (G + G^T) / D  (0 where D = 0)
                let cols = self.shape(a)[1];
                let gt = self.transpose(g)?;
                let s = self.add(g, gt)?;
                let r = self.recip(y)?;
                let w = self.mul(s, r)?;
                let rs = self.sum_cols(w)?;
                let b = self.broadcast_cols(rs, cols)?;
                let t1 = self.mul(b, a)?;
                let t2 = self.matmul(w, a)?;
                out.push((a, self.sub(t1, t2)?));
            }
            Op::FrobNorm(a) => {
                let shape = self.shape(a);
                let r = self.recip(y)?;
                let q = self.mul(g, r)?;
                let b = self.broadcast_scalar(q, shape)?;
                out.push((a, self.mul(b, a)?));
            }
            Op::GatherRows(a, idx) => {
                let n = self.shape(a)[0];
                out.push((a, self.scatter_rows(g, idx, n)?));
            }
            Op::ScatterRows(a, idx) => out.push((a, self.gather_rows(g, idx)?)),
            Op::Sparse(a, map) => out.push((a, self.sparse_map(g, map.transpose())?)),
            Op::RowMax(a, adjoint) => out.push((a, self.sparse_map(g, adjoint)?)),
            Op::SumRows(a) => {
                let n = self.shape(a)[0];
                out.push((a, self.broadcast_rows(g, n)?));
            }
            Op::BroadcastRows(a) => out.push((a, self.sum_rows(g)?)),
            Op::SumCols(a) => {
                let c = self.shape(a)[1];
                out.push((a, self.broadcast_cols(g, c)?));
            }
            Op::BroadcastCols(a) => out.push((a, self.sum_cols(g)?)),
            Op::SumAll(a) => {
                let shape = self.shape(a);
                out.push((a, self.broadcast_scalar(g, shape)?));
            }
            Op::BroadcastScalar(a) => out.push((a, self.sum_all(g)?)),
        }
        Ok(out)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
