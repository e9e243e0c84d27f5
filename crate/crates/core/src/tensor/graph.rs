//! Define-by-run computation graph with reverse-mode gradients.
//!
//! Every operator evaluates eagerly when it is appended, so building the graph
//! *is* the forward pass. Nodes are stored in creation order, which is a valid
//! topological order; [`Graph::backward`] walks it in reverse.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::dense::Tensor;
use super::params::ParamStore;
use crate::error::{contract, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-row rigid frames (rotation, translation) applied by [`Graph::rigid_apply`].
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSet {
    pub rotations: Vec<[[f64; 3]; 3]>,
    pub translations: Vec<[f64; 3]>,
}

impl FrameSet {
    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Softplus,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Binary(Binary, NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Unary(Unary, NodeId),
    Clamp(NodeId, f64, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice(NodeId, usize, usize),
    GatherRows(NodeId, Vec<usize>),
    ScatterRows(NodeId, Vec<usize>),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis(NodeId, usize),
    MeanAxis(NodeId, usize),
    MaxAxis(NodeId, Vec<usize>),
    LayerNorm(NodeId, Vec<f64>),
    SquaredError(NodeId, NodeId),
    RigidApply(NodeId, Arc<FrameSet>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Binary(Binary::Div, ..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Unary(Unary::Relu, _) => "relu",
            Op::Unary(Unary::Sigmoid, _) => "sigmoid",
            Op::Unary(Unary::Tanh, _) => "tanh",
            Op::Unary(Unary::Exp, _) => "exp",
            Op::Unary(Unary::Log, _) => "log",
            Op::Unary(Unary::Sqrt, _) => "sqrt",
            Op::Unary(Unary::Softplus, _) => "softplus",
            Op::Clamp(..) => "clamp",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::MaxAxis(..) => "max_axis",
            Op::LayerNorm(..) => "layer_norm",
            Op::SquaredError(..) => "squared_error",
            Op::RigidApply(..) => "rigid_apply",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<NodeId, Tensor>,
    names: BTreeMap<String, NodeId>,
}

impl Gradients {
    /// Gradient for a named parameter, if it was bound trainable.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.get(name).and_then(|id| self.by_node.get(id))
    }

    /// Gradient for any trainable leaf node.
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor> {
        self.by_node.get(&node)
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .filter_map(|(n, id)| self.by_node.get(id).map(|t| (n.as_str(), t)))
    }

    /// Accumulates another set of named gradients (used to merge per-example graphs).
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in other.named() {
            match self.names.get(name).copied() {
                Some(id) => {
                    let mine = self.by_node.get_mut(&id).expect("named gradient present");
                    for (a, b) in mine.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    let id = NodeId(usize::MAX - self.names.len());
                    self.names.insert(name.to_string(), id);
                    self.by_node.insert(id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.by_node.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

/// Computation graph. Single-threaded; build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_names: BTreeMap<String, NodeId>,
}

fn shape_err(node: usize, op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        node,
        op,
        detail: detail.into(),
    }
}

/// Maps each flat index of `out` to the flat index of a broadcast operand.
/// Returns `None` when the shapes are identical.
fn broadcast_map(out: &[usize], src: &[usize]) -> Option<Vec<usize>> {
    if out == src {
        return None;
    }
    let offset = out.len() - src.len();
    let mut src_strides = vec![0usize; out.len()];
    let mut stride = 1;
    for d in (0..src.len()).rev() {
        src_strides[d + offset] = if src[d] == 1 { 0 } else { stride };
        stride *= src[d];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out.len()];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            flat += src_strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= src_strides[d] * out[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        let id = self.nodes.len();
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { node: id, op: op.name() });
        }
        let requires_grad = self.op_requires_grad(&op);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(id))
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let rg = |id: &NodeId| self.nodes[id.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Binary(_, a, b) | Op::MatMul(a, b) | Op::SquaredError(a, b) => rg(a) || rg(b),
            Op::Concat(parts, _) => parts.iter().any(rg),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Unary(_, a)
            | Op::Clamp(a, ..)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Slice(a, ..)
            | Op::GatherRows(a, _)
            | Op::ScatterRows(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::MaxAxis(a, ..)
            | Op::LayerNorm(a, _)
            | Op::RigidApply(a, _) => rg(a),
        }
    }

    fn leaf(&mut self, value: Tensor, trainable: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: trainable,
        });
        NodeId(id)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.leaf(Tensor::scalar(value), false)
    }

    /// Anonymous trainable leaf; query its gradient with [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.leaf(value, true);
        self.param_names.insert(name.to_string(), id);
        id
    }

    /// Binds a parameter from `store` once per graph. Frozen parameters are
    /// bound as constants.
    pub fn bind(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_names.get(name) {
            return Ok(id);
        }
        let value = store
            .get(name)
            .ok_or_else(|| contract(format!("unknown parameter `{name}`")))?
            .clone();
        let id = if store.is_frozen(name) {
            self.leaf(value, false)
        } else {
            self.leaf(value, true)
        };
        self.param_names.insert(name.to_string(), id);
        Ok(id)
    }

    // ----- elementwise -----

    fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let op_name = Op::Binary(kind, a, b).name();
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| {
            shape_err(self.nodes.len(), op_name, format!("cannot broadcast {sa:?} with {sb:?}"))
        })?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<f64> = match (broadcast_map(&out_shape, &sa), broadcast_map(&out_shape, &sb)) {
            (None, None) => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            (ma, mb) => {
                let total: usize = out_shape.iter().product();
                (0..total)
                    .map(|k| {
                        let ia = ma.as_ref().map_or(k, |m| m[k]);
                        let ib = mb.as_ref().map_or(k, |m| m[k]);
                        f(va[ia], vb[ib])
                    })
                    .collect()
            }
        };
        self.push(Op::Binary(kind, a, b), Tensor::from_parts(out_shape, data))
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + offset);
        self.push(Op::AddScalar(a), v)
    }

    fn unary(&mut self, kind: Unary, a: NodeId) -> Result<NodeId> {
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => |x| x.max(0.0),
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Sqrt => f64::sqrt,
            Unary::Softplus => softplus,
        };
        let v = self.value(a).map(f);
        self.push(Op::Unary(kind, a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Tanh, a)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Log, a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Sqrt, a)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Softplus, a)
    }

    /// Clamps into `[lo, hi]`; gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    // ----- linear algebra and layout -----

    /// Rank-2 matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(
                self.nodes.len(),
                "matmul",
                format!("{sa:?} x {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = va[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &vb[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out))
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(shape_err(self.nodes.len(), "transpose", format!("{s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        self.push(Op::Transpose(a), Tensor::from_parts(vec![c, r], out))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a);
        if shape.iter().product::<usize>() != v.len() {
            return Err(shape_err(
                self.nodes.len(),
                "reshape",
                format!("{:?} -> {shape:?}", v.shape()),
            ));
        }
        let t = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        self.push(Op::Reshape(a), t)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err(self.nodes.len(), "concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err(self.nodes.len(), "concat", "axis out of range"));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err(
                    self.nodes.len(),
                    "concat",
                    format!("{s:?} incompatible with {base:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            Op::Concat(parts.to_vec(), axis),
            Tensor::from_parts(out_shape, out),
        )
    }

    /// Half-open slice `[start, end)` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(shape_err(
                self.nodes.len(),
                "slice",
                format!("[{start},{end}) on axis {axis} of {s:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let v = self.value(a).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&v[base + start * inner..base + end * inner]);
        }
        let mut out_shape = s;
        out_shape[axis] = end - start;
        self.push(Op::Slice(a, axis, start), Tensor::from_parts(out_shape, out))
    }

    /// Selects first-axis slabs by index (repeats allowed).
    pub fn gather_rows(&mut self, a: NodeId, index: &[usize]) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || index.is_empty() || index.iter().any(|&i| i >= s[0]) {
            return Err(shape_err(
                self.nodes.len(),
                "gather_rows",
                format!("index out of range for {s:?}"),
            ));
        }
        let inner: usize = s[1..].iter().product();
        let v = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * inner);
        for &i in index {
            out.extend_from_slice(&v[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = s;
        out_shape[0] = index.len();
        self.push(
            Op::GatherRows(a, index.to_vec()),
            Tensor::from_parts(out_shape, out),
        )
    }

    /// Adjoint of [`Graph::gather_rows`]: adds slab `k` of `a` into output row
    /// `index[k]` of a zero tensor with `rows` first-axis entries.
    pub fn scatter_rows(&mut self, a: NodeId, index: &[usize], rows: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || s[0] != index.len() || index.iter().any(|&i| i >= rows) {
            return Err(shape_err(
                self.nodes.len(),
                "scatter_rows",
                format!("bad index for {s:?} into {rows} rows"),
            ));
        }
        let inner: usize = s[1..].iter().product();
        let v = self.value(a).data();
        let mut out = vec![0.0; rows * inner];
        for (k, &i) in index.iter().enumerate() {
            for j in 0..inner {
                out[i * inner + j] += v[k * inner + j];
            }
        }
        let mut out_shape = s;
        out_shape[0] = rows;
        self.push(
            Op::ScatterRows(a, index.to_vec()),
            Tensor::from_parts(out_shape, out),
        )
    }

    /// Applies frame `i` to every 3-vector stored in row `i` of a rank-2
    /// tensor with a multiple of three columns: `x -> R_i x + t_i`.
    pub fn rigid_apply(&mut self, a: NodeId, frames: Arc<FrameSet>) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || !s[1].is_multiple_of(3) || s[0] != frames.len() {
            return Err(shape_err(
                self.nodes.len(),
                "rigid_apply",
                format!("{s:?} with {} frames", frames.len()),
            ));
        }
        let v = self.value(a).data();
        let mut out = vec![0.0; v.len()];
        let c = s[1];
        for i in 0..s[0] {
            let r = &frames.rotations[i];
            let t = &frames.translations[i];
            for p in 0..c / 3 {
                let x = &v[i * c + 3 * p..i * c + 3 * p + 3];
                for d in 0..3 {
                    out[i * c + 3 * p + d] = r[d][0] * x[0] + r[d][1] * x[1] + r[d][2] * x[2] + t[d];
                }
            }
        }
        self.push(Op::RigidApply(a, frames), Tensor::from_parts(s, out))
    }

    // ----- normalisation and reductions -----

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let n = *v.shape().last().unwrap_or(&1);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(Op::Softmax(a), t)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let n = *v.shape().last().unwrap_or(&1);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(Op::LogSoftmax(a), t)
    }

    /// Sum of all entries (rank-0 result).
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Mean of all entries (rank-0 result).
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    fn reduce_shape(&self, a: NodeId, axis: usize, keepdim: bool, op: &'static str) -> Result<Vec<usize>> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(shape_err(self.nodes.len(), op, format!("axis {axis} of {s:?}")));
        }
        let mut out = s.to_vec();
        if keepdim {
            out[axis] = 1;
        } else {
            out.remove(axis);
        }
        Ok(out)
    }

    fn axis_sums(&self, a: NodeId, axis: usize) -> Vec<f64> {
        let v = self.value(a);
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let d = v.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        out
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize, keepdim: bool) -> Result<NodeId> {
        let shape = self.reduce_shape(a, axis, keepdim, "sum_axis")?;
        let out = self.axis_sums(a, axis);
        self.push(Op::SumAxis(a, axis), Tensor::from_parts(shape, out))
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize, keepdim: bool) -> Result<NodeId> {
        let shape = self.reduce_shape(a, axis, keepdim, "mean_axis")?;
        let len = self.shape(a)[axis] as f64;
        let out = self.axis_sums(a, axis).into_iter().map(|x| x / len).collect();
        self.push(Op::MeanAxis(a, axis), Tensor::from_parts(shape, out))
    }

    /// Maximum along `axis` (max-pooling). Ties resolve to the first index.
    pub fn max_axis(&mut self, a: NodeId, axis: usize, keepdim: bool) -> Result<NodeId> {
        let shape = self.reduce_shape(a, axis, keepdim, "max_axis")?;
        let v = self.value(a);
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let d = v.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    let x = d[base + i];
                    if x > out[o * inner + i] {
                        out[o * inner + i] = x;
                        arg[o * inner + i] = base + i;
                    }
                }
            }
        }
        self.push(Op::MaxAxis(a, arg), Tensor::from_parts(shape, out))
    }

    /// Layer normalisation over the last axis, without affine parameters.
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let v = self.value(a);
        let n = *v.shape().last().unwrap_or(&1);
        let mut out = v.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(Op::LayerNorm(a, inv_std), t)
    }

    /// Mean squared error between equal-shaped tensors (rank-0 result).
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(
                self.nodes.len(),
                "squared_error",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let s = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / va.len() as f64;
        self.push(Op::SquaredError(a, b), Tensor::scalar(s))
    }

    // ----- reverse mode -----

    /// Gradient of a one-element `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut by_node = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                by_node.insert(NodeId(i), Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        let names = self
            .param_names
            .iter()
            .filter(|(_, id)| by_node.contains_key(id))
            .map(|(n, id)| (n.clone(), *id))
            .collect();
        Ok(Gradients { by_node, names })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let nodes = &self.nodes;

        // Adds `delta` into the gradient slot of `id` if that node needs one.
        let mut acc = |id: NodeId, delta: &dyn Fn(&mut [f64])| {
            if !nodes[id.0].requires_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.len()]);
            delta(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let out_shape = node.value.shape();
                let va = nodes[a.0].value.data();
                let vb = nodes[b.0].value.data();
                let ma = broadcast_map(out_shape, nodes[a.0].value.shape());
                let mb = broadcast_map(out_shape, nodes[b.0].value.shape());
                let ia = |k: usize| ma.as_ref().map_or(k, |m| m[k]);
                let ib = |k: usize| mb.as_ref().map_or(k, |m| m[k]);
                acc(*a, &|s| {
                    for k in 0..g.len() {
                        let d = match kind {
                            Binary::Add | Binary::Sub => g[k],
                            Binary::Mul => g[k] * vb[ib(k)],
                            Binary::Div => g[k] / vb[ib(k)],
                        };
                        s[ia(k)] += d;
                    }
                });
                acc(*b, &|s| {
                    for k in 0..g.len() {
                        let d = match kind {
                            Binary::Add => g[k],
                            Binary::Sub => -g[k],
                            Binary::Mul => g[k] * va[ia(k)],
                            Binary::Div => {
                                let q = vb[ib(k)];
                                -g[k] * va[ia(k)] / (q * q)
                            }
                        };
                        s[ib(k)] += d;
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &|s| {
                for (x, gk) in s.iter_mut().zip(g) {
                    *x += gk * f;
                }
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &|s| {
                for (x, gk) in s.iter_mut().zip(g) {
                    *x += gk;
                }
            }),
            Op::Unary(kind, a) => {
                let x = nodes[a.0].value.data();
                acc(*a, &|s| {
                    for k in 0..g.len() {
                        let d = match kind {
                            Unary::Relu => {
                                if x[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => y[k] * (1.0 - y[k]),
                            Unary::Tanh => 1.0 - y[k] * y[k],
                            Unary::Exp => y[k],
                            Unary::Log => 1.0 / x[k],
                            Unary::Sqrt => 0.5 / y[k],
                            Unary::Softplus => sigmoid(x[k]),
                        };
                        s[k] += g[k] * d;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = nodes[a.0].value.data();
                acc(*a, &|s| {
                    for k in 0..g.len() {
                        if x[k] >= *lo && x[k] <= *hi {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, kdim) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                let va = nodes[a.0].value.data();
                let vb = nodes[b.0].value.data();
                acc(*a, &|s| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..kdim {
                            let brow = &vb[p * n..(p + 1) * n];
                            s[r * kdim + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &|s| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..kdim {
                            let x = va[r * kdim + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, gy) in s[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * gy;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                acc(*a, &|s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total_chunk = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = nodes[p.0].value.shape()[*axis] * inner;
                    acc(*p, &|s| {
                        for o in 0..outer {
                            let src = &g[o * total_chunk + offset..o * total_chunk + offset + chunk];
                            for (x, gk) in s[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *x += gk;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice(a, axis, start) => {
                let (outer, len, inner) = split_axis(nodes[a.0].value.shape(), *axis);
                let width = node.value.shape()[*axis];
                acc(*a, &|s| {
                    for o in 0..outer {
                        let dst = o * len * inner + start * inner;
                        let src = o * width * inner;
                        for j in 0..width * inner {
                            s[dst + j] += g[src + j];
                        }
                    }
                });
            }
            Op::GatherRows(a, index) => {
                let inner: usize = nodes[a.0].value.shape()[1..].iter().product();
                acc(*a, &|s| {
                    for (k, &r) in index.iter().enumerate() {
                        for j in 0..inner {
                            s[r * inner + j] += g[k * inner + j];
                        }
                    }
                });
            }
            Op::ScatterRows(a, index) => {
                let inner: usize = nodes[a.0].value.shape()[1..].iter().product();
                acc(*a, &|s| {
                    for (k, &r) in index.iter().enumerate() {
                        for j in 0..inner {
                            s[k * inner + j] += g[r * inner + j];
                        }
                    }
                });
            }
            Op::RigidApply(a, frames) => {
                let c = node.value.shape()[1];
                acc(*a, &|s| {
                    for (i, r) in frames.rotations.iter().enumerate() {
                        for p in 0..c / 3 {
                            let base = i * c + 3 * p;
                            for d in 0..3 {
                                s[base + d] += r[0][d] * g[base] + r[1][d] * g[base + 1] + r[2][d] * g[base + 2];
                            }
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                acc(*a, &|s| {
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for k in 0..n {
                            srow[k] += yrow[k] * (grow[k] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                acc(*a, &|s| {
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let total: f64 = grow.iter().sum();
                        for k in 0..n {
                            srow[k] += grow[k] - yrow[k].exp() * total;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|s| {
                for x in s.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &|s| {
                    for x in s.iter_mut() {
                        *x += g[0] / n;
                    }
                });
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let (outer, len, inner) = split_axis(nodes[a.0].value.shape(), *axis);
                let scale = if matches!(node.op, Op::MeanAxis(..)) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                acc(*a, &|s| {
                    for o in 0..outer {
                        for l in 0..len {
                            for j in 0..inner {
                                s[(o * len + l) * inner + j] += g[o * inner + j] * scale;
                            }
                        }
                    }
                });
            }
            Op::MaxAxis(a, arg) => acc(*a, &|s| {
                for (k, &src) in arg.iter().enumerate() {
                    s[src] += g[k];
                }
            }),
            Op::LayerNorm(a, inv_std) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                acc(*a, &|s| {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let grow = &g[r * n..(r + 1) * n];
                        let yrow = &y[r * n..(r + 1) * n];
                        let mg = grow.iter().sum::<f64>() / n as f64;
                        let mgy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for k in 0..n {
                            s[r * n + k] += inv * (grow[k] - mg - yrow[k] * mgy);
                        }
                    }
                });
            }
            Op::SquaredError(a, b) => {
                let va = nodes[a.0].value.data();
                let vb = nodes[b.0].value.data();
                let f = 2.0 * g[0] / va.len() as f64;
                acc(*a, &|s| {
                    for k in 0..va.len() {
                        s[k] += f * (va[k] - vb[k]);
                    }
                });
                acc(*b, &|s| {
                    for k in 0..va.len() {
                        s[k] -= f * (va[k] - vb[k]);
                    }
                });
            }
        }
    }
}
