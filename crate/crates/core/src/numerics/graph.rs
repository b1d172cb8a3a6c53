//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op is evaluated eagerly when it is recorded, so node insertion
//! order is a topological order. [`Graph::forward`] re-evaluates all
//! non-leaf nodes in that order after leaf values change, and
//! [`Graph::backward`] walks it in reverse.
//!
//! All tensors are 2-D and double precision. Row vectors (`1 x n`) are
//! the broadcast unit for [`Graph::add`] and [`Graph::mul`].

use std::collections::HashMap;
use std::ops::Range;

use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use crate::error::{Error, Result};

/// Lower clamp applied to the argument of [`Graph::log`].
pub const LOG_CLAMP: f64 = 1e-12;
/// Lower clamp applied to the norm product in [`Graph::cosine`].
pub const COSINE_CLAMP: f64 = 1e-12;
/// Variance epsilon of [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors owned by a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Parameter gradients aligned with a [`ParamStore`]. Parameters that did
/// not take part in the graph have no entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(n_params: usize) -> Self {
        Gradients {
            grads: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn set(&mut self, id: ParamId, grad: Tensor) {
        self.grads[id.0] = Some(grad);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Gradient for `id`, or zeros shaped like the parameter.
    pub fn dense(&self, id: ParamId, store: &ParamStore) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let p = store.get(id);
                Tensor::zeros(p.rows, p.cols)
            }
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_assign(t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.grads.iter_mut().flatten() {
            t.scale_in_place(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine {
        x: NodeId,
        scale: f64,
        shift: f64,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: Axis,
    },
    Slice {
        x: NodeId,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    Transpose(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Log(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Gather {
        table: NodeId,
        indices: Vec<usize>,
    },
    MeanPool {
        x: NodeId,
        spans: Vec<Range<usize>>,
    },
    Cosine(NodeId, NodeId),
    Dot(NodeId, NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
    Sum(NodeId),
    Mean(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        groups: Vec<Vec<usize>>,
        heads: usize,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    aux: Vec<f64>,
}

/// A recorded computation over parameters borrowed from a [`ParamStore`].
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

fn broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() || (b.rows == 1 && b.cols == a.cols)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
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

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.scalar()
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let (value, aux) = self.eval(&op)?;
        self.nodes.push(Node { op, value, aux });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            aux: Vec::new(),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf bound to a parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let value = self.params.get(id).clone();
        self.nodes.push(Node {
            op: Op::Param(id),
            value,
            aux: Vec::new(),
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(n);
        n
    }

    /// Rebinds a constant leaf. Call [`Graph::forward`] afterwards.
    pub fn set_constant(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Constant) {
            return Err(shape_err(format!("node {} is not a constant leaf", id.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(shape_err(format!(
                "rebinding leaf {} from {:?} to {:?}",
                id.0,
                node.value.shape(),
                value.shape()
            )));
        }
        node.value = value;
        Ok(())
    }

    /// Re-evaluates every non-leaf node in insertion order.
    pub fn forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Constant | Op::Param(_)) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let (value, aux) = self.eval(&op)?;
            self.nodes[i].value = value;
            self.nodes[i].aux = aux;
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    /// Elementwise sum; `b` may be a `1 x cols` row broadcast over `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    /// Elementwise product; `b` may be a `1 x cols` row broadcast over `a`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.push(Op::Affine { x, scale, shift })
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.affine(x, s, 0.0)
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: Axis) -> Result<NodeId> {
        self.push(Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        })
    }

    pub fn slice(&mut self, x: NodeId, rows: Range<usize>, cols: Range<usize>) -> Result<NodeId> {
        self.push(Op::Slice { x, rows, cols })
    }

    pub fn slice_rows(&mut self, x: NodeId, rows: Range<usize>) -> Result<NodeId> {
        let cols = self.value(x).cols;
        self.slice(x, rows, 0..cols)
    }

    pub fn slice_cols(&mut self, x: NodeId, cols: Range<usize>) -> Result<NodeId> {
        let rows = self.value(x).rows;
        self.slice(x, 0..rows, cols)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose(x))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(x))
    }

    /// Softmax over the last axis (each row).
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(x))
    }

    /// Natural log of `max(x, LOG_CLAMP)`.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Log(x))
    }

    /// Row-wise layer normalization with `1 x cols` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        self.push(Op::LayerNorm { x, gamma, beta })
    }

    /// Selects rows of `table` (embedding lookup / row gather).
    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.push(Op::Gather {
            table,
            indices: indices.to_vec(),
        })
    }

    /// One output row per span: the mean of the rows of `x` in that span.
    pub fn mean_pool(&mut self, x: NodeId, spans: &[Range<usize>]) -> Result<NodeId> {
        self.push(Op::MeanPool {
            x,
            spans: spans.to_vec(),
        })
    }

    /// Row-wise cosine similarity, `n x 1`.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Cosine(a, b))
    }

    /// Row-wise dot product, `n x 1`.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Dot(a, b))
    }

    /// Per-row cross-entropy of softmax(logits) against integer targets, `n x 1`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        self.push(Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
        })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(x))
    }

    /// Multi-head scaled dot-product attention where query `i` attends only
    /// to the key rows listed in `groups[i]`. A query with an empty group
    /// produces a zero row.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        groups: Vec<Vec<usize>>,
        heads: usize,
    ) -> Result<NodeId> {
        self.push(Op::Attention {
            q,
            k,
            v,
            groups,
            heads,
        })
    }

    /// Attention weights recorded by an attention node for query `i`,
    /// averaged over heads, in the order of that query's group.
    pub fn attention_weights(&self, id: NodeId, query: usize) -> Option<Vec<f64>> {
        let node = &self.nodes[id.0];
        let Op::Attention { groups, heads, .. } = &node.op else {
            return None;
        };
        let base: usize = groups[..query].iter().map(Vec::len).sum::<usize>() * heads;
        let len = groups[query].len();
        let mut out = vec![0.0; len];
        for h in 0..*heads {
            for (p, o) in out.iter_mut().enumerate() {
                *o += node.aux[base + h * len + p] / *heads as f64;
            }
        }
        Some(out)
    }

    /// Key indices attended by `query` in an attention node.
    pub fn attention_group(&self, id: NodeId, query: usize) -> Option<&[usize]> {
        match &self.nodes[id.0].op {
            Op::Attention { groups, .. } => Some(&groups[query]),
            _ => None,
        }
    }

    fn eval(&self, op: &Op) -> Result<(Tensor, Vec<f64>)> {
        let val = |id: &NodeId| &self.nodes[id.0].value;
        let none = Vec::new;
        Ok(match op {
            Op::Constant | Op::Param(_) => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => {
                let (a, b) = (val(a), val(b));
                if a.cols != b.rows {
                    return Err(shape_err(format!(
                        "matmul {:?} x {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
                let mut out = Tensor::zeros(a.rows, b.cols);
                matmul_acc(&a.data, &b.data, &mut out.data, a.rows, a.cols, b.cols);
                (out, none())
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let (a, b) = (val(a), val(b));
                if !broadcast_ok(a, b) {
                    return Err(shape_err(format!(
                        "elementwise {:?} with {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
                let is_add = matches!(op, Op::Add(..));
                let mut out = a.clone();
                for r in 0..a.rows {
                    let brow = if b.rows == 1 { b.row(0) } else { b.row(r) };
                    for (o, &bv) in out.row_mut(r).iter_mut().zip(brow) {
                        if is_add {
                            *o += bv;
                        } else {
                            *o *= bv;
                        }
                    }
                }
                (out, none())
            }
            Op::Affine { x, scale, shift } => {
                let mut out = val(x).clone();
                for v in &mut out.data {
                    *v = *scale * *v + *shift;
                }
                (out, none())
            }
            Op::Concat { inputs, axis } => {
                if inputs.is_empty() {
                    return Err(shape_err("concat of nothing".into()));
                }
                let parts: Vec<&Tensor> = inputs.iter().map(val).collect();
                match axis {
                    Axis::Rows => {
                        let cols = parts[0].cols;
                        if parts.iter().any(|p| p.cols != cols) {
                            return Err(shape_err("row concat with differing widths".into()));
                        }
                        let rows = parts.iter().map(|p| p.rows).sum();
                        let mut data = Vec::with_capacity(rows * cols);
                        for p in &parts {
                            data.extend_from_slice(&p.data);
                        }
                        (Tensor::from_vec(rows, cols, data), none())
                    }
                    Axis::Cols => {
                        let rows = parts[0].rows;
                        if parts.iter().any(|p| p.rows != rows) {
                            return Err(shape_err("column concat with differing heights".into()));
                        }
                        let cols = parts.iter().map(|p| p.cols).sum();
                        let mut data = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            for p in &parts {
                                data.extend_from_slice(p.row(r));
                            }
                        }
                        (Tensor::from_vec(rows, cols, data), none())
                    }
                }
            }
            Op::Slice { x, rows, cols } => {
                let x = val(x);
                if rows.end > x.rows
                    || cols.end > x.cols
                    || rows.start > rows.end
                    || cols.start > cols.end
                {
                    return Err(shape_err(format!(
                        "slice {rows:?},{cols:?} of {:?}",
                        x.shape()
                    )));
                }
                let mut data = Vec::with_capacity(rows.len() * cols.len());
                for r in rows.clone() {
                    data.extend_from_slice(&x.row(r)[cols.clone()]);
                }
                (Tensor::from_vec(rows.len(), cols.len(), data), none())
            }
            Op::Transpose(x) => {
                let x = val(x);
                let mut out = Tensor::zeros(x.cols, x.rows);
                for r in 0..x.rows {
                    for c in 0..x.cols {
                        out.data[c * x.rows + r] = x.data[r * x.cols + c];
                    }
                }
                (out, none())
            }
            Op::Relu(x) => {
                let mut out = val(x).clone();
                for v in &mut out.data {
                    *v = v.max(0.0);
                }
                (out, none())
            }
            Op::Sigmoid(x) => {
                let mut out = val(x).clone();
                for v in &mut out.data {
                    *v = sigmoid(*v);
                }
                (out, none())
            }
            Op::Softmax(x) => {
                let mut out = val(x).clone();
                for r in 0..out.rows {
                    softmax_in_place(out.row_mut(r));
                }
                (out, none())
            }
            Op::Log(x) => {
                let mut out = val(x).clone();
                for v in &mut out.data {
                    *v = v.max(LOG_CLAMP).ln();
                }
                (out, none())
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (x, g, b) = (val(x), val(gamma), val(beta));
                if g.shape() != (1, x.cols) || b.shape() != (1, x.cols) {
                    return Err(shape_err(format!(
                        "layer_norm over {:?} with gain {:?}",
                        x.shape(),
                        g.shape()
                    )));
                }
                let mut out = Tensor::zeros(x.rows, x.cols);
                let mut aux = Vec::with_capacity(2 * x.rows);
                let n = x.cols as f64;
                for r in 0..x.rows {
                    let row = x.row(r);
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                        *o = (row[c] - mean) * rstd * g.data[c] + b.data[c];
                    }
                    aux.push(mean);
                    aux.push(rstd);
                }
                (out, aux)
            }
            Op::Gather { table, indices } => {
                let t = val(table);
                let mut data = Vec::with_capacity(indices.len() * t.cols);
                for &i in indices {
                    if i >= t.rows {
                        return Err(shape_err(format!(
                            "gather index {i} out of {} rows",
                            t.rows
                        )));
                    }
                    data.extend_from_slice(t.row(i));
                }
                (Tensor::from_vec(indices.len(), t.cols, data), none())
            }
            Op::MeanPool { x, spans } => {
                let x = val(x);
                let mut out = Tensor::zeros(spans.len(), x.cols);
                for (s, span) in spans.iter().enumerate() {
                    if span.start >= span.end || span.end > x.rows {
                        return Err(Error::Span {
                            start: span.start,
                            end: span.end,
                            len: x.rows,
                        });
                    }
                    let inv = 1.0 / span.len() as f64;
                    for r in span.clone() {
                        for (o, &v) in out.row_mut(s).iter_mut().zip(x.row(r)) {
                            *o += v * inv;
                        }
                    }
                }
                (out, none())
            }
            Op::Cosine(a, b) => {
                let (a, b) = (val(a), val(b));
                if a.shape() != b.shape() {
                    return Err(shape_err(format!(
                        "cosine {:?} vs {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
                let mut out = Tensor::zeros(a.rows, 1);
                let mut aux = Vec::with_capacity(3 * a.rows);
                for r in 0..a.rows {
                    let (ar, br) = (a.row(r), b.row(r));
                    let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                    let na = ar.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = br.iter().map(|x| x * x).sum::<f64>().sqrt();
                    out.data[r] = dot / (na * nb).max(COSINE_CLAMP);
                    aux.extend_from_slice(&[dot, na, nb]);
                }
                (out, aux)
            }
            Op::Dot(a, b) => {
                let (a, b) = (val(a), val(b));
                if a.shape() != b.shape() {
                    return Err(shape_err(format!("dot {:?} vs {:?}", a.shape(), b.shape())));
                }
                let mut out = Tensor::zeros(a.rows, 1);
                for r in 0..a.rows {
                    out.data[r] = a.row(r).iter().zip(b.row(r)).map(|(x, y)| x * y).sum();
                }
                (out, none())
            }
            Op::CrossEntropy { logits, targets } => {
                let z = val(logits);
                if targets.len() != z.rows {
                    return Err(shape_err(format!(
                        "{} targets for {} rows",
                        targets.len(),
                        z.rows
                    )));
                }
                let mut out = Tensor::zeros(z.rows, 1);
                let mut probs = z.data.clone();
                for (r, &t) in targets.iter().enumerate() {
                    if t >= z.cols {
                        return Err(shape_err(format!("target {t} out of {} classes", z.cols)));
                    }
                    let row = z.row(r);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    out.data[r] = lse - row[t];
                    softmax_in_place(&mut probs[r * z.cols..(r + 1) * z.cols]);
                }
                (out, probs)
            }
            Op::Sum(x) => (
                Tensor::from_vec(1, 1, vec![val(x).data.iter().sum()]),
                none(),
            ),
            Op::Mean(x) => {
                let x = val(x);
                if x.is_empty() {
                    return Err(shape_err("mean of empty tensor".into()));
                }
                (
                    Tensor::from_vec(1, 1, vec![x.data.iter().sum::<f64>() / x.len() as f64]),
                    none(),
                )
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
            } => {
                let (q, k, v) = (val(q), val(k), val(v));
                let d = q.cols;
                if k.cols != d || v.cols != d || k.rows != v.rows || *heads == 0 || d % heads != 0 {
                    return Err(shape_err(format!(
                        "attention q {:?} k {:?} v {:?} heads {heads}",
                        q.shape(),
                        k.shape(),
                        v.shape()
                    )));
                }
                if groups.len() != q.rows {
                    return Err(shape_err(format!(
                        "{} groups for {} queries",
                        groups.len(),
                        q.rows
                    )));
                }
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut out = Tensor::zeros(q.rows, d);
                let mut aux = Vec::new();
                for (i, group) in groups.iter().enumerate() {
                    if let Some(&bad) = group.iter().find(|&&j| j >= k.rows) {
                        return Err(shape_err(format!(
                            "attention key {bad} out of {} rows",
                            k.rows
                        )));
                    }
                    for h in 0..*heads {
                        let cols = h * dh..(h + 1) * dh;
                        let qh = &q.row(i)[cols.clone()];
                        let start = aux.len();
                        for &j in group {
                            let kh = &k.row(j)[cols.clone()];
                            aux.push(scale * qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>());
                        }
                        softmax_in_place(&mut aux[start..]);
                        for (p, &j) in group.iter().enumerate() {
                            let w = aux[start + p];
                            let vh = &v.row(j)[cols.clone()];
                            for (o, &vv) in out.row_mut(i)[cols.clone()].iter_mut().zip(vh) {
                                *o += w * vv;
                            }
                        }
                    }
                }
                (out, aux)
            }
        })
    }

    /// Reverse-mode gradients of a scalar node with respect to every
    /// parameter leaf that contributed to it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err(format!(
                "backward from non-scalar node of shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); loss.0 + 1];
        grads[loss.0] = vec![1.0];
        let mut out = Gradients::empty(self.params.len());

        for i in (0..=loss.0).rev() {
            if grads[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            let node = &self.nodes[i];
            let val = |id: &NodeId| &self.nodes[id.0].value;
            match &node.op {
                Op::Constant => {}
                Op::Param(pid) => {
                    let p = &node.value;
                    out.grads[pid.0] = Some(Tensor::from_vec(p.rows, p.cols, g));
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    let (n, k, m) = (av.rows, av.cols, bv.cols);
                    matmul_bt_acc(&g, &bv.data, acc(&mut grads, *a, n * k), n, m, k);
                    matmul_at_acc(&av.data, &g, acc(&mut grads, *b, k * m), n, k, m);
                }
                Op::Add(a, b) => {
                    let bv = val(b);
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    let gb = acc(&mut grads, *b, bv.len());
                    reduce_broadcast(gb, &g, bv.len());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    let cols = av.cols;
                    let broadcast = bv.len() != av.len();
                    {
                        let ga = acc(&mut grads, *a, g.len());
                        for (idx, gi) in g.iter().enumerate() {
                            let bi = if broadcast { idx % cols } else { idx };
                            ga[idx] += gi * bv.data[bi];
                        }
                    }
                    let gb = acc(&mut grads, *b, bv.len());
                    for (idx, gi) in g.iter().enumerate() {
                        let bi = if broadcast { idx % cols } else { idx };
                        gb[bi] += gi * av.data[idx];
                    }
                }
                Op::Affine { x, scale, .. } => {
                    let gx = acc(&mut grads, *x, g.len());
                    for (o, gi) in gx.iter_mut().zip(&g) {
                        *o += scale * gi;
                    }
                }
                Op::Concat { inputs, axis } => {
                    let cols = node.value.cols;
                    match axis {
                        Axis::Rows => {
                            let mut offset = 0;
                            for id in inputs {
                                let len = val(id).len();
                                add_into(acc(&mut grads, *id, len), &g[offset..offset + len]);
                                offset += len;
                            }
                        }
                        Axis::Cols => {
                            let mut c0 = 0;
                            for id in inputs {
                                let (pr, pc) = val(id).shape();
                                let gp = acc(&mut grads, *id, pr * pc);
                                for r in 0..pr {
                                    add_into(
                                        &mut gp[r * pc..(r + 1) * pc],
                                        &g[r * cols + c0..r * cols + c0 + pc],
                                    );
                                }
                                c0 += pc;
                            }
                        }
                    }
                }
                Op::Slice { x, rows, cols } => {
                    let xc = val(x).cols;
                    let xl = val(x).len();
                    let gx = acc(&mut grads, *x, xl);
                    let w = cols.len();
                    for (ri, r) in rows.clone().enumerate() {
                        add_into(
                            &mut gx[r * xc + cols.start..r * xc + cols.end],
                            &g[ri * w..(ri + 1) * w],
                        );
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = val(x).shape();
                    let gx = acc(&mut grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = val(x);
                    let gx = acc(&mut grads, *x, g.len());
                    for ((o, gi), xi) in gx.iter_mut().zip(&g).zip(&xv.data) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let y = &node.value.data;
                    let gx = acc(&mut grads, *x, g.len());
                    for ((o, gi), yi) in gx.iter_mut().zip(&g).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let cols = y.cols;
                    let gx = acc(&mut grads, *x, g.len());
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx[r * cols + c] += yr[c] * (gr[c] - dotp);
                        }
                    }
                }
                Op::Log(x) => {
                    let xv = val(x);
                    let gx = acc(&mut grads, *x, g.len());
                    for ((o, gi), xi) in gx.iter_mut().zip(&g).zip(&xv.data) {
                        *o += gi / xi.max(LOG_CLAMP);
                    }
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let xv = val(x);
                    let gam = &val(gamma).data;
                    let (rows, cols) = xv.shape();
                    let n = cols as f64;
                    let mut dgamma = vec![0.0; cols];
                    let mut dbeta = vec![0.0; cols];
                    let mut dx = vec![0.0; rows * cols];
                    let mut xhat = vec![0.0; cols];
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let (mean, rstd) = (node.aux[2 * r], node.aux[2 * r + 1]);
                        let gr = &g[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            xhat[c] = (xv.data[r * cols + c] - mean) * rstd;
                            dgamma[c] += gr[c] * xhat[c];
                            dbeta[c] += gr[c];
                            dxhat[c] = gr[c] * gam[c];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / n;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..cols {
                            dx[r * cols + c] = rstd * (dxhat[c] - m1 - xhat[c] * m2);
                        }
                    }
                    add_into(acc(&mut grads, *x, rows * cols), &dx);
                    add_into(acc(&mut grads, *gamma, cols), &dgamma);
                    add_into(acc(&mut grads, *beta, cols), &dbeta);
                }
                Op::Gather { table, indices } => {
                    let t = val(table);
                    let cols = t.cols;
                    let gt = acc(&mut grads, *table, t.len());
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(
                            &mut gt[i * cols..(i + 1) * cols],
                            &g[r * cols..(r + 1) * cols],
                        );
                    }
                }
                Op::MeanPool { x, spans } => {
                    let xv = val(x);
                    let cols = xv.cols;
                    let gx = acc(&mut grads, *x, xv.len());
                    for (s, span) in spans.iter().enumerate() {
                        let inv = 1.0 / span.len() as f64;
                        for r in span.clone() {
                            for c in 0..cols {
                                gx[r * cols + c] += g[s * cols + c] * inv;
                            }
                        }
                    }
                }
                Op::Cosine(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    let cols = av.cols;
                    let mut da = vec![0.0; av.len()];
                    let mut db = vec![0.0; bv.len()];
                    for r in 0..av.rows {
                        let (dot, na, nb) =
                            (node.aux[3 * r], node.aux[3 * r + 1], node.aux[3 * r + 2]);
                        let (ar, br) = (av.row(r), bv.row(r));
                        let gr = g[r];
                        if na * nb > COSINE_CLAMP {
                            let denom = na * nb;
                            let cos = dot / denom;
                            for c in 0..cols {
                                da[r * cols + c] = gr * (br[c] / denom - cos * ar[c] / (na * na));
                                db[r * cols + c] = gr * (ar[c] / denom - cos * br[c] / (nb * nb));
                            }
                        } else {
                            for c in 0..cols {
                                da[r * cols + c] = gr * br[c] / COSINE_CLAMP;
                                db[r * cols + c] = gr * ar[c] / COSINE_CLAMP;
                            }
                        }
                    }
                    add_into(acc(&mut grads, *a, da.len()), &da);
                    add_into(acc(&mut grads, *b, db.len()), &db);
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    let cols = av.cols;
                    {
                        let ga = acc(&mut grads, *a, av.len());
                        for r in 0..av.rows {
                            for c in 0..cols {
                                ga[r * cols + c] += g[r] * bv.data[r * cols + c];
                            }
                        }
                    }
                    let gb = acc(&mut grads, *b, bv.len());
                    for r in 0..bv.rows {
                        for c in 0..cols {
                            gb[r * cols + c] += g[r] * av.data[r * cols + c];
                        }
                    }
                }
                Op::CrossEntropy { logits, targets } => {
                    let cols = val(logits).cols;
                    let gz = acc(&mut grads, *logits, node.aux.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..cols {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gz[r * cols + c] += g[r] * (node.aux[r * cols + c] - onehot);
                        }
                    }
                }
                Op::Sum(x) => {
                    let len = val(x).len();
                    for o in acc(&mut grads, *x, len) {
                        *o += g[0];
                    }
                }
                Op::Mean(x) => {
                    let len = val(x).len();
                    let s = g[0] / len as f64;
                    for o in acc(&mut grads, *x, len) {
                        *o += s;
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    groups,
                    heads,
                } => {
                    let (qv, kv, vv) = (val(q), val(k), val(v));
                    let d = qv.cols;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = vec![0.0; qv.len()];
                    let mut dk = vec![0.0; kv.len()];
                    let mut dv = vec![0.0; vv.len()];
                    let mut base = 0;
                    let mut dalpha = Vec::new();
                    for (i, group) in groups.iter().enumerate() {
                        for h in 0..*heads {
                            let c0 = h * dh;
                            let alpha = &node.aux[base..base + group.len()];
                            let go = &g[i * d + c0..i * d + c0 + dh];
                            dalpha.clear();
                            for (p, &j) in group.iter().enumerate() {
                                let vh = &vv.data[j * d + c0..j * d + c0 + dh];
                                dalpha.push(go.iter().zip(vh).map(|(a, b)| a * b).sum::<f64>());
                                for (o, gi) in dv[j * d + c0..j * d + c0 + dh].iter_mut().zip(go) {
                                    *o += alpha[p] * gi;
                                }
                            }
                            let s: f64 = alpha.iter().zip(&dalpha).map(|(a, b)| a * b).sum();
                            for (p, &j) in group.iter().enumerate() {
                                let dlogit = alpha[p] * (dalpha[p] - s) * scale;
                                for c in 0..dh {
                                    dq[i * d + c0 + c] += dlogit * kv.data[j * d + c0 + c];
                                    dk[j * d + c0 + c] += dlogit * qv.data[i * d + c0 + c];
                                }
                            }
                            base += group.len();
                        }
                    }
                    add_into(acc(&mut grads, *q, dq.len()), &dq);
                    add_into(acc(&mut grads, *k, dk.len()), &dk);
                    add_into(acc(&mut grads, *v, dv.len()), &dv);
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Vec<f64>], id: NodeId, len: usize) -> &mut [f64] {
    let slot = &mut grads[id.0];
    if slot.is_empty() {
        *slot = vec![0.0; len];
    }
    slot
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Sums a full gradient into a possibly row-broadcast operand.
fn reduce_broadcast(dst: &mut [f64], g: &[f64], len: usize) {
    if len == g.len() {
        add_into(dst, g);
    } else {
        for (idx, gi) in g.iter().enumerate() {
            dst[idx % len] += gi;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
