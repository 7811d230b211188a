//! Tape-based reverse-mode automatic differentiation over small dense
//! matrices.
//!
//! Training at desk scale only needs a closed set of operations (matrix
//! multiply, add, slicing, softmax, layer norm, GELU, squared norm,
//! log-sigmoid, cosine), so the tape records an op enum per node instead of
//! closures. Nodes are appended in topological order; backward walks the
//! arena in reverse. Anything outside the op set simply cannot be
//! constructed.

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`. Row vectors are `(1, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape/data mismatch");
        Tensor { rows, cols, data }
    }

    pub fn row_vec(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(sigmoid(x))`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// GELU, tanh approximation. Smooth everywhere, so central finite
/// differences stay well conditioned.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    GatherRows(NodeId, Vec<usize>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    AddRowBroadcast(NodeId, NodeId),
    SoftmaxRows(NodeId),
    Gelu(NodeId),
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    NormSq(NodeId),
    LogSigmoid(NodeId),
    Cosine(NodeId, NodeId),
    SumN(Vec<NodeId>),
    StopGrad,
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation; [`Tape::backward`] then produces exact
/// analytic gradients of a scalar node with respect to every leaf.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the given node; zeros if the node does
    /// not influence the loss.
    pub fn get(&self, id: NodeId, like: &Tensor) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(like.rows, like.cols),
        }
    }

    pub fn get_ref(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
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

    /// Drops every node past `len`; staged parameters survive so a
    /// persistent tape can serve repeated forward passes cheaply.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Scalar value of a `(1,1)` node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let t = self.value(id);
        assert_eq!(t.len(), 1, "node is not a scalar");
        t.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a leaf (parameter or constant input).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_row(&mut self, data: Vec<f64>) -> NodeId {
        self.leaf(Tensor::row_vec(data))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(ta.same_shape(tb), "add shape mismatch");
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(ta.same_shape(tb), "sub shape mismatch");
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(t, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|x| c * x).collect();
        let t = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(t, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.cols, tb.rows, "matmul inner dimension mismatch");
        let t = matmul_value(ta, tb);
        self.push(t, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let mut t = Tensor::zeros(ta.cols, ta.rows);
        for r in 0..ta.rows {
            for c in 0..ta.cols {
                *t.at_mut(c, r) = ta.at(r, c);
            }
        }
        self.push(t, Op::Transpose(a))
    }

    /// Rows of `src` selected by `indices` (embedding lookup).
    pub fn gather_rows(&mut self, src: NodeId, indices: &[usize]) -> NodeId {
        let ts = &self.nodes[src.0].value;
        let mut t = Tensor::zeros(indices.len(), ts.cols);
        for (i, &idx) in indices.iter().enumerate() {
            assert!(idx < ts.rows, "gather index out of range");
            t.data[i * ts.cols..(i + 1) * ts.cols].copy_from_slice(ts.row(idx));
        }
        self.push(t, Op::GatherRows(src, indices.to_vec()))
    }

    pub fn slice_rows(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let ts = &self.nodes[src.0].value;
        assert!(start + len <= ts.rows, "row slice out of range");
        let data = ts.data[start * ts.cols..(start + len) * ts.cols].to_vec();
        let t = Tensor::from_vec(len, ts.cols, data);
        self.push(t, Op::SliceRows(src, start, len))
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let ts = &self.nodes[src.0].value;
        assert!(start + len <= ts.cols, "col slice out of range");
        let mut t = Tensor::zeros(ts.rows, len);
        for r in 0..ts.rows {
            for c in 0..len {
                *t.at_mut(r, c) = ts.at(r, start + c);
            }
        }
        self.push(t, Op::SliceCols(src, start, len))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.rows;
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols).sum();
        let mut t = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let tp = &self.nodes[p.0].value;
            assert_eq!(tp.rows, rows, "concat row mismatch");
            for r in 0..rows {
                for c in 0..tp.cols {
                    *t.at_mut(r, off + c) = tp.at(r, c);
                }
            }
            off += tp.cols;
        }
        self.push(t, Op::ConcatCols(parts.to_vec()))
    }

    /// `(r, c)` matrix plus a `(1, c)` row broadcast over every row.
    pub fn add_row_broadcast(&mut self, mat: NodeId, row: NodeId) -> NodeId {
        let (tm, tr) = (&self.nodes[mat.0].value, &self.nodes[row.0].value);
        assert_eq!(tr.rows, 1, "broadcast operand must be a row vector");
        assert_eq!(tm.cols, tr.cols, "broadcast width mismatch");
        let mut t = tm.clone();
        for r in 0..t.rows {
            for c in 0..t.cols {
                *t.at_mut(r, c) += tr.data[c];
            }
        }
        self.push(t, Op::AddRowBroadcast(mat, row))
    }

    /// Row-wise softmax with max subtraction; a fully masked row (all equal
    /// large-negative entries) degrades to a uniform row rather than NaN.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let mut t = Tensor::zeros(tx.rows, tx.cols);
        for r in 0..tx.rows {
            softmax_row(tx.row(r), &mut t.data[r * tx.cols..(r + 1) * tx.cols]);
        }
        self.push(t, Op::SoftmaxRows(x))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let data = tx.data.iter().map(|&v| gelu(v)).collect();
        let t = Tensor::from_vec(tx.rows, tx.cols, data);
        self.push(t, Op::Gelu(x))
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (tx, tg, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        assert_eq!(tg.rows, 1);
        assert_eq!(tb.rows, 1);
        assert_eq!(tg.cols, tx.cols);
        assert_eq!(tb.cols, tx.cols);
        let mut t = Tensor::zeros(tx.rows, tx.cols);
        for r in 0..tx.rows {
            layer_norm_row(
                tx.row(r),
                &tg.data,
                &tb.data,
                &mut t.data[r * tx.cols..(r + 1) * tx.cols],
            );
        }
        self.push(t, Op::LayerNormRows { x, gamma, beta })
    }

    /// Squared Euclidean norm of all entries, as a `(1,1)` node.
    pub fn norm_sq(&mut self, x: NodeId) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let v = tx.data.iter().map(|a| a * a).sum();
        self.push(Tensor::scalar(v), Op::NormSq(x))
    }

    pub fn log_sigmoid(&mut self, x: NodeId) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let data = tx.data.iter().map(|&v| log_sigmoid(v)).collect();
        let t = Tensor::from_vec(tx.rows, tx.cols, data);
        self.push(t, Op::LogSigmoid(x))
    }

    /// Cosine similarity of two equal-length vectors, as a `(1,1)` node.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.len(), tb.len(), "cosine length mismatch");
        let v = cosine_value(&ta.data, &tb.data);
        self.push(Tensor::scalar(v), Op::Cosine(a, b))
    }

    /// Elementwise sum of same-shaped nodes (summed in slice order so batch
    /// reductions are reproducible).
    pub fn sum_n(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let first = &self.nodes[parts[0].0].value;
        let mut t = Tensor::zeros(first.rows, first.cols);
        for p in parts {
            let tp = &self.nodes[p.0].value;
            assert!(tp.same_shape(&t), "sum_n shape mismatch");
            for (o, v) in t.data.iter_mut().zip(&tp.data) {
                *o += v;
            }
        }
        self.push(t, Op::SumN(parts.to_vec()))
    }

    /// Mean of scalar nodes.
    pub fn mean_scalars(&mut self, parts: &[NodeId]) -> NodeId {
        let s = self.sum_n(parts);
        self.scale(s, 1.0 / parts.len() as f64)
    }

    /// Value passthrough that blocks gradient flow.
    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let t = self.nodes[x.0].value.clone();
        let _ = x;
        self.push(t, Op::StopGrad)
    }

    /// Exact reverse-mode gradients of a scalar node with respect to every
    /// node on the tape.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if lt.len() != 1 {
            return Err(Error::Contract(
                "backward requires a scalar loss node".into(),
            ));
        }
        if !lt.data[0].is_finite() {
            return Err(Error::Numeric(format!(
                "loss is not finite: {}",
                lt.data[0]
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.accumulate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor| {
            match &mut grads[id.0] {
                Some(g) => {
                    for (o, v) in g.data.iter_mut().zip(&delta.data) {
                        *o += v;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, dy.clone());
                add_to(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, dy.clone());
                let mut neg = dy.clone();
                for v in &mut neg.data {
                    *v = -*v;
                }
                add_to(grads, *b, neg);
            }
            Op::Scale(a, c) => {
                let mut d = dy.clone();
                for v in &mut d.data {
                    *v *= c;
                }
                add_to(grads, *a, d);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                add_to(grads, *a, matmul_nt(dy, tb));
                add_to(grads, *b, matmul_tn(ta, dy));
            }
            Op::Transpose(a) => {
                let mut d = Tensor::zeros(dy.cols, dy.rows);
                for r in 0..dy.rows {
                    for c in 0..dy.cols {
                        *d.at_mut(c, r) = dy.at(r, c);
                    }
                }
                add_to(grads, *a, d);
            }
            Op::GatherRows(src, indices) => {
                let ts = &self.nodes[src.0].value;
                let mut d = Tensor::zeros(ts.rows, ts.cols);
                for (i, &idx) in indices.iter().enumerate() {
                    for c in 0..ts.cols {
                        *d.at_mut(idx, c) += dy.at(i, c);
                    }
                }
                add_to(grads, *src, d);
            }
            Op::SliceRows(src, start, len) => {
                let ts = &self.nodes[src.0].value;
                let mut d = Tensor::zeros(ts.rows, ts.cols);
                for r in 0..*len {
                    for c in 0..ts.cols {
                        *d.at_mut(start + r, c) = dy.at(r, c);
                    }
                }
                add_to(grads, *src, d);
            }
            Op::SliceCols(src, start, len) => {
                let ts = &self.nodes[src.0].value;
                let mut d = Tensor::zeros(ts.rows, ts.cols);
                for r in 0..ts.rows {
                    for c in 0..*len {
                        *d.at_mut(r, start + c) = dy.at(r, c);
                    }
                }
                add_to(grads, *src, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let tp = &self.nodes[p.0].value;
                    let mut d = Tensor::zeros(tp.rows, tp.cols);
                    for r in 0..tp.rows {
                        for c in 0..tp.cols {
                            *d.at_mut(r, c) = dy.at(r, off + c);
                        }
                    }
                    off += tp.cols;
                    add_to(grads, *p, d);
                }
            }
            Op::AddRowBroadcast(mat, row) => {
                add_to(grads, *mat, dy.clone());
                let mut d = Tensor::zeros(1, dy.cols);
                for r in 0..dy.rows {
                    for c in 0..dy.cols {
                        d.data[c] += dy.at(r, c);
                    }
                }
                add_to(grads, *row, d);
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[i].value;
                let mut d = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let dyr = dy.row(r);
                    let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols {
                        *d.at_mut(r, c) = yr[c] * (dyr[c] - dot);
                    }
                }
                add_to(grads, *x, d);
            }
            Op::Gelu(x) => {
                let tx = &self.nodes[x.0].value;
                let mut d = dy.clone();
                for (o, &v) in d.data.iter_mut().zip(&tx.data) {
                    *o *= gelu_grad(v);
                }
                add_to(grads, *x, d);
            }
            Op::LayerNormRows { x, gamma, beta } => {
                let tx = &self.nodes[x.0].value;
                let tg = &self.nodes[gamma.0].value;
                let n = tx.cols;
                let mut dx = Tensor::zeros(tx.rows, n);
                let mut dgamma = Tensor::zeros(1, n);
                let mut dbeta = Tensor::zeros(1, n);
                for r in 0..tx.rows {
                    let xr = tx.row(r);
                    let dyr = dy.row(r);
                    let mu = xr.iter().sum::<f64>() / n as f64;
                    let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                    let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mu) * s).collect();
                    let g: Vec<f64> = dyr.iter().zip(&tg.data).map(|(d, g)| d * g).collect();
                    let mg = g.iter().sum::<f64>() / n as f64;
                    let mgx = g.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for c in 0..n {
                        *dx.at_mut(r, c) = s * (g[c] - mg - xhat[c] * mgx);
                        dgamma.data[c] += dyr[c] * xhat[c];
                        dbeta.data[c] += dyr[c];
                    }
                }
                add_to(grads, *x, dx);
                add_to(grads, *gamma, dgamma);
                add_to(grads, *beta, dbeta);
            }
            Op::NormSq(x) => {
                let tx = &self.nodes[x.0].value;
                let s = 2.0 * dy.data[0];
                let mut d = tx.clone();
                for v in &mut d.data {
                    *v *= s;
                }
                add_to(grads, *x, d);
            }
            Op::LogSigmoid(x) => {
                let tx = &self.nodes[x.0].value;
                let mut d = dy.clone();
                for (o, &v) in d.data.iter_mut().zip(&tx.data) {
                    *o *= sigmoid(-v);
                }
                add_to(grads, *x, d);
            }
            Op::Cosine(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let na = norm(&ta.data);
                let nb = norm(&tb.data);
                let cosv = self.nodes[i].value.data[0];
                let g = dy.data[0];
                let mut da = ta.clone();
                let mut db = tb.clone();
                for c in 0..ta.len() {
                    da.data[c] = g * (tb.data[c] / (na * nb) - cosv * ta.data[c] / (na * na));
                    db.data[c] = g * (ta.data[c] / (na * nb) - cosv * tb.data[c] / (nb * nb));
                }
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::SumN(parts) => {
                for p in parts {
                    add_to(grads, *p, dy.clone());
                }
            }
            Op::StopGrad => {}
        }
    }
}

pub(crate) fn matmul_value(a: &Tensor, b: &Tensor) -> Tensor {
    let mut t = Tensor::zeros(a.rows, b.cols);
    for r in 0..a.rows {
        for k in 0..a.cols {
            let av = a.at(r, k);
            if av == 0.0 {
                continue;
            }
            let brow = b.row(k);
            let trow = &mut t.data[r * b.cols..(r + 1) * b.cols];
            for (o, &bv) in trow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    t
}

/// `a · bᵀ`
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let mut t = Tensor::zeros(a.rows, b.rows);
    for r in 0..a.rows {
        let arow = a.row(r);
        let trow = &mut t.data[r * b.rows..(r + 1) * b.rows];
        for (o, c) in trow.iter_mut().zip(0..b.rows) {
            *o = arow.iter().zip(b.row(c)).map(|(x, y)| x * y).sum();
        }
    }
    t
}

/// `aᵀ · b`
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let mut t = Tensor::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (r, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let trow = &mut t.data[r * b.cols..(r + 1) * b.cols];
            for (o, &bv) in trow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    t
}

pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64], out: &mut [f64]) {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for ((o, &v), (&g, &b)) in out.iter_mut().zip(x).zip(gamma.iter().zip(beta)) {
        *o = (v - mu) * s * g + b;
    }
}

pub(crate) fn cosine_value(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norm(a) * norm(b))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
