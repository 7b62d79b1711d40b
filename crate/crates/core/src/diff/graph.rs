//! Define-by-run compute graph with reverse-mode differentiation.
//!
//! Nodes are appended in creation order, which is also a valid topological
//! order: an op can only reference nodes that already exist. `backward`
//! walks the node list in reverse and accumulates vector-Jacobian products.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamId, ParamKey, ParamStore};
use super::tensor::{split_axis, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow { x: NodeId, bias: NodeId },
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Gelu(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    IndexSelect { src: NodeId, axis: usize, indices: Vec<usize> },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { src: NodeId, axis: usize, start: usize },
    Reshape(NodeId),
    Softmax { x: NodeId, axis: usize },
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// One forward computation and, at most once, its backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamKey, NodeId>,
    consumed: bool,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<NodeId, Tensor>,
    params: HashMap<ParamKey, Tensor>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.leaves.get(&id)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        self.params.get(&store.key(id))
    }

    pub fn by_key(&self, key: &ParamKey) -> Option<&Tensor> {
        self.params.get(key)
    }

    /// Sets the gradient of one parameter, replacing any previous value.
    pub fn insert(&mut self, key: ParamKey, grad: Tensor) {
        self.params.insert(key, grad);
    }

    pub fn param_keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
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

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a leaf. Repeated binds return the same node,
    /// so gradients from every use are summed.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let key = store.key(id);
        if let Some(&node) = self.params.get(&key) {
            return node;
        }
        self.nodes.push(Node {
            value: store.shared(id),
            op: Op::Leaf,
            requires_grad: store.requires_grad(id),
        });
        let node = NodeId(self.nodes.len() - 1);
        self.params.insert(key, node);
        node
    }

    /// `op(a) @ op(b)` for rank-2 inputs, where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let (ar, ac) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {:?}{} x {:?}{}",
                self.shape(a),
                if ta { "^T" } else { "" },
                self.shape(b),
                if tb { "^T" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), (ar, ac), ta, self.value(b).data(), (br, bc), tb, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_vec(vec![m, n], out)?, Op::MatMul { a, b, ta, tb }, rg, "matmul")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false, false)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        self.same_shape(a, b, name)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds `bias` (length = last dim of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let cols = *self.shape(x).last().unwrap_or(&1);
        if self.value(bias).numel() != cols {
            return Err(Error::Shape(format!(
                "add_row: bias {:?} does not match row width {cols}",
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let out = Tensor::from_vec(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        self.push(out, Op::AddRow { x, bias }, rg, "add_row")
    }

    fn map(&mut self, x: NodeId, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let v = self.value(x);
        let out = Tensor::from_vec(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())?;
        let rg = self.rg(&[x]);
        self.push(out, op, rg, name)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.map(x, Op::Scale(x, c), "scale", |v| v * c)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, Op::Tanh(x), "tanh", f64::tanh)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, Op::Sigmoid(x), "sigmoid", sigmoid)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, Op::Gelu(x), "gelu", |v| {
            0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())
        })
    }

    /// Normalizes each row (last axis) of `x`, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let cols = *self.shape(x).last().ok_or_else(|| Error::Shape("layer_norm of scalar".into()))?;
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(Error::Shape(format!("layer_norm: gain/bias must have {cols} entries")));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / cols;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::from_vec(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg, "layer_norm")
    }

    /// Gathers `indices` along `axis`; an embedding lookup is `axis = 0`.
    pub fn index_select(&mut self, src: NodeId, axis: usize, indices: &[usize]) -> Result<NodeId> {
        let shape = self.shape(src).to_vec();
        let (outer, dim, inner) = split_axis(&shape, axis)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= dim) {
            return Err(Error::Index(format!("index {bad} out of range for axis of size {dim}")));
        }
        let v = self.value(src).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * dim + i) * inner;
                out.extend_from_slice(&v[base..base + inner]);
            }
        }
        let mut new_shape = shape;
        new_shape[axis] = indices.len();
        let out = Tensor::from_vec(new_shape, out)?;
        let rg = self.rg(&[src]);
        self.push(out, Op::IndexSelect { src, axis, indices: indices.to_vec() }, rg, "index_select")
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *inputs.first().ok_or_else(|| Error::EmptyInput("concat of nothing".into()))?;
        let base_shape = self.shape(first).to_vec();
        let (outer, _, inner) = split_axis(&base_shape, axis)?;
        let mut total = 0;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != base_shape.len()
                || s.iter().enumerate().any(|(d, &e)| d != axis && e != base_shape[d])
            {
                return Err(Error::Shape(format!("concat: {s:?} incompatible with {base_shape:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &id in inputs {
                let v = self.value(id);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut new_shape = base_shape;
        new_shape[axis] = total;
        let out = Tensor::from_vec(new_shape, out)?;
        let rg = self.rg(inputs);
        self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }, rg, "concat")
    }

    /// Takes `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&mut self, src: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(src).to_vec();
        let (outer, dim, inner) = split_axis(&shape, axis)?;
        if start + len > dim {
            return Err(Error::Index(format!("slice {start}..{} exceeds axis size {dim}", start + len)));
        }
        let v = self.value(src).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let out = Tensor::from_vec(new_shape, out)?;
        let rg = self.rg(&[src]);
        self.push(out, Op::Slice { src, axis, start }, rg, "slice")
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = Tensor::clone(self.value(x)).reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg, "reshape")
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(x);
        if !v.all_finite() {
            return Err(Error::NonFinite("softmax input"));
        }
        let (outer, dim, inner) = split_axis(v.shape(), axis)?;
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| (o * dim + d) * inner + i;
                let max = (0..dim).map(|d| out[at(d)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for d in 0..dim {
                    let e = (out[at(d)] - max).exp();
                    out[at(d)] = e;
                    total += e;
                }
                for d in 0..dim {
                    out[at(d)] /= total;
                }
            }
        }
        let out = Tensor::from_vec(v.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax { x, axis }, rg, "softmax")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::EmptyInput("mean of an empty tensor".into()));
        }
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg, "mean")
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    ///
    /// `logits` is `[rows, classes]` (or a single `[classes]` vector) and
    /// `targets` holds one class index per row.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let v = self.value(logits);
        let (rows, classes) = v.dims2()?;
        if rows != targets.len() || rows == 0 {
            return Err(Error::Shape(format!("cross_entropy: {rows} rows but {} targets", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Index(format!("target {t} out of range for {classes} classes")));
        }
        let mut probs = vec![0.0; rows * classes];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &v.data()[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + total.ln();
            loss += log_z - row[targets[r]];
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - log_z).exp();
            }
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss / rows as f64),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
            "cross_entropy",
        )
    }

    /// Reverse pass from a scalar node. A graph supports exactly one call.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphReuse);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut leaves = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let t = Tensor::from_vec(node.value.shape().to_vec(), g)?;
                leaves.insert(NodeId(idx), t);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }

        let params = self
            .params
            .iter()
            .filter_map(|(k, n)| leaves.get(n).map(|t| (*k, t.clone())))
            .collect();
        Ok(Gradients { leaves, params })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let ad = va.dims2()?;
                let bd = vb.dims2()?;
                let gd = node.value.dims2()?;
                self.accumulate(grads, a, |da| {
                    if ta {
                        gemm(vb.data(), bd, tb, g, gd, true, da, 1.0);
                    } else {
                        gemm(g, gd, false, vb.data(), bd, !tb, da, 1.0);
                    }
                });
                self.accumulate(grads, b, |db| {
                    if tb {
                        gemm(g, gd, true, va.data(), ad, ta, db, 1.0);
                    } else {
                        gemm(va.data(), ad, !ta, g, gd, false, db, 1.0);
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| axpy(d, g, 1.0));
                self.accumulate(grads, *b, |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| axpy(d, g, 1.0));
                self.accumulate(grads, *b, |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let va = self.nodes[a.0].value.data();
                let vb = self.nodes[b.0].value.data();
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::AddRow { x, bias } => {
                self.accumulate(grads, *x, |d| axpy(d, g, 1.0));
                self.accumulate(grads, *bias, |d| {
                    let cols = d.len().max(1);
                    for row in g.chunks(cols) {
                        axpy(d, row, 1.0);
                    }
                });
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, |d| axpy(d, g, *c));
            }
            Op::Tanh(x) => {
                self.accumulate(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.nodes[x.0].value.data();
                self.accumulate(grads, *x, |d| {
                    for i in 0..d.len() {
                        let v = xv[i];
                        let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        d[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.nodes[gain.0].value.data();
                let cols = gv.len();
                let rows = rstd.len();
                self.accumulate(grads, *gain, |d| {
                    for r in 0..rows {
                        for c in 0..cols {
                            d[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                });
                self.accumulate(grads, *bias, |d| {
                    for row in g.chunks(cols) {
                        axpy(d, row, 1.0);
                    }
                });
                self.accumulate(grads, *x, |d| {
                    let n = cols as f64;
                    for r in 0..rows {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..cols {
                            let dh = g[r * cols + c] * gv[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * cols + c];
                        }
                        for c in 0..cols {
                            let i = r * cols + c;
                            let dh = g[i] * gv[c];
                            d[i] += rstd[r] / n * (n * dh - sum_dh - xhat[i] * sum_dh_h);
                        }
                    }
                });
            }
            Op::IndexSelect { src, axis, indices } => {
                let shape = self.nodes[src.0].value.shape();
                let (outer, dim, inner) = split_axis(shape, *axis)?;
                let k = indices.len();
                self.accumulate(grads, *src, |d| {
                    for o in 0..outer {
                        for (j, &i) in indices.iter().enumerate() {
                            let from = (o * k + j) * inner;
                            let to = (o * dim + i) * inner;
                            axpy(&mut d[to..to + inner], &g[from..from + inner], 1.0);
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis)?;
                let mut offset = 0;
                for &id in inputs {
                    let len = self.nodes[id.0].value.shape()[*axis];
                    self.accumulate(grads, id, |d| {
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            let to = o * len * inner;
                            axpy(&mut d[to..to + len * inner], &g[from..from + len * inner], 1.0);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { src, axis, start } => {
                let (outer, dim, inner) = split_axis(self.nodes[src.0].value.shape(), *axis)?;
                let len = node.value.shape()[*axis];
                self.accumulate(grads, *src, |d| {
                    for o in 0..outer {
                        let from = o * len * inner;
                        let to = (o * dim + start) * inner;
                        axpy(&mut d[to..to + len * inner], &g[from..from + len * inner], 1.0);
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |d| axpy(d, g, 1.0));
            }
            Op::Softmax { x, axis } => {
                let (outer, dim, inner) = split_axis(node.value.shape(), *axis)?;
                self.accumulate(grads, *x, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * dim + k) * inner + i;
                            let dot: f64 = (0..dim).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..dim {
                                d[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::Mean(x) => {
                self.accumulate(grads, *x, |d| {
                    let s = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|v| *v += s);
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let rows = targets.len();
                let classes = probs.len() / rows;
                let s = g[0] / rows as f64;
                self.accumulate(grads, *logits, |d| {
                    for r in 0..rows {
                        for c in 0..classes {
                            let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                            d[r * classes + c] += s * (probs[r * classes + c] - onehot);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// `out = op(x) @ op(y) + beta * out` where `x`, `y` are row-major with the
/// given stored dims and `op` transposes when the flag is set.
#[allow(clippy::too_many_arguments)]
fn gemm(
    x: &[f64],
    (xr, xc): (usize, usize),
    tx: bool,
    y: &[f64],
    (yr, yc): (usize, usize),
    ty: bool,
    out: &mut [f64],
    beta: f64,
) {
    let (m, k) = if tx { (xc, xr) } else { (xr, xc) };
    let n = if ty { yr } else { yc };
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsx, csx) = if tx { (1, xc as isize) } else { (xc as isize, 1) };
    let (rsy, csy) = if ty { (1, yc as isize) } else { (yc as isize, 1) };
    // SAFETY: strides describe exactly the `x`, `y` and `out` buffers whose
    // lengths were validated against these dims by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            x.as_ptr(),
            rsx,
            csx,
            y.as_ptr(),
            rsy,
            csy,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
