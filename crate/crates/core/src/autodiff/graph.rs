use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use super::AutodiffError;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows { x: Var, index: Vec<usize> },
    MeanPool { x: Var, steps: usize, mask: Vec<f64> },
    Attention(Box<AttentionCache>),
    Sum(Var),
    Bce { pred: Var, coef: Vec<f64> },
}

#[derive(Debug)]
struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    steps: usize,
    heads: usize,
    /// `batch × heads × steps × steps` attention probabilities.
    weights: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Tape of a single forward computation.
///
/// Nodes are appended in evaluation order, so reverse iteration is a valid
/// topological order for the backward sweep.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, Var>>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every tracked parameter used in the graph, keyed by name.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(n, v)| self.grads[v.0].as_ref().map(|g| (n.as_str(), g)))
    }

    pub fn into_param_map(mut self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (name, v) in std::mem::take(&mut self.params) {
            if let Some(g) = self.grads[v.0].take() {
                out.insert(name, g);
            }
        }
        out
    }
}

fn broadcast_shape(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Result<[usize; 2], AutodiffError> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a[0], b[0]), dim(a[1], b[1])) {
        (Some(r), Some(c)) => Ok([r, c]),
        _ => Err(AutodiffError::ShapeMismatch { op, left: a, right: b }),
    }
}

fn broadcast_zip(a: &Tensor, b: &Tensor, out: [usize; 2], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let [r, c] = out;
    let mut t = Tensor::zeros(r, c);
    let (ar, ac) = (a.rows() == 1, a.cols() == 1);
    let (br, bc) = (b.rows() == 1, b.cols() == 1);
    for i in 0..r {
        for j in 0..c {
            let x = a.get(if ar { 0 } else { i }, if ac { 0 } else { j });
            let y = b.get(if br { 0 } else { i }, if bc { 0 } else { j });
            t.set(i, j, f(x, y));
        }
    }
    t
}

/// Sums `g` down to `shape` along broadcast dimensions.
fn reduce_to(g: &Tensor, shape: [usize; 2]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape[0], shape[1]);
    for i in 0..g.rows() {
        let oi = if shape[0] == 1 { 0 } else { i };
        for j in 0..g.cols() {
            let oj = if shape[1] == 1 { 0 } else { j };
            let cur = out.get(oi, oj);
            out.set(oi, oj, cur + g.get(i, j));
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Probability clamp used by the BCE loss.
pub const BCE_EPS: f64 = 1e-7;

/// Variance floor of the layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-9;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op_name: &'static str, value: Tensor, op: Op, tracked: bool) -> Result<Var, AutodiffError> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Ok(Var(nodes.len() - 1))
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Untracked input.
    pub fn constant(&self, t: Tensor) -> Result<Var, AutodiffError> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Tracked leaf that is not registered as a named parameter.
    pub fn variable(&self, t: Tensor) -> Result<Var, AutodiffError> {
        self.push("variable", t, Op::Leaf, true)
    }

    /// Loads a named parameter. Frozen parameters enter as constants, so no
    /// adjoint ever reaches them. Repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var, AutodiffError> {
        if let Some(&v) = self.params.borrow().get(name) {
            return Ok(v);
        }
        let p = store.get(name).ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?;
        let v = self.push("param", p.value.clone(), Op::Leaf, !p.frozen)?;
        self.params.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = self.value(a).matmul(&self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        self.push("matmul", value, Op::MatMul(a, b), tracked)
    }

    /// Elementwise sum with row/column broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            let shape = broadcast_shape("add", x.shape(), y.shape())?;
            broadcast_zip(&x, &y, shape, |p, q| p + q)
        };
        let tracked = self.tracked(a) || self.tracked(b);
        self.push("add", value, Op::Add(a, b), tracked)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            let shape = broadcast_shape("sub", x.shape(), y.shape())?;
            broadcast_zip(&x, &y, shape, |p, q| p - q)
        };
        let tracked = self.tracked(a) || self.tracked(b);
        self.push("sub", value, Op::Sub(a, b), tracked)
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            let shape = broadcast_shape("mul", x.shape(), y.shape())?;
            broadcast_zip(&x, &y, shape, |p, q| p * q)
        };
        let tracked = self.tracked(a) || self.tracked(b);
        self.push("mul", value, Op::Mul(a, b), tracked)
    }

    /// `scale · x + shift`.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Result<Var, AutodiffError> {
        let value = self.value(x).map(|v| scale * v + shift);
        let tracked = self.tracked(x);
        self.push("affine", value, Op::Affine(x, scale), tracked)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var, AutodiffError> {
        let value = self.value(x).map(sigmoid);
        let tracked = self.tracked(x);
        self.push("sigmoid", value, Op::Sigmoid(x), tracked)
    }

    pub fn tanh(&self, x: Var) -> Result<Var, AutodiffError> {
        let value = self.value(x).map(f64::tanh);
        let tracked = self.tracked(x);
        self.push("tanh", value, Op::Tanh(x), tracked)
    }

    pub fn gelu(&self, x: Var) -> Result<Var, AutodiffError> {
        let value = self.value(x).map(gelu);
        let tracked = self.tracked(x);
        self.push("gelu", value, Op::Gelu(x), tracked)
    }

    /// Row-wise softmax.
    pub fn softmax(&self, x: Var) -> Result<Var, AutodiffError> {
        let value = {
            let mut t = self.value(x).clone();
            for r in 0..t.rows() {
                let row = t.row_mut(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            t
        };
        let tracked = self.tracked(x);
        self.push("softmax", value, Op::Softmax(x), tracked)
    }

    /// Row-wise standardization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, x: Var) -> Result<Var, AutodiffError> {
        let (value, inv_std) = {
            let mut t = self.value(x).clone();
            let n = t.cols() as f64;
            let mut inv = Vec::with_capacity(t.rows());
            for r in 0..t.rows() {
                let row = t.row_mut(r);
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * s;
                }
                inv.push(s);
            }
            (t, inv)
        };
        let tracked = self.tracked(x);
        self.push("layer_norm", value, Op::LayerNorm { x, inv_std }, tracked)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let value = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
            let rows = vals.first().map_or(0, |t| t.rows());
            if let Some(bad) = vals.iter().find(|t| t.rows() != rows) {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    left: vals[0].shape(),
                    right: bad.shape(),
                });
            }
            let cols: usize = vals.iter().map(|t| t.cols()).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for t in &vals {
                    out.extend_from_slice(t.row(r));
                }
            }
            Tensor::from_vec(rows, cols, out)?
        };
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), tracked)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let value = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
            let cols = vals.first().map_or(0, |t| t.cols());
            if let Some(bad) = vals.iter().find(|t| t.cols() != cols) {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    left: vals[0].shape(),
                    right: bad.shape(),
                });
            }
            let rows: usize = vals.iter().map(|t| t.rows()).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for t in &vals {
                out.extend_from_slice(t.data());
            }
            Tensor::from_vec(rows, cols, out)?
        };
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), tracked)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, x: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let value = {
            let t = self.value(x);
            if start > end || end > t.rows() {
                return Err(AutodiffError::ShapeMismatch { op: "slice_rows", left: t.shape(), right: [start, end] });
            }
            Tensor::from_vec(end - start, t.cols(), t.data()[start * t.cols()..end * t.cols()].to_vec())?
        };
        let tracked = self.tracked(x);
        self.push("slice_rows", value, Op::SliceRows(x, start), tracked)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let value = {
            let t = self.value(x);
            if start > end || end > t.cols() {
                return Err(AutodiffError::ShapeMismatch { op: "slice_cols", left: t.shape(), right: [start, end] });
            }
            let mut out = Vec::with_capacity(t.rows() * (end - start));
            for r in 0..t.rows() {
                out.extend_from_slice(&t.row(r)[start..end]);
            }
            Tensor::from_vec(t.rows(), end - start, out)?
        };
        let tracked = self.tracked(x);
        self.push("slice_cols", value, Op::SliceCols(x, start), tracked)
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&self, x: Var, index: &[usize]) -> Result<Var, AutodiffError> {
        let value = {
            let t = self.value(x);
            let mut out = Vec::with_capacity(index.len() * t.cols());
            for &i in index {
                if i >= t.rows() {
                    return Err(AutodiffError::ShapeMismatch { op: "gather_rows", left: t.shape(), right: [i, 0] });
                }
                out.extend_from_slice(t.row(i));
            }
            Tensor::from_vec(index.len(), t.cols(), out)?
        };
        let tracked = self.tracked(x);
        self.push("gather_rows", value, Op::GatherRows { x, index: index.to_vec() }, tracked)
    }

    /// Row lookup into an embedding table.
    pub fn embedding_lookup(&self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        self.gather_rows(table, ids)
    }

    /// Masked mean over time of a batch-major `(batch·steps) × d` input.
    /// `mask` holds `batch·steps` weights in `{0, 1}`; sequences with no valid
    /// step pool to zero.
    pub fn mean_pool(&self, x: Var, steps: usize, mask: &[f64]) -> Result<Var, AutodiffError> {
        let value = {
            let t = self.value(x);
            if steps == 0 || t.rows() % steps != 0 || mask.len() != t.rows() {
                return Err(AutodiffError::ShapeMismatch { op: "mean_pool", left: t.shape(), right: [mask.len(), steps] });
            }
            let batch = t.rows() / steps;
            let mut out = Tensor::zeros(batch, t.cols());
            for b in 0..batch {
                let count: f64 = mask[b * steps..(b + 1) * steps].iter().sum();
                if count == 0.0 {
                    continue;
                }
                for s in 0..steps {
                    let m = mask[b * steps + s];
                    if m == 0.0 {
                        continue;
                    }
                    let src = t.row(b * steps + s);
                    for (o, v) in out.row_mut(b).iter_mut().zip(src) {
                        *o += m * v / count;
                    }
                }
            }
            out
        };
        let tracked = self.tracked(x);
        self.push("mean_pool", value, Op::MeanPool { x, steps, mask: mask.to_vec() }, tracked)
    }

    /// Scaled dot-product multi-head self-attention over batch-major
    /// `(batch·steps) × d` projections. Keys with `key_mask == 0` receive
    /// exactly zero weight; every sequence must keep at least one valid key.
    pub fn attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        steps: usize,
        heads: usize,
        key_mask: &[f64],
    ) -> Result<Var, AutodiffError> {
        let (value, weights, batch) = {
            let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
            let [rows, d] = tq.shape();
            if tk.shape() != [rows, d] || tv.shape() != [rows, d] {
                return Err(AutodiffError::ShapeMismatch { op: "attention", left: tq.shape(), right: tk.shape() });
            }
            if heads == 0 || d % heads != 0 || steps == 0 || rows % steps != 0 || key_mask.len() != rows {
                return Err(AutodiffError::ShapeMismatch { op: "attention", left: [rows, d], right: [steps, heads] });
            }
            let batch = rows / steps;
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut weights = vec![0.0; batch * heads * steps * steps];
            let mut out = Tensor::zeros(rows, d);
            let mut scores = vec![0.0; steps];
            for b in 0..batch {
                let mask = &key_mask[b * steps..(b + 1) * steps];
                if mask.iter().all(|&m| m == 0.0) {
                    return Err(AutodiffError::EmptyAttention);
                }
                for h in 0..heads {
                    let c0 = h * dh;
                    for i in 0..steps {
                        let qi = &tq.row(b * steps + i)[c0..c0 + dh];
                        let mut max = f64::NEG_INFINITY;
                        for j in 0..steps {
                            if mask[j] == 0.0 {
                                continue;
                            }
                            let kj = &tk.row(b * steps + j)[c0..c0 + dh];
                            let s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                            scores[j] = s;
                            max = max.max(s);
                        }
                        let base = ((b * heads + h) * steps + i) * steps;
                        let mut total = 0.0;
                        for j in 0..steps {
                            let w = if mask[j] == 0.0 { 0.0 } else { (scores[j] - max).exp() };
                            weights[base + j] = w;
                            total += w;
                        }
                        for j in 0..steps {
                            weights[base + j] /= total;
                        }
                        let orow = &mut out.row_mut(b * steps + i)[c0..c0 + dh];
                        for j in 0..steps {
                            let w = weights[base + j];
                            if w == 0.0 {
                                continue;
                            }
                            let vj = &tv.row(b * steps + j)[c0..c0 + dh];
                            for (o, x) in orow.iter_mut().zip(vj) {
                                *o += w * x;
                            }
                        }
                    }
                }
            }
            (out, weights, batch)
        };
        let tracked = self.tracked(q) || self.tracked(k) || self.tracked(v);
        let cache = AttentionCache { q, k, v, batch, steps, heads, weights };
        self.push("attention", value, Op::Attention(Box::new(cache)), tracked)
    }

    /// Attention probabilities recorded by an [`Graph::attention`] node, as
    /// `batch × heads × steps × steps` row-major values.
    pub fn attention_weights(&self, v: Var) -> Option<Vec<f64>> {
        match &self.nodes.borrow()[v.0].op {
            Op::Attention(c) => Some(c.weights.clone()),
            _ => None,
        }
    }

    /// Sum of all entries, as a `1 × 1` scalar.
    pub fn sum(&self, x: Var) -> Result<Var, AutodiffError> {
        let value = Tensor::scalar(self.value(x).sum());
        let tracked = self.tracked(x);
        self.push("sum", value, Op::Sum(x), tracked)
    }

    /// Mean binary cross-entropy of probabilities `pred` (`n × 1`) against
    /// `labels`, with probabilities clamped to `[ε, 1 − ε]`. Positive labels
    /// are weighted by `pos_weight`.
    pub fn bce(&self, pred: Var, labels: &[f64], pos_weight: f64) -> Result<Var, AutodiffError> {
        if labels.is_empty() {
            return Err(AutodiffError::EmptyBatch);
        }
        let (loss, coef) = {
            let p = self.value(pred);
            if p.len() != labels.len() {
                return Err(AutodiffError::ShapeMismatch { op: "bce", left: p.shape(), right: [labels.len(), 1] });
            }
            let n = labels.len() as f64;
            let mut loss = 0.0;
            let mut coef = Vec::with_capacity(labels.len());
            for (&raw, &y) in p.data().iter().zip(labels) {
                let w = if y > 0.5 { pos_weight } else { 1.0 };
                let q = raw.clamp(BCE_EPS, 1.0 - BCE_EPS);
                loss -= w * (y * q.ln() + (1.0 - y) * (1.0 - q).ln());
                let inside = raw > BCE_EPS && raw < 1.0 - BCE_EPS;
                coef.push(if inside { -w * (y / q - (1.0 - y) / (1.0 - q)) / n } else { 0.0 });
            }
            (loss / n, coef)
        };
        let tracked = self.tracked(pred);
        self.push("bce", Tensor::scalar(loss), Op::Bce { pred, coef }, tracked)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients, AutodiffError> {
        let nodes = self.nodes.borrow();
        if nodes[output.0].value.shape() != [1, 1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "backward",
                left: nodes[output.0].value.shape(),
                right: [1, 1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: Tensor) {
            if !nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.tracked {
                continue;
            }
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].tracked {
                        acc(&mut grads, &nodes, *a, g.matmul_nt(vb)?);
                    }
                    if nodes[b.0].tracked {
                        acc(&mut grads, &nodes, *b, va.matmul_tn(&g)?);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *a, reduce_to(&g, nodes[a.0].value.shape()));
                    acc(&mut grads, &nodes, *b, reduce_to(&g, nodes[b.0].value.shape()));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, *a, reduce_to(&g, nodes[a.0].value.shape()));
                    let neg = g.map(|x| -x);
                    acc(&mut grads, &nodes, *b, reduce_to(&neg, nodes[b.0].value.shape()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].tracked {
                        let ga = broadcast_zip(&g, vb, g.shape(), |x, y| x * y);
                        acc(&mut grads, &nodes, *a, reduce_to(&ga, va.shape()));
                    }
                    if nodes[b.0].tracked {
                        let gb = broadcast_zip(&g, va, g.shape(), |x, y| x * y);
                        acc(&mut grads, &nodes, *b, reduce_to(&gb, vb.shape()));
                    }
                }
                Op::Affine(x, scale) => {
                    acc(&mut grads, &nodes, *x, g.map(|v| v * scale));
                }
                Op::Sigmoid(x) => {
                    let gx = broadcast_zip(&g, out, g.shape(), |d, y| d * y * (1.0 - y));
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::Tanh(x) => {
                    let gx = broadcast_zip(&g, out, g.shape(), |d, y| d * (1.0 - y * y));
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::Gelu(x) => {
                    let gx = broadcast_zip(&g, &nodes[x.0].value, g.shape(), |d, v| d * gelu_grad(v));
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::Softmax(x) => {
                    let mut gx = Tensor::zeros(out.rows(), out.cols());
                    for r in 0..out.rows() {
                        let (y, d) = (out.row(r), g.row(r));
                        let dot: f64 = y.iter().zip(d).map(|(a, b)| a * b).sum();
                        for (o, (yy, dd)) in gx.row_mut(r).iter_mut().zip(y.iter().zip(d)) {
                            *o = yy * (dd - dot);
                        }
                    }
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::LayerNorm { x, inv_std } => {
                    let n = out.cols() as f64;
                    let mut gx = Tensor::zeros(out.rows(), out.cols());
                    for r in 0..out.rows() {
                        let (y, d) = (out.row(r), g.row(r));
                        let mean_d = d.iter().sum::<f64>() / n;
                        let mean_dy = y.iter().zip(d).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (o, (yy, dd)) in gx.row_mut(r).iter_mut().zip(y.iter().zip(d)) {
                            *o = inv_std[r] * (dd - mean_d - yy * mean_dy);
                        }
                    }
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        let mut gp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + w]);
                        }
                        acc(&mut grads, &nodes, *p, gp);
                        c0 += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for p in parts {
                        let h = nodes[p.0].value.rows();
                        let gp = Tensor::from_vec(h, g.cols(), g.data()[r0 * g.cols()..(r0 + h) * g.cols()].to_vec())?;
                        acc(&mut grads, &nodes, *p, gp);
                        r0 += h;
                    }
                }
                Op::SliceRows(x, start) => {
                    let src = &nodes[x.0].value;
                    let mut gx = Tensor::zeros(src.rows(), src.cols());
                    let c = src.cols();
                    gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::SliceCols(x, start) => {
                    let src = &nodes[x.0].value;
                    let mut gx = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::GatherRows { x, index } => {
                    let src = &nodes[x.0].value;
                    let mut gx = Tensor::zeros(src.rows(), src.cols());
                    for (r, &i) in index.iter().enumerate() {
                        for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::MeanPool { x, steps, mask } => {
                    let src = &nodes[x.0].value;
                    let mut gx = Tensor::zeros(src.rows(), src.cols());
                    for b in 0..g.rows() {
                        let count: f64 = mask[b * steps..(b + 1) * steps].iter().sum();
                        if count == 0.0 {
                            continue;
                        }
                        for s in 0..*steps {
                            let m = mask[b * steps + s];
                            if m == 0.0 {
                                continue;
                            }
                            for (o, v) in gx.row_mut(b * steps + s).iter_mut().zip(g.row(b)) {
                                *o = m * v / count;
                            }
                        }
                    }
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::Attention(c) => {
                    let (gq, gk, gv) = attention_backward(c, &nodes, &g);
                    acc(&mut grads, &nodes, c.q, gq);
                    acc(&mut grads, &nodes, c.k, gk);
                    acc(&mut grads, &nodes, c.v, gv);
                }
                Op::Sum(x) => {
                    let s = nodes[x.0].value.shape();
                    acc(&mut grads, &nodes, *x, Tensor::filled(s[0], s[1], g.get(0, 0)));
                }
                Op::Bce { pred, coef } => {
                    let s = nodes[pred.0].value.shape();
                    let scale = g.get(0, 0);
                    let gp = Tensor::from_vec(s[0], s[1], coef.iter().map(|c| c * scale).collect())?;
                    acc(&mut grads, &nodes, *pred, gp);
                }
            }
        }
        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(AutodiffError::NonFinite { op: "backward" });
            }
        }
        let params = self.params.borrow().iter().map(|(n, v)| (n.clone(), *v)).collect();
        Ok(Gradients { grads, params })
    }
}

fn attention_backward(c: &AttentionCache, nodes: &[Node], g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (tq, tk, tv) = (&nodes[c.q.0].value, &nodes[c.k.0].value, &nodes[c.v.0].value);
    let [rows, d] = tq.shape();
    let (steps, heads) = (c.steps, c.heads);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = Tensor::zeros(rows, d);
    let mut gk = Tensor::zeros(rows, d);
    let mut gv = Tensor::zeros(rows, d);
    let mut dw = vec![0.0; steps];
    for b in 0..c.batch {
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..steps {
                let base = ((b * heads + h) * steps + i) * steps;
                let w = &c.weights[base..base + steps];
                let go = &g.row(b * steps + i)[c0..c0 + dh];
                // dW_ij = gO_i · V_j ; dV_j += W_ij gO_i
                let mut dot = 0.0;
                for j in 0..steps {
                    if w[j] == 0.0 {
                        dw[j] = 0.0;
                        continue;
                    }
                    let vj = &tv.row(b * steps + j)[c0..c0 + dh];
                    dw[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot += w[j] * dw[j];
                    let gvj = &mut gv.row_mut(b * steps + j)[c0..c0 + dh];
                    for (o, x) in gvj.iter_mut().zip(go) {
                        *o += w[j] * x;
                    }
                }
                let qi: Vec<f64> = tq.row(b * steps + i)[c0..c0 + dh].to_vec();
                for j in 0..steps {
                    if w[j] == 0.0 {
                        continue;
                    }
                    let ds = w[j] * (dw[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &tk.row(b * steps + j)[c0..c0 + dh];
                    for (o, x) in gq.row_mut(b * steps + i)[c0..c0 + dh].iter_mut().zip(kj) {
                        *o += ds * x;
                    }
                    for (o, x) in gk.row_mut(b * steps + j)[c0..c0 + dh].iter_mut().zip(&qi) {
                        *o += ds * x;
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}
