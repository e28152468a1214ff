//! Reverse-mode automatic differentiation over 64-bit matrices.
//!
//! A `Tape` records a directed acyclic graph of matrix operations; `backward`
//! walks it once in reverse, accumulating gradients for every node that
//! (transitively) depends on a parameter leaf. Vectors are represented as
//! single-column matrices so the whole engine works on one value type.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// `(l * d) + (1 * d)` with the row broadcast over l.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    /// Row-wise softmax attending only to the first `valid` columns;
    /// `valid == 0` disables the mask entirely.
    SoftmaxRows {
        x: NodeId,
        valid: usize,
    },
    Gather {
        src: NodeId,
        rows: Vec<usize>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    Transpose(NodeId),
    Reshape {
        x: NodeId,
    },
    /// Softmax cross-entropy from a column of logits restricted to the
    /// first `valid` rows.
    CrossEntropyLogits {
        logits: NodeId,
        valid: usize,
        target: usize,
    },
    /// Cosine similarity of two column vectors.
    Cosine {
        u: NodeId,
        v: NodeId,
    },
    Softplus(NodeId),
    BceWithLogit {
        logit: NodeId,
        label: f64,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_K: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;
const LN_EPS: f64 = 1e-5;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Scalar payload of a `(1, 1)` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[(0, 0)]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input: gradients are not tracked through it.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        let ng = self.needs(a) || self.needs(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| {
            let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        let ng = self.needs(a);
        self.push(v, Op::Gelu(a), ng)
    }

    /// Row-wise layer normalization with learned gain and bias (`1 * d`).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let d = xv.ncols() as f64;
        let mut mean = Vec::with_capacity(xv.nrows());
        let mut rstd = Vec::with_capacity(xv.nrows());
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            let m = row.sum() / d;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d;
            let r = 1.0 / (var + LN_EPS).sqrt();
            mean.push(m);
            rstd.push(r);
            row.mapv_inplace(|v| (v - m) * r);
        }
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * gv[(0, j)] + bv[(0, j)];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            ng,
        )
    }

    /// Softmax over each row, restricted to the first `valid` columns
    /// (probability 0 elsewhere). `valid == 0` means all columns attend.
    pub fn softmax_rows(&mut self, x: NodeId, valid: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let cols = xv.ncols();
        let lim = if valid == 0 { cols } else { valid.min(cols) };
        let mut out = Matrix::zeros(xv.raw_dim());
        for (r, row) in xv.rows().into_iter().enumerate() {
            let m = row
                .iter()
                .take(lim)
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..lim {
                let e = (row[j] - m).exp();
                out[(r, j)] = e;
                sum += e;
            }
            for j in 0..lim {
                out[(r, j)] /= sum;
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::SoftmaxRows { x, valid: lim }, ng)
    }

    /// Select rows of `src` (duplicates allowed).
    pub fn gather(&mut self, src: NodeId, rows: Vec<usize>) -> NodeId {
        let sv = &self.nodes[src.0].value;
        let mut out = Matrix::zeros((rows.len(), sv.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&sv.row(r));
        }
        let ng = self.needs(src);
        self.push(out, Op::Gather { src, rows }, ng)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let out = xv.slice(ndarray::s![.., start..start + len]).to_owned();
        let ng = self.needs(x);
        self.push(out, Op::SliceCols { x, start, len }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat shapes");
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.t().to_owned();
        let ng = self.needs(x);
        self.push(out, Op::Transpose(x), ng)
    }

    /// Reinterpret an `(r, c)` node as a column vector `(r*c, 1)` in
    /// row-major order.
    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let n = xv.len();
        let out = Matrix::from_shape_vec((n, 1), xv.iter().cloned().collect())
            .expect("flatten shape");
        let ng = self.needs(x);
        self.push(out, Op::Reshape { x }, ng)
    }

    /// `-log softmax(logits)[target]` over the first `valid` rows of a
    /// column of logits.
    pub fn cross_entropy_logits(
        &mut self,
        logits: NodeId,
        valid: usize,
        target: usize,
    ) -> Result<NodeId> {
        let lv = &self.nodes[logits.0].value;
        if lv.ncols() != 1 {
            return Err(Error::Input("cross entropy expects a column of logits".into()));
        }
        let n = lv.nrows();
        let lim = if valid == 0 { n } else { valid.min(n) };
        if target >= lim {
            return Err(Error::Input(format!(
                "label {target} outside the valid range {lim}"
            )));
        }
        let m = (0..lim).map(|i| lv[(i, 0)]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..lim).map(|i| (lv[(i, 0)] - m).exp()).sum();
        let loss = sum.ln() + m - lv[(target, 0)];
        let ng = self.needs(logits);
        Ok(self.push(
            Matrix::from_elem((1, 1), loss),
            Op::CrossEntropyLogits {
                logits,
                valid: lim,
                target,
            },
            ng,
        ))
    }

    /// Cosine similarity of two column vectors; errors on a zero norm.
    pub fn cosine(&mut self, u: NodeId, v: NodeId) -> Result<NodeId> {
        let uv = &self.nodes[u.0].value;
        let vv = &self.nodes[v.0].value;
        let nu = uv.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = vv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu < 1e-12 || nv < 1e-12 {
            return Err(Error::Degenerate(
                "zero-norm vector in cosine similarity".into(),
            ));
        }
        let dot: f64 = uv.iter().zip(vv.iter()).map(|(a, b)| a * b).sum();
        let phi = dot / (nu * nv);
        let ng = self.needs(u) || self.needs(v);
        Ok(self.push(Matrix::from_elem((1, 1), phi), Op::Cosine { u, v }, ng))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(softplus);
        let ng = self.needs(x);
        self.push(v, Op::Softplus(x), ng)
    }

    /// Binary cross-entropy against `label` from a `(1, 1)` logit.
    pub fn bce_with_logit(&mut self, logit: NodeId, label: f64) -> NodeId {
        let x = self.scalar(logit);
        let loss = x.max(0.0) - x * label + (-x.abs()).exp().ln_1p();
        let ng = self.needs(logit);
        self.push(
            Matrix::from_elem((1, 1), loss),
            Op::BceWithLogit { logit, label },
            ng,
        )
    }

    /// Weighted sum of `(1, 1)` scalars.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let mut acc = self.scale(terms[0].0, terms[0].1);
        for &(id, w) in &terms[1..] {
            let scaled = self.scale(id, w);
            acc = self.add(acc, scaled);
        }
        acc
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.dim(),
            (1, 1),
            "backward starts from a scalar"
        );
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let keep_leaf = matches!(self.nodes[i].op, Op::Leaf);
            self.propagate(i, &g, &mut grads);
            if keep_leaf {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let acc = |grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix| {
            match &mut grads[id.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if self.needs(*a) {
                    acc(grads, *a, g.dot(&bv.t()));
                }
                if self.needs(*b) {
                    acc(grads, *b, av.t().dot(g));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    acc(grads, *b, g.mapv(|x| -x));
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.needs(*row) {
                    let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(grads, *row, summed);
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    acc(grads, *a, g.mapv(|x| x * c));
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let xv = &self.nodes[a.0].value;
                    let mut dx = g.clone();
                    for (d, &x) in dx.iter_mut().zip(xv.iter()) {
                        let inner = GELU_K * (x + GELU_C * x * x * x);
                        let t = inner.tanh();
                        let deriv = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                        *d *= deriv;
                    }
                    acc(grads, *a, dx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gain.0].value;
                let d = xv.ncols();
                let df = d as f64;
                if self.needs(*bias) {
                    acc(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.needs(*gain) {
                    let mut dg = Matrix::zeros((1, d));
                    for (r, row) in g.rows().into_iter().enumerate() {
                        for j in 0..d {
                            let xn = (xv[(r, j)] - mean[r]) * rstd[r];
                            dg[(0, j)] += row[j] * xn;
                        }
                    }
                    acc(grads, *gain, dg);
                }
                if self.needs(*x) {
                    let mut dx = Matrix::zeros(xv.raw_dim());
                    for r in 0..xv.nrows() {
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xn = 0.0;
                        for j in 0..d {
                            let dy = g[(r, j)] * gv[(0, j)];
                            let xn = (xv[(r, j)] - mean[r]) * rstd[r];
                            sum_dy += dy;
                            sum_dy_xn += dy * xn;
                        }
                        for j in 0..d {
                            let dy = g[(r, j)] * gv[(0, j)];
                            let xn = (xv[(r, j)] - mean[r]) * rstd[r];
                            dx[(r, j)] =
                                rstd[r] * (dy - sum_dy / df - xn * sum_dy_xn / df);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::SoftmaxRows { x, valid } => {
                if self.needs(*x) {
                    let yv = &self.nodes[i].value;
                    let mut dx = Matrix::zeros(yv.raw_dim());
                    for r in 0..yv.nrows() {
                        let mut dot = 0.0;
                        for j in 0..*valid {
                            dot += g[(r, j)] * yv[(r, j)];
                        }
                        for j in 0..*valid {
                            dx[(r, j)] = yv[(r, j)] * (g[(r, j)] - dot);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Gather { src, rows } => {
                if self.needs(*src) {
                    let sv = &self.nodes[src.0].value;
                    let mut ds = Matrix::zeros(sv.raw_dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut target = ds.row_mut(r);
                        target += &g.row(k);
                    }
                    acc(grads, *src, ds);
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.needs(*x) {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = Matrix::zeros(xv.raw_dim());
                    dx.slice_mut(ndarray::s![.., *start..*start + *len]).assign(g);
                    acc(grads, *x, dx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0usize;
                for p in parts {
                    let w = self.nodes[p.0].value.ncols();
                    if self.needs(*p) {
                        let slice = g.slice(ndarray::s![.., col..col + w]).to_owned();
                        acc(grads, *p, slice);
                    }
                    col += w;
                }
            }
            Op::Transpose(x) => {
                if self.needs(*x) {
                    acc(grads, *x, g.t().to_owned());
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    let xv = &self.nodes[x.0].value;
                    let dx = Matrix::from_shape_vec(xv.raw_dim(), g.iter().cloned().collect())
                        .expect("reshape grad");
                    acc(grads, *x, dx);
                }
            }
            Op::CrossEntropyLogits {
                logits,
                valid,
                target,
            } => {
                if self.needs(*logits) {
                    let lv = &self.nodes[logits.0].value;
                    let scale = g[(0, 0)];
                    let m = (0..*valid)
                        .map(|r| lv[(r, 0)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = (0..*valid).map(|r| (lv[(r, 0)] - m).exp()).sum();
                    let mut dx = Matrix::zeros(lv.raw_dim());
                    for r in 0..*valid {
                        let p = (lv[(r, 0)] - m).exp() / sum;
                        dx[(r, 0)] = scale * (p - f64::from(r == *target));
                    }
                    acc(grads, *logits, dx);
                }
            }
            Op::Cosine { u, v } => {
                let uv = &self.nodes[u.0].value;
                let vv = &self.nodes[v.0].value;
                let nu = uv.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nv = vv.iter().map(|x| x * x).sum::<f64>().sqrt();
                let phi = self.nodes[i].value[(0, 0)];
                let scale = g[(0, 0)];
                if self.needs(*u) {
                    let du = vv.mapv(|x| x / (nu * nv)) - uv.mapv(|x| phi * x / (nu * nu));
                    acc(grads, *u, du.mapv(|x| x * scale));
                }
                if self.needs(*v) {
                    let dv = uv.mapv(|x| x / (nu * nv)) - vv.mapv(|x| phi * x / (nv * nv));
                    acc(grads, *v, dv.mapv(|x| x * scale));
                }
            }
            Op::Softplus(x) => {
                if self.needs(*x) {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = g.clone();
                    for (d, &v) in dx.iter_mut().zip(xv.iter()) {
                        *d *= sigmoid(v);
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::BceWithLogit { logit, label } => {
                if self.needs(*logit) {
                    let x = self.nodes[logit.0].value[(0, 0)];
                    let dx = g[(0, 0)] * (sigmoid(x) - label);
                    acc(grads, *logit, Matrix::from_elem((1, 1), dx));
                }
            }
        }
    }
}
