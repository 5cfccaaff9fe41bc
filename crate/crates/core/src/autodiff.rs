//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as a node holding its output value and
//! whatever the backward rule needs. Node ids grow in creation order and
//! [`Tape::backward`] walks them in exact reverse order, so the tape is its
//! own topological sort.
//!
//! Parameters enter the tape through [`Tape::param`], which snapshots the
//! current value. Gradients of trainable parameters are *added* into the
//! [`ParamStore`]; callers zero them between steps.

use crate::error::{Error, Result};
use crate::matrix::{matmul_nn, matmul_nt, matmul_tn, Matrix};
use crate::params::{ParamId, ParamStore};

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Rows whose L2 norm falls below this are treated as zero rows by [`Tape::row_normalize`].
pub const ROW_NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Relu => x.max(0.0),
        }
    }
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
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

/// Shape bookkeeping for fused multi-head attention over a packed batch.
///
/// Queries are `batch·q_len` rows and keys/values `batch·k_len` rows; row
/// `b·len + t` is token `t` of sample `b`. Keys at positions `>= key_valid[b]`
/// are masked, as are future keys when `causal`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
    pub key_valid: Vec<usize>,
}

impl AttentionLayout {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        j < self.key_valid[b] && (!self.causal || j <= i)
    }
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    RowSoftmax(Var),
    Gelu(Var),
    Relu(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    MeanRows(Var),
    SumAll(Var),
    RowSum(Var),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix,
    },
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    Kron(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Copies `v`'s value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(dim_err("matmul", va, vb));
        }
        let out = matmul_nn(va, vb);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Adds a 1×d row to every row of an N×d matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(dim_err("add-row", va, vr));
        }
        let mut out = va.clone();
        for i in 0..out.rows() {
            for (o, r) in out.row_mut(i).iter_mut().zip(vr.data()) {
                *o += r;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).scale(factor);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::RowSoftmax(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let rg = self.rg(&[a]);
        self.push(out, Op::Softplus(a), rg)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        match act {
            Activation::Gelu => self.gelu(a),
            Activation::Relu => self.relu(a),
        }
    }

    /// Row-wise layer normalization with 1×d gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let (n, d) = vx.shape();
        for p in [gain, bias] {
            let vp = self.value(p);
            if vp.shape() != (1, d) {
                return Err(dim_err("layer-norm", vx, vp));
            }
        }
        let (vg, vb) = (self.value(gain), self.value(bias));
        let mut xhat = Matrix::zeros(n, d);
        let mut out = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                xhat.set(i, j, xh);
                out.set(i, j, xh * vg.get(0, j) + vb.get(0, j));
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Column means: N×d → 1×d.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (n, d) = va.shape();
        let mut out = Matrix::zeros(1, d);
        for i in 0..n {
            for (o, v) in out.data_mut().iter_mut().zip(va.row(i)) {
                *o += v;
            }
        }
        let out = out.scale(1.0 / n as f64);
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanRows(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::SumAll(a), rg)
    }

    /// Row sums: N×d → N×1.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Matrix::from_fn(va.rows(), 1, |i, _| va.row(i).iter().sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::RowSum(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat-rows needs at least one input".into()))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let vp = self.value(p);
            if vp.cols() != cols {
                return Err(dim_err("concat-rows", self.value(first), vp));
            }
            data.extend_from_slice(vp.data());
        }
        let rows = data.len() / cols;
        let out = Matrix::new(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row-major reinterpretation with the same number of entries.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let va = self.value(a);
        if rows * cols != va.len() || rows == 0 {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: va.shape(),
                rhs: (rows, cols),
            });
        }
        let out = Matrix::new(rows, cols, va.data().to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if len == 0 || start + len > va.rows() {
            return Err(Error::Dimension {
                op: "slice-rows",
                lhs: va.shape(),
                rhs: (start, len),
            });
        }
        let out = va.rows_slice(start, len);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    /// Output row `r` is input row `indices[r]`; repeated indices accumulate gradient.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if indices.is_empty() {
            return Err(Error::Contract("gather-rows needs at least one index".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= va.rows()) {
            return Err(Error::Dimension {
                op: "gather-rows",
                lhs: va.shape(),
                rhs: (bad, 0),
            });
        }
        let cols = va.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(va.row(i));
        }
        let out = Matrix::new(indices.len(), cols, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec()), rg))
    }

    /// Sum over rows with a target of `logsumexp(row) − row[target]`; `None` rows are ignored.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let vl = self.value(logits);
        let (n, v) = vl.shape();
        if targets.len() != n {
            return Err(Error::Dimension {
                op: "cross-entropy-with-logits",
                lhs: vl.shape(),
                rhs: (targets.len(), 1),
            });
        }
        if let Some(t) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::Contract(format!(
                "cross-entropy target {t} out of range for {v} classes"
            )));
        }
        let mut probs = vl.clone();
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let row = vl.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            if let Some(t) = t {
                total += lse - row[*t];
            }
            softmax_in_place(probs.row_mut(i));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Matrix::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Scales each row to unit L2 norm; rows with norm below [`ROW_NORM_FLOOR`] become zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        let mut norms = Vec::with_capacity(va.rows());
        for i in 0..va.rows() {
            let norm = va.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(norm);
            let row = out.row_mut(i);
            if norm < ROW_NORM_FLOOR {
                row.fill(0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::RowNormalize { x: a, norms }, rg)
    }

    pub fn kron(&mut self, s: Var, a: Var) -> Var {
        let out = crate::phm::kron(self.value(s), self.value(a));
        let rg = self.rg(&[s, a]);
        self.push(out, Op::Kron(s, a), rg)
    }

    /// Fused scaled-dot-product multi-head attention (no projections).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        if vk.cols() != d || vv.shape() != vk.shape() {
            return Err(dim_err("attention", vq, vk));
        }
        if vq.rows() != layout.batch * layout.q_len || vk.rows() != layout.batch * layout.k_len {
            return Err(Error::Dimension {
                op: "attention",
                lhs: vq.shape(),
                rhs: (layout.batch * layout.q_len, layout.batch * layout.k_len),
            });
        }
        if layout.heads == 0 || d % layout.heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {} heads", layout.heads)));
        }
        if layout.key_valid.len() != layout.batch
            || layout.key_valid.iter().any(|&n| n == 0 || n > layout.k_len)
        {
            return Err(Error::Contract("attention key lengths must lie in [1, k_len]".into()));
        }
        let dh = d / layout.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk) = (layout.q_len, layout.k_len);
        let mut probs = vec![0.0; layout.batch * layout.heads * tq * tk];
        let mut out = Matrix::zeros(vq.rows(), d);
        let mut scores = vec![0.0; tk];
        for b in 0..layout.batch {
            for h in 0..layout.heads {
                let c0 = h * dh;
                for i in 0..tq {
                    let qi = &vq.row(b * tq + i)[c0..c0 + dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        if layout.allowed(b, i, j) {
                            let kj = &vk.row(b * tk + j)[c0..c0 + dh];
                            *s = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                            max = max.max(*s);
                        }
                    }
                    let base = ((b * layout.heads + h) * tq + i) * tk;
                    let mut z = 0.0;
                    for (j, s) in scores.iter().enumerate() {
                        if layout.allowed(b, i, j) {
                            let e = (s - max).exp();
                            probs[base + j] = e;
                            z += e;
                        }
                    }
                    let orow = &mut out.row_mut(b * tq + i)[c0..c0 + dh];
                    for j in 0..tk {
                        let p = probs[base + j] / z;
                        probs[base + j] = p;
                        if p != 0.0 {
                            let vj = &vv.row(b * tk + j)[c0..c0 + dh];
                            for (o, x) in orow.iter_mut().zip(vj) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Back-propagates from the scalar `loss` and adds gradients of every
    /// reachable trainable parameter into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, g, &mut grads, store);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: Matrix, grads: &mut [Option<Matrix>], store: &mut ParamStore) {
        let mut acc = |v: Var, delta: Matrix| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => store.accumulate_grad(*id, &g),
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    acc(*a, matmul_nt(&g, self.value(*b)));
                }
                if self.wants(*b) {
                    acc(*b, matmul_tn(self.value(*a), &g));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.scale(-1.0));
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*row) {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(*row, gr);
                }
                if self.wants(*a) {
                    acc(*a, g);
                }
            }
            Op::Scale(a, f) => acc(*a, g.scale(*f)),
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.hadamard(self.value(*b)).expect("shape checked in forward"));
                }
                if self.wants(*b) {
                    acc(*b, g.hadamard(self.value(*a)).expect("shape checked in forward"));
                }
            }
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let mut dx = g;
                for i in 0..y.rows() {
                    let dot: f64 = dx.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                    for (d, &yv) in dx.row_mut(i).iter_mut().zip(y.row(i)) {
                        *d = yv * (*d - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut dx = g;
                for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                    *d *= gelu_grad(xv);
                }
                acc(*a, dx);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut dx = g;
                for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *d = 0.0;
                    }
                }
                acc(*a, dx);
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                let mut dx = g;
                for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                    *d *= sigmoid(xv);
                }
                acc(*a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (n, d) = xhat.shape();
                let vg = self.value(*gain);
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = Matrix::zeros(1, d);
                    let mut db = Matrix::zeros(1, d);
                    for i in 0..n {
                        for j in 0..d {
                            dg.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
                            db.data_mut()[j] += g.get(i, j);
                        }
                    }
                    if self.wants(*gain) {
                        acc(*gain, dg);
                    }
                    if self.wants(*bias) {
                        acc(*bias, db);
                    }
                }
                if self.wants(*x) {
                    let mut dx = Matrix::zeros(n, d);
                    let df = d as f64;
                    for i in 0..n {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = g.get(i, j) * vg.get(0, j);
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat.get(i, j);
                        }
                        for j in 0..d {
                            let dxh = g.get(i, j) * vg.get(0, j);
                            let v = inv_std[i] / df * (df * dxh - sum_dxh - xhat.get(i, j) * sum_dxh_xh);
                            dx.set(i, j, v);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::MeanRows(a) => {
                let n = self.value(*a).rows();
                let row = g.scale(1.0 / n as f64);
                let mut dx = Matrix::zeros(n, row.cols());
                for i in 0..n {
                    dx.row_mut(i).copy_from_slice(row.data());
                }
                acc(*a, dx);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::RowSum(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.wants(p) {
                        acc(p, g.rows_slice(start, rows));
                    }
                    start += rows;
                }
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::new(r, c, g.into_data()).expect("same entry count"));
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut dx = Matrix::zeros(r, c);
                for i in 0..g.rows() {
                    dx.row_mut(start + i).copy_from_slice(g.row(i));
                }
                acc(*a, dx);
            }
            Op::GatherRows(a, indices) => {
                let (r, c) = self.shape(*a);
                let mut dx = Matrix::zeros(r, c);
                for (k, &i) in indices.iter().enumerate() {
                    for (o, v) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(*a, dx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g.get(0, 0);
                let mut dx = probs.clone();
                for (i, t) in targets.iter().enumerate() {
                    match t {
                        Some(t) => {
                            let row = dx.row_mut(i);
                            row[*t] -= 1.0;
                            row.iter_mut().for_each(|v| *v *= scale);
                        }
                        None => dx.row_mut(i).fill(0.0),
                    }
                }
                acc(*logits, dx);
            }
            Op::RowNormalize { x, norms } => {
                let y = &node.value;
                let mut dx = g;
                for (i, &norm) in norms.iter().enumerate() {
                    if norm < ROW_NORM_FLOOR {
                        dx.row_mut(i).fill(0.0);
                        continue;
                    }
                    let dot: f64 = dx.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                    for (d, &yv) in dx.row_mut(i).iter_mut().zip(y.row(i)) {
                        *d = (*d - yv * dot) / norm;
                    }
                }
                acc(*x, dx);
            }
            Op::Kron(s, a) => {
                let (vs, va) = (self.value(*s), self.value(*a));
                let (p, q) = va.shape();
                if self.wants(*s) {
                    let ds = Matrix::from_fn(vs.rows(), vs.cols(), |i, j| {
                        let mut total = 0.0;
                        for r in 0..p {
                            for c in 0..q {
                                total += g.get(i * p + r, j * q + c) * va.get(r, c);
                            }
                        }
                        total
                    });
                    acc(*s, ds);
                }
                if self.wants(*a) {
                    let mut da = Matrix::zeros(p, q);
                    for i in 0..vs.rows() {
                        for j in 0..vs.cols() {
                            let sij = vs.get(i, j);
                            for r in 0..p {
                                for c in 0..q {
                                    da.data_mut()[r * q + c] += sij * g.get(i * p + r, j * q + c);
                                }
                            }
                        }
                    }
                    acc(*a, da);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = vq.cols();
                let dh = d / layout.heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (tq, tk) = (layout.q_len, layout.k_len);
                let mut dq = Matrix::zeros(vq.rows(), d);
                let mut dk = Matrix::zeros(vk.rows(), d);
                let mut dv = Matrix::zeros(vv.rows(), d);
                let mut dp = vec![0.0; tk];
                for b in 0..layout.batch {
                    for h in 0..layout.heads {
                        let c0 = h * dh;
                        for i in 0..tq {
                            let base = ((b * layout.heads + h) * tq + i) * tk;
                            let go = &g.row(b * tq + i)[c0..c0 + dh];
                            let mut dot = 0.0;
                            for j in 0..tk {
                                let p = probs[base + j];
                                if p == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vj = &vv.row(b * tk + j)[c0..c0 + dh];
                                dp[j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                                dot += p * dp[j];
                                let dvj = &mut dv.row_mut(b * tk + j)[c0..c0 + dh];
                                for (o, x) in dvj.iter_mut().zip(go) {
                                    *o += p * x;
                                }
                            }
                            let qi: Vec<f64> = vq.row(b * tq + i)[c0..c0 + dh].to_vec();
                            for j in 0..tk {
                                let p = probs[base + j];
                                if p == 0.0 {
                                    continue;
                                }
                                let ds = p * (dp[j] - dot) * scale;
                                let kj = &vk.row(b * tk + j)[c0..c0 + dh];
                                let dqi = &mut dq.row_mut(b * tq + i)[c0..c0 + dh];
                                for (o, x) in dqi.iter_mut().zip(kj) {
                                    *o += ds * x;
                                }
                                let dkj = &mut dk.row_mut(b * tk + j)[c0..c0 + dh];
                                for (o, x) in dkj.iter_mut().zip(&qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                if self.wants(*q) {
                    acc(*q, dq);
                }
                if self.wants(*k) {
                    acc(*k, dk);
                }
                if self.wants(*v) {
                    acc(*v, dv);
                }
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::scalar(0.0));
        let y = tape.softplus(x);
        assert!((tape.scalar(y) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(-800.0)).abs() < 1e-300 && softplus(800.0) == 800.0);
    }

    #[test]
    fn sum_gives_all_ones_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::random_normal(3, 4, 1.0, &mut rng()), ParamGroup::Other);
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let loss = tape.sum_all(wv);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w), &Matrix::ones(3, 4));
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::random_normal(2, 5, 1.0, &mut rng()), ParamGroup::Other);
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let sq = tape.mul(wv, wv).unwrap();
        let s = tape.sum_all(sq);
        let loss = tape.scale(s, 0.5);
        tape.backward(loss, &mut store).unwrap();
        assert!(store.grad(w).max_abs_diff(store.value(w)) < 1e-15);
    }

    #[test]
    fn gradients_accumulate_across_uses_and_calls() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::ones(1, 2), ParamGroup::Other);
        let mut tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum_all(s);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w), &Matrix::filled(1, 2, 2.0));
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w), &Matrix::filled(1, 2, 4.0));
        store.zero_gradients();
        assert_eq!(store.grad(w), &Matrix::zeros(1, 2));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::zeros(2, 1));
        assert!(matches!(tape.backward(x, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_parameters_receive_nothing() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::ones(2, 2), ParamGroup::Backbone);
        store.get_mut(w).trainable = false;
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let loss = tape.sum_all(wv);
        assert!(!tape.requires_grad(loss));
        tape.backward(loss, &mut store).unwrap();
        assert!(!store.get(w).has_gradient());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::zeros(2, 3));
        let b = tape.constant(Matrix::zeros(3, 2));
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"));
        let err = tape.matmul(a, a).unwrap_err();
        assert!(err.to_string().contains("matmul") && err.to_string().contains("(2, 3)"));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ce_nonnegative() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::random_normal(5, 7, 3.0, &mut rng()));
        let p = tape.row_softmax(x);
        for i in 0..5 {
            let s: f64 = tape.value(p).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let ce = tape
            .cross_entropy_with_logits(x, &[Some(0), None, Some(6), Some(3), Some(1)])
            .unwrap();
        assert!(tape.scalar(ce) >= 0.0);
    }

    #[test]
    fn uniform_logits_give_length_times_log_vocab() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::zeros(4, 10));
        let ce = tape
            .cross_entropy_with_logits(x, &[Some(1), Some(2), Some(3), Some(9)])
            .unwrap();
        assert!((tape.scalar(ce) - 4.0 * 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn attention_masks_padding_and_future() {
        let mut r = rng();
        let mut tape = Tape::new();
        let q = tape.constant(Matrix::random_normal(3, 4, 1.0, &mut r));
        let k = tape.constant(Matrix::random_normal(3, 4, 1.0, &mut r));
        let v = tape.constant(Matrix::random_normal(3, 4, 1.0, &mut r));
        let layout = AttentionLayout {
            batch: 1,
            q_len: 3,
            k_len: 3,
            heads: 2,
            causal: true,
            key_valid: vec![3],
        };
        let out = tape.attention(q, k, v, layout).unwrap();
        // first query can only see the first key
        assert!(tape.value(out).row(0).iter().zip(tape.value(v).row(0)).all(|(a, b)| (a - b).abs() < 1e-15));
    }
}
