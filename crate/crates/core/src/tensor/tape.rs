use serde::{Deserialize, Serialize};

use super::kernels::{gelu, gelu_grad, matmul_nt, matmul_slices, matmul_tn, sigmoid, tanh, transpose};
use super::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Sigmoid,
    /// Clip to [0, 1]. Backward passes 1 strictly inside the interval and 0
    /// elsewhere.
    ClampUnit,
    Exp,
    Gelu,
}

/// Multiply-accumulate counters maintained while recording.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    pub matmul_macs: u64,
    /// MACs spent forming query-key score matrices only.
    pub attention_score_macs: u64,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Act(Var, Activation),
    Sum(Var),
    Transpose(Var),
    Softmax {
        x: Var,
        weights: Option<Var>,
        normalized_exp: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        x: Var,
        indices: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    EmaShift {
        x: Var,
        decay: f64,
    },
    WeightedMean {
        x: Var,
        weights: Option<Var>,
        denom: f64,
        floor_active: bool,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications in topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    counters: OpCounters,
    stored_bytes: usize,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient recorded for `var` into `tensor`'s grad buffer.
    /// Nodes that received no gradient contribute zeros.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => tensor.accumulate_grad(&vec![0.0; tensor.len()]),
        }
    }
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape {
        op,
        lhs: vec![a.0, a.1],
        rhs: vec![b.0, b.1],
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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

    pub fn counters(&self) -> OpCounters {
        self.counters
    }

    /// Bytes held by recorded values and saved intermediates. The tape only
    /// grows while recording, so this is also its peak footprint.
    pub fn stored_bytes(&self) -> usize {
        self.stored_bytes
    }

    fn push(&mut self, op_name: &'static str, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(value.len(), rows * cols);
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self.op_requires_grad(&op);
        self.stored_bytes += 8 * value.len() + 8 * Self::saved_len(&op);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn saved_len(op: &Op) -> usize {
        match op {
            Op::Softmax { normalized_exp, .. } => normalized_exp.len(),
            Op::LayerNorm { xhat, inv_std, .. } => xhat.len() + inv_std.len(),
            Op::CrossEntropy { probs, .. } => probs.len(),
            Op::GatherRows { indices, .. } => indices.len(),
            _ => 0,
        }
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b) => rg(a) || rg(b),
            Op::Scale(x, _)
            | Op::Offset(x)
            | Op::Act(x, _)
            | Op::Sum(x)
            | Op::Transpose(x)
            | Op::GatherRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::EmaShift { x, .. }
            | Op::CrossEntropy { logits: x, .. } => rg(x),
            Op::Softmax { x, weights, .. } | Op::WeightedMean { x, weights, .. } => {
                rg(x) || weights.as_ref().is_some_and(rg)
            }
            Op::LayerNorm { x, gain, bias, .. } => rg(x) || rg(gain) || rg(bias),
            Op::ConcatCols(parts) => parts.iter().any(rg),
        }
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("tape values are finite and well-shaped")
    }

    /// Records `t` as an input; it participates in differentiation when the
    /// tensor is marked `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        let (rows, cols) = t.dims2()?;
        let v = self.push("leaf", rows, cols, t.data().to_vec(), Op::Leaf)?;
        self.nodes[v.0].requires_grad = t.requires_grad();
        Ok(v)
    }

    /// Records a constant that never receives a gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(shape_err("constant", (rows, cols), (data.len(), 1)));
        }
        self.push("constant", rows, cols, data, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", (m, k), (k2, n)));
        }
        let out = matmul_slices(self.value(a), self.value(b), m, k, n);
        self.counters.matmul_macs += (m * k * n) as u64;
        self.push("matmul", m, n, out, Op::MatMul(a, b))
    }

    /// `a · bᵀ` for query/key score matrices; counted separately from other
    /// matmuls.
    pub fn attention_scores(&mut self, q: Var, k: Var) -> Result<Var> {
        let (m, d) = self.dims(q);
        let (n, d2) = self.dims(k);
        if d != d2 {
            return Err(shape_err("attention_scores", (m, d), (n, d2)));
        }
        let out = matmul_nt(self.value(q), self.value(k), m, d, n);
        let macs = (m * d * n) as u64;
        self.counters.matmul_macs += macs;
        self.counters.attention_score_macs += macs;
        self.push("attention_scores", m, n, out, Op::MatMulNT(q, k))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(shape_err(op, da, db));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push("add", r, c, out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.push("sub", r, c, out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push("mul", r, c, out, Op::Mul(a, b))
    }

    /// Adds a 1×n row to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (r1, n2) = self.dims(row);
        if r1 != 1 || n2 != n {
            return Err(shape_err("add_row", (m, n), (r1, n2)));
        }
        let rv = self.value(row);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        self.push("add_row", m, n, out, Op::AddRow(a, row))
    }

    /// Scales row i of an m×n matrix by element i of an m×1 column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (m2, c1) = self.dims(col);
        if m2 != m || c1 != 1 {
            return Err(shape_err("mul_col", (m, n), (m2, c1)));
        }
        let cv = self.value(col);
        let out = self
            .value(a)
            .chunks(n)
            .zip(cv)
            .flat_map(|(chunk, s)| chunk.iter().map(move |x| x * s))
            .collect();
        self.push("mul_col", m, n, out, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x * factor).collect();
        self.push("scale", r, c, out, Op::Scale(a, factor))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, shift: f64) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x + shift).collect();
        self.push("offset", r, c, out, Op::Offset(a))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let (r, c) = self.dims(a);
        let f: fn(f64) -> f64 = match kind {
            Activation::Tanh => tanh,
            Activation::Sigmoid => sigmoid,
            Activation::ClampUnit => |x: f64| x.clamp(0.0, 1.0),
            Activation::Exp => f64::exp,
            Activation::Gelu => gelu,
        };
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let name = match kind {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::ClampUnit => "clamp_unit",
            Activation::Exp => "exp",
            Activation::Gelu => "gelu",
        };
        self.push(name, r, c, out, Op::Act(a, kind))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn clamp_unit(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::ClampUnit)
    }

    /// Sum of all elements as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().fold(0.0, |acc, x| acc + x);
        self.push("sum", 1, 1, vec![s], Op::Sum(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out = transpose(self.value(a), r, c);
        self.push("transpose", c, r, out, Op::Transpose(a))
    }

    /// Row-wise softmax. With `key_weights` (one weight per column), row i
    /// becomes `w_j e^{x_ij} / Σ_k w_k e^{x_ik}`; unit weights reproduce the
    /// plain softmax exactly. A row whose weighted mass is zero yields zeros.
    pub fn softmax_rows(&mut self, x: Var, key_weights: Option<Var>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(w) = key_weights {
            let wl = self.value(w).len();
            if wl != c {
                return Err(shape_err("softmax_rows", (r, c), self.dims(w)));
            }
        }
        let xv = self.value(x);
        let wv = key_weights.map(|w| self.value(w));
        let mut out = vec![0.0; r * c];
        let mut normalized = if wv.is_some() { vec![0.0; r * c] } else { Vec::new() };
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            if let Some(w) = wv {
                let raw = exps.clone();
                for (e, wj) in exps.iter_mut().zip(w) {
                    *e *= wj;
                }
                let total = exps.iter().fold(0.0, |a, b| a + b);
                if total > 0.0 {
                    for j in 0..c {
                        out[i * c + j] = exps[j] / total;
                        normalized[i * c + j] = raw[j] / total;
                    }
                }
            } else {
                let total = exps.iter().fold(0.0, |a, b| a + b);
                for j in 0..c {
                    out[i * c + j] = exps[j] / total;
                }
            }
        }
        self.push(
            "softmax_rows",
            r,
            c,
            out,
            Op::Softmax {
                x,
                weights: key_weights,
                normalized_exp: normalized,
            },
        )
    }

    /// Layer normalization over each row with 1×n gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        for p in [gain, bias] {
            let d = self.dims(p);
            if d != (1, c) {
                return Err(shape_err("layer_norm_rows", (r, c), d));
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().fold(0.0, |a, v| a + v) / c as f64;
            let var = row.iter().fold(0.0, |a, v| a + (v - mean) * (v - mean)) / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm_rows",
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Softmax cross-entropy of a 1×C logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if r != 1 {
            return Err(shape_err("cross_entropy", (r, c), (1, c)));
        }
        if label >= c {
            return Err(Error::contract(format!("label {label} out of range for {c} classes")));
        }
        let z = self.value(logits);
        let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let total = exps.iter().fold(0.0, |a, b| a + b);
        let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let loss = max + total.ln() - z[label];
        self.push(
            "cross_entropy",
            1,
            1,
            vec![loss],
            Op::CrossEntropy { logits, label, probs },
        )
    }

    /// Selects rows by index (repeats allowed). Backward scatters.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::contract(format!("gather_rows: index {bad} out of {r} rows")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        self.push(
            "gather_rows",
            indices.len(),
            c,
            out,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > c {
            return Err(shape_err("slice_cols", (r, c), (start, len)));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        self.push("slice_cols", r, len, out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_cols: no inputs"));
        };
        let rows = self.dims(first).0;
        let mut total = 0;
        for &p in parts {
            let d = self.dims(p);
            if d.0 != rows {
                return Err(shape_err("concat_cols", self.dims(first), d));
            }
            total += d.1;
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        self.push("concat_cols", rows, total, out, Op::ConcatCols(parts.to_vec()))
    }

    /// Row t of the output is the summary state preceding token t:
    /// `m_0 = 0`, `m_t = decay·m_{t-1} + (1 - decay)·x_t`, output row t holds
    /// `m_t` for the 0-based row index (so row 0 is the zero state).
    pub fn ema_shift(&mut self, x: Var, decay: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Domain(format!("summary decay {decay} outside [0, 1]")));
        }
        let (r, c) = self.dims(x);
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        for t in 1..r {
            for j in 0..c {
                out[t * c + j] = decay * out[(t - 1) * c + j] + (1.0 - decay) * xv[(t - 1) * c + j];
            }
        }
        self.push("ema_shift", r, c, out, Op::EmaShift { x, decay })
    }

    /// Mean of rows weighted by `weights` (one per row):
    /// `Σ w_t x_t / max(Σ w_t, 1)`. Without weights this is the plain row
    /// mean.
    pub fn weighted_mean_rows(&mut self, x: Var, weights: Option<Var>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if r == 0 {
            return Err(Error::contract("weighted_mean_rows: no rows"));
        }
        let xv = self.value(x);
        let mut acc = vec![0.0; c];
        let (denom, floor_active) = match weights {
            None => {
                for row in xv.chunks(c) {
                    add_into(&mut acc, row);
                }
                (r as f64, false)
            }
            Some(w) => {
                let wv = self.value(w);
                if wv.len() != r {
                    return Err(shape_err("weighted_mean_rows", (r, c), self.dims(w)));
                }
                for (row, wt) in xv.chunks(c).zip(wv) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += wt * v;
                    }
                }
                let total = wv.iter().fold(0.0, |a, b| a + b);
                if total > 1.0 {
                    (total, false)
                } else {
                    (1.0, true)
                }
            }
        };
        let out = acc.into_iter().map(|a| a / denom).collect();
        self.push(
            "weighted_mean_rows",
            1,
            c,
            out,
            Op::WeightedMean {
                x,
                weights,
                denom,
                floor_active,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Each node is visited once, in
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(Error::contract(format!("backward requires a scalar loss, got {r}x{c}")));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => add_into(existing, &delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if rg(*a) {
                    send(*a, matmul_nt(g, self.value(*b), m, n, k));
                }
                if rg(*b) {
                    send(*b, matmul_tn(self.value(*a), g, m, k, n));
                }
            }
            Op::MatMulNT(a, b) => {
                // out = a · bᵀ, a: m×d, b: n×d
                let (m, d) = self.dims(*a);
                let n = cols;
                if rg(*a) {
                    send(*a, matmul_slices(g, self.value(*b), m, n, d));
                }
                if rg(*b) {
                    send(*b, matmul_tn(g, self.value(*a), m, n, d));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                if rg(*b) {
                    send(*b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    send(*a, g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect());
                }
                if rg(*b) {
                    send(*b, g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRow(a, row) => {
                send(*a, g.to_vec());
                if rg(*row) {
                    let mut acc = vec![0.0; cols];
                    for chunk in g.chunks(cols) {
                        add_into(&mut acc, chunk);
                    }
                    send(*row, acc);
                }
            }
            Op::MulCol(a, col) => {
                let cv = self.value(*col);
                if rg(*a) {
                    let d = g
                        .chunks(cols)
                        .zip(cv)
                        .flat_map(|(chunk, s)| chunk.iter().map(move |x| x * s))
                        .collect();
                    send(*a, d);
                }
                if rg(*col) {
                    let av = self.value(*a);
                    let d = g
                        .chunks(cols)
                        .zip(av.chunks(cols))
                        .map(|(gc, ac)| gc.iter().zip(ac).fold(0.0, |s, (x, y)| s + x * y))
                        .collect();
                    send(*col, d);
                }
            }
            Op::Scale(a, f) => send(*a, g.iter().map(|v| v * f).collect()),
            Op::Offset(a) => send(*a, g.to_vec()),
            Op::Act(a, kind) => {
                let x = self.value(*a);
                let y = &node.value;
                let d = match kind {
                    Activation::Tanh => g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Activation::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    Activation::ClampUnit => g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 && x < 1.0 { *g } else { 0.0 })
                        .collect(),
                    Activation::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                    Activation::Gelu => g.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect(),
                };
                send(*a, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                send(*a, vec![g[0]; n]);
            }
            Op::Transpose(a) => send(*a, transpose(g, rows, cols)),
            Op::Softmax {
                x,
                weights,
                normalized_exp,
            } => {
                let y = &node.value;
                let mut dx = vec![0.0; rows * cols];
                let mut dw = vec![0.0; cols];
                for i in 0..rows {
                    let gr = &g[i * cols..(i + 1) * cols];
                    let yr = &y[i * cols..(i + 1) * cols];
                    let dot = gr.iter().zip(yr).fold(0.0, |s, (a, b)| s + a * b);
                    for j in 0..cols {
                        dx[i * cols + j] = yr[j] * (gr[j] - dot);
                    }
                    if weights.is_some() {
                        let nr = &normalized_exp[i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            dw[j] += nr[j] * (gr[j] - dot);
                        }
                    }
                }
                send(*x, dx);
                if let Some(w) = weights {
                    send(*w, dw);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let n = cols as f64;
                let mut dx = vec![0.0; rows * cols];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                for i in 0..rows {
                    let gr = &g[i * cols..(i + 1) * cols];
                    let hr = &xhat[i * cols..(i + 1) * cols];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..cols {
                        let dh = gr[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    for j in 0..cols {
                        let dh = gr[j] * gv[j];
                        dx[i * cols + j] = inv_std[i] / n * (n * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                send(*x, dx);
                send(*gain, dgain);
                send(*bias, dbias);
            }
            Op::CrossEntropy { logits, label, probs } => {
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                d[*label] -= g[0];
                send(*logits, d);
            }
            Op::GatherRows { x, indices } => {
                let (r, c) = self.dims(*x);
                let mut d = vec![0.0; r * c];
                for (out_row, &src) in indices.iter().enumerate() {
                    add_into(&mut d[src * c..(src + 1) * c], &g[out_row * c..(out_row + 1) * c]);
                }
                send(*x, d);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.dims(*x);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + cols].copy_from_slice(&g[i * cols..(i + 1) * cols]);
                }
                send(*x, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    if rg(p) {
                        let mut d = Vec::with_capacity(rows * pc);
                        for i in 0..rows {
                            d.extend_from_slice(&g[i * cols + offset..i * cols + offset + pc]);
                        }
                        send(p, d);
                    }
                    offset += pc;
                }
            }
            Op::EmaShift { x, decay } => {
                let mut dx = vec![0.0; rows * cols];
                let mut carry = vec![0.0; cols];
                for t in (1..rows).rev() {
                    for j in 0..cols {
                        carry[j] = g[t * cols + j] + decay * carry[j];
                        dx[(t - 1) * cols + j] = (1.0 - decay) * carry[j];
                    }
                }
                send(*x, dx);
            }
            Op::WeightedMean {
                x,
                weights,
                denom,
                floor_active,
            } => {
                let (r, c) = self.dims(*x);
                match weights {
                    None => {
                        let d = (0..r).flat_map(|_| g.iter().map(|v| v / denom)).collect();
                        send(*x, d);
                    }
                    Some(w) => {
                        let wv = self.value(*w);
                        if rg(*x) {
                            let d = wv.iter().flat_map(|wt| g.iter().map(move |v| wt * v / denom)).collect();
                            send(*x, d);
                        }
                        if rg(*w) {
                            let out_dot = node.value.iter().zip(g).fold(0.0, |s, (a, b)| s + a * b);
                            let xv = self.value(*x);
                            let d = xv
                                .chunks(c)
                                .map(|row| {
                                    let xg = row.iter().zip(g).fold(0.0, |s, (a, b)| s + a * b);
                                    if *floor_active {
                                        xg / denom
                                    } else {
                                        (xg - out_dot) / denom
                                    }
                                })
                                .collect();
                            send(*w, d);
                        }
                    }
                }
            }
        }
    }
}
