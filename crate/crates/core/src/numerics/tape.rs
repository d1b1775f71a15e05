//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Forward operations append nodes to a [`Tape`]; [`Tape::backward`] walks the
//! tape once in reverse, so every node is visited after all of its consumers.
//! Most nodes are matrix-level; attention, layer norm and the loss heads are
//! fused nodes with hand-written adjoints.

use std::collections::BTreeMap;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const LOG_FLOOR: f64 = 1e-12;

enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Add(Var, Var),
    /// matrix plus a row vector broadcast over rows
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Gelu(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// `out[r] = src[rows[r]]`
    Gather {
        src: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
    SoftmaxRows(Var),
    /// per-row `-Σ_c t_c log max(p_c, floor)` with `p = softmax(row)`
    CrossEntropy {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
    },
    SquaredError {
        pred: Var,
        targets: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct AttentionLayout {
    heads: usize,
    seq_len: usize,
    lengths: Vec<usize>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push(value, Op::Param(name.into()), true)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let data = kernels::matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`: with `b` stored `out×in` this is a linear layer.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (n, k2) = self.dims(b)?;
        if k != k2 {
            return Err(self.dim_err("matmul_nt", a, b));
        }
        let data = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMulNT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.dim_err("add", a, b));
        }
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += y;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.dims(x)?;
        if self.value(bias).len() != cols {
            return Err(self.dim_err("add_row", x, bias));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    /// `x · wᵀ + b` with `w` stored `out×in`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul_nt(x, weight)?;
        self.add_row(y, bias)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            let u = *v;
            *v = 0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh());
        }
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Multiplies by a precomputed mask (see [`super::dropout_mask`]).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(contract("dropout mask length differs from input"));
        }
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Row-wise layer norm with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x)?;
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(self.dim_err("layer_norm", x, gamma));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normed = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let n = (row[c] - mu) * inv;
                normed[r * cols + c] = n;
                out[r * cols + c] = n * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    /// Row lookup: `out[r] = src[rows[r]]`. Serves both embedding tables and
    /// picking out particular positions.
    pub fn gather(&mut self, src: Var, rows: Vec<usize>) -> Result<Var> {
        let (n, cols) = self.dims(src)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(contract(format!("row index {bad} out of range for {n} rows")));
        }
        if rows.is_empty() {
            return Err(contract("gather of zero rows"));
        }
        let s = self.value(src);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in &rows {
            data.extend_from_slice(s.row(r));
        }
        let rg = self.rg(src);
        Ok(self.push(Tensor::new(vec![rows.len(), cols], data)?, Op::Gather { src, rows }, rg))
    }

    /// Multi-head scaled dot-product self-attention over a padded batch.
    ///
    /// `q`, `k`, `v` are `(B·seq_len)×d`, sequence `b` occupying rows
    /// `b·seq_len ..`. Keys at positions `>= lengths[b]` are masked (their
    /// logits are −∞); output rows for padded queries are zero.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        lengths: &[usize],
    ) -> Result<Var> {
        let (rows, d) = self.dims(q)?;
        if self.value(k).shape() != self.value(q).shape() || self.value(v).shape() != self.value(q).shape() {
            return Err(self.dim_err("attention", q, k));
        }
        if heads == 0 || d % heads != 0 {
            return Err(contract(format!("{d} not divisible into {heads} heads")));
        }
        if rows != seq_len * lengths.len() || lengths.iter().any(|&l| l == 0 || l > seq_len) {
            return Err(contract("attention layout does not match input rows"));
        }
        let layout = AttentionLayout {
            heads,
            seq_len,
            lengths: lengths.to_vec(),
        };
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            d,
            &layout,
        );
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
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

    /// Attention probabilities recorded by an attention node, laid out
    /// `[batch][head][query][key]` with `seq_len` keys per query.
    pub fn attention_probs(&self, node: Var) -> Option<&[f64]> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Softmax across each row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.dims(x)?;
        let mut out = self.value(x).clone();
        out.data_mut().chunks_mut(cols).for_each(kernels::softmax_in_place);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    /// Per-row cross-entropy against target distributions (`targets` is
    /// row-major with the same shape as `logits`). Returns an `n`-vector.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<f64>) -> Result<Var> {
        let (rows, cols) = self.dims(logits)?;
        if targets.len() != rows * cols {
            return Err(contract("cross-entropy targets do not match logits"));
        }
        let mut probs = self.value(logits).data().to_vec();
        probs.chunks_mut(cols).for_each(kernels::softmax_in_place);
        let losses: Vec<f64> = (0..rows)
            .map(|r| {
                let p = &probs[r * cols..(r + 1) * cols];
                let t = &targets[r * cols..(r + 1) * cols];
                -p.iter()
                    .zip(t)
                    .map(|(&pc, &tc)| tc * pc.max(LOG_FLOOR).ln())
                    .sum::<f64>()
            })
            .collect();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::new(vec![rows], losses)?,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            rg,
        ))
    }

    /// Per-entry `(pred - target)²`, returned flat.
    pub fn squared_error(&mut self, pred: Var, targets: Vec<f64>) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != targets.len() {
            return Err(contract("squared-error targets do not match predictions"));
        }
        let out: Vec<f64> = p.data().iter().zip(&targets).map(|(a, b)| (a - b) * (a - b)).collect();
        let n = out.len();
        let rg = self.rg(pred);
        Ok(self.push(Tensor::new(vec![n], out)?, Op::SquaredError { pred, targets }, rg))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).shape().is_empty() && self.value(loss).len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Param(_) | Op::Constant);
            if is_leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Param(name) = &node.op {
                let data = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                let t = Tensor::new(node.value.shape().to_vec(), data)?;
                match params.get_mut(name) {
                    None => {
                        params.insert(name.clone(), t);
                    }
                    Some(acc) => {
                        let acc: &mut Tensor = acc;
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                }
            }
        }
        Ok(Gradients { params })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contribution: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(contribution).for_each(|(b, c)| *b += c),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("checked in forward");
                let (_, n) = self.value(*b).dims2().expect("checked in forward");
                if self.rg(*a) {
                    acc(*a, kernels::matmul_nt(g, self.value(*b).data(), m, n, k));
                }
                if self.rg(*b) {
                    acc(*b, kernels::matmul_tn(self.value(*a).data(), g, m, k, n));
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("checked in forward");
                let (n, _) = self.value(*b).dims2().expect("checked in forward");
                if self.rg(*a) {
                    acc(*a, kernels::matmul_nn(g, self.value(*b).data(), m, n, k));
                }
                if self.rg(*b) {
                    acc(*b, kernels::matmul_tn(g, self.value(*a).data(), m, n, k));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::AddRow(x, bias) => {
                acc(*x, g.to_vec());
                let cols = self.value(*bias).len();
                let mut db = vec![0.0; cols];
                for row in g.chunks(cols) {
                    db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                }
                acc(*bias, db);
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                let d = xs
                    .iter()
                    .zip(g)
                    .map(|(&u, &gv)| {
                        let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u);
                        gv * (0.5 * (1.0 + t) + 0.5 * u * dt)
                    })
                    .collect();
                acc(*x, d);
            }
            Op::Dropout { x, mask } => acc(*x, g.iter().zip(mask).map(|(a, m)| a * m).collect()),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let cols = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                let mut dx = vec![0.0; g.len()];
                let mut dn = vec![0.0; cols];
                for (r, inv) in inv_std.iter().enumerate() {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let nr = &normed[r * cols..(r + 1) * cols];
                    let mut mean_dn = 0.0;
                    let mut mean_dn_n = 0.0;
                    for c in 0..cols {
                        dgamma[c] += gr[c] * nr[c];
                        dbeta[c] += gr[c];
                        dn[c] = gr[c] * gam[c];
                        mean_dn += dn[c];
                        mean_dn_n += dn[c] * nr[c];
                    }
                    mean_dn /= cols as f64;
                    mean_dn_n /= cols as f64;
                    for c in 0..cols {
                        dx[r * cols + c] = inv * (dn[c] - mean_dn - nr[c] * mean_dn_n);
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Gather { src, rows } => {
                let s = self.value(*src);
                let cols = s.len() / s.shape()[0];
                let mut d = vec![0.0; s.len()];
                for (r, &src_row) in rows.iter().enumerate() {
                    let target = &mut d[src_row * cols..(src_row + 1) * cols];
                    target
                        .iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                        .for_each(|(t, v)| *t += v);
                }
                acc(*src, d);
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let d = self.value(*q).shape()[1];
                let (dq, dk, dv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    d,
                    layout,
                );
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap_or(&1);
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*x, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (_, cols) = self.value(*logits).dims2().expect("checked in forward");
                let mut d = vec![0.0; probs.len()];
                for (r, &gr) in g.iter().enumerate() {
                    let p = &probs[r * cols..(r + 1) * cols];
                    let t = &targets[r * cols..(r + 1) * cols];
                    // p_c · ∂L/∂p_c, which is -t_c unless p_c sits on the floor.
                    let pa: Vec<f64> = p
                        .iter()
                        .zip(t)
                        .map(|(&pc, &tc)| if pc >= LOG_FLOOR { -tc } else { 0.0 })
                        .collect();
                    let total: f64 = pa.iter().sum();
                    for c in 0..cols {
                        d[r * cols + c] = gr * (pa[c] - p[c] * total);
                    }
                }
                acc(*logits, d);
            }
            Op::SquaredError { pred, targets } => {
                let p = self.value(*pred).data();
                acc(
                    *pred,
                    p.iter()
                        .zip(targets)
                        .zip(g)
                        .map(|((a, b), gv)| 2.0 * (a - b) * gv)
                        .collect(),
                );
            }
        }
    }
}

fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    layout: &AttentionLayout,
) -> (Vec<f64>, Vec<f64>) {
    let AttentionLayout {
        heads,
        seq_len: l,
        lengths,
    } = layout;
    let (heads, l) = (*heads, *l);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    let mut probs = vec![0.0; lengths.len() * heads * l * l];
    for (b, &len) in lengths.iter().enumerate() {
        let base = b * l;
        for h in 0..heads {
            let off = h * dh;
            for i in 0..len {
                let qi = &q[(base + i) * d + off..(base + i) * d + off + dh];
                let p = &mut probs[((b * heads + h) * l + i) * l..((b * heads + h) * l + i) * l + len];
                for (j, pj) in p.iter_mut().enumerate() {
                    let kj = &k[(base + j) * d + off..(base + j) * d + off + dh];
                    *pj = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                }
                kernels::softmax_in_place(p);
                let oi = &mut out[(base + i) * d + off..(base + i) * d + off + dh];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &v[(base + j) * d + off..(base + j) * d + off + dh];
                    oi.iter_mut().zip(vj).for_each(|(o, x)| *o += pj * x);
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::type_complexity)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    d: usize,
    layout: &AttentionLayout,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (heads, l) = (layout.heads, layout.seq_len);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut ds = vec![0.0; l];
    for (b, &len) in layout.lengths.iter().enumerate() {
        let base = b * l;
        for h in 0..heads {
            let off = h * dh;
            for i in 0..len {
                let row = (base + i) * d + off;
                let gi = &g[row..row + dh];
                let p = &probs[((b * heads + h) * l + i) * l..((b * heads + h) * l + i) * l + len];
                let mut dot = 0.0;
                for (j, &pj) in p.iter().enumerate() {
                    let col = (base + j) * d + off;
                    let dp: f64 = gi.iter().zip(&v[col..col + dh]).map(|(a, c)| a * c).sum();
                    ds[j] = dp;
                    dot += pj * dp;
                    dv[col..col + dh].iter_mut().zip(gi).for_each(|(t, x)| *t += pj * x);
                }
                for (j, &pj) in p.iter().enumerate() {
                    let col = (base + j) * d + off;
                    let s = pj * (ds[j] - dot) * scale;
                    for e in 0..dh {
                        dq[row + e] += s * k[col + e];
                        dk[col + e] += s * q[row + e];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Gradients of every parameter leaf recorded on the tape, keyed by name.
/// Leaves the loss does not depend on hold exact zeros.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.values_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    /// Central differences on every coordinate of `inputs`, where `f` rebuilds
    /// the graph from scratch.
    fn check_grad(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(format!("p{i}"), t.clone()))
            .collect();
        let loss = f(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let eval = |ts: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ts.iter().map(|x| t.constant(x.clone())).collect();
            let l = f(&mut t, &vs);
            t.value(l).data()[0]
        };
        let h = 1e-5;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get(&format!("p{i}")).unwrap();
            for c in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[c] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[c] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[c];
                let scale = a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (a - numeric).abs() / scale < 1e-5,
                    "input {i} coord {c}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut RngState::new(seed))
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let w = tape.param("w", rand(&[2, 3], 1));
        let loss = tape.sum(w);
        let g = tape.backward(loss).unwrap();
        assert!(g.get("w").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_times_anything_gives_zero() {
        let mut tape = Tape::new();
        let w = tape.param("w", rand(&[2, 3], 1));
        let s = tape.gelu(w);
        let s = tape.sum(s);
        let loss = tape.scale(s, 0.0);
        let g = tape.backward(loss).unwrap();
        assert!(g.get("w").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unreachable_params_get_exact_zero() {
        let mut tape = Tape::new();
        let w = tape.param("w", rand(&[2], 1));
        let _unused = tape.param("u", rand(&[4], 2));
        let loss = tape.sum(w);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("u").unwrap(), &Tensor::zeros(&[4]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param("w", rand(&[2], 1));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_grads() {
        check_grad(&[rand(&[3, 4], 1), rand(&[4, 2], 2)], |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            let y = t.gelu(y);
            t.sum(y)
        });
        check_grad(&[rand(&[3, 4], 3), rand(&[5, 4], 4), rand(&[5], 5)], |t, v| {
            let y = t.linear(v[0], v[1], v[2]).unwrap();
            let y = t.gelu(y);
            t.mean(y)
        });
    }

    #[test]
    fn layer_norm_grads_and_stats() {
        let x = rand(&[3, 6], 7);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(Tensor::filled(&[6], 1.0));
        let b = tape.constant(Tensor::zeros(&[6]));
        let y = tape.layer_norm(xv, g, b).unwrap();
        for r in 0..3 {
            let row = tape.value(y).row(r);
            let mu = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 6.0;
            assert!(mu.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
        let w = rand(&[3, 6], 8);
        check_grad(&[x, rand(&[6], 9), rand(&[6], 10)], move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
            let wv = t.constant(w.clone());
            let y = t.matmul_nt(y, wv).unwrap();
            t.sum(y)
        });
    }

    #[test]
    fn attention_grads_with_padding() {
        let lengths = [3usize, 2];
        let w = rand(&[8, 4], 20);
        check_grad(&[rand(&[8, 4], 11), rand(&[8, 4], 12), rand(&[8, 4], 13)], move |t, v| {
            let a = t.attention(v[0], v[1], v[2], 2, 4, &lengths).unwrap();
            let wv = t.constant(w.clone());
            let y = t.matmul_nt(a, wv).unwrap();
            let y = t.gelu(y);
            t.sum(y)
        });
    }

    #[test]
    fn attention_rows_are_distributions_and_padding_is_ignored() {
        let mut tape = Tape::new();
        let q = tape.constant(rand(&[8, 4], 1));
        let k = tape.constant(rand(&[8, 4], 2));
        let mut vdata = rand(&[8, 4], 3);
        let v = tape_const(&mut tape, &vdata);
        let a = tape.attention(q, k, v, 2, 4, &[3, 4]).unwrap();
        let probs = tape.attention_probs(a).unwrap().to_vec();
        let first = tape.value(a).clone();
        for b in 0..2 {
            let len = [3, 4][b];
            for h in 0..2 {
                for i in 0..len {
                    let start = ((b * 2 + h) * 4 + i) * 4;
                    let s: f64 = probs[start..start + 4].iter().sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
        // Changing a padded value row must not change any valid output.
        vdata.data_mut()[3 * 4] += 100.0;
        let mut tape2 = Tape::new();
        let q2 = tape2.constant(rand(&[8, 4], 1));
        let k2 = tape2.constant(rand(&[8, 4], 2));
        let v2 = tape_const(&mut tape2, &vdata);
        let a2 = tape2.attention(q2, k2, v2, 2, 4, &[3, 4]).unwrap();
        assert_eq!(&tape2.value(a2).data()[..12], &first.data()[..12]);
    }

    fn tape_const(t: &mut Tape, x: &Tensor) -> Var {
        t.constant(x.clone())
    }

    #[test]
    fn gather_and_reshape_grads() {
        check_grad(&[rand(&[5, 3], 30)], |t, v| {
            let g = t.gather(v[0], vec![4, 1, 4, 0]).unwrap();
            let g = t.gelu(g);
            let r = t.reshape(g, vec![12]).unwrap();
            t.sum(r)
        });
    }

    #[test]
    fn cross_entropy_grads() {
        let targets = vec![0.2, 0.5, 0.3, 0.0, 1.0, 0.0];
        check_grad(&[rand(&[2, 3], 40)], move |t, v| {
            let l = t.cross_entropy(v[0], targets.clone()).unwrap();
            t.sum(l)
        });
    }

    #[test]
    fn softmax_rows_and_squared_error_grads() {
        check_grad(&[rand(&[2, 3], 41)], |t, v| {
            let s = t.softmax_rows(v[0]).unwrap();
            let e = t.squared_error(s, vec![1.0, 0.0, 0.0, 0.2, 0.3, 0.5]).unwrap();
            t.sum(e)
        });
    }

    #[test]
    fn dropout_mask_is_respected_in_backward() {
        let mut tape = Tape::new();
        let w = tape.param("w", rand(&[4], 1));
        let d = tape.dropout(w, vec![0.0, 2.0, 2.0, 0.0]).unwrap();
        let loss = tape.sum(d);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[0.0, 2.0, 2.0, 0.0]);
    }
}
