//! Reverse-mode automatic differentiation over a per-pass tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse, accumulating
//! gradients additively into every input that requires them. Parameters
//! enter the tape through [`Graph::param`] and their gradients are copied
//! back with [`Graph::accumulate_param_grads`].

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Reshape { a: Var },
    Relu { a: Var },
    Gelu { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Softmax { a: Var, axis: usize },
    LogSoftmax { a: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    AvgPool2d { x: Var, kernel: (usize, usize), stride: (usize, usize) },
    GlobalMeanMaxPool { x: Var, argmax: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64>, train: bool },
    Blend { w: Var, x: Var, y: Var },
    Sum { a: Var },
    Mean { a: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Running statistics used by batch norm in evaluation mode.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch mean and unbiased variance from a training-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// For each element of `a_shape`, the flat index into a broadcast operand
/// whose shape, left-padded with ones, has each dim equal to 1 or to `a`'s.
fn broadcast_map(a_shape: &[usize], b_shape: &[usize]) -> Option<Vec<usize>> {
    if b_shape.len() > a_shape.len() {
        return None;
    }
    let pad = a_shape.len() - b_shape.len();
    let mut b_full = vec![1usize; pad];
    b_full.extend_from_slice(b_shape);
    if b_full.iter().zip(a_shape).any(|(&b, &a)| b != 1 && b != a) {
        return None;
    }
    let rank = a_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        strides[d] = if b_full[d] == 1 { 0 } else { s };
        s *= b_full[d];
    }
    let n: usize = a_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < a_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Input that gradients flow into.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Parameter value, entered once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.params.insert(id, v);
        v
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds this graph's parameter gradients into the store's buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        let mut ids: Vec<_> = self.params.iter().collect();
        ids.sort_by_key(|(id, _)| **id);
        for (&id, &v) in ids {
            if let Some(g) = self.grad(v) {
                store.accumulate_grad(id, g);
            }
        }
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_broadcast("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_broadcast("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    fn binary_broadcast(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = if ta.shape == tb.shape {
            ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let map = broadcast_map(&ta.shape, &tb.shape).ok_or_else(|| Error::Shape {
                op,
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            })?;
            ta.data.iter().zip(&map).map(|(&x, &j)| f(x, tb.data[j])).collect()
        };
        Ok(Tensor { shape: ta.shape.clone(), data })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|x| x * c).collect() };
        let rg = self.rg(a);
        self.push(out, Op::Scale { a, c }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|x| x + c).collect() };
        let rg = self.rg(a);
        self.push(out, Op::AddScalar { a }, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&x| f(x)).collect() };
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()), Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    /// `w * x + (1 - w) * y`, returning `x` exactly where `x == y`.
    pub fn blend(&mut self, w: Var, x: Var, y: Var) -> Result<Var> {
        let (tw, tx, ty) = (self.value(w), self.value(x), self.value(y));
        if tw.shape != tx.shape || tx.shape != ty.shape {
            return Err(Error::Shape { op: "blend", lhs: tx.shape.clone(), rhs: ty.shape.clone() });
        }
        let data = tw
            .data
            .iter()
            .zip(tx.data.iter().zip(&ty.data))
            .map(|(&w, (&x, &y))| if x == y { x } else { w * x + (1.0 - w) * y })
            .collect();
        let out = Tensor { shape: tx.shape.clone(), data };
        let rg = self.rg(w) || self.rg(x) || self.rg(y);
        Ok(self.push(out, Op::Blend { w, x, y }, rg))
    }

    // ---- shape -------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::Shape { op: "reshape", lhs: t.shape.clone(), rhs: shape.to_vec() });
        }
        let out = Tensor { shape: shape.to_vec(), data: t.data.clone() };
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape { a }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape.len() != 2 {
            return Err(Error::Shape { op: "transpose", lhs: t.shape.clone(), rhs: vec![] });
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data[i * c + j];
            }
        }
        let out = Tensor { shape: vec![c, r], data };
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose { a }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(parts[0]).shape.clone();
        if axis >= first.len() {
            return Err(Error::Shape { op: "concat", lhs: first, rhs: vec![axis] });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &n)| d != axis && n != first[d])
            {
                return Err(Error::Shape { op: "concat", lhs: first.clone(), rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor { shape, data }, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.shape.len() || start + len > t.shape[axis] {
            return Err(Error::Shape { op: "slice", lhs: t.shape.clone(), rhs: vec![axis, start, len] });
        }
        let (outer, n, inner) = split_axis(&t.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&t.data[base..base + len * inner]);
        }
        let mut shape = t.shape.clone();
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::Slice { a, axis, start }, rg))
    }

    // ---- linear algebra ----------------------------------------------

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::Shape { op: "matmul", lhs: ta.shape.clone(), rhs: tb.shape.clone() });
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut data = vec![0.0; m * n];
        gemm_nn(&ta.data, &tb.data, &mut data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::MatMul { a, b }, rg))
    }

    /// Rows `ids` of a `(vocab, d)` table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape.len() != 2 {
            return Err(Error::Shape { op: "embedding_lookup", lhs: t.shape.clone(), rhs: vec![ids.len()] });
        }
        let (vocab, d) = (t.shape[0], t.shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Invalid(format!("embedding_lookup: id {bad} >= vocab {vocab}")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t.data[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor { shape: vec![ids.len(), d], data }, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    // ---- normalization -----------------------------------------------

    fn softmax_impl(&self, a: Var, axis: usize, log: bool) -> Result<Tensor> {
        let t = self.value(a);
        if axis >= t.shape.len() {
            return Err(Error::Shape { op: "softmax", lhs: t.shape.clone(), rhs: vec![axis] });
        }
        let (outer, n, inner) = split_axis(&t.shape, axis);
        let mut data = vec![0.0; t.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| t.data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..n).map(|j| (t.data[at(j)] - max).exp()).sum();
                for j in 0..n {
                    let z = t.data[at(j)] - max;
                    data[at(j)] = if log { z - sum.ln() } else { z.exp() / sum };
                }
            }
        }
        Ok(Tensor { shape: t.shape.clone(), data })
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.softmax_impl(a, axis, false)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax { a, axis }, rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.softmax_impl(a, axis, true)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogSoftmax { a, axis }, rg))
    }

    /// Normalizes over the last axis, then scales by `gamma` and shifts by `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape.last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape { op: "layer_norm", lhs: t.shape.clone(), rhs: self.shape(gamma).to_vec() });
        }
        let rows = t.numel() / d;
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                data[r * d + j] = xh * g[j] + b[j];
            }
        }
        let out = Tensor { shape: t.shape.clone(), data };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Batch norm over axis 1 of an `(N, C, ...)` tensor.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let t = self.value(x);
        if t.shape.len() < 2 || self.shape(gamma) != [t.shape[1]] || self.shape(beta) != [t.shape[1]] {
            return Err(Error::Shape { op: "batch_norm", lhs: t.shape.clone(), rhs: self.shape(gamma).to_vec() });
        }
        let (outer, c, inner) = split_axis(&t.shape, 1);
        let count = (outer * inner) as f64;
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let train = matches!(mode, BatchNormMode::Train);
        match mode {
            BatchNormMode::Train => {
                for ch in 0..c {
                    let mut s = 0.0;
                    for o in 0..outer {
                        s += t.data[(o * c + ch) * inner..(o * c + ch + 1) * inner].iter().sum::<f64>();
                    }
                    mean[ch] = s / count;
                    let mut v = 0.0;
                    for o in 0..outer {
                        for &e in &t.data[(o * c + ch) * inner..(o * c + ch + 1) * inner] {
                            v += (e - mean[ch]) * (e - mean[ch]);
                        }
                    }
                    var[ch] = v / count;
                }
            }
            BatchNormMode::Eval { mean: m, var: v } => {
                if m.len() != c || v.len() != c {
                    return Err(Error::Shape { op: "batch_norm", lhs: t.shape.clone(), rhs: vec![m.len()] });
                }
                mean.copy_from_slice(m);
                var.copy_from_slice(v);
            }
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; t.numel()];
        let mut data = vec![0.0; t.numel()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    let xh = (t.data[i] - mean[ch]) * rstd[ch];
                    xhat[i] = xh;
                    data[i] = xh * g[ch] + b[ch];
                }
            }
        }
        let stats = train.then(|| BatchStats {
            mean: mean.clone(),
            var: var.iter().map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v }).collect(),
        });
        let out = Tensor { shape: t.shape.clone(), data };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok((self.push(out, Op::BatchNorm { x, gamma, beta, xhat, rstd, train }, rg), stats))
    }

    // ---- convolution and pooling ---------------------------------------

    /// `(N, Cin, H, W)` with weights `(Cout, Cin, kh, kw)` and optional
    /// bias `(Cout)`; "same" padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.shape.len() != 4 || tw.shape.len() != 4 || tx.shape[1] != tw.shape[1] || stride == 0 {
            return Err(Error::Shape { op: "conv2d", lhs: tx.shape.clone(), rhs: tw.shape.clone() });
        }
        if let Some(b) = b {
            if self.shape(b) != [tw.shape[0]] {
                return Err(Error::Shape { op: "conv2d bias", lhs: tw.shape.clone(), rhs: self.shape(b).to_vec() });
            }
        }
        let (n, c_in, h, wd) = (tx.shape[0], tx.shape[1], tx.shape[2], tx.shape[3]);
        let (c_out, kh, kw) = (tw.shape[0], tw.shape[2], tw.shape[3]);
        let geom = ConvGeom::same(c_in, h, wd, kh, kw, stride);
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut buf = vec![0.0; rows * cols];
        let mut data = vec![0.0; n * c_out * cols];
        let img = c_in * h * wd;
        for i in 0..n {
            let out = &mut data[i * c_out * cols..(i + 1) * c_out * cols];
            if kh == 1 && kw == 1 && stride == 1 {
                gemm_nn(&tw.data, &tx.data[i * img..(i + 1) * img], out, c_out, rows, cols);
            } else {
                im2col(&tx.data[i * img..(i + 1) * img], &geom, &mut buf);
                gemm_nn(&tw.data, &buf, out, c_out, rows, cols);
            }
            if let Some(b) = b {
                let bias = &self.value(b).data;
                for (co, chunk) in out.chunks_mut(cols).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bias[co]);
                }
            }
        }
        let out = Tensor { shape: vec![n, c_out, geom.h_out, geom.w_out], data };
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    fn pool_dims(&self, op: &'static str, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<[usize; 6]> {
        let s = self.shape(x);
        if s.len() != 4 || kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 || s[2] < kernel.0 || s[3] < kernel.1 {
            return Err(Error::Shape { op, lhs: s.to_vec(), rhs: vec![kernel.0, kernel.1] });
        }
        let ho = (s[2] - kernel.0) / stride.0 + 1;
        let wo = (s[3] - kernel.1) / stride.1 + 1;
        Ok([s[0] * s[1], s[2], s[3], ho, wo, 0])
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let [planes, h, w, ho, wo, _] = self.pool_dims("max_pool2d", x, kernel, stride)?;
        let t = self.value(x);
        let mut data = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = usize::MAX;
                    for ki in 0..kernel.0 {
                        for kj in 0..kernel.1 {
                            let idx = (p * h + oi * stride.0 + ki) * w + oj * stride.1 + kj;
                            if best == usize::MAX || t.data[idx] > t.data[best] {
                                best = idx;
                            }
                        }
                    }
                    data.push(t.data[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = t.shape.clone();
        shape[2] = ho;
        shape[3] = wo;
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::MaxPool2d { x, argmax }, rg))
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let [planes, h, w, ho, wo, _] = self.pool_dims("avg_pool2d", x, kernel, stride)?;
        let t = self.value(x);
        let inv = 1.0 / (kernel.0 * kernel.1) as f64;
        let mut data = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut s = 0.0;
                    for ki in 0..kernel.0 {
                        let row = (p * h + oi * stride.0 + ki) * w + oj * stride.1;
                        s += t.data[row..row + kernel.1].iter().sum::<f64>();
                    }
                    data.push(s * inv);
                }
            }
        }
        let mut shape = t.shape.clone();
        shape[2] = ho;
        shape[3] = wo;
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::AvgPool2d { x, kernel, stride }, rg))
    }

    /// `(N, C, T, F) -> (N, C)`: average over `F`, then max plus mean over `T`.
    pub fn global_mean_max_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape.len() != 4 || t.shape[2] == 0 || t.shape[3] == 0 {
            return Err(Error::Shape { op: "global_mean_max_pool", lhs: t.shape.clone(), rhs: vec![] });
        }
        let (n, c, tt, f) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
        let mut data = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for p in 0..n * c {
            let means: Vec<f64> = (0..tt)
                .map(|i| t.data[(p * tt + i) * f..(p * tt + i + 1) * f].iter().sum::<f64>() / f as f64)
                .collect();
            let mut best = 0;
            for i in 1..tt {
                if means[i] > means[best] {
                    best = i;
                }
            }
            data.push(means[best] + means.iter().sum::<f64>() / tt as f64);
            argmax.push(best);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![n, c], data }, Op::GlobalMeanMaxPool { x, argmax }, rg))
    }

    // ---- regularization, reductions, losses ----------------------------

    /// Inverted dropout; the identity when `train` is false or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, rng: &mut impl Rng) -> Var {
        if !train || p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.numel()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let data = t.data.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor { shape: t.shape.clone(), data };
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean { a }, rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]`, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.shape.len() != 2 || t.shape[0] != labels.len() || labels.is_empty() {
            return Err(Error::Shape { op: "cross_entropy", lhs: t.shape.clone(), rhs: vec![labels.len()] });
        }
        let (b, c) = (t.shape[0], t.shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Invalid(format!("cross_entropy: label {bad} out of range 0..{c}")));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &t.data[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[label];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from a scalar. A graph supports one backward pass
    /// until [`Graph::reset_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Invalid("backward called twice without reset_grads".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape { op: "backward", lhs: self.shape(loss).to_vec(), rhs: vec![1] });
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backward_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn acc(&mut self, v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[i].value;
        let mut pending: Vec<(Var, Vec<f64>)> = Vec::new();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                pending.push((*a, g.to_vec()));
                if nodes[b.0].requires_grad {
                    pending.push((*b, reduce_broadcast(g, &val(*a).shape, &val(*b).shape)));
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                if ta.shape == tb.shape {
                    pending.push((*a, g.iter().zip(&tb.data).map(|(g, y)| g * y).collect()));
                    pending.push((*b, g.iter().zip(&ta.data).map(|(g, x)| g * x).collect()));
                } else {
                    let map = broadcast_map(&ta.shape, &tb.shape).expect("checked in forward");
                    pending.push((*a, g.iter().zip(&map).map(|(g, &j)| g * tb.data[j]).collect()));
                    let mut gb = vec![0.0; tb.numel()];
                    for ((gi, &j), x) in g.iter().zip(&map).zip(&ta.data) {
                        gb[j] += gi * x;
                    }
                    pending.push((*b, gb));
                }
            }
            Op::Scale { a, c } => pending.push((*a, g.iter().map(|x| x * c).collect())),
            Op::AddScalar { a } | Op::Reshape { a } => pending.push((*a, g.to_vec())),
            Op::MatMul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g, &tb.data, &mut ga, m, n, k);
                    pending.push((*a, ga));
                }
                if nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(&ta.data, g, &mut gb, k, m, n);
                    pending.push((*b, gb));
                }
            }
            Op::Transpose { a } => {
                let (r, c) = (val(*a).shape[0], val(*a).shape[1]);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                pending.push((*a, ga));
            }
            Op::Relu { a } => {
                pending.push((*a, g.iter().zip(&val(*a).data).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect()));
            }
            Op::Gelu { a } => {
                let ga = g
                    .iter()
                    .zip(&val(*a).data)
                    .map(|(g, &x)| {
                        let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * d
                    })
                    .collect();
                pending.push((*a, ga));
            }
            Op::Sigmoid { a } => {
                pending.push((*a, g.iter().zip(&out.data).map(|(g, s)| g * s * (1.0 - s)).collect()));
            }
            Op::Tanh { a } => {
                pending.push((*a, g.iter().zip(&out.data).map(|(g, t)| g * (1.0 - t * t)).collect()));
            }
            Op::Softmax { a, axis } | Op::LogSoftmax { a, axis } => {
                let log = matches!(nodes[i].op, Op::LogSoftmax { .. });
                let (outer, n, inner) = split_axis(&out.shape, *axis);
                let mut ga = vec![0.0; out.numel()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + ii;
                        if log {
                            let gs: f64 = (0..n).map(|j| g[at(j)]).sum();
                            for j in 0..n {
                                ga[at(j)] = g[at(j)] - out.data[at(j)].exp() * gs;
                            }
                        } else {
                            let dotp: f64 = (0..n).map(|j| g[at(j)] * out.data[at(j)]).sum();
                            for j in 0..n {
                                ga[at(j)] = out.data[at(j)] * (g[at(j)] - dotp);
                            }
                        }
                    }
                }
                pending.push((*a, ga));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = val(*gamma).numel();
                let gm = &val(*gamma).data;
                let rows = xhat.len() / d;
                let mut gx = vec![0.0; xhat.len()];
                let mut gg = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * gm[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xr[j];
                        gg[j] += gr[j] * xr[j];
                        gbeta[j] += gr[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] = rstd[r] * (gr[j] * gm[j] - mean_dxh - xr[j] * mean_dxh_xh);
                    }
                }
                pending.push((*x, gx));
                pending.push((*gamma, gg));
                pending.push((*beta, gbeta));
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, train } => {
                let (outer, c, inner) = split_axis(&out.shape, 1);
                let count = (outer * inner) as f64;
                let gm = &val(*gamma).data;
                let mut gg = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut sum_dxh = vec![0.0; c];
                let mut sum_dxh_xh = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for k in base..base + inner {
                            gg[ch] += g[k] * xhat[k];
                            gbeta[ch] += g[k];
                            let dxh = g[k] * gm[ch];
                            sum_dxh[ch] += dxh;
                            sum_dxh_xh[ch] += dxh * xhat[k];
                        }
                    }
                }
                if nodes[x.0].requires_grad {
                    let mut gx = vec![0.0; out.numel()];
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for k in base..base + inner {
                                let dxh = g[k] * gm[ch];
                                gx[k] = if *train {
                                    rstd[ch] * (dxh - sum_dxh[ch] / count - xhat[k] * sum_dxh_xh[ch] / count)
                                } else {
                                    rstd[ch] * dxh
                                };
                            }
                        }
                    }
                    pending.push((*x, gx));
                }
                pending.push((*gamma, gg));
                pending.push((*beta, gbeta));
            }
            Op::Gather { table, ids } => {
                let t = val(*table);
                let d = t.shape[1];
                let mut gt = vec![0.0; t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    kernels::axpy(1.0, &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                }
                pending.push((*table, gt));
            }
            Op::Conv2d { x, w, b, geom } => {
                let (tx, tw) = (val(*x), val(*w));
                let n = tx.shape[0];
                let c_out = tw.shape[0];
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let img = geom.c_in * geom.h * geom.w;
                let pointwise = geom.kh == 1 && geom.kw == 1 && geom.stride == 1;
                let need_x = nodes[x.0].requires_grad;
                let mut gw = vec![0.0; tw.numel()];
                let mut gx = if need_x { vec![0.0; tx.numel()] } else { Vec::new() };
                let mut buf = vec![0.0; rows * cols];
                let mut gcols = vec![0.0; rows * cols];
                for i in 0..n {
                    let gi = &g[i * c_out * cols..(i + 1) * c_out * cols];
                    let xi = &tx.data[i * img..(i + 1) * img];
                    if pointwise {
                        gemm_nt(gi, xi, &mut gw, c_out, cols, rows);
                        if need_x {
                            gemm_tn(&tw.data, gi, &mut gx[i * img..(i + 1) * img], rows, c_out, cols);
                        }
                    } else {
                        im2col(xi, geom, &mut buf);
                        gemm_nt(gi, &buf, &mut gw, c_out, cols, rows);
                        if need_x {
                            gcols.iter_mut().for_each(|v| *v = 0.0);
                            gemm_tn(&tw.data, gi, &mut gcols, rows, c_out, cols);
                            col2im(&gcols, geom, &mut gx[i * img..(i + 1) * img]);
                        }
                    }
                }
                if need_x {
                    pending.push((*x, gx));
                }
                pending.push((*w, gw));
                if let Some(b) = b {
                    let mut gb = vec![0.0; c_out];
                    for i in 0..n {
                        for (co, gbv) in gb.iter_mut().enumerate() {
                            let base = (i * c_out + co) * cols;
                            *gbv += g[base..base + cols].iter().sum::<f64>();
                        }
                    }
                    pending.push((*b, gb));
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut gx = vec![0.0; val(*x).numel()];
                for (gi, &idx) in g.iter().zip(argmax) {
                    gx[idx] += gi;
                }
                pending.push((*x, gx));
            }
            Op::AvgPool2d { x, kernel, stride } => {
                let s = &val(*x).shape;
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (out.shape[2], out.shape[3]);
                let inv = 1.0 / (kernel.0 * kernel.1) as f64;
                let mut gx = vec![0.0; val(*x).numel()];
                for p in 0..s[0] * s[1] {
                    for oi in 0..ho {
                        for oj in 0..wo {
                            let gv = g[(p * ho + oi) * wo + oj] * inv;
                            for ki in 0..kernel.0 {
                                let row = (p * h + oi * stride.0 + ki) * w + oj * stride.1;
                                gx[row..row + kernel.1].iter_mut().for_each(|v| *v += gv);
                            }
                        }
                    }
                }
                pending.push((*x, gx));
            }
            Op::GlobalMeanMaxPool { x, argmax } => {
                let s = &val(*x).shape;
                let (tt, f) = (s[2], s[3]);
                let mut gx = vec![0.0; val(*x).numel()];
                for (p, (&gp, &best)) in g.iter().zip(argmax).enumerate() {
                    for ti in 0..tt {
                        let mut gm = gp / tt as f64;
                        if ti == best {
                            gm += gp;
                        }
                        let gv = gm / f as f64;
                        gx[(p * tt + ti) * f..(p * tt + ti + 1) * f].iter_mut().for_each(|v| *v += gv);
                    }
                }
                pending.push((*x, gx));
            }
            Op::Dropout { x, mask } => {
                pending.push((*x, g.iter().zip(mask).map(|(g, m)| g * m).collect()));
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(&out.shape, *axis);
                let mut grads: Vec<Vec<f64>> = parts.iter().map(|p| Vec::with_capacity(val(*p).numel())).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (k, p) in parts.iter().enumerate() {
                        let chunk = val(*p).shape[*axis] * inner;
                        grads[k].extend_from_slice(&g[off..off + chunk]);
                        off += chunk;
                    }
                }
                for (p, gp) in parts.iter().zip(grads) {
                    pending.push((*p, gp));
                }
            }
            Op::Slice { a, axis, start } => {
                let ta = val(*a);
                let (outer, n, inner) = split_axis(&ta.shape, *axis);
                let len = out.shape[*axis];
                let mut ga = vec![0.0; ta.numel()];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    ga[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                pending.push((*a, ga));
            }
            Op::Blend { w, x, y } => {
                let (tw, tx, ty) = (val(*w), val(*x), val(*y));
                pending.push((*w, g.iter().zip(tx.data.iter().zip(&ty.data)).map(|(g, (x, y))| g * (x - y)).collect()));
                pending.push((*x, g.iter().zip(&tw.data).map(|(g, w)| g * w).collect()));
                pending.push((*y, g.iter().zip(&tw.data).map(|(g, w)| g * (1.0 - w)).collect()));
            }
            Op::Sum { a } => pending.push((*a, vec![g[0]; val(*a).numel()])),
            Op::Mean { a } => {
                let n = val(*a).numel().max(1);
                pending.push((*a, vec![g[0] / n as f64; val(*a).numel()]));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = val(*logits).shape[1];
                let scale = g[0] / labels.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * c + l] -= scale;
                }
                pending.push((*logits, gl));
            }
        }
        for (v, gv) in pending {
            self.acc(v, gv);
        }
    }
}

/// Sums `g` (shaped like `a`) down to the broadcast operand's shape.
fn reduce_broadcast(g: &[f64], a_shape: &[usize], b_shape: &[usize]) -> Vec<f64> {
    if a_shape == b_shape {
        return g.to_vec();
    }
    let map = broadcast_map(a_shape, b_shape).expect("checked in forward");
    let mut out = vec![0.0; b_shape.iter().product()];
    for (gi, &j) in g.iter().zip(&map) {
        out[j] += gi;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn broadcast_maps() {
        assert_eq!(broadcast_map(&[2, 3], &[3]).unwrap(), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_map(&[2, 3], &[2, 1]).unwrap(), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(broadcast_map(&[1, 2, 2, 1], &[1, 2, 1, 1]).unwrap(), vec![0, 0, 1, 1]);
        assert!(broadcast_map(&[2, 3], &[2]).is_none());
    }

    #[test]
    fn forward_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[6]));
        let s = g.softmax(z, 0).unwrap();
        for &p in &g.value(s).data {
            assert!((p - 1.0 / 6.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[-1.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data, vec![0.0, 2.0]);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[0.5, -1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert!(g.backward(s).is_err());

        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn shape_errors_name_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let e = g.matmul(a, b).unwrap_err().to_string();
        assert!(e.contains("matmul") && e.contains("[2, 3]"), "{e}");
        let c = g.constant(Tensor::zeros(&[4]));
        assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 6]));
        let l = g.cross_entropy(z, &[0, 5]).unwrap();
        assert!((g.value(l).item() - 6f64.ln()).abs() < 1e-12);
        assert!(g.cross_entropy(z, &[0, 6]).is_err());

        let mut logits = vec![0.0; 6];
        logits[3] = 1000.0;
        let z = g.constant(t(&[1, 6], &logits));
        let l = g.cross_entropy(z, &[3]).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let mut rng = crate::seed::rng(0);
        assert_eq!(g.dropout(x, 0.5, false, &mut rng), x);
    }

    #[test]
    fn pointwise_conv_is_scalar_multiply() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 3], &[1.0, -2.0, 3.0, 0.5, 4.0, -1.5]));
        let w = g.constant(t(&[1, 1, 1, 1], &[2.5]));
        let y = g.conv2d(x, w, None, 1).unwrap();
        assert_eq!(g.value(y).data, vec![2.5, -5.0, 7.5, 1.25, 10.0, -3.75]);
        let w3 = g.constant(t(&[1, 1, 3, 3], &[0.0, 0.0, 0.0, 0.0, 2.5, 0.0, 0.0, 0.0, 0.0]));
        let y3 = g.conv2d(x, w3, None, 1).unwrap();
        assert_eq!(g.value(y3).data, g.value(y).data);
    }

    #[test]
    fn blend_identities() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.1, 0.7, -3.3]));
        let y = g.constant(t(&[3], &[1.9, 0.7, 2.2]));
        let w = g.constant(Tensor::full(&[3], 0.5));
        let m = g.blend(w, x, y).unwrap();
        let v = &g.value(m).data;
        assert_eq!(v, &vec![(0.1 + 1.9) / 2.0, 0.7, (-3.3 + 2.2) / 2.0]);
        let w = g.constant(t(&[3], &[0.3, 0.123, 0.9]));
        let same = g.blend(w, x, x).unwrap();
        assert_eq!(g.value(same).data, g.value(x).data);
    }
    #[test]
    fn cross_entropy_matches_naive_oracle() {
        use rand::Rng;
        let mut rng = crate::seed::rng(11);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..18).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..6)).collect();
            let naive: f64 = labels
                .iter()
                .enumerate()
                .map(|(r, &l)| {
                    let row = &logits[r * 6..(r + 1) * 6];
                    let denom: f64 = row.iter().map(|z| z.exp()).sum();
                    -(row[l].exp() / denom).ln()
                })
                .sum::<f64>()
                / 3.0;
            let mut g = Graph::new();
            let z = g.constant(t(&[3, 6], &logits));
            let l = g.cross_entropy(z, &labels).unwrap();
            assert!((g.value(l).item() - naive).abs() < 1e-10);
        }
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_are_distributions(v in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let mut g = Graph::new();
            let x = g.constant(t(&[3, 4], &v));
            let s = g.softmax(x, 1).unwrap();
            for row in g.value(s).data.chunks(4) {
                proptest::prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                proptest::prop_assert!(row.iter().all(|&p| p > 0.0));
            }
        }
    }
}
