//! Define-by-run reverse-mode graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so reverse iteration over the node list is a valid
//! topological order for the backward sweep.

use std::cell::Cell;

use rand::Rng;

use super::kernels::{gelu, gelu_grad, matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_in_place};
use super::{GradStore, ParamStore, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

thread_local! {
    static BACKWARD_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of backward passes executed on the current thread.
pub fn backward_calls() -> u64 {
    BACKWARD_CALLS.with(Cell::get)
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Gelu(usize),
    Softmax(usize),
    CausalSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embed {
        table: usize,
        ids: Vec<usize>,
    },
    SelectRows {
        x: usize,
        rows: Vec<usize>,
    },
    Cols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(usize),
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn as_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Trainable leaf bound to `params[name]`.
    pub fn param(&mut self, params: &ParamStore, name: &str) -> Result<Var> {
        let value = params.get(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_string())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        let (n, k) = as_matrix("matmul", ta)?;
        let (k2, m) = as_matrix("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; n * m];
        matmul_acc(ta.data(), tb.data(), &mut out, n, k, m);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a.0, b.0)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        let (n, k) = as_matrix("matmul_nt", ta)?;
        let (m, k2) = as_matrix("matmul_nt", tb)?;
        if k != k2 {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; n * m];
        matmul_nt_acc(ta.data(), tb.data(), &mut out, n, k, m);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMulNt(a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        Ok(self.push(Tensor::from_parts(ta.shape().to_vec(), out), Op::Add(a.0, b.0)))
    }

    /// Adds a vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a.0), self.val(bias.0));
        let (_, cols) = ta.rows_cols();
        if tb.shape() != [cols] {
            return Err(mismatch("add_row", ta, tb));
        }
        let out = ta
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(
            Tensor::from_parts(ta.shape().to_vec(), out),
            Op::AddRow(a.0, bias.0),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        Ok(self.push(Tensor::from_parts(ta.shape().to_vec(), out), Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.val(a.0);
        let out = ta.data().iter().map(|x| x * factor).collect();
        self.push(
            Tensor::from_parts(ta.shape().to_vec(), out),
            Op::Scale(a.0, factor),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = self.val(a.0);
        let out = ta.data().iter().map(|x| x.tanh()).collect();
        self.push(Tensor::from_parts(ta.shape().to_vec(), out), Op::Tanh(a.0))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.val(a.0);
        let out = ta.data().iter().map(|&x| gelu(x)).collect();
        self.push(Tensor::from_parts(ta.shape().to_vec(), out), Op::Gelu(a.0))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.val(a.0);
        let (_, cols) = ta.rows_cols();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        self.push(Tensor::from_parts(ta.shape().to_vec(), out), Op::Softmax(a.0))
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a.0);
        let (n, m) = as_matrix("causal_softmax", ta)?;
        if n != m {
            return Err(mismatch("causal_softmax", ta, ta));
        }
        let mut out = ta.data().to_vec();
        for (i, row) in out.chunks_mut(n).enumerate() {
            softmax_in_place(&mut row[..=i]);
            row[i + 1..].iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, n], out),
            Op::CausalSoftmax(a.0),
        ))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.val(x.0);
        let (rows, cols) = tx.rows_cols();
        for p in [gain, bias] {
            let tp = self.val(p.0);
            if tp.shape() != [cols] {
                return Err(mismatch("layer_norm", tx, tp));
            }
        }
        let (g, b) = (self.val(gain.0).data(), self.val(bias.0).data());
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &tx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        Ok(self.push(
            Tensor::from_parts(tx.shape().to_vec(), out),
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
        ))
    }

    /// Gathers rows of an embedding table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.val(table.0);
        let (vocab, dim) = as_matrix("embed", tt)?;
        if ids.is_empty() {
            return Err(Error::Empty("embedding ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange {
                    id: id as u32,
                    vocab,
                });
            }
            out.extend_from_slice(&tt.data()[id * dim..(id + 1) * dim]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), dim], out),
            Op::Embed {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.val(x.0);
        let (n, cols) = as_matrix("select_rows", tx)?;
        if rows.is_empty() {
            return Err(Error::Empty("row selection"));
        }
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::ShapeMismatch {
                    op: "select_rows",
                    lhs: tx.shape().to_vec(),
                    rhs: vec![r],
                });
            }
            out.extend_from_slice(tx.row(r));
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), cols], out),
            Op::SelectRows {
                x: x.0,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Column block `start..start+len` of a matrix.
    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.val(x.0);
        let (n, cols) = as_matrix("cols", tx)?;
        if len == 0 || start + len > cols {
            return Err(Error::ShapeMismatch {
                op: "cols",
                lhs: tx.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, len], out),
            Op::Cols { x: x.0, start },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat inputs"))?;
        let n = as_matrix("concat_cols", self.val(first.0))?.0;
        let mut total = 0;
        for p in parts {
            let tp = self.val(p.0);
            let (r, c) = as_matrix("concat_cols", tp)?;
            if r != n {
                return Err(mismatch("concat_cols", self.val(first.0), tp));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for p in parts {
                out.extend_from_slice(self.val(p.0).row(r));
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, total], out),
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
        ))
    }

    /// Sum over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.val(logits.0);
        let (n, vocab) = as_matrix("cross_entropy", tl)?;
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(vocab).enumerate() {
            let t = targets[r];
            if t >= vocab {
                return Err(Error::TokenOutOfRange {
                    id: t as u32,
                    vocab,
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.val(a.0).sum();
        self.push(Tensor::scalar(total), Op::Sum(a.0))
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let tx = self.val(x.0);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..tx.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = tx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = tx.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Dropout { x: x.0, mask })
    }

    /// Reverse sweep from a scalar `loss`. Every parameter of `params` gets an
    /// entry; parameters not reachable from `loss` get exact zeros.
    pub fn backward(&mut self, loss: Var, params: &ParamStore) -> Result<GradStore> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_shape = self.val(loss.0).shape().to_vec();
        if !self.val(loss.0).is_scalar() {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.consumed = true;
        BACKWARD_CALLS.with(|c| c.set(c.get() + 1));

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = params.zeros_like();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => {
                    if let Some(dst) = out.get_mut(name) {
                        for (d, v) in dst.data_mut().iter_mut().zip(&g) {
                            *d += v;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.val(*a), self.val(*b));
                    let (n, k) = (ta.shape()[0], ta.shape()[1]);
                    let m = tb.shape()[1];
                    let mut ga = vec![0.0; n * k];
                    matmul_nt_acc(&g, tb.data(), &mut ga, n, m, k);
                    let mut gb = vec![0.0; k * m];
                    matmul_tn_acc(ta.data(), &g, &mut gb, n, k, m);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    // c = a bᵀ: da = g b, db = gᵀ a
                    let (ta, tb) = (self.val(*a), self.val(*b));
                    let (n, k) = (ta.shape()[0], ta.shape()[1]);
                    let m = tb.shape()[0];
                    let mut ga = vec![0.0; n * k];
                    matmul_acc(&g, tb.data(), &mut ga, n, m, k);
                    let mut gb = vec![0.0; m * k];
                    matmul_tn_acc(&g, ta.data(), &mut gb, n, m, k);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, b) => {
                    let cols = self.val(*b).len();
                    let mut gb = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        for (d, v) in gb.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.val(*a), self.val(*b));
                    let ga = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => {
                    let ga = g.iter().map(|v| v * f).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let ga = g.iter().zip(y).map(|(d, y)| d * (1.0 - y * y)).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let x = self.val(*a).data();
                    let ga = g.iter().zip(x).map(|(d, &x)| d * gelu_grad(x)).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) | Op::CausalSoftmax(a) => {
                    let y = node.value.data();
                    let (_, cols) = node.value.rows_cols();
                    let mut ga = vec![0.0; y.len()];
                    for ((gr, yr), out_r) in g
                        .chunks(cols)
                        .zip(y.chunks(cols))
                        .zip(ga.chunks_mut(cols))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, &gv), &yv) in out_r.iter_mut().zip(gr).zip(yr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gvals = self.val(*gain).data();
                    let cols = gvals.len();
                    let rows = rstd.len();
                    let mut gx = vec![0.0; rows * cols];
                    let mut gg = vec![0.0; cols];
                    let mut gbias = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..cols {
                            gg[c] += gr[c] * hr[c];
                            gbias[c] += gr[c];
                            let dh = gr[c] * gvals[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh /= cols as f64;
                        mean_dh_h /= cols as f64;
                        for c in 0..cols {
                            let dh = gr[c] * gvals[c];
                            gx[r * cols + c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, gg);
                    accumulate(&mut grads, *bias, gbias);
                }
                Op::Embed { table, ids } => {
                    let tt = self.val(*table);
                    let dim = tt.shape()[1];
                    let mut gt = vec![0.0; tt.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, v) in gt[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(&g[r * dim..(r + 1) * dim])
                        {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::SelectRows { x, rows } => {
                    let tx = self.val(*x);
                    let cols = tx.shape()[1];
                    let mut gx = vec![0.0; tx.len()];
                    for (k, &r) in rows.iter().enumerate() {
                        for (d, v) in gx[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(&g[k * cols..(k + 1) * cols])
                        {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Cols { x, start } => {
                    let tx = self.val(*x);
                    let (n, cols) = (tx.shape()[0], tx.shape()[1]);
                    let len = node.value.shape()[1];
                    let mut gx = vec![0.0; n * cols];
                    for r in 0..n {
                        gx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let (n, total) = (node.value.shape()[0], node.value.shape()[1]);
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.val(p).shape()[1];
                        let mut gp = Vec::with_capacity(n * c);
                        for r in 0..n {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        accumulate(&mut grads, p, gp);
                        offset += c;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let vocab = self.val(*logits).shape()[1];
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * vocab + t] -= g[0];
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::Sum(a) => {
                    let n = self.val(*a).len();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Dropout { x, mask } => {
                    let gx = g.iter().zip(mask).map(|(a, m)| a * m).collect();
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, g: Vec<f64>) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(&g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
