//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! Every node holds a row-major `rows × cols` matrix. Parameters are borrowed
//! from a [`ParamStore`] rather than copied, so a forward pass over a large
//! model costs only its activations. The operator set is the one the policy
//! network needs: affine maps, layer norm, GELU, causal multi-head attention,
//! softmax / log-softmax, row gathers and scalar reductions.

use std::borrow::Cow;

use indexmap::IndexMap;

use super::array::{Array, GradStore, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<'a> {
    rows: usize,
    cols: usize,
    value: Cow<'a, [f64]>,
    op: Op,
}

/// A tape of operations. Values are computed eagerly as nodes are added.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `c = a·b (+ c if accumulate)` with optional transposes on stored operands.
///
/// `a` is `m × k` after transposition, `b` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches given the
    // row/column strides derived from (m, k, n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Cow<'a, [f64]>, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    /// Matrix dimensions of a node.
    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = self.node(v);
        assert_eq!((n.rows, n.cols), (1, 1), "node is not a scalar");
        n.value[0]
    }

    /// A trainable leaf borrowing its values from `array`.
    pub fn param(&mut self, array: &'a Array) -> Var {
        let (rows, cols) = array.matrix_dims();
        self.push(rows, cols, Cow::Borrowed(array.data()), Op::Param)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len(), "constant has wrong length");
        self.push(rows, cols, Cow::Owned(data), Op::Leaf)
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> (usize, usize) {
        let da = self.dims(a);
        let db = self.dims(b);
        assert_eq!(da, db, "{what}: operand shapes differ");
        da
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        self.push(m, n, Cow::Owned(out), Op::MatMul(a, b))
    }

    /// `x·w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (r, c) = self.same_dims(a, b, "elementwise");
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(r, c, Cow::Owned(out), op)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(r, c, Cow::Owned(out), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `1 × cols` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(row), (1, c), "add_row: bias must be 1 x {c}");
        let bias = self.value(row);
        let mut out = self.value(x).to_vec();
        for chunk in out.chunks_exact_mut(c) {
            for (o, b) in chunk.iter_mut().zip(bias) {
                *o += b;
            }
        }
        self.push(r, c, Cow::Owned(out), Op::AddRow(x, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map(a, Op::Scale(a, factor), |x| x * factor)
    }

    /// Adds a constant to every entry.
    pub fn shift(&mut self, a: Var, offset: f64) -> Var {
        self.map(a, Op::Shift(a), |x| x + offset)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::LogSigmoid(a), log_sigmoid)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        })
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(r, c, Cow::Owned(out), Op::Softmax(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(r, c, Cow::Owned(out), Op::LogSoftmax(a))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (each `1 × cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(gamma), (1, c), "layer_norm: gamma must be 1 x {c}");
        assert_eq!(self.dims(beta), (1, c), "layer_norm: beta must be 1 x {c}");
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = vec![0.0; r * c];
        let mut rstd = Vec::with_capacity(r);
        for (row, orow) in xs.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                orow[j] = (row[j] - mean) * rs * g[j] + b[j];
            }
            rstd.push(rs);
        }
        self.push(
            r,
            c,
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            },
        )
    }

    /// Causal multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `(batch·seq) × hidden` with the sequences stacked;
    /// position `i` attends to positions `0..=i` of its own sequence only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let (r, h) = self.same_dims(q, k, "attention");
        self.same_dims(q, v, "attention");
        assert_eq!(r, batch * seq, "attention: rows must equal batch*seq");
        assert_eq!(h % heads, 0, "attention: hidden not divisible by heads");
        let d = h / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; r * h];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for hd in 0..heads {
                let col = hd * d;
                for i in 0..seq {
                    let qi = &qs[(b * seq + i) * h + col..][..d];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &ks[(b * seq + j) * h + col..][..d];
                        let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for s in scores.iter_mut().take(i + 1) {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let prow = &mut probs[((b * heads + hd) * seq + i) * seq..][..seq];
                    let orow = &mut out[(b * seq + i) * h + col..][..d];
                    for j in 0..=i {
                        let p = scores[j] / sum;
                        prow[j] = p;
                        let vj = &vs[(b * seq + j) * h + col..][..d];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        self.push(
            r,
            h,
            Cow::Owned(out),
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
        )
    }

    /// Row lookup: output row `r` is `table[idx[r]]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let (tr, c) = self.dims(table);
        let t = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < tr, "gather_rows: index {i} out of range {tr}");
            out.extend_from_slice(&t[i * c..(i + 1) * c]);
        }
        self.push(idx.len(), c, Cow::Owned(out), Op::GatherRows { table, idx: idx.to_vec() })
    }

    /// Picks one column per row: output is `rows × 1` with `x[r, idx[r]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(idx.len(), r, "pick: one index per row");
        let xs = self.value(x);
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(row, &i)| {
                assert!(i < c, "pick: column {i} out of range {c}");
                xs[row * c + i]
            })
            .collect();
        self.push(r, 1, Cow::Owned(out), Op::Pick { x, idx: idx.to_vec() })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum::<f64>();
        self.push(1, 1, Cow::Owned(vec![s]), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        assert!(n > 0, "mean of an empty node");
        let s = self.value(a).iter().sum::<f64>() / n as f64;
        self.push(1, 1, Cow::Owned(vec![s]), Op::Mean(a))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    ///
    /// Entries are `None` for nodes the loss does not depend on.
    pub fn backward(&self, loss: Var) -> Vec<Option<Vec<f64>>> {
        assert_eq!(self.dims(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node<'_>], v: Var) -> &'g mut [f64] {
            let n = &nodes[v.0];
            grads[v.0].get_or_insert_with(|| vec![0.0; n.rows * n.cols])
        }

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let (rows, cols) = (node.rows, node.cols);
            let y = &node.value;
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = cols;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    gemm(m, n, k, &gy, false, bv, true, acc(&mut grads, &self.nodes, *a), true);
                    gemm(k, m, n, av, true, &gy, false, acc(&mut grads, &self.nodes, *b), true);
                }
                Op::Add(a, b) => {
                    for (g, d) in acc(&mut grads, &self.nodes, *a).iter_mut().zip(&gy) {
                        *g += d;
                    }
                    for (g, d) in acc(&mut grads, &self.nodes, *b).iter_mut().zip(&gy) {
                        *g += d;
                    }
                }
                Op::Sub(a, b) => {
                    for (g, d) in acc(&mut grads, &self.nodes, *a).iter_mut().zip(&gy) {
                        *g += d;
                    }
                    for (g, d) in acc(&mut grads, &self.nodes, *b).iter_mut().zip(&gy) {
                        *g -= d;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for ((g, d), x) in ga.iter_mut().zip(&gy).zip(bv) {
                        *g += d * x;
                    }
                    let gb = acc(&mut grads, &self.nodes, *b);
                    for ((g, d), x) in gb.iter_mut().zip(&gy).zip(av) {
                        *g += d * x;
                    }
                }
                Op::AddRow(x, row) => {
                    for (g, d) in acc(&mut grads, &self.nodes, *x).iter_mut().zip(&gy) {
                        *g += d;
                    }
                    let gb = acc(&mut grads, &self.nodes, *row);
                    for chunk in gy.chunks_exact(cols) {
                        for (g, d) in gb.iter_mut().zip(chunk) {
                            *g += d;
                        }
                    }
                }
                Op::Scale(a, f) => {
                    for (g, d) in acc(&mut grads, &self.nodes, *a).iter_mut().zip(&gy) {
                        *g += d * f;
                    }
                }
                Op::Shift(a) => {
                    for (g, d) in acc(&mut grads, &self.nodes, *a).iter_mut().zip(&gy) {
                        *g += d;
                    }
                }
                Op::Log(a) => {
                    let av = self.value(*a);
                    for ((g, d), x) in acc(&mut grads, &self.nodes, *a).iter_mut().zip(&gy).zip(av) {
                        *g += d / x;
                    }
                }
                Op::Exp(a) => {
                    for ((g, d), e) in acc(&mut grads, &self.nodes, *a).iter_mut().zip(&gy).zip(y.iter()) {
                        *g += d * e;
                    }
                }
                Op::Sigmoid(a) => {
                    for ((g, d), s) in acc(&mut grads, &self.nodes, *a).iter_mut().zip(&gy).zip(y.iter()) {
                        *g += d * s * (1.0 - s);
                    }
                }
                Op::LogSigmoid(a) => {
                    let av = self.value(*a);
                    for ((g, d), x) in acc(&mut grads, &self.nodes, *a).iter_mut().zip(&gy).zip(av) {
                        *g += d * sigmoid(-x);
                    }
                }
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    for ((g, d), &x) in acc(&mut grads, &self.nodes, *a).iter_mut().zip(&gy).zip(av) {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *g += d * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                }
                Op::Softmax(a) => {
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for ((grow, drow), yrow) in ga
                        .chunks_exact_mut(cols)
                        .zip(gy.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                    {
                        let dot: f64 = drow.iter().zip(yrow).map(|(d, s)| d * s).sum();
                        for ((g, d), s) in grow.iter_mut().zip(drow).zip(yrow) {
                            *g += s * (d - dot);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for ((grow, drow), yrow) in ga
                        .chunks_exact_mut(cols)
                        .zip(gy.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                    {
                        let total: f64 = drow.iter().sum();
                        for ((g, d), ly) in grow.iter_mut().zip(drow).zip(yrow) {
                            *g += d - ly.exp() * total;
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, rstd } => {
                    let xs = self.value(*x);
                    let gv = self.value(*gamma);
                    let c = cols;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut xhat = vec![0.0; c];
                    let mut dxhat = vec![0.0; c];
                    let gx = acc(&mut grads, &self.nodes, *x);
                    for r in 0..rows {
                        let row = &xs[r * c..(r + 1) * c];
                        let drow = &gy[r * c..(r + 1) * c];
                        let mean = row.iter().sum::<f64>() / c as f64;
                        let rs = rstd[r];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            xhat[j] = (row[j] - mean) * rs;
                            dxhat[j] = drow[j] * gv[j];
                            dgamma[j] += drow[j] * xhat[j];
                            dbeta[j] += drow[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        let grow = &mut gx[r * c..(r + 1) * c];
                        for j in 0..c {
                            grow[j] += rs * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                    for (g, d) in acc(&mut grads, &self.nodes, *gamma).iter_mut().zip(&dgamma) {
                        *g += d;
                    }
                    for (g, d) in acc(&mut grads, &self.nodes, *beta).iter_mut().zip(&dbeta) {
                        *g += d;
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    batch,
                    seq,
                    heads,
                    probs,
                } => {
                    let (batch, seq, heads) = (*batch, *seq, *heads);
                    let h = cols;
                    let d = h / heads;
                    let scale = 1.0 / (d as f64).sqrt();
                    let (qs, ks, vs) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut dq = vec![0.0; rows * h];
                    let mut dk = vec![0.0; rows * h];
                    let mut dv = vec![0.0; rows * h];
                    let mut dp = vec![0.0; seq];
                    for b in 0..batch {
                        for hd in 0..heads {
                            let col = hd * d;
                            for i in 0..seq {
                                let prow = &probs[((b * heads + hd) * seq + i) * seq..][..seq];
                                let doi = &gy[(b * seq + i) * h + col..][..d];
                                let mut dot = 0.0;
                                for j in 0..=i {
                                    let vj = &vs[(b * seq + j) * h + col..][..d];
                                    dp[j] = doi.iter().zip(vj).map(|(x, y)| x * y).sum();
                                    dot += prow[j] * dp[j];
                                    let dvj = &mut dv[(b * seq + j) * h + col..][..d];
                                    for (g, o) in dvj.iter_mut().zip(doi) {
                                        *g += prow[j] * o;
                                    }
                                }
                                let qi = &qs[(b * seq + i) * h + col..][..d];
                                for j in 0..=i {
                                    let ds = prow[j] * (dp[j] - dot) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let kj = &ks[(b * seq + j) * h + col..][..d];
                                    let dqi = &mut dq[(b * seq + i) * h + col..][..d];
                                    for (g, x) in dqi.iter_mut().zip(kj) {
                                        *g += ds * x;
                                    }
                                    let dkj = &mut dk[(b * seq + j) * h + col..][..d];
                                    for (g, x) in dkj.iter_mut().zip(qi) {
                                        *g += ds * x;
                                    }
                                }
                            }
                        }
                    }
                    for (target, src) in [(*q, dq), (*k, dk), (*v, dv)] {
                        for (g, d) in acc(&mut grads, &self.nodes, target).iter_mut().zip(&src) {
                            *g += d;
                        }
                    }
                }
                Op::GatherRows { table, idx } => {
                    let gt = acc(&mut grads, &self.nodes, *table);
                    for (r, &i) in idx.iter().enumerate() {
                        for (g, d) in gt[i * cols..(i + 1) * cols].iter_mut().zip(&gy[r * cols..(r + 1) * cols]) {
                            *g += d;
                        }
                    }
                }
                Op::Pick { x, idx } => {
                    let c = self.dims(*x).1;
                    let gx = acc(&mut grads, &self.nodes, *x);
                    for (r, &i) in idx.iter().enumerate() {
                        gx[r * c + i] += gy[r];
                    }
                }
                Op::Sum(a) => {
                    for g in acc(&mut grads, &self.nodes, *a).iter_mut() {
                        *g += gy[0];
                    }
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    for g in acc(&mut grads, &self.nodes, *a).iter_mut() {
                        *g += gy[0] / n;
                    }
                }
            }
        }
        grads
    }
}

/// Graph handles for every array of a [`ParamStore`], by name.
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    /// Registers every array of `params` on `graph` in store order.
    pub fn register<'a>(graph: &mut Graph<'a>, params: &'a ParamStore) -> Self {
        let vars = params
            .iter()
            .map(|(name, array)| (name.to_string(), graph.param(array)))
            .collect();
        Self { vars }
    }

    /// # Panics
    /// If `name` was not registered; parameter names are fixed by the model.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("unknown parameter `{name}`"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

/// Evaluates a scalar loss built on a fresh graph and returns its value and
/// the gradient with respect to every array in `params`.
///
/// Arrays the loss does not touch get an all-zero gradient. A non-finite loss
/// or gradient is reported with the name of the offending parameter.
pub fn value_and_grad<F>(params: &ParamStore, loss: F) -> Result<(f64, GradStore)>
where
    F: for<'g> FnOnce(&mut Graph<'g>, &ParamVars) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars = ParamVars::register(&mut graph, params);
    let out = loss(&mut graph, &vars)?;
    if graph.dims(out) != (1, 1) {
        return Err(Error::Shape(format!("loss must be a scalar, got {:?}", graph.dims(out))));
    }
    let value = graph.scalar(out);
    if !value.is_finite() {
        return Err(Error::NonFinite { name: "loss".into() });
    }
    let mut grads = graph.backward(out);
    let mut store = ParamStore::new();
    for (name, array) in params.iter() {
        let var = vars.get(name);
        let data = grads[var.0].take().unwrap_or_else(|| vec![0.0; array.len()]);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                name: format!("gradient of {name}"),
            });
        }
        store.insert(name, Array::new(array.shape().to_vec(), data)?)?;
    }
    let grads = GradStore::from_parts(params, store)?;
    Ok((value, grads))
}

/// Evaluates a scalar loss without computing gradients.
pub fn value_only<F>(params: &ParamStore, loss: F) -> Result<f64>
where
    F: for<'g> FnOnce(&mut Graph<'g>, &ParamVars) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars = ParamVars::register(&mut graph, params);
    let out = loss(&mut graph, &vars)?;
    Ok(graph.scalar(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, shape, data) in entries {
            s.insert(*name, Array::new(shape.clone(), data.clone()).unwrap()).unwrap();
        }
        s
    }

    #[test]
    fn quadratic_gradient() {
        let p = store(&[("w", vec![1], vec![3.0])]);
        let (v, g) = value_and_grad(&p, |g, vars| {
            let w = vars.get("w");
            let sq = g.mul(w, w);
            Ok(g.sum(sq))
        })
        .unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(g.get("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = store(&[("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]), ("b", vec![2], vec![0.5, 0.5])]);
        let (v, g) = value_and_grad(&p, |g, _| {
            let c = g.constant(1, 1, vec![2.5]);
            Ok(g.sum(c))
        })
        .unwrap();
        assert_eq!(v, 2.5);
        for (_, a) in g.iter() {
            assert!(a.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let p = store(&[("w", vec![1], vec![-1.0])]);
        let err = value_and_grad(&p, |g, vars| {
            let l = g.log(vars.get("w"));
            Ok(g.sum(l))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn matmul_matches_hand_product() {
        let p = store(&[
            ("a", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            ("b", vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]),
        ]);
        let mut g = Graph::new();
        let vars = ParamVars::register(&mut g, &p);
        let c = g.matmul(vars.get("a"), vars.get("b"));
        assert_eq!(g.value(c), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
    }
}
