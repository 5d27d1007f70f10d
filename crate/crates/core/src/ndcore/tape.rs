//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every primitive pushes one node holding its output value and enough saved
//! state to run its adjoint. Node order is forward execution order, so
//! [`Tape::backward`] walks the node list once in reverse.

use crate::error::{Error, Result};
use crate::ndcore::tensor::{Precision, Tensor};
use crate::ssm::{self, ScanMethod};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Gelu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Affine(Var, f64),
    MatMul { a: Var, b: Var, transpose_b: bool },
    Unary(Var, Unary),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Outer(Var, Var),
    Recurrence { decay: Var, drive: Var, h0: Var, shared: bool, method: ScanMethod },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient for `v`, zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// Single-owner recording of one forward computation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(Precision::F64)
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = shape.last().copied().unwrap_or(1);
    let rows = shape.iter().product::<usize>().checked_div(last).unwrap_or(0);
    (rows, last)
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, parents: &[Var]) -> Var {
        self.precision.round_slice(value.data_mut());
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient (stop-gradient boundary).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> Var {
        self.precision.round_slice(t.data_mut());
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Value copy of `v` as a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, node, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn check_trailing(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(sb.iter().product())
    }

    /// `a + b` where `b`'s shape equals the trailing dims of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.check_trailing("add_broadcast", a, b)?;
        let bd = self.data(b);
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % inner])
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::AddBroadcast(a, b), &[a, b]))
    }

    /// `a * b` where `b`'s shape equals the trailing dims of `a`.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.check_trailing("mul_broadcast", a, b)?;
        let bd = self.data(b);
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bd[i % inner])
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::MulBroadcast(a, b), &[a, b]))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        self.push(value, Op::Affine(a, scale), &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// `a @ b` (or `a @ bᵀ`) with `a` of shape `[.., k]`, leading dims flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ bᵀ` with `b` of shape `[n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (rows, k) = split_last(&sa);
        let (kb, n) = if transpose_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; rows * n];
        let (rsb, csb) = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
        gemm(rows, k, n, self.data(a), k as isize, 1, self.data(b), rsb, csb, &mut out, 0.0);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, transpose_b }, &[a, b]))
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let value = self.value(a).map(|x| match kind {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Unary::Tanh => x.tanh(),
            Unary::Gelu => gelu(x).0,
        });
        self.push(value, Op::Unary(a, kind), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = split_last(self.shape(a));
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            softmax_row(&src[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = split_last(self.shape(a));
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let lse = log_sum_exp(row);
            for (o, &x) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmax(a), &[a]))
    }

    /// Sum of all entries, accumulated in index order.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.data(a).len().max(1) as f64;
        let s: f64 = self.data(a).iter().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(a), &[a])
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd == 0 {
            return Err(Error::shape("sum_last", &[], &[]));
        }
        self.sum_axis(a, nd - 1)
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &src[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(value, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.data(*p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// Gathers rows of `table` (shape `[V, d]`); output shape is `out_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || out_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", &ts, out_shape));
        }
        let (vocab, d) = (ts[0], ts[1]);
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::invalid(format!("embedding id {id} out of range for vocab {vocab}")));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Layer normalization over the last axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, n) = split_last(self.shape(x));
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let src = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..n {
                let xh = (row[i] - mean) * rs;
                xhat[r * n + i] = xh;
                out[r * n + i] = xh * g[i] + b[i];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Mean negative log-likelihood of `targets` under softmax(`logits`), in nats.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, n) = split_last(self.shape(logits));
        if rows != targets.len() {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; src.len()];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(Error::invalid(format!("target {t} out of range for {n} classes")));
            }
            let row = &src[r * n..(r + 1) * n];
            let lse = log_sum_exp(row);
            total += lse - row[t];
            softmax_row(row, &mut probs[r * n..(r + 1) * n]);
        }
        let loss = total / rows.max(1) as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        ))
    }

    /// Row-wise outer product: `a` `[N, m]`, `b` `[N, d]` -> `[N, m, d]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape("outer", &sa, &sb));
        }
        let (rows, m, d) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; rows * m * d];
        for r in 0..rows {
            for i in 0..m {
                let ai = ad[r * m + i];
                let dst = &mut out[(r * m + i) * d..(r * m + i + 1) * d];
                for (o, &bj) in dst.iter_mut().zip(&bd[r * d..(r + 1) * d]) {
                    *o = ai * bj;
                }
            }
        }
        let value = Tensor::new(vec![rows, m, d], out)?;
        Ok(self.push(value, Op::Outer(a, b), &[a, b]))
    }

    /// Diagonal linear recurrence `h_t = w_t ⊙ h_{t-1} + u_t` over `[B, T, n]`.
    ///
    /// `decay` is either `[n]` (time-invariant) or `[B, T, n]`; `h0` is `[B, n]`.
    /// Returns all states `h_1..h_T` as `[B, T, n]`.
    pub fn linear_recurrence(&mut self, decay: Var, drive: Var, h0: Var, method: ScanMethod) -> Result<Var> {
        let ds = self.shape(drive).to_vec();
        if ds.len() != 3 {
            return Err(Error::shape("linear_recurrence", &ds, self.shape(decay)));
        }
        let (b, t, n) = (ds[0], ds[1], ds[2]);
        let shared = self.shape(decay) == [n];
        if !shared && self.shape(decay) != ds.as_slice() {
            return Err(Error::shape("linear_recurrence", &ds, self.shape(decay)));
        }
        if self.shape(h0) != [b, n] {
            return Err(Error::shape("linear_recurrence", &ds, self.shape(h0)));
        }
        let mut out = vec![0.0; b * t * n];
        let (w, u, h) = (self.data(decay), self.data(drive), self.data(h0));
        for bi in 0..b {
            let seq = bi * t * n..(bi + 1) * t * n;
            let dec = if shared {
                ssm::Decay::Shared(w)
            } else {
                ssm::Decay::PerStep(&w[seq.clone()])
            };
            ssm::run_recurrence(method, dec, &u[seq.clone()], &h[bi * n..(bi + 1) * n], n, &mut out[seq]);
        }
        let value = Tensor::new(ds, out)?;
        Ok(self.push(
            value,
            Op::Recurrence { decay, drive, h0, shared, method },
            &[decay, drive, h0],
        ))
    }

    /// Reverse accumulation from scalar `loss`; consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward (loss must be scalar)", self.shape(loss), &[]));
        }
        let nodes = self.nodes;
        let precision = self.precision;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            precision.round_slice(&mut g);
            backprop_node(&nodes, i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, n) in nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        let shapes = nodes.into_iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a` (m×k), `b` (k×n) and the
    // contiguous row-major `c` (m×n); callers derive them from checked shapes.
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

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
    f(slot);
}

fn backprop_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let val = |v: Var| nodes[v.0].value.data();
    let out = nodes[i].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(nodes, grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(nodes, grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |s| {
                for j in 0..s.len() {
                    s[j] += g[j] * bv[j];
                }
            });
            accumulate(nodes, grads, *b, |s| {
                for j in 0..s.len() {
                    s[j] += g[j] * av[j];
                }
            });
        }
        Op::AddBroadcast(a, b) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(nodes, grads, *b, |s| {
                let inner = s.len();
                for (j, gj) in g.iter().enumerate() {
                    s[j % inner] += gj;
                }
            });
        }
        Op::MulBroadcast(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let inner = bv.len();
            accumulate(nodes, grads, *a, |s| {
                for j in 0..s.len() {
                    s[j] += g[j] * bv[j % inner];
                }
            });
            accumulate(nodes, grads, *b, |s| {
                for (j, gj) in g.iter().enumerate() {
                    s[j % inner] += gj * av[j];
                }
            });
        }
        Op::Affine(a, scale) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += scale * g));
        }
        Op::MatMul { a, b, transpose_b } => {
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let (rows, k) = split_last(sa);
            let n = if *transpose_b { sb[0] } else { sb[1] };
            let (av, bv) = (val(*a), val(*b));
            // dA = G · Bᵀ   (or G · B when b was transposed)
            accumulate(nodes, grads, *a, |s| {
                let (rsb, csb) = if *transpose_b { (k as isize, 1) } else { (1, n as isize) };
                gemm(rows, n, k, g, n as isize, 1, bv, rsb, csb, s, 1.0);
            });
            if *transpose_b {
                // dB (n×k) = Gᵀ · A
                accumulate(nodes, grads, *b, |s| {
                    gemm(n, rows, k, g, 1, n as isize, av, k as isize, 1, s, 1.0);
                });
            } else {
                // dB (k×n) = Aᵀ · G
                accumulate(nodes, grads, *b, |s| {
                    gemm(k, rows, n, av, 1, k as isize, g, n as isize, 1, s, 1.0);
                });
            }
        }
        Op::Unary(a, kind) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, |s| {
                for j in 0..s.len() {
                    let d = match kind {
                        Unary::Exp => out[j],
                        Unary::Log => 1.0 / av[j],
                        Unary::Sigmoid => out[j] * (1.0 - out[j]),
                        Unary::Tanh => 1.0 - out[j] * out[j],
                        Unary::Gelu => gelu(av[j]).1,
                    };
                    s[j] += g[j] * d;
                }
            });
        }
        Op::Softmax(a) => {
            let (rows, n) = split_last(nodes[i].value.shape());
            accumulate(nodes, grads, *a, |s| {
                for r in 0..rows {
                    let y = &out[r * n..(r + 1) * n];
                    let gy = &g[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        s[r * n + j] += y[j] * (gy[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let (rows, n) = split_last(nodes[i].value.shape());
            accumulate(nodes, grads, *a, |s| {
                for r in 0..rows {
                    let y = &out[r * n..(r + 1) * n];
                    let gy = &g[r * n..(r + 1) * n];
                    let total: f64 = gy.iter().sum();
                    for j in 0..n {
                        s[r * n + j] += gy[j] - y[j].exp() * total;
                    }
                }
            });
        }
        Op::Sum(a) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().for_each(|s| *s += g[0]));
        }
        Op::Mean(a) => {
            let scale = g[0] / nodes[a.0].value.numel().max(1) as f64;
            accumulate(nodes, grads, *a, |s| s.iter_mut().for_each(|s| *s += scale));
        }
        Op::SumAxis { x, axis } => {
            let shape = nodes[x.0].value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let len = shape[*axis];
            accumulate(nodes, grads, *x, |s| {
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for k in 0..len {
                        let base = (o * len + k) * inner;
                        for (d, v) in s[base..base + inner].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            });
        }
        Op::Reshape(a) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
        }
        Op::Slice { x, axis, start } => {
            let shape = nodes[x.0].value.shape();
            let len = nodes[i].value.shape()[*axis];
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            accumulate(nodes, grads, *x, |s| {
                for o in 0..outer {
                    let base = (o * shape[*axis] + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (d, v) in s[base..base + len * inner].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            });
        }
        Op::Concat { parts, axis } => {
            let shape = nodes[i].value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.shape()[*axis] * inner;
                accumulate(nodes, grads, *p, |s| {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + len];
                        for (d, v) in s[o * len..(o + 1) * len].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                });
                offset += len;
            }
        }
        Op::Embedding { table, ids } => {
            let d = nodes[table.0].value.last_dim();
            accumulate(nodes, grads, *table, |s| {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        s[id * d + j] += g[r * d + j];
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let n = nodes[x.0].value.last_dim();
            let rows = rstd.len();
            let gv = val(*gain);
            accumulate(nodes, grads, *x, |s| {
                for r in 0..rows {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..n {
                        let d = g[r * n + j] * gv[j];
                        mean_d += d;
                        mean_dx += d * xhat[r * n + j];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for j in 0..n {
                        let d = g[r * n + j] * gv[j];
                        s[r * n + j] += rstd[r] * (d - mean_d - xhat[r * n + j] * mean_dx);
                    }
                }
            });
            accumulate(nodes, grads, *gain, |s| {
                for (j, gj) in g.iter().enumerate() {
                    s[j % n] += gj * xhat[j];
                }
            });
            accumulate(nodes, grads, *bias, |s| {
                for (j, gj) in g.iter().enumerate() {
                    s[j % n] += gj;
                }
            });
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let n = nodes[logits.0].value.last_dim();
            let scale = g[0] / targets.len().max(1) as f64;
            accumulate(nodes, grads, *logits, |s| {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..n {
                        s[r * n + j] += scale * probs[r * n + j];
                    }
                    s[r * n + t] -= scale;
                }
            });
        }
        Op::Outer(a, b) => {
            let sa = nodes[a.0].value.shape();
            let (rows, m) = (sa[0], sa[1]);
            let d = nodes[b.0].value.shape()[1];
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |s| {
                for r in 0..rows {
                    for k in 0..m {
                        let gr = &g[(r * m + k) * d..(r * m + k + 1) * d];
                        s[r * m + k] += gr.iter().zip(&bv[r * d..(r + 1) * d]).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            });
            accumulate(nodes, grads, *b, |s| {
                for r in 0..rows {
                    for k in 0..m {
                        let ak = av[r * m + k];
                        let gr = &g[(r * m + k) * d..(r * m + k + 1) * d];
                        for j in 0..d {
                            s[r * d + j] += ak * gr[j];
                        }
                    }
                }
            });
        }
        Op::Recurrence { decay, drive, h0, shared, method } => {
            let ds = nodes[drive.0].value.shape();
            let (b, t, n) = (ds[0], ds[1], ds[2]);
            let w = val(*decay);
            let h0v = val(*h0);
            // adjoint a_t = g_t + w_{t+1} ⊙ a_{t+1}, a reverse-time recurrence
            let mut adj = vec![0.0; b * t * n];
            for bi in 0..b {
                let seq = bi * t * n..(bi + 1) * t * n;
                let dec = if *shared {
                    ssm::Decay::Shared(w)
                } else {
                    ssm::Decay::PerStep(&w[seq.clone()])
                };
                ssm::run_adjoint(*method, dec, &g[seq.clone()], n, &mut adj[seq]);
            }
            accumulate(nodes, grads, *drive, |s| s.iter_mut().zip(&adj).for_each(|(s, a)| *s += a));
            accumulate(nodes, grads, *h0, |s| {
                for bi in 0..b {
                    for j in 0..n {
                        let w0 = if *shared { w[j] } else { w[bi * t * n + j] };
                        s[bi * n + j] += w0 * adj[bi * t * n + j];
                    }
                }
            });
            accumulate(nodes, grads, *decay, |s| {
                for bi in 0..b {
                    for step in 0..t {
                        for j in 0..n {
                            let prev = if step == 0 {
                                h0v[bi * n + j]
                            } else {
                                out[(bi * t + step - 1) * n + j]
                            };
                            let contrib = adj[(bi * t + step) * n + j] * prev;
                            if *shared {
                                s[j] += contrib;
                            } else {
                                s[(bi * t + step) * n + j] += contrib;
                            }
                        }
                    }
                }
            });
        }
    }
    Ok(())
}
