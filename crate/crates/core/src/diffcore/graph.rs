//! Tape of primitive operations with exact reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so the tape is topologically sorted
//! by construction and `backward` visits each node once, in reverse.

use std::collections::BTreeMap;

use rand::Rng as _;

use super::{ModelParams, Tensor};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Clamp margin of [`Graph::acos_clamped`].
pub const ACOS_EPS: f64 = 1e-6;
pub(crate) const LN_EPS: f64 = 1e-9;
const BN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var, broadcast: bool },
    Sub(Var, Var),
    Mul { a: Var, b: Var, broadcast: bool },
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T>, train: bool },
    Dropout { x: Var, mask: Vec<T> },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Embedding { table: Var, idx: Vec<usize> },
    AcosClamped { x: Var, eps: T },
    Interleave(Vec<Var>),
    Strided { x: Var, stride: usize, offset: usize },
    Sum(Var),
    Mean(Var),
    WeightedSum { x: Var, w: Vec<T> },
    Mse { x: Var, target: Vec<T> },
    Bce { p: Var, target: Vec<T>, eps: T },
    CosineRows { x: Var, other: Vec<T> },
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance over the batch.
    pub var: Vec<T>,
    pub n: usize,
}

/// Which statistics a batch-norm node normalizes with.
pub enum BnStats<'a, T> {
    Batch,
    Running { mean: &'a [T], var: &'a [T] },
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(Var, String)>,
    mode: Mode,
    rng: Option<Rng>,
}

/// Gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    vars: Vec<Option<Vec<T>>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Grads<T> {
    /// Parameter gradients built directly, without a tape.
    pub fn from_params(params: BTreeMap<String, Tensor<T>>) -> Self {
        Self { vars: Vec::new(), params }
    }

    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.vars.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }

    pub fn global_norm(&self) -> T {
        self.params
            .values()
            .flat_map(|t| t.data().iter())
            .fold(T::zero(), |a, &g| a + g * g)
            .sqrt()
    }

    /// Rescales parameter gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: T) -> T {
        let n = self.global_norm();
        if n > max_norm && n > T::zero() {
            let s = max_norm / n;
            for t in self.params.values_mut() {
                t.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
        n
    }
}

fn matmul_into<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: (&[T], isize, isize),
    b: (&[T], isize, isize),
    c: &mut [T],
    accumulate: bool,
) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a.0, a.1, a.2, b.0, b.1, b.2, beta, c, n as isize, 1);
}

impl<T: Real> Graph<T> {
    /// Evaluation-mode graph: dropout is the identity, batch norm uses running stats.
    pub fn eval() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), mode: Mode::Eval, rng: None }
    }

    /// Training-mode graph drawing dropout masks from `rng`.
    pub fn train(rng: Rng) -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), mode: Mode::Train, rng: Some(rng) }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by graph op");
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding `t`; gradients are tracked when `requires_grad`.
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.input(t, false)
    }

    /// Leaf copied from a parameter segment; tracked iff the segment is trainable.
    pub fn param(&mut self, params: &ModelParams<T>, name: &str) -> Result<Var> {
        let seg = params.segment(name)?;
        let v = self.push(seg.tensor.clone(), Op::Leaf, seg.trainable);
        if seg.trainable {
            self.params.push((v, name.to_string()));
        }
        Ok(v)
    }

    /// Leaf copied from a parameter segment, never tracked regardless of its flag.
    pub fn param_const(&mut self, params: &ModelParams<T>, name: &str) -> Result<Var> {
        let t = params.get(name)?.clone();
        Ok(self.push(t, Op::Leaf, false))
    }

    /// `x [.., k] @ w [k, n] -> [.., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 || *xs.last().unwrap() != ws[0] {
            return Err(Error::Shape(format!("matmul {xs:?} x {ws:?}")));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).numel() / k;
        let mut out = vec![T::zero(); m * n];
        matmul_into(m, k, n, (self.value(x).data(), k as isize, 1), (self.value(w).data(), n as isize, 1), &mut out, false);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(shape, out)?, Op::Matmul(x, w), rg))
    }

    /// Batched product `a [B, m, k] @ b [B, k, n]`, or `@ b^T` with `b [B, n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(Error::Shape(format!("bmm {as_:?} x {bs:?}")));
        }
        let (nb, m, k) = (as_[0], as_[1], as_[2]);
        let (kb, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if kb != k {
            return Err(Error::Shape(format!("bmm inner dims {as_:?} x {bs:?} (trans_b={trans_b})")));
        }
        let mut out = vec![T::zero(); nb * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..nb {
                let asl = &ad[i * m * k..(i + 1) * m * k];
                let bsl = &bd[i * k * n..(i + 1) * k * n];
                let bview = if trans_b { (bsl, 1, k as isize) } else { (bsl, n as isize, 1) };
                matmul_into(m, k, n, (asl, k as isize, 1), bview, &mut out[i * m * n..(i + 1) * m * n], false);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![nb, m, n], out)?, Op::Bmm { a, b, trans_b }, rg))
    }

    fn broadcast_check(&self, a: Var, b: Var, what: &str) -> Result<bool> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            Ok(false)
        } else if vb.numel() == va.cols() {
            Ok(true)
        } else {
            Err(Error::Shape(format!("{what} {:?} and {:?}", va.shape(), vb.shape())))
        }
    }

    /// Elementwise `a + b`; `b` may be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_check(a, b, "add")?;
        let va = self.value(a);
        let bd = self.value(b).data();
        let c = va.cols();
        let out: Vec<T> = va.data().iter().enumerate().map(|(i, &x)| x + if broadcast { bd[i % c] } else { bd[i] }).collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b, broadcast }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("sub {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise `a * b`; `b` may be a single row broadcast over `a`'s rows.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_check(a, b, "mul")?;
        let va = self.value(a);
        let bd = self.value(b).data();
        let c = va.cols();
        let out: Vec<T> = va.data().iter().enumerate().map(|(i, &x)| x * if broadcast { bd[i % c] } else { bd[i] }).collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b, broadcast }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * c).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.max(T::zero()), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        self.softmax_impl(x, None)
    }

    /// Row-wise softmax restricted to entries where `allowed` is true; disallowed
    /// entries get probability 0, and a row with nothing allowed is all zeros.
    pub fn masked_softmax_lastdim(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        if allowed.len() != self.value(x).numel() {
            return Err(Error::Shape("softmax mask size".into()));
        }
        Ok(self.softmax_impl(x, Some(allowed)))
    }

    fn softmax_impl(&mut self, x: Var, allowed: Option<&[bool]>) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let mut out = vec![T::zero(); v.numel()];
        for (r, (row, o)) in v.data().chunks(c).zip(out.chunks_mut(c)).enumerate() {
            let ok = |j: usize| allowed.is_none_or(|m| m[r * c + j]);
            let mut mx = T::neg_infinity();
            for (j, &a) in row.iter().enumerate() {
                if ok(j) {
                    mx = mx.max(a);
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let mut s = T::zero();
            for (j, &a) in row.iter().enumerate() {
                if ok(j) {
                    o[j] = (a - mx).exp();
                    s += o[j];
                }
            }
            o.iter_mut().for_each(|e| *e /= s);
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of length `d`.
    pub fn layernorm_lastdim(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let v = self.value(x);
        let d = v.cols();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::Shape("layernorm affine size".into()));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = v.rows();
        let mut xhat = vec![T::zero(); v.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); v.numel()];
        let df = T::from_usize_lossy(d);
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / df;
            let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Batch normalization of `x [N, d]` over the batch axis.
    ///
    /// With [`BnStats::Batch`] (requires `N >= 2`) the batch statistics are used
    /// and returned so the caller can update running estimates.
    pub fn batchnorm_lastdim(&mut self, x: Var, gamma: Var, beta: Var, stats: BnStats<'_, T>) -> Result<(Var, Option<BatchStats<T>>)> {
        let v = self.value(x);
        let d = v.cols();
        let n = v.rows();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::Shape("batchnorm affine size".into()));
        }
        let (mean, var, train) = match stats {
            BnStats::Batch => {
                if n < 2 {
                    return Err(Error::InvalidArgument("batch norm needs a batch of at least 2 in train mode".into()));
                }
                let nf = T::from_usize_lossy(n);
                let mut mean = vec![T::zero(); d];
                for row in v.data().chunks(d) {
                    mean.iter_mut().zip(row).for_each(|(m, &a)| *m += a);
                }
                mean.iter_mut().for_each(|m| *m /= nf);
                let mut var = vec![T::zero(); d];
                for row in v.data().chunks(d) {
                    for j in 0..d {
                        var[j] += (row[j] - mean[j]) * (row[j] - mean[j]);
                    }
                }
                var.iter_mut().for_each(|s| *s /= nf);
                (mean, var, true)
            }
            BnStats::Running { mean, var } => {
                if mean.len() != d || var.len() != d {
                    return Err(Error::Shape("batchnorm running stats size".into()));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let rstd: Vec<T> = var.iter().map(|&s| T::one() / (s + T::lit(BN_EPS)).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); v.numel()];
        let mut out = vec![T::zero(); v.numel()];
        for (r, row) in v.data().chunks(d).enumerate() {
            for j in 0..d {
                let h = (row[j] - mean[j]) * rstd[j];
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let node = self.push(t, Op::BatchNorm { x, gamma, beta, xhat, rstd, train }, rg);
        Ok((node, train.then_some(BatchStats { mean, var, n })))
    }

    /// Inverted dropout with drop probability `p`; the identity in eval mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability must be in [0, 1), got {p}")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).numel();
        let rng = self.rng.as_mut().expect("train graphs own an rng");
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..n).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    /// Concatenation along the last axis; leading shapes must agree.
    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::Shape(format!("concat {first:?} with {s:?}")));
            }
            total += s[s.len() - 1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                let c = v.cols();
                out.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let mut shape = first.clone();
        *shape.last_mut().unwrap() = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_lastdim(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let c = v.cols();
        if len == 0 || start + len > c {
            return Err(Error::Shape(format!("slice {start}+{len} of {c} columns")));
        }
        let mut out = Vec::with_capacity(v.rows() * len);
        for row in v.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, start }, rg))
    }

    /// Rows of `table [V, d]` at `idx`, shaped `lead + [d]`.
    pub fn embedding_lookup(&mut self, table: Var, idx: &[usize], lead: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || lead.iter().product::<usize>() != idx.len() {
            return Err(Error::Shape("embedding lookup shapes".into()));
        }
        let (nv, d) = (ts[0], ts[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= nv) {
            return Err(Error::InvalidArgument(format!("embedding index {bad} >= table size {nv}")));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let rg = self.rg(table);
        Ok(self.push(Tensor::new(shape, out)?, Op::Embedding { table, idx: idx.to_vec() }, rg))
    }

    /// `acos(clamp(x, -1 + eps, 1 - eps))`.
    pub fn acos_clamped(&mut self, x: Var, eps: T) -> Var {
        let lo = -T::one() + eps;
        let hi = T::one() - eps;
        self.unary(x, |a| a.max(lo).min(hi).acos(), Op::AcosClamped { x, eps })
    }

    /// Interleaves `[B, K, d]` tensors along axis 1 into `[B, n*K, d]` (token order
    /// `p0[0], p1[0], .., p0[1], ..`).
    pub fn interleave(&mut self, parts: &[Var]) -> Result<Var> {
        let s0 = self.shape(parts[0]).to_vec();
        if s0.len() != 3 || parts.iter().any(|&p| self.shape(p) != s0.as_slice()) {
            return Err(Error::Shape("interleave needs equal [B, K, d] parts".into()));
        }
        let (b, k, d) = (s0[0], s0[1], s0[2]);
        let np = parts.len();
        let mut out = vec![T::zero(); b * k * np * d];
        for (pi, &p) in parts.iter().enumerate() {
            let pd = self.value(p).data();
            for bi in 0..b {
                for t in 0..k {
                    let src = (bi * k + t) * d;
                    let dst = (bi * k * np + t * np + pi) * d;
                    out[dst..dst + d].copy_from_slice(&pd[src..src + d]);
                }
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![b, k * np, d], out)?, Op::Interleave(parts.to_vec()), rg))
    }

    /// Tokens `offset, offset + stride, ..` along axis 1 of `[B, T, d]`.
    pub fn strided_tokens(&mut self, x: Var, stride: usize, offset: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || stride == 0 || offset >= s[1] {
            return Err(Error::Shape("strided_tokens needs [B, T, d] and offset < T".into()));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let k = (t - offset).div_ceil(stride);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * k * d);
        for bi in 0..b {
            for i in 0..k {
                let src = (bi * t + offset + i * stride) * d;
                out.extend_from_slice(&xd[src..src + d]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![b, k, d], out)?, Op::Strided { x, stride, offset }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::from_usize_lossy(v.numel());
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Scalar `sum_i w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, w: &[T]) -> Result<Var> {
        let v = self.value(x);
        if w.len() != v.numel() {
            return Err(Error::Shape("weighted_sum weights".into()));
        }
        let s = v.data().iter().zip(w).fold(T::zero(), |a, (&x, &w)| a + x * w);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, w: w.to_vec() }, rg))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &[T]) -> Result<Var> {
        let v = self.value(x);
        if target.len() != v.numel() {
            return Err(Error::Shape("mse target".into()));
        }
        let s = v.data().iter().zip(target).fold(T::zero(), |a, (&x, &t)| a + (x - t) * (x - t)) / T::from_usize_lossy(v.numel());
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mse { x, target: target.to_vec() }, rg))
    }

    /// Mean binary cross-entropy of probabilities `p` against constant labels.
    pub fn bce(&mut self, p: Var, target: &[T]) -> Result<Var> {
        let v = self.value(p);
        if target.len() != v.numel() {
            return Err(Error::Shape("bce target".into()));
        }
        let eps = T::lit(1e-12);
        let s = v
            .data()
            .iter()
            .zip(target)
            .fold(T::zero(), |a, (&q, &t)| {
                let q = q.max(eps).min(T::one() - eps);
                a - (t * q.ln() + (T::one() - t) * (T::one() - q).ln())
            })
            / T::from_usize_lossy(v.numel());
        let rg = self.rg(p);
        Ok(self.push(Tensor::scalar(s), Op::Bce { p, target: target.to_vec(), eps }, rg))
    }

    /// Per-row cosine similarity between `x [.., c]` and a constant tensor of the
    /// same shape; rows with a (near-)zero norm give 0. Output shape drops the last axis.
    pub fn cosine_rows(&mut self, x: Var, other: &[T]) -> Result<Var> {
        let v = self.value(x);
        if other.len() != v.numel() {
            return Err(Error::Shape("cosine_rows operand".into()));
        }
        let c = v.cols();
        let out: Vec<T> = v.data().chunks(c).zip(other.chunks(c)).map(|(a, b)| cosine(a, b)).collect();
        let mut shape = v.shape().to_vec();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::CosineRows { x, other: other.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut g: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &dy, &mut g);
            g[i] = Some(dy);
        }
        let mut params: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (v, name) in &self.params {
            let Some(grad) = &g[v.0] else { continue };
            match params.get_mut(name) {
                Some(acc) => acc.data_mut().iter_mut().zip(grad).for_each(|(a, &b)| *a += b),
                None => {
                    params.insert(name.clone(), Tensor::new(self.shape(*v).to_vec(), grad.clone())?);
                }
            }
        }
        Ok(Grads { vars: g, params })
    }

    fn backward_node(&self, i: usize, dy: &[T], g: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.numel() / k;
                if self.rg(*x) {
                    let gx = grad_buf(g, *x, xv.numel());
                    matmul_into(m, n, k, (dy, n as isize, 1), (wv.data(), 1, n as isize), gx, true);
                }
                if self.rg(*w) {
                    let gw = grad_buf(g, *w, wv.numel());
                    matmul_into(k, m, n, (xv.data(), 1, k as isize), (dy, n as isize, 1), gw, true);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (nb, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                if self.rg(*a) {
                    let ga = grad_buf(g, *a, av.numel());
                    for bi in 0..nb {
                        let dyb = &dy[bi * m * n..(bi + 1) * m * n];
                        let bb = &bv.data()[bi * k * n..(bi + 1) * k * n];
                        // da = dy @ B^T ; B^T is [n, k]
                        let bt = if *trans_b { (bb, k as isize, 1) } else { (bb, 1, n as isize) };
                        matmul_into(m, n, k, (dyb, n as isize, 1), bt, &mut ga[bi * m * k..(bi + 1) * m * k], true);
                    }
                }
                if self.rg(*b) {
                    let gb = grad_buf(g, *b, bv.numel());
                    for bi in 0..nb {
                        let dyb = &dy[bi * m * n..(bi + 1) * m * n];
                        let ab = &av.data()[bi * m * k..(bi + 1) * m * k];
                        let out = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // dB [n, k] = dy^T [n, m] @ A [m, k]
                            matmul_into(n, m, k, (dyb, 1, n as isize), (ab, k as isize, 1), out, true);
                        } else {
                            // dB [k, n] = A^T [k, m] @ dy [m, n]
                            matmul_into(k, m, n, (ab, 1, k as isize), (dyb, n as isize, 1), out, true);
                        }
                    }
                }
            }
            Op::Add { a, b, broadcast } => {
                if self.rg(*a) {
                    let ga = grad_buf(g, *a, dy.len());
                    ga.iter_mut().zip(dy).for_each(|(x, &d)| *x += d);
                }
                if self.rg(*b) {
                    let nb = self.value(*b).numel();
                    let gb = grad_buf(g, *b, nb);
                    if *broadcast {
                        for row in dy.chunks(nb) {
                            gb.iter_mut().zip(row).for_each(|(x, &d)| *x += d);
                        }
                    } else {
                        gb.iter_mut().zip(dy).for_each(|(x, &d)| *x += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    let ga = grad_buf(g, *a, dy.len());
                    ga.iter_mut().zip(dy).for_each(|(x, &d)| *x += d);
                }
                if self.rg(*b) {
                    let gb = grad_buf(g, *b, dy.len());
                    gb.iter_mut().zip(dy).for_each(|(x, &d)| *x -= d);
                }
            }
            Op::Mul { a, b, broadcast } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let nb = bv.len();
                if self.rg(*a) {
                    let ga = grad_buf(g, *a, dy.len());
                    for (idx, x) in ga.iter_mut().enumerate() {
                        *x += dy[idx] * if *broadcast { bv[idx % nb] } else { bv[idx] };
                    }
                }
                if self.rg(*b) {
                    let gb = grad_buf(g, *b, nb);
                    for idx in 0..dy.len() {
                        gb[if *broadcast { idx % nb } else { idx }] += dy[idx] * av[idx];
                    }
                }
            }
            Op::Scale(x, c) => {
                let gx = grad_buf(g, *x, dy.len());
                gx.iter_mut().zip(dy).for_each(|(a, &d)| *a += d * *c);
            }
            Op::Relu(x) => {
                let gx = grad_buf(g, *x, dy.len());
                for ((a, &d), &o) in gx.iter_mut().zip(dy).zip(y) {
                    if o > T::zero() {
                        *a += d;
                    }
                }
            }
            Op::Tanh(x) => {
                let gx = grad_buf(g, *x, dy.len());
                for ((a, &d), &o) in gx.iter_mut().zip(dy).zip(y) {
                    *a += d * (T::one() - o * o);
                }
            }
            Op::Sigmoid(x) => {
                let gx = grad_buf(g, *x, dy.len());
                for ((a, &d), &o) in gx.iter_mut().zip(dy).zip(y) {
                    *a += d * o * (T::one() - o);
                }
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                let gx = grad_buf(g, *x, dy.len());
                for ((gr, dr), yr) in gx.chunks_mut(c).zip(dy.chunks(c)).zip(y.chunks(c)) {
                    let dot = dr.iter().zip(yr).fold(T::zero(), |a, (&d, &o)| a + d * o);
                    for j in 0..c {
                        gr[j] += yr[j] * (dr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = node.value.cols();
                let gam = self.value(*gamma).data();
                if self.rg(*gamma) {
                    let gg = grad_buf(g, *gamma, d);
                    for (dr, hr) in dy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += dr[j] * hr[j];
                        }
                    }
                }
                if self.rg(*beta) {
                    let gb = grad_buf(g, *beta, d);
                    for dr in dy.chunks(d) {
                        gb.iter_mut().zip(dr).for_each(|(a, &v)| *a += v);
                    }
                }
                if self.rg(*x) {
                    let df = T::from_usize_lossy(d);
                    let gx = grad_buf(g, *x, dy.len());
                    for (r, (dr, hr)) in dy.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = dr[j] * gam[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = dr[j] * gam[j];
                            gx[r * d + j] += rstd[r] * (dh - s1 / df - hr[j] * s2 / df);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, train } => {
                let d = node.value.cols();
                let n = node.value.rows();
                let gam = self.value(*gamma).data();
                let mut sum_dy = vec![T::zero(); d];
                let mut sum_dyh = vec![T::zero(); d];
                for (dr, hr) in dy.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        sum_dy[j] += dr[j];
                        sum_dyh[j] += dr[j] * hr[j];
                    }
                }
                if self.rg(*gamma) {
                    let gg = grad_buf(g, *gamma, d);
                    gg.iter_mut().zip(&sum_dyh).for_each(|(a, &v)| *a += v);
                }
                if self.rg(*beta) {
                    let gb = grad_buf(g, *beta, d);
                    gb.iter_mut().zip(&sum_dy).for_each(|(a, &v)| *a += v);
                }
                if self.rg(*x) {
                    let nf = T::from_usize_lossy(n);
                    let gx = grad_buf(g, *x, dy.len());
                    for (r, (dr, hr)) in dy.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            let v = if *train {
                                gam[j] * rstd[j] * (dr[j] - sum_dy[j] / nf - hr[j] * sum_dyh[j] / nf)
                            } else {
                                gam[j] * rstd[j] * dr[j]
                            };
                            gx[r * d + j] += v;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let gx = grad_buf(g, *x, dy.len());
                for ((a, &d), &m) in gx.iter_mut().zip(dy).zip(mask) {
                    *a += d * m;
                }
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.rg(p) {
                        let gp = grad_buf(g, p, rows * c);
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] += dy[r * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::Slice { x, start } => {
                let len = node.value.cols();
                let c = self.value(*x).cols();
                let gx = grad_buf(g, *x, self.value(*x).numel());
                for (r, dr) in dy.chunks(len).enumerate() {
                    for j in 0..len {
                        gx[r * c + start + j] += dr[j];
                    }
                }
            }
            Op::Embedding { table, idx } => {
                let d = node.value.cols();
                let gt = grad_buf(g, *table, self.value(*table).numel());
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += dy[r * d + j];
                    }
                }
            }
            Op::AcosClamped { x, eps } => {
                let xv = self.value(*x).data();
                let lo = -T::one() + *eps;
                let hi = T::one() - *eps;
                let gx = grad_buf(g, *x, dy.len());
                for ((a, &d), &v) in gx.iter_mut().zip(dy).zip(xv) {
                    if v > lo && v < hi {
                        *a -= d / (T::one() - v * v).sqrt();
                    }
                }
            }
            Op::Interleave(parts) => {
                let s = self.shape(parts[0]);
                let (b, k, d) = (s[0], s[1], s[2]);
                let np = parts.len();
                for (pi, &p) in parts.iter().enumerate() {
                    if !self.rg(p) {
                        continue;
                    }
                    let gp = grad_buf(g, p, b * k * d);
                    for bi in 0..b {
                        for t in 0..k {
                            let dst = (bi * k + t) * d;
                            let src = (bi * k * np + t * np + pi) * d;
                            for j in 0..d {
                                gp[dst + j] += dy[src + j];
                            }
                        }
                    }
                }
            }
            Op::Strided { x, stride, offset } => {
                let s = self.shape(*x);
                let (b, t, d) = (s[0], s[1], s[2]);
                let k = node.value.shape()[1];
                let gx = grad_buf(g, *x, b * t * d);
                for bi in 0..b {
                    for i in 0..k {
                        let dst = (bi * t + offset + i * stride) * d;
                        let src = (bi * k + i) * d;
                        for j in 0..d {
                            gx[dst + j] += dy[src + j];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                grad_buf(g, *x, n).iter_mut().for_each(|a| *a += dy[0]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let s = dy[0] / T::from_usize_lossy(n);
                grad_buf(g, *x, n).iter_mut().for_each(|a| *a += s);
            }
            Op::WeightedSum { x, w } => {
                let gx = grad_buf(g, *x, w.len());
                gx.iter_mut().zip(w).for_each(|(a, &wi)| *a += dy[0] * wi);
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x).data();
                let s = T::lit(2.0) * dy[0] / T::from_usize_lossy(xv.len());
                let gx = grad_buf(g, *x, xv.len());
                for ((a, &v), &t) in gx.iter_mut().zip(xv).zip(target) {
                    *a += s * (v - t);
                }
            }
            Op::Bce { p, target, eps } => {
                let pv = self.value(*p).data();
                let s = dy[0] / T::from_usize_lossy(pv.len());
                let gp = grad_buf(g, *p, pv.len());
                for ((a, &q), &t) in gp.iter_mut().zip(pv).zip(target) {
                    if q > *eps && q < T::one() - *eps {
                        *a += s * ((T::one() - t) / (T::one() - q) - t / q);
                    }
                }
            }
            Op::CosineRows { x, other } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let gx = grad_buf(g, *x, xv.numel());
                for (r, (a, b)) in xv.data().chunks(c).zip(other.chunks(c)).enumerate() {
                    let na = norm(a);
                    let nb = norm(b);
                    if na < T::lit(1e-12) || nb < T::lit(1e-12) {
                        continue;
                    }
                    let cos = y[r];
                    for j in 0..c {
                        gx[r * c + j] += dy[r] * (b[j] / (na * nb) - cos * a[j] / (na * na));
                    }
                }
            }
            Op::Reshape(x) => {
                let gx = grad_buf(g, *x, dy.len());
                gx.iter_mut().zip(dy).for_each(|(a, &d)| *a += d);
            }
        }
    }
}

fn grad_buf<T: Real>(g: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut [T] {
    g[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

#[inline]
pub(crate) fn sigmoid<T: Real>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

fn norm<T: Real>(a: &[T]) -> T {
    a.iter().fold(T::zero(), |s, &x| s + x * x).sqrt()
}

pub(crate) fn cosine<T: Real>(a: &[T], b: &[T]) -> T {
    let (na, nb) = (norm(a), norm(b));
    if na < T::lit(1e-12) || nb < T::lit(1e-12) {
        return T::zero();
    }
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y) / (na * nb)
}
