//! Reverse-mode differentiation over a per-forward tape.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! as borrowed leaves, so building a graph never copies model weights.
//! [`Tape::backward`] consumes the tape and returns the gradients of every
//! reachable leaf whose tensor has `requires_grad` set; frozen leaves get
//! none.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, AttnDims};
use crate::tensor::{Float, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    RmsNorm { x: Var, scale: Var, inv: Vec<T> },
    Gelu(Var),
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, probs: Vec<T> },
    Embed { tok: Var, pos: Var, ids: Vec<usize>, seq: usize },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, count: usize },
    SoftmaxDim0(Var),
    Kl(Var, Var),
    KlSoftmaxDim0 { p: Var, x: Var, q: Vec<T> },
}

struct Node<'a, T: Float> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<'a, T: Float> {
    nodes: Vec<Node<'a, T>>,
    grad_enabled: bool,
}

impl<T: Float> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Float> Tape<'a, T> {
    /// Tape that records gradients for leaves with `requires_grad`.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Tape for pure inference: every leaf is treated as frozen.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn owned(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let rg = self.rg(inputs);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(Cow::Owned(t), op, rg))
    }

    /// Records a borrowed tensor. It participates in differentiation iff the
    /// tape has gradients enabled and the tensor has `requires_grad` set.
    pub fn leaf(&mut self, t: &'a Tensor<T>) -> Var {
        let rg = self.grad_enabled && t.requires_grad();
        self.push(Cow::Borrowed(t), Op::Leaf, rg)
    }

    /// Records an owned value that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Records an owned leaf; its gradient is retrievable by [`Var`].
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let rg = self.grad_enabled && requires_grad;
        self.push(Cow::Owned(t), Op::Leaf, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Matrix product of two rank-2 values.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.owned(out.shape().to_vec(), out.into_data(), Op::MatMul(a, b), &[a, b])?)
    }

    /// `x · wᵀ` applied to every row of `x` (`[.., k]`) with `w: [d, k]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let k = *xs.last().unwrap();
        if ws.len() != 2 || ws[1] != k {
            return Err(Error::dim("linear", xs, ws));
        }
        let d = ws[0];
        let rows = self.value(x).rows();
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = d;
        let mut out = vec![T::zero(); rows * d];
        kernels::gemm_nt(rows, k, d, self.data(x), self.data(w), &mut out, false);
        self.owned(shape, out, Op::Linear(x, w), &[x, w])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        self.owned(av.shape().to_vec(), data, Op::Add(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product of equally shaped values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("elementwise_product", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        self.owned(av.shape().to_vec(), data, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * s).collect();
        self.owned(av.shape().to_vec(), data, Op::Scale(a, s), &[a])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.owned(vec![1], vec![s], Op::Sum(a), &[a])
    }

    /// RMS normalization of every row followed by a per-feature scale.
    pub fn rms_norm(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (xs, ss) = (self.shape(x), self.shape(scale));
        if ss.len() != 1 || ss[0] != *xs.last().unwrap() {
            return Err(Error::dim("rms_norm", xs, ss));
        }
        let (y, inv) = kernels::rms_norm(self.data(x), self.data(scale));
        let shape = xs.to_vec();
        let rg = self.rg(&[x, scale]);
        let inv = if rg { inv } else { Vec::new() };
        self.owned(shape, y, Op::RmsNorm { x, scale, inv }, &[x, scale])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let y = kernels::gelu(self.data(x));
        self.owned(self.shape(x).to_vec(), y, Op::Gelu(x), &[x])
    }

    /// Multi-head causal self-attention over `[batch, seq, d_model]` inputs.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 3 || self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() {
            return Err(Error::dim("causal_attention", &qs, self.shape(k)));
        }
        if heads == 0 || qs[2] % heads != 0 {
            return Err(Error::contract(format!("{heads} heads do not divide d_model {}", qs[2])));
        }
        let dims = AttnDims {
            batch: qs[0],
            seq: qs[1],
            d_model: qs[2],
            heads,
        };
        let (out, probs) = kernels::causal_attention(self.data(q), self.data(k), self.data(v), dims);
        let rg = self.rg(&[q, k, v]);
        let probs = if rg { probs } else { Vec::new() };
        self.owned(qs, out, Op::Attention { q, k, v, dims, probs }, &[q, k, v])
    }

    /// Token plus learned absolute position embedding for `ids: [batch, seq]`.
    pub fn embed(&mut self, tok: Var, pos: Var, ids: &[usize], batch: usize, seq: usize) -> Result<Var> {
        let (ts, ps) = (self.shape(tok).to_vec(), self.shape(pos).to_vec());
        if ts.len() != 2 || ps.len() != 2 || ts[1] != ps[1] || ids.len() != batch * seq || seq > ps[0] {
            return Err(Error::dim("embed", &ts, &ps));
        }
        let (vocab, d) = (ts[0], ts[1]);
        let (td, pd) = (self.data(tok), self.data(pos));
        let mut out = Vec::with_capacity(batch * seq * d);
        for (n, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::contract(format!("token id {id} >= vocab size {vocab}")));
            }
            let s = n % seq;
            out.extend(td[id * d..(id + 1) * d].iter().zip(&pd[s * d..(s + 1) * d]).map(|(&a, &b)| a + b));
        }
        let op = Op::Embed {
            tok,
            pos,
            ids: ids.to_vec(),
            seq,
        };
        self.owned(vec![batch, seq, d], out, op, &[tok, pos])
    }

    /// Mean next-token negative log-likelihood of `logits: [.., vocab]`.
    /// Rows whose target is `None` are excluded from the mean.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = lv.last_dim();
        if lv.rows() != targets.len() {
            return Err(Error::dim("cross_entropy", lv.shape(), &[targets.len()]));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::contract(format!("target {bad} >= vocab size {vocab}")));
        }
        let (nll, count) = kernels::cross_entropy(lv.data(), vocab, targets);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            count,
        };
        self.owned(vec![1], vec![nll], op, &[logits])
    }

    /// Softmax along the leading (batch) axis.
    pub fn softmax_dim0(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs[0] < 2 {
            return Err(Error::DegenerateDistribution(xs[0]));
        }
        let y = kernels::softmax_dim0(self.data(x), xs[0]);
        self.owned(xs.to_vec(), y, Op::SoftmaxDim0(x), &[x])
    }

    /// Sum over every element of `p · ln(p / q)`.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let (ps, qs) = (self.shape(p), self.shape(q));
        if ps != qs {
            return Err(Error::dim("kl_divergence", ps, qs));
        }
        let v = kernels::kl_divergence(self.data(p), self.data(q));
        self.owned(vec![1], vec![v], Op::Kl(p, q), &[p, q])
    }

    /// `KL(p || softmax_dim0(x))` as one op. `p` must itself be normalized
    /// along the leading axis; the `x` gradient `q - p` relies on that, and is
    /// exactly zero when `p` and `q` agree.
    pub fn kl_to_softmax_dim0(&mut self, p: Var, x: Var) -> Result<Var> {
        let (ps, xs) = (self.shape(p), self.shape(x));
        if ps != xs {
            return Err(Error::dim("kl_to_softmax_dim0", ps, xs));
        }
        if xs[0] < 2 {
            return Err(Error::DegenerateDistribution(xs[0]));
        }
        let q = kernels::softmax_dim0(self.data(x), xs[0]);
        let v = kernels::kl_divergence(self.data(p), &q);
        self.owned(vec![1], vec![v], Op::KlSoftmaxDim0 { p, x, q }, &[p, x])
    }

    /// Back-propagates from a one-element `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients {
            by_var: HashMap::new(),
            by_addr: HashMap::new(),
        };

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut send = |v: Var, d: Vec<T>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    if let Cow::Borrowed(src) = &node.value {
                        let addr = *src as *const Tensor<T> as usize;
                        match out.by_addr.get_mut(&addr) {
                            Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, &b)| *a += b),
                            None => {
                                out.by_addr.insert(addr, t.clone());
                            }
                        }
                    }
                    out.by_var.insert(Var(idx), t);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if self.nodes[a.0].requires_grad {
                        let mut da = vec![T::zero(); m * k];
                        kernels::gemm_nt(m, n, k, &g, bv.data(), &mut da, false);
                        send(*a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let mut db = vec![T::zero(); k * n];
                        kernels::gemm_tn(k, m, n, av.data(), &g, &mut db, false);
                        send(*b, db);
                    }
                }
                Op::Linear(x, w) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (rows, k, d) = (xv.rows(), xv.last_dim(), wv.shape()[0]);
                    if self.nodes[x.0].requires_grad {
                        let mut dx = vec![T::zero(); rows * k];
                        kernels::gemm_nn(rows, d, k, &g, wv.data(), &mut dx, false);
                        send(*x, dx);
                    }
                    if self.nodes[w.0].requires_grad {
                        let mut dw = vec![T::zero(); d * k];
                        kernels::gemm_tn(d, rows, k, &g, xv.data(), &mut dw, false);
                        send(*w, dw);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.data(*a), self.data(*b));
                    if self.nodes[a.0].requires_grad {
                        send(*a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                    }
                    if self.nodes[b.0].requires_grad {
                        send(*b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
                    }
                }
                Op::Scale(a, s) => send(*a, g.iter().map(|&x| x * *s).collect()),
                Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).numel()]),
                Op::RmsNorm { x, scale, inv } => {
                    let (dx, ds) = kernels::rms_norm_backward(self.data(*x), self.data(*scale), inv, &g);
                    send(*x, dx);
                    send(*scale, ds);
                }
                Op::Gelu(x) => send(*x, kernels::gelu_backward(self.data(*x), &g)),
                Op::Attention { q, k, v, dims, probs } => {
                    let (dq, dk, dv) = kernels::causal_attention_backward(
                        self.data(*q),
                        self.data(*k),
                        self.data(*v),
                        probs,
                        &g,
                        *dims,
                    );
                    send(*q, dq);
                    send(*k, dk);
                    send(*v, dv);
                }
                Op::Embed { tok, pos, ids, seq } => {
                    let d = self.value(*tok).shape()[1];
                    if self.nodes[tok.0].requires_grad {
                        let mut dt = vec![T::zero(); self.value(*tok).numel()];
                        for (n, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                dt[id * d + j] += g[n * d + j];
                            }
                        }
                        send(*tok, dt);
                    }
                    if self.nodes[pos.0].requires_grad {
                        let mut dp = vec![T::zero(); self.value(*pos).numel()];
                        for n in 0..ids.len() {
                            let s = n % seq;
                            for j in 0..d {
                                dp[s * d + j] += g[n * d + j];
                            }
                        }
                        send(*pos, dp);
                    }
                }
                Op::CrossEntropy { logits, targets, count } => {
                    let lv = self.value(*logits);
                    let d = kernels::cross_entropy_backward(lv.data(), lv.last_dim(), targets, *count, g[0]);
                    send(*logits, d);
                }
                Op::SoftmaxDim0(x) => {
                    let lead = node.value.shape()[0];
                    send(*x, kernels::softmax_dim0_backward(node.value.data(), &g, lead));
                }
                Op::Kl(p, q) => {
                    let (dp, dq) = kernels::kl_divergence_backward(self.data(*p), self.data(*q), g[0]);
                    send(*p, dp);
                    send(*q, dq);
                }
                Op::KlSoftmaxDim0 { p, x, q } => {
                    let pd = self.data(*p);
                    if self.requires_grad(*p) {
                        send(*p, kernels::kl_divergence_backward(pd, q, g[0]).0);
                    }
                    send(*x, q.iter().zip(pd).map(|(&qi, &pi)| g[0] * (qi - pi)).collect());
                }
            }
        }
        Ok(out)
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    by_var: HashMap<Var, Tensor<T>>,
    by_addr: HashMap<usize, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a leaf recorded with [`Tape::leaf`] or [`Tape::input`].
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_var.get(&v)
    }

    /// Gradient for a borrowed tensor, summed over every leaf that referenced it.
    pub fn for_tensor(&self, t: &Tensor<T>) -> Option<&Tensor<T>> {
        self.by_addr.get(&(t as *const Tensor<T> as usize))
    }

    /// Accumulates this tensor's gradient (if any) into its `grad` buffer.
    pub fn apply_to(&self, t: &mut Tensor<T>) -> Result<bool> {
        match self.by_addr.get(&(t as *const Tensor<T> as usize)) {
            Some(g) => {
                t.accumulate_grad(g.data())?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    pub fn tensor_count(&self) -> usize {
        self.by_addr.len()
    }
}
