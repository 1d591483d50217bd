//! The tape: nodes are recorded in creation order, so reverse creation order
//! is a valid topological order for the backward sweep.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::kernels::{self, ConvGeom, Mask};
use crate::params::ParamStore;
use crate::scalar::{gemm, MatLayout, Scalar};
use crate::tensor::{numel, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Gelu,
    Silu,
    Sigmoid,
    Exp,
    Tanh,
    Sqrt,
    Square,
    Neg,
    Log,
    Scale(f64),
    Shift(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    Binary { a: Var, b: Var, kind: BinaryKind },
    Unary { a: Var, kind: UnaryKind },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, rstd: Vec<S> },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    GatherRows { table: Var, idx: Vec<usize> },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<S> },
    Upsample2x { a: Var },
    SumAll { a: Var },
    SumAxis { a: Var, axis: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<S>, probs: Vec<S>, denom: S },
}

/// Recorded computation over one parameter store.
///
/// Parameters enter through [`Graph::param`]; a parameter is differentiable
/// only when gradients are enabled and its store entry is not frozen.
pub struct Graph<'p, S: Scalar> {
    store: Option<&'p ParamStore<S>>,
    values: Vec<Cow<'p, Tensor<S>>>,
    ops: Vec<Op<S>>,
    requires_grad: Vec<bool>,
    bound: BTreeMap<String, Var>,
    grad_enabled: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new(store: &'p ParamStore<S>) -> Self {
        Self {
            store: Some(store),
            values: Vec::new(),
            ops: Vec::new(),
            requires_grad: Vec::new(),
            bound: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph with no parameter store; only constants and explicit leaves.
    pub fn detached() -> Self {
        Self {
            store: None,
            values: Vec::new(),
            ops: Vec::new(),
            requires_grad: Vec::new(),
            bound: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    /// Inference mode: nothing on this tape will be differentiable.
    pub fn no_grad(mut self) -> Self {
        self.grad_enabled = false;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor<S>>, op: Op<S>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad && self.grad_enabled);
        Var(self.values.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.requires_grad[v.0]);
        self.push(Cow::Owned(value), op, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// A free differentiable leaf (not backed by the store).
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Binds a named parameter; repeated calls return the same node.
    ///
    /// Panics if the store has no such entry, which is a model wiring bug.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let entry = store.entry(name).unwrap_or_else(|| panic!("missing parameter `{name}`"));
        let v = self.push(Cow::Borrowed(&entry.tensor), Op::Leaf, !entry.frozen);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.store.is_some_and(|s| s.contains(name))
    }

    /// Parameters bound so far, by name.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    // ---- linear algebra ------------------------------------------------

    /// `a[.., m, k] x b[k, n]` (shared weight) or batched `a[.., m, k] x b[.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a x bᵀ` with `b` stored as `[.., n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs rank >= 2: {sa:?} x {sb:?}");
        let k = sa[sa.len() - 1];
        let (bk, n) = if tb { (sb[sb.len() - 1], sb[sb.len() - 2]) } else { (sb[sb.len() - 2], sb[sb.len() - 1]) };
        assert_eq!(k, bk, "matmul inner mismatch: {sa:?} x {sb:?} (tb={tb})");
        let lb = MatLayout::new(sb[sb.len() - 2], sb[sb.len() - 1], tb);
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        let out = if sb.len() == 2 {
            let m = numel(&sa) / k;
            let mut out = vec![S::zero(); m * n];
            gemm(self.value(a).data(), MatLayout::new(m, k, false), self.value(b).data(), lb, &mut out, S::zero());
            out
        } else {
            assert_eq!(sa[..sa.len() - 2], sb[..sb.len() - 2], "batched matmul batch mismatch");
            let m = sa[sa.len() - 2];
            let batch = numel(&sa[..sa.len() - 2]);
            let mut out = vec![S::zero(); batch * m * n];
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            let bsz = sb[sb.len() - 2] * sb[sb.len() - 1];
            for i in 0..batch {
                gemm(
                    &ad[i * m * k..(i + 1) * m * k],
                    MatLayout::new(m, k, false),
                    &bd[i * bsz..(i + 1) * bsz],
                    lb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    S::zero(),
                );
            }
            out
        };
        self.push_owned(Tensor::new(&out_shape, out), Op::MatMul { a, b, tb }, &[a, b])
    }

    /// `x w + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add(y, b),
            None => y,
        }
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Var {
        let f = match kind {
            BinaryKind::Add => |x: S, y: S| x + y,
            BinaryKind::Sub => |x: S, y: S| x - y,
            BinaryKind::Mul => |x: S, y: S| x * y,
            BinaryKind::Div => |x: S, y: S| x / y,
        };
        let out = kernels::broadcast_binary(self.value(a), self.value(b), f);
        self.push_owned(out, Op::Binary { a, b, kind }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinaryKind::Div)
    }

    pub fn unary(&mut self, a: Var, kind: UnaryKind) -> Var {
        let f: Box<dyn Fn(S) -> S> = match kind {
            UnaryKind::Gelu => Box::new(kernels::gelu),
            UnaryKind::Silu => Box::new(kernels::silu),
            UnaryKind::Sigmoid => Box::new(kernels::sigmoid),
            UnaryKind::Exp => Box::new(|x: S| x.exp()),
            UnaryKind::Tanh => Box::new(|x: S| x.tanh()),
            UnaryKind::Sqrt => Box::new(|x: S| x.sqrt()),
            UnaryKind::Square => Box::new(|x: S| x * x),
            UnaryKind::Neg => Box::new(|x: S| -x),
            UnaryKind::Log => Box::new(|x: S| x.ln()),
            UnaryKind::Scale(c) => {
                let c = S::from_f64(c);
                Box::new(move |x: S| x * c)
            }
            UnaryKind::Shift(c) => {
                let c = S::from_f64(c);
                Box::new(move |x: S| x + c)
            }
        };
        let out = self.value(a).map(f);
        self.push_owned(out, Op::Unary { a, kind }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Gelu)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Silu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Exp)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Square)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, UnaryKind::Scale(c))
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, UnaryKind::Shift(c))
    }

    // ---- normalization / attention pieces -----------------------------

    /// Softmax over the last axis. With a causal mask the input is read as `[.., q, k]`.
    pub fn softmax(&mut self, a: Var, mask: Mask) -> Var {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().expect("softmax of a scalar");
        let q_len = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        let out = kernels::softmax_rows(self.value(a).data(), cols, q_len, mask);
        self.push_owned(Tensor::new(&shape, out), Op::Softmax { a }, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        assert_eq!(self.shape(gamma), &[d], "layer_norm gain shape");
        assert_eq!(self.shape(beta), &[d], "layer_norm bias shape");
        let (y, xhat, rstd) =
            kernels::layer_norm(self.value(x).data(), self.value(gamma).data(), self.value(beta).data(), d);
        self.push_owned(Tensor::new(&shape, y), Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    // ---- shape ops -----------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape);
        self.push_owned(t, Op::Reshape { a }, &[a])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let t = self.value(a).permute(perm);
        self.push_owned(t, Op::Permute { a, perm: perm.to_vec() }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let ts: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat(&ts, axis);
        self.push_owned(t, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let t = self.value(a).narrow(axis, start, len);
        self.push_owned(t, Op::Narrow { a, axis, start }, &[a])
    }

    /// Rows of `table` (read as `[rows, last_dim]`) at `idx`, giving `[idx.len(), last_dim]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let d = *t.shape().last().unwrap();
        let rows = t.numel() / d;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < rows, "gather index {i} out of {rows} rows");
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(&[idx.len(), d], data);
        self.push_owned(out, Op::GatherRows { table, idx: idx.to_vec() }, &[table])
    }

    // ---- convolution ---------------------------------------------------

    /// NHWC convolution with weight `[kh*kw*c_in, c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "conv2d expects NHWC input, got {xs:?}");
        let ws = self.shape(w).to_vec();
        let geom = ConvGeom {
            batch: xs[0],
            h: xs[1],
            w: xs[2],
            c_in: xs[3],
            c_out: ws[1],
            kh: kernel,
            kw: kernel,
            stride,
            pad,
        };
        assert_eq!(ws[0], geom.patch_len(), "conv2d weight {ws:?} does not match input {xs:?}");
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let out = kernels::conv_forward(&cols, self.value(w).data(), &geom);
        let shape = [geom.batch, geom.out_h(), geom.out_w(), geom.c_out];
        // Patch rows are only needed for the weight gradient.
        let keep = if self.requires_grad(w) { cols } else { Vec::new() };
        self.push_owned(Tensor::new(&shape, out), Op::Conv2d { x, w, geom, cols: keep }, &[x, w])
    }

    /// Nearest-neighbour 2x upsampling of NHWC input.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4, "upsample2x expects NHWC");
        let out = kernels::upsample2x(self.value(a).data(), s[0], s[1], s[2], s[3]);
        self.push_owned(Tensor::new(&[s[0], 2 * s[1], 2 * s[2], s[3]], out), Op::Upsample2x { a }, &[a])
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push_owned(Tensor::scalar(s), Op::SumAll { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let shape = self.shape(a).to_vec();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.push_owned(Tensor::new(&out_shape, out), Op::SumAxis { a, axis }, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let len = self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / len)
    }

    /// Weighted mean token cross-entropy. `logits` is read as `[n, vocab]`.
    ///
    /// Panics when the weights sum to zero; callers check their masks first.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[S]) -> Var {
        let shape = self.shape(logits).to_vec();
        let v = *shape.last().unwrap();
        let n = numel(&shape) / v;
        assert_eq!(targets.len(), n, "cross_entropy target count");
        assert_eq!(weights.len(), n, "cross_entropy weight count");
        let denom: S = weights.iter().copied().sum();
        assert!(denom > S::zero(), "cross_entropy with zero total weight");
        let probs = kernels::softmax_rows(self.value(logits).data(), v, 1, Mask::None);
        let mut total = S::zero();
        for i in 0..n {
            if weights[i] != S::zero() {
                assert!(targets[i] < v, "target {} out of vocab {v}", targets[i]);
                let lse = log_sum_exp(self.value(logits).row(i));
                total += weights[i] * (lse - self.value(logits).row(i)[targets[i]]);
            }
        }
        let loss = total / denom;
        self.push_owned(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs, denom },
            &[logits],
        )
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<S> {
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.values.len()).map(|_| None).collect();
        if !self.requires_grad[loss.0] {
            return Grads { grads };
        }
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![S::one()]));
        for i in (0..=loss.0).rev() {
            if !self.requires_grad[i] {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.requires_grad[v.0] {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape mismatch at node {}", v.0);
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &self.ops[i] {
            Op::Leaf => {}
            &Op::MatMul { a, b, tb } => self.backward_matmul(g, a, b, tb, grads),
            &Op::Binary { a, b, kind } => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.requires_grad(a) {
                    let ga = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.clone(),
                        BinaryKind::Mul => kernels::broadcast_binary(g, vb, |x, y| x * y),
                        BinaryKind::Div => kernels::broadcast_binary(g, vb, |x, y| x / y),
                    };
                    self.accumulate(grads, a, kernels::reduce_to(ga, va.shape()));
                }
                if self.requires_grad(b) {
                    let gb = match kind {
                        BinaryKind::Add => g.clone(),
                        BinaryKind::Sub => g.map(|x| -x),
                        BinaryKind::Mul => kernels::broadcast_binary(g, va, |x, y| x * y),
                        BinaryKind::Div => kernels::ternary_broadcast(g, va, vb, |gg, x, y| -gg * x / (y * y)),
                    };
                    self.accumulate(grads, b, kernels::reduce_to(gb, vb.shape()));
                }
            }
            &Op::Unary { a, kind } => {
                let x = self.value(a).data();
                let y = self.values[i].data();
                let gd = g.data();
                let out: Vec<S> = (0..x.len())
                    .map(|j| {
                        let d = match kind {
                            UnaryKind::Gelu => kernels::gelu_grad(x[j]),
                            UnaryKind::Silu => kernels::silu_grad(x[j]),
                            UnaryKind::Sigmoid => y[j] * (S::one() - y[j]),
                            UnaryKind::Exp => y[j],
                            UnaryKind::Tanh => S::one() - y[j] * y[j],
                            UnaryKind::Sqrt => S::from_f64(0.5) / y[j],
                            UnaryKind::Square => S::from_f64(2.0) * x[j],
                            UnaryKind::Neg => -S::one(),
                            UnaryKind::Log => S::one() / x[j],
                            UnaryKind::Scale(c) => S::from_f64(c),
                            UnaryKind::Shift(_) => S::one(),
                        };
                        gd[j] * d
                    })
                    .collect();
                self.accumulate(grads, a, Tensor::new(self.shape(a), out));
            }
            &Op::Softmax { a } => {
                let y = &self.values[i];
                let cols = *y.shape().last().unwrap();
                let gx = kernels::softmax_rows_backward(y.data(), g.data(), cols);
                self.accumulate(grads, a, Tensor::new(y.shape(), gx));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *self.shape(*x).last().unwrap();
                let gd = g.data();
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut gg = vec![S::zero(); d];
                    let mut gb = vec![S::zero(); d];
                    for (r, grow) in gd.chunks(d).enumerate() {
                        for j in 0..d {
                            gg[j] += grow[j] * xhat[r * d + j];
                            gb[j] += grow[j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new(&[d], gg));
                    self.accumulate(grads, *beta, Tensor::new(&[d], gb));
                }
                if self.requires_grad(*x) {
                    let gam = self.value(*gamma).data();
                    let scaled: Vec<S> = gd.iter().enumerate().map(|(k, &v)| v * gam[k % d]).collect();
                    let gx = kernels::layer_norm_backward_input(&scaled, xhat, rstd, d);
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx));
                }
            }
            &Op::Reshape { a } => {
                self.accumulate(grads, a, g.clone().reshape(self.shape(a)));
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inv[p] = k;
                }
                self.accumulate(grads, *a, g.permute(&inv));
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, g.narrow(*axis, start, len));
                    }
                    start += len;
                }
            }
            &Op::Narrow { a, axis, start } => {
                let full = self.shape(a).to_vec();
                let outer: usize = full[..axis].iter().product();
                let inner: usize = full[axis + 1..].iter().product();
                let len = g.shape()[axis];
                let mut out = vec![S::zero(); numel(&full)];
                let gd = g.data();
                for o in 0..outer {
                    let dst = (o * full[axis] + start) * inner;
                    let src = o * len * inner;
                    out[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                self.accumulate(grads, a, Tensor::new(&full, out));
            }
            Op::GatherRows { table, idx } => {
                let shape = self.shape(*table).to_vec();
                let d = *shape.last().unwrap();
                let mut out = vec![S::zero(); numel(&shape)];
                for (r, &row) in idx.iter().enumerate() {
                    for j in 0..d {
                        out[row * d + j] += g.data()[r * d + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::new(&shape, out));
            }
            Op::Conv2d { x, w, geom, cols } => {
                let p = geom.out_positions();
                let k = geom.patch_len();
                if self.requires_grad(*w) {
                    let mut gw = vec![S::zero(); k * geom.c_out];
                    gemm(cols, MatLayout::new(p, k, true), g.data(), MatLayout::new(p, geom.c_out, false), &mut gw, S::zero());
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w), gw));
                }
                if self.requires_grad(*x) {
                    let mut gcols = vec![S::zero(); p * k];
                    gemm(
                        g.data(),
                        MatLayout::new(p, geom.c_out, false),
                        self.value(*w).data(),
                        MatLayout::new(k, geom.c_out, true),
                        &mut gcols,
                        S::zero(),
                    );
                    let gx = kernels::col2im(&gcols, geom);
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx));
                }
            }
            &Op::Upsample2x { a } => {
                let s = self.shape(a).to_vec();
                let gx = kernels::upsample2x_backward(g.data(), s[0], s[1], s[2], s[3]);
                self.accumulate(grads, a, Tensor::new(&s, gx));
            }
            &Op::SumAll { a } => {
                let s = self.shape(a).to_vec();
                self.accumulate(grads, a, Tensor::full(&s, g.item()));
            }
            &Op::SumAxis { a, axis } => {
                let shape = self.shape(a).to_vec();
                let outer: usize = shape[..axis].iter().product();
                let len = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let gd = g.data();
                let mut out = vec![S::zero(); numel(&shape)];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        out[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, a, Tensor::new(&shape, out));
            }
            Op::CrossEntropy { logits, targets, weights, probs, denom } => {
                let shape = self.shape(*logits).to_vec();
                let v = *shape.last().unwrap();
                let scale = g.item() / *denom;
                let mut out = vec![S::zero(); probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let w = weights[r];
                    if w == S::zero() {
                        continue;
                    }
                    for j in 0..v {
                        out[r * v + j] = probs[r * v + j] * w * scale;
                    }
                    out[r * v + t] -= w * scale;
                }
                self.accumulate(grads, *logits, Tensor::new(&shape, out));
            }
        }
    }

    fn backward_matmul(&self, g: &Tensor<S>, a: Var, b: Var, tb: bool, grads: &mut [Option<Tensor<S>>]) {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let k = sa[sa.len() - 1];
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let n = if tb { br } else { bc };
        let gd = g.data();
        if sb.len() == 2 {
            let m = numel(&sa) / k;
            if self.requires_grad(a) {
                // dA = dC · op(B)ᵀ
                let mut ga = vec![S::zero(); m * k];
                gemm(gd, MatLayout::new(m, n, false), self.value(b).data(), MatLayout::new(br, bc, !tb), &mut ga, S::zero());
                self.accumulate(grads, a, Tensor::new(&sa, ga));
            }
            if self.requires_grad(b) {
                let mut gb = vec![S::zero(); br * bc];
                let ad = self.value(a).data();
                if tb {
                    // B is [n, k]: dB = dCᵀ · A
                    gemm(gd, MatLayout::new(m, n, true), ad, MatLayout::new(m, k, false), &mut gb, S::zero());
                } else {
                    gemm(ad, MatLayout::new(m, k, true), gd, MatLayout::new(m, n, false), &mut gb, S::zero());
                }
                self.accumulate(grads, b, Tensor::new(&sb, gb));
            }
            return;
        }
        let m = sa[sa.len() - 2];
        let batch = numel(&sa[..sa.len() - 2]);
        let bsz = br * bc;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        if self.requires_grad(a) {
            let mut ga = vec![S::zero(); batch * m * k];
            for i in 0..batch {
                gemm(
                    &gd[i * m * n..(i + 1) * m * n],
                    MatLayout::new(m, n, false),
                    &bd[i * bsz..(i + 1) * bsz],
                    MatLayout::new(br, bc, !tb),
                    &mut ga[i * m * k..(i + 1) * m * k],
                    S::zero(),
                );
            }
            self.accumulate(grads, a, Tensor::new(&sa, ga));
        }
        if self.requires_grad(b) {
            let mut gb = vec![S::zero(); batch * bsz];
            for i in 0..batch {
                let gi = &gd[i * m * n..(i + 1) * m * n];
                let ai = &ad[i * m * k..(i + 1) * m * k];
                let out = &mut gb[i * bsz..(i + 1) * bsz];
                if tb {
                    gemm(gi, MatLayout::new(m, n, true), ai, MatLayout::new(m, k, false), out, S::zero());
                } else {
                    gemm(ai, MatLayout::new(m, k, true), gi, MatLayout::new(m, n, false), out, S::zero());
                }
            }
            self.accumulate(grads, b, Tensor::new(&sb, gb));
        }
    }

    /// Gradients of every differentiable bound parameter, by name.
    pub fn param_grads(&self, grads: &Grads<S>) -> BTreeMap<String, Tensor<S>> {
        self.bound
            .iter()
            .filter(|(_, &v)| self.requires_grad(v))
            .map(|(name, &v)| {
                let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln()
}
