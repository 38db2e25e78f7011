//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates vector-Jacobian products.
//! Parameters enter the tape borrowed from a [`ParamStore`], so building a
//! tape per sequence does not copy weights.

use std::borrow::Cow;

use crate::error::{Error, Result};

use super::real::{gemm, MatMut, MatRef};
use super::{GradVector, ParamStore, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    Attention { qkv: Var, heads: usize, probs: Vec<T> },
    LogSoftmax(Var),
    Pick { x: Var, idx: Vec<usize> },
    DotConst { x: Var, c: Vec<T> },
    WeightedRowSum { x: Var, w: Vec<T> },
    SqDistConst { x: Var, target: Vec<T> },
    Sum(Var),
    LogSigmoid(Var),
}

struct Node<'p, T: Real> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation graph.
pub struct Tape<'p, T: Real> {
    nodes: Vec<Node<'p, T>>,
    params: Vec<Var>,
    store: Option<&'p ParamStore<T>>,
}

const LN_EPS: f64 = 1e-5;

impl<'p, T: Real> Default for Tape<'p, T> {
    fn default() -> Self {
        Tape { nodes: Vec::new(), params: Vec::new(), store: None }
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape with every tensor of `store` registered as a parameter leaf.
    ///
    /// With `track = false` the parameters are constants and no backward
    /// pass is possible through them (inference mode).
    pub fn with_params(store: &'p ParamStore<T>, track: bool) -> Self {
        let mut tape = Tape { nodes: Vec::with_capacity(256), params: Vec::new(), store: Some(store) };
        for t in store.tensors() {
            let v = tape.push(Cow::Borrowed(t), if track { Op::Param } else { Op::Leaf }, track);
            tape.params.push(v);
        }
        tape
    }

    /// Parameter leaf for tensor `idx` of the registered store.
    pub fn param(&self, idx: usize) -> Var {
        self.params[idx]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Differentiable free leaf, used by op-level gradient checks.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Param, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).item()
    }

    fn vals(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.values()
    }

    // ---- ops -------------------------------------------------------------

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatRef::new(self.vals(a), m, k),
            MatRef::new(self.vals(b), k, n),
            T::zero(),
            MatMut::new(&mut out, m, n),
        );
        self.owned(Tensor::new(vec![m, n], out).unwrap(), Op::MatMul(a, b), &[a, b])
    }

    fn zip_same(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shapes");
        let vals = ta.values().iter().zip(tb.values()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), vals).unwrap()
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let ta = self.value(a);
        Tensor::new(ta.shape().to_vec(), ta.values().iter().map(|x| f(*x)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x + y);
        self.owned(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x - y);
        self.owned(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x * y);
        self.owned(t, Op::Mul(a, b), &[a, b])
    }

    /// Adds row vector `bias` `[n]` to every row of `x` `[m,n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (m, n) = self.value(x).dims2();
        assert_eq!(self.value(bias).len(), n, "bias width");
        let mut out = self.vals(x).to_vec();
        let b = self.vals(bias);
        for r in 0..m {
            for (o, bv) in out[r * n..(r + 1) * n].iter_mut().zip(b) {
                *o += *bv;
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.owned(Tensor::new(shape, out).unwrap(), Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let t = self.map(a, |x| x * s);
        self.owned(t, Op::Scale(a, s), &[a])
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let t = self.map(a, |x| x + c);
        self.owned(t, Op::Shift(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map(a, gelu_fwd);
        self.owned(t, Op::Gelu(a), &[a])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of width `n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (m, n) = self.value(x).dims2();
        let eps = T::of(LN_EPS);
        let nf = T::of(n as f64);
        let xs = self.vals(x);
        let g = self.vals(gamma);
        let b = self.vals(beta);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.owned(
            Tensor::new(shape, out).unwrap(),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        )
    }

    /// Rows `ids` of `table` `[V,d]` stacked into `[len(ids), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let (rows, d) = self.value(table).dims2();
        let src = self.vals(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < rows, "gather index {i} out of {rows}");
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.owned(
            Tensor::new(vec![ids.len(), d], out).unwrap(),
            Op::Gather { table, ids: ids.to_vec() },
            &[table],
        )
    }

    /// Causal multi-head self-attention over a fused `[T, 3d]` projection
    /// laid out as `[q | k | v]`; returns the concatenated heads `[T, d]`.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize) -> Var {
        let (t, w) = self.value(qkv).dims2();
        assert_eq!(w % 3, 0, "qkv width");
        let d = w / 3;
        assert_eq!(d % heads, 0, "heads must divide width");
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let src = self.vals(qkv);
        let all = MatRef::new(src, t, w);
        let mut probs = vec![T::zero(); heads * t * t];
        let mut out = vec![T::zero(); t * d];
        for h in 0..heads {
            let q = all.cols(h * dh, dh);
            let k = all.cols(d + h * dh, dh);
            let v = all.cols(2 * d + h * dh, dh);
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            gemm(scale, q, k.t(), T::zero(), MatMut::new(p, t, t));
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                let mx = row[..=i].iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for x in row[..=i].iter_mut() {
                    *x = (*x - mx).exp();
                    z += *x;
                }
                for x in row[..=i].iter_mut() {
                    *x = *x / z;
                }
                for x in row[i + 1..].iter_mut() {
                    *x = T::zero();
                }
            }
            gemm(
                T::one(),
                MatRef::new(p, t, t),
                v,
                T::zero(),
                MatMut::new(&mut out, t, d).cols(h * dh, dh),
            );
        }
        self.owned(Tensor::new(vec![t, d], out).unwrap(), Op::Attention { qkv, heads, probs }, &[qkv])
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (m, n) = self.value(x).dims2();
        let xs = self.vals(x);
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let lse = log_sum_exp(row);
            for c in 0..n {
                out[r * n + c] = row[c] - lse;
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.owned(Tensor::new(shape, out).unwrap(), Op::LogSoftmax(x), &[x])
    }

    /// `out[r] = x[r, idx[r]]` for the first `idx.len()` rows.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Var {
        let (m, n) = self.value(x).dims2();
        assert!(idx.len() <= m, "more indices than rows");
        let xs = self.vals(x);
        let out = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < n, "pick column out of range");
                xs[r * n + c]
            })
            .collect();
        self.owned(Tensor::new(vec![idx.len()], out).unwrap(), Op::Pick { x, idx: idx.to_vec() }, &[x])
    }

    /// Scalar `Σ x ⊙ c` for a constant `c`.
    pub fn dot_const(&mut self, x: Var, c: Vec<T>) -> Var {
        assert_eq!(self.value(x).len(), c.len(), "dot_const length");
        let s = self.vals(x).iter().zip(&c).map(|(a, b)| *a * *b).sum();
        self.owned(Tensor::scalar(s), Op::DotConst { x, c }, &[x])
    }

    /// `Σ_r w[r]·x[r,:]` → `[n]`.
    pub fn weighted_row_sum(&mut self, x: Var, w: Vec<T>) -> Var {
        let (m, n) = self.value(x).dims2();
        assert_eq!(m, w.len(), "one weight per row");
        let xs = self.vals(x);
        let mut out = vec![T::zero(); n];
        for r in 0..m {
            if w[r] == T::zero() {
                continue;
            }
            for c in 0..n {
                out[c] += w[r] * xs[r * n + c];
            }
        }
        self.owned(Tensor::new(vec![n], out).unwrap(), Op::WeightedRowSum { x, w }, &[x])
    }

    /// Scalar `‖x − target‖²` for a constant target.
    pub fn sq_dist_const(&mut self, x: Var, target: Vec<T>) -> Var {
        assert_eq!(self.value(x).len(), target.len(), "sq_dist length");
        let s = self.vals(x).iter().zip(&target).map(|(a, b)| (*a - *b) * (*a - *b)).sum();
        self.owned(Tensor::scalar(s), Op::SqDistConst { x, target }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.vals(x).iter().copied().sum();
        self.owned(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Elementwise `log σ(x)`, computed stably.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, log_sigmoid);
        self.owned(t, Op::LogSigmoid(x), &[x])
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar `loss`.
    ///
    /// Nodes the loss does not reach get no gradient entry; parameters among
    /// them read as zero from [`Gradients::params`].
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                if self.needs(*a) {
                    let ga = slot(grads, *a, m * k);
                    gemm(
                        T::one(),
                        MatRef::new(g, m, n),
                        MatRef::new(self.vals(*b), k, n).t(),
                        T::one(),
                        MatMut::new(ga, m, k),
                    );
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, k * n);
                    gemm(
                        T::one(),
                        MatRef::new(self.vals(*a), m, k).t(),
                        MatRef::new(g, m, n),
                        T::one(),
                        MatMut::new(gb, k, n),
                    );
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g, |_, gv| gv);
                self.acc(grads, *b, g, |_, gv| gv);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g, |_, gv| gv);
                self.acc(grads, *b, g, |_, gv| -gv);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.vals(*a), self.vals(*b));
                self.acc(grads, *a, g, |j, gv| gv * vb[j]);
                self.acc(grads, *b, g, |j, gv| gv * va[j]);
            }
            Op::AddBias(x, bias) => {
                self.acc(grads, *x, g, |_, gv| gv);
                if self.needs(*bias) {
                    let n = self.value(*bias).len();
                    let gb = slot(grads, *bias, n);
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % n] += *gv;
                    }
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g, |_, gv| gv * *s),
            Op::Shift(a) => self.acc(grads, *a, g, |_, gv| gv),
            Op::Gelu(a) => {
                let va = self.vals(*a);
                self.acc(grads, *a, g, |j, gv| gv * gelu_grad(va[j]));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (m, n) = self.value(*x).dims2();
                let gam = self.vals(*gamma);
                if self.needs(*gamma) {
                    let gg = slot(grads, *gamma, n);
                    for j in 0..m * n {
                        gg[j % n] += g[j] * xhat[j];
                    }
                }
                if self.needs(*beta) {
                    let gb = slot(grads, *beta, n);
                    for j in 0..m * n {
                        gb[j % n] += g[j];
                    }
                }
                if self.needs(*x) {
                    let nf = T::of(n as f64);
                    let gx = slot(grads, *x, m * n);
                    let mut dxhat = vec![T::zero(); n];
                    for r in 0..m {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..n {
                            let dh = g[r * n + c] * gam[c];
                            dxhat[c] = dh;
                            s1 += dh;
                            s2 += dh * xhat[r * n + c];
                        }
                        let (m1, m2) = (s1 / nf, s2 / nf);
                        for c in 0..n {
                            gx[r * n + c] += rstd[r] * (dxhat[c] - m1 - xhat[r * n + c] * m2);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let (rows, d) = self.value(*table).dims2();
                    let gt = slot(grads, *table, rows * d);
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::Attention { qkv, heads, probs } => {
                if self.needs(*qkv) {
                    self.attention_backward(*qkv, *heads, probs, g, grads);
                }
            }
            Op::LogSoftmax(x) => {
                if self.needs(*x) {
                    let (m, n) = self.value(*x).dims2();
                    let y = node.value.values();
                    let gx = slot(grads, *x, m * n);
                    for r in 0..m {
                        let gs: T = g[r * n..(r + 1) * n].iter().copied().sum();
                        for c in 0..n {
                            gx[r * n + c] += g[r * n + c] - y[r * n + c].exp() * gs;
                        }
                    }
                }
            }
            Op::Pick { x, idx } => {
                if self.needs(*x) {
                    let (m, n) = self.value(*x).dims2();
                    let gx = slot(grads, *x, m * n);
                    for (r, &c) in idx.iter().enumerate() {
                        gx[r * n + c] += g[r];
                    }
                }
            }
            Op::DotConst { x, c } => {
                let g0 = g[0];
                self.acc(grads, *x, &c[..], |_, cv| cv * g0);
            }
            Op::WeightedRowSum { x, w } => {
                if self.needs(*x) {
                    let (m, n) = self.value(*x).dims2();
                    let gx = slot(grads, *x, m * n);
                    for r in 0..m {
                        if w[r] == T::zero() {
                            continue;
                        }
                        for c in 0..n {
                            gx[r * n + c] += w[r] * g[c];
                        }
                    }
                }
            }
            Op::SqDistConst { x, target } => {
                let g0 = g[0];
                let vx = self.vals(*x);
                let two = T::of(2.0);
                self.acc(grads, *x, &target[..], |j, tv| g0 * two * (vx[j] - tv));
            }
            Op::Sum(x) => {
                let g0 = g[0];
                let n = self.value(*x).len();
                if self.needs(*x) {
                    for v in slot(grads, *x, n).iter_mut() {
                        *v += g0;
                    }
                }
            }
            Op::LogSigmoid(x) => {
                let vx = self.vals(*x);
                // d/dx log σ(x) = σ(−x)
                self.acc(grads, *x, g, |j, gv| gv * sigmoid(-vx[j]));
            }
        }
    }

    fn attention_backward(&self, qkv: Var, heads: usize, probs: &[T], g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (t, w) = self.value(qkv).dims2();
        let d = w / 3;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let src = self.vals(qkv);
        let all = MatRef::new(src, t, w);
        let gout = MatRef::new(g, t, d);
        let gq = slot(grads, qkv, t * w);
        let mut dp = vec![T::zero(); t * t];
        for h in 0..heads {
            let p = &probs[h * t * t..(h + 1) * t * t];
            let q = all.cols(h * dh, dh);
            let k = all.cols(d + h * dh, dh);
            let v = all.cols(2 * d + h * dh, dh);
            let go = gout.cols(h * dh, dh);
            // dV += Pᵀ·dO
            gemm(
                T::one(),
                MatRef::new(p, t, t).t(),
                go,
                T::one(),
                MatMut::new(gq, t, w).cols(2 * d + h * dh, dh),
            );
            // dP = dO·Vᵀ, then softmax backward in place → dS
            gemm(T::one(), go, v.t(), T::zero(), MatMut::new(&mut dp, t, t));
            for i in 0..t {
                let prow = &p[i * t..(i + 1) * t];
                let drow = &mut dp[i * t..(i + 1) * t];
                let dot: T = prow[..=i].iter().zip(drow[..=i].iter()).map(|(a, b)| *a * *b).sum();
                for j in 0..=i {
                    drow[j] = prow[j] * (drow[j] - dot);
                }
                for x in drow[i + 1..].iter_mut() {
                    *x = T::zero();
                }
            }
            // dQ += scale·dS·K ; dK += scale·dSᵀ·Q
            gemm(scale, MatRef::new(&dp, t, t), k, T::one(), MatMut::new(gq, t, w).cols(h * dh, dh));
            gemm(
                scale,
                MatRef::new(&dp, t, t).t(),
                q,
                T::one(),
                MatMut::new(gq, t, w).cols(d + h * dh, dh),
            );
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], target: Var, src: &[T], f: impl Fn(usize, T) -> T) {
        if !self.needs(target) {
            return;
        }
        let n = self.value(target).len();
        let gt = slot(grads, target, n);
        if src.len() == n {
            for (j, (o, s)) in gt.iter_mut().zip(src).enumerate() {
                *o += f(j, *s);
            }
        } else {
            panic!("gradient length {} does not match node length {n}", src.len());
        }
    }

    /// Flat gradient over the registered parameter store.
    pub fn param_grads(&self, grads: &Gradients<T>) -> GradVector<T> {
        let store = self.store.expect("tape has no parameter store");
        let mut flat = vec![T::zero(); store.numel()];
        for (i, v) in self.params.iter().enumerate() {
            if let Some(g) = grads.get(*v) {
                let off = store.offset(i);
                flat[off..off + g.len()].copy_from_slice(g);
            }
        }
        GradVector::new(flat)
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

/// Per-node gradients from [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when the loss does not reach it.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); len])
    }
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    if mx == T::neg_infinity() {
        return mx;
    }
    let s: T = row.iter().map(|v| (*v - mx).exp()).sum();
    mx + s.ln()
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sigmoid<T: Real>(x: T) -> T {
    // log σ(x) = −softplus(−x)
    if x >= T::zero() {
        -((-x).exp().ln_1p())
    } else {
        x - x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

fn gelu_fwd<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}
