//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass. Nodes
//! are appended in evaluation order, so walking the tape backwards is a valid
//! reverse topological order. A graph is meant to be built, differentiated
//! once (or a few times), and dropped.

use super::params::{ParamId, ParamStore};
use super::tensor::{axis_split, gemm_acc, gemm_at_acc, gemm_bt_acc, sorted_sum, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, axis: usize, rstd: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    PairOrigin(Var),
    PairDest(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
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

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf whose gradient is reported by [`Gradients::get`].
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// `a[..., K] · b[K, N] -> [..., N]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).len() / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Like [`Graph::matmul`], but every output sums its `K` products in
    /// sorted order, so permuting the `K` axis of both inputs leaves the
    /// result bit-identical. Used where `K` indexes regions.
    pub fn matmul_sorted(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).len() / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        let mut terms = vec![0.0; k];
        for i in 0..m {
            for c in 0..n {
                for p in 0..k {
                    terms[p] = av[i * k + p] * bv[p * n + c];
                }
                out[i * n + c] = sorted_sum(&mut terms);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose needs rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcast_ok(sa, sb) {
            return Err(Error::Shape(format!("{name} {sa:?} with {sb:?}")));
        }
        let bl = self.value(b).len();
        let bd = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bl]))
            .collect();
        Tensor::new(sa.to_vec(), data)
    }

    /// Elementwise sum; `b` may be broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.shape(a), axis)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        let mut terms = Vec::with_capacity(len);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len)
                    .map(|k| x[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                terms.clear();
                for k in 0..len {
                    let e = (x[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    terms.push(e);
                }
                let total = sorted_sum(&mut terms);
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax { x: a, axis }, rg))
    }

    /// Normalizes to zero mean and unit variance along `axis` (no affine).
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.shape(a), axis)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        let mut rstd = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mean = (0..len).map(|k| x[idx(k)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|k| (x[idx(k)] - mean).powi(2)).sum::<f64>() / len as f64;
                let r = 1.0 / (var + eps).sqrt();
                for k in 0..len {
                    out[idx(k)] = (x[idx(k)] - mean) * r;
                }
                rstd.push(r);
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::LayerNorm { x: a, axis, rstd }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = axis_split(&base, axis)?;
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s.iter()
                    .enumerate()
                    .any(|(d, &v)| d != axis && v != base[d])
            {
                return Err(Error::Shape(format!(
                    "concat {base:?} with {s:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis];
                let d = self.value(*p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&s, axis)?;
        if start >= end || end > len {
            return Err(Error::Shape(format!(
                "slice {start}..{end} of axis {axis} in {s:?}"
            )));
        }
        let w = end - start;
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = s;
        shape[axis] = w;
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Slice { x: a, axis, start },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean squared difference, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mse {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let s = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg))
    }

    /// `[N, d] -> [N·N, d]` where row `i·N + j` holds row `i`.
    pub fn pair_origin(&mut self, h: Var) -> Result<Var> {
        let s = self.shape(h);
        if s.len() != 2 {
            return Err(Error::Shape(format!("pair_origin needs rank 2, got {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        let x = self.value(h).data();
        let mut out = Vec::with_capacity(n * n * d);
        for i in 0..n {
            for _ in 0..n {
                out.extend_from_slice(&x[i * d..(i + 1) * d]);
            }
        }
        let rg = self.rg(h);
        Ok(self.push(Tensor::new(vec![n * n, d], out)?, Op::PairOrigin(h), rg))
    }

    /// `[N, d] -> [N·N, d]` where row `i·N + j` holds row `j`.
    pub fn pair_dest(&mut self, h: Var) -> Result<Var> {
        let s = self.shape(h);
        if s.len() != 2 {
            return Err(Error::Shape(format!("pair_dest needs rank 2, got {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        let x = self.value(h).data();
        let mut out = Vec::with_capacity(n * n * d);
        for _ in 0..n {
            out.extend_from_slice(x);
        }
        let rg = self.rg(h);
        Ok(self.push(Tensor::new(vec![n * n, d], out)?, Op::PairDest(h), rg))
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients are added into
    /// `store`, so repeated calls accumulate until [`ParamStore::zero_grad`].
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            if let Op::Param(id) = node.op {
                for (acc, v) in store.grad_mut(id).data_mut().iter_mut().zip(&g) {
                    *acc += v;
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (k, n) = (self.shape(*b)[0], self.shape(*b)[1]);
                let m = self.value(*a).len() / k;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_bt_acc(g, bv, ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_at_acc(av, g, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, v) in ga.iter_mut().zip(g) {
                        *x += v;
                    }
                }
                let bl = self.value(*b).len();
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % bl] += sign * v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let bl = bv.len();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, v) in g.iter().enumerate() {
                        ga[i] += v * bv[i % bl];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % bl] += v * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, v) in ga.iter_mut().zip(g) {
                        *x += c * v;
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, v) in ga.iter_mut().zip(g) {
                        *x += v;
                    }
                }
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        let x = xv[i];
                        let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + th)
                            + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        ga[i] += g[i] * d;
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis).expect("checked");
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let s: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..len {
                                gx[idx(k)] += y[idx(k)] * (g[idx(k)] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, axis, rstd } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis).expect("checked");
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let r = rstd[o * inner + i];
                            let mg = (0..len).map(|k| g[idx(k)]).sum::<f64>() / len as f64;
                            let mgy =
                                (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum::<f64>() / len as f64;
                            for k in 0..len {
                                gx[idx(k)] += r * (g[idx(k)] - mg - y[idx(k)] * mgy);
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis).expect("checked");
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if let Some(gp) = self.acc(grads, *p) {
                        for o in 0..outer {
                            let src = &g
                                [(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis).expect("checked");
                let w = node.value.shape()[*axis];
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        let dst = &mut gx[(o * len + start) * inner..(o * len + start + w) * inner];
                        for (d, s) in dst.iter_mut().zip(&g[o * w * inner..(o + 1) * w * inner]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                if let Some(ga) = self.acc(grads, *a) {
                    for x in ga.iter_mut() {
                        *x += g[0] / n;
                    }
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let c = 2.0 * g[0] / av.len() as f64;
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..av.len() {
                        ga[i] += c * (av[i] - bv[i]);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..av.len() {
                        gb[i] -= c * (av[i] - bv[i]);
                    }
                }
            }
            Op::PairOrigin(h) => {
                let (n, d) = (self.shape(*h)[0], self.shape(*h)[1]);
                if let Some(gh) = self.acc(grads, *h) {
                    for i in 0..n {
                        let dst = &mut gh[i * d..(i + 1) * d];
                        for j in 0..n {
                            let row = &g[(i * n + j) * d..(i * n + j + 1) * d];
                            for (x, v) in dst.iter_mut().zip(row) {
                                *x += v;
                            }
                        }
                    }
                }
            }
            Op::PairDest(h) => {
                let (n, d) = (self.shape(*h)[0], self.shape(*h)[1]);
                if let Some(gh) = self.acc(grads, *h) {
                    for i in 0..n {
                        for j in 0..n {
                            let row = &g[(i * n + j) * d..(i * n + j + 1) * d];
                            for (x, v) in gh[j * d..(j + 1) * d].iter_mut().zip(row) {
                                *x += v;
                            }
                        }
                    }
                }
            }
        }
    }
}
