//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive evaluates eagerly and appends a node holding its output,
//! its inputs and whatever it needs for the local gradient rule. Nodes are
//! appended in evaluation order, so the tape is always topologically sorted
//! and a backward pass is a single reverse sweep.

use std::collections::BTreeMap;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{axis_split, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Variance stabilizer used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Reduce { x: Var, axis: usize, mean: bool },
    SumAll(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Dropout { x: Var, mask: Vec<f64> },
    RankingLoss { scores: Var, coeffs: Vec<(usize, usize, f64)> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation tape. Build one per forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    track_params: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    by_var: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of a recorded value; `None` when the loss does not depend on it.
    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every parameter in `store`, zero-filled where unreachable.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, p)| {
                self.params
                    .get(&id)
                    .and_then(|v| self.var(*v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Tape that differentiates with respect to parameters.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            track_params: true,
        }
    }

    /// Tape for evaluation only: parameters enter as constants.
    pub fn inference() -> Self {
        Graph {
            track_params: false,
            ..Self::new()
        }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that always receives a gradient (used by tests and probes).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf. Repeated calls with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let track = self.track_params;
        let v = self.push(store.get(id).value.clone(), Op::Leaf, track);
        self.params.insert(id, v);
        v
    }

    /// `a[..., K] · b[K, M] → [..., M]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let k = *sa.last().unwrap();
        if sb.len() != 2 || sb[0] != k {
            return Err(Error::shape("matmul", &[sa, sb]));
        }
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, &[sa, sb]));
        }
        Ok(())
    }

    /// Elementwise sum; `b` may match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        let n = bv.len();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv[i % n];
        }
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Elementwise product; `b` may match a trailing suffix of `a`'s shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        let n = bv.len();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o *= bv[i % n];
        }
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let ng = self.needs(&[a]);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let ng = self.needs(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &[&shape]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let m = (0..len).map(|i| d[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for i in 0..len {
                    let e = (d[idx(i)] - m).exp();
                    d[idx(i)] = e;
                    s += e;
                }
                for i in 0..len {
                    d[idx(i)] /= s;
                }
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, ng))
    }

    /// Normalizes over the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().unwrap();
        let rows = t.len() / n;
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &t.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), xhat.clone()).expect("same shape");
        let ng = self.needs(&[x]);
        self.push(out, Op::LayerNorm { x, xhat, inv_std }, ng)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[B, Nq, D]`, `k` and `v` are `[B, Nk, D]`; heads split `D`
    /// into contiguous slices and logits are divided by `sqrt(D / heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        let ok = sq.len() == 3
            && sk.len() == 3
            && sk == sv
            && sq[0] == sk[0]
            && sq[2] == sk[2]
            && heads > 0
            && sq[2] % heads == 0;
        if !ok {
            return Err(Error::shape("attention", &[sq, sk, sv]));
        }
        let (b, nq, d) = (sq[0], sq[1], sq[2]);
        let nk = sk[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; b * heads * nq * nk];
        let mut out = vec![0.0; b * nq * d];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                let pbase = (bi * heads + h) * nq * nk;
                for i in 0..nq {
                    let qrow = &qd[(bi * nq + i) * d + off..][..dh];
                    let prow = &mut probs[pbase + i * nk..pbase + (i + 1) * nk];
                    let mut m = f64::NEG_INFINITY;
                    for (j, p) in prow.iter_mut().enumerate() {
                        let krow = &kd[(bi * nk + j) * d + off..][..dh];
                        *p = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                        m = m.max(*p);
                    }
                    let mut s = 0.0;
                    for p in prow.iter_mut() {
                        *p = (*p - m).exp();
                        s += *p;
                    }
                    let orow = &mut out[(bi * nq + i) * d + off..][..dh];
                    for (j, p) in prow.iter_mut().enumerate() {
                        *p /= s;
                        let vrow = &vd[(bi * nk + j) * d + off..][..dh];
                        for (o, vv) in orow.iter_mut().zip(vrow) {
                            *o += *p * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, nq, d], out)?;
        let ng = self.needs(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(if mean { "mean" } else { "sum" }, &[&shape]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                for j in 0..inner {
                    out[o * inner + j] += d[(o * len + i) * inner + j];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut oshape: Vec<usize> = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let out = Tensor::new(oshape, out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Reduce { x, axis, mean }, ng))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &[&first]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &[&first, s]));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        let ng = self.needs(parts);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Inverted dropout with a mask drawn from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let ng = self.needs(&[x]);
        self.push(out, Op::Dropout { x, mask }, ng)
    }

    /// Pairwise logistic ranking loss `Σ_{m<n} ψ((s_m − s_n)·sign(y_m − y_n))`
    /// with `ψ(e) = ln(1 + exp(−e))`. Pairs with equal truth are skipped.
    pub fn ranking_loss(&mut self, scores: Var, truth: &[f64]) -> Result<Var> {
        let s = self.value(scores).data();
        if s.len() != truth.len() {
            return Err(Error::shape(
                "ranking_loss",
                &[self.shape(scores), &[truth.len()]],
            ));
        }
        if s.len() < 2 {
            return Err(Error::invalid("ranking loss needs at least two samples"));
        }
        let mut coeffs = Vec::new();
        let mut total = 0.0;
        for m in 0..s.len() {
            for n in m + 1..s.len() {
                let sign = match truth[m].partial_cmp(&truth[n]) {
                    Some(std::cmp::Ordering::Greater) => 1.0,
                    Some(std::cmp::Ordering::Less) => -1.0,
                    _ => continue,
                };
                total += logistic_loss((s[m] - s[n]) * sign);
                coeffs.push((m, n, sign));
            }
        }
        let ng = self.needs(&[scores]);
        Ok(self.push(Tensor::scalar(total), Op::RankingLoss { scores, coeffs }, ng))
    }

    /// Mean softmax cross-entropy of `[B, T]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &[s, &[labels.len()]]));
        }
        let (b, t) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= t) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {t} classes"
            )));
        }
        let d = self.value(logits).data();
        let mut probs = vec![0.0; b * t];
        let mut total = 0.0;
        for r in 0..b {
            let row = &d[r * t..(r + 1) * t];
            let lse = log_sum_exp(row);
            for c in 0..t {
                probs[r * t + c] = (row[c] - lse).exp();
            }
            total += lse - row[labels[r]];
        }
        let ng = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Backpropagates from a scalar `loss` through every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients {
            by_var: grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor {
        Tensor::zeros(self.shape(v))
    }

    fn propagate(&self, op: &Op, y: &Tensor, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = bv.shape()[0];
                let n = bv.shape()[1];
                let m = av.len() / k;
                if self.nodes[a.0].needs_grad {
                    let mut ga = self.zeros_like(*a);
                    gemm_nt(gy.data(), bv.data(), ga.data_mut(), m, n, k);
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = self.zeros_like(*b);
                    gemm_tn(av.data(), gy.data(), gb.data_mut(), m, k, n);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                if self.nodes[b.0].needs_grad {
                    let mut gb = self.zeros_like(*b);
                    let n = gb.len();
                    for (i, g) in gy.data().iter().enumerate() {
                        gb.data_mut()[i % n] += g;
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let n = bv.len();
                if self.nodes[a.0].needs_grad {
                    let mut ga = gy.clone();
                    for (i, g) in ga.data_mut().iter_mut().enumerate() {
                        *g *= bv[i % n];
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = self.zeros_like(*b);
                    for (i, g) in gy.data().iter().enumerate() {
                        gb.data_mut()[i % n] += g * av[i];
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                let mut ga = gy.clone();
                ga.data_mut().iter_mut().for_each(|g| *g *= c);
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let mut ga = gy.clone();
                for (g, o) in ga.data_mut().iter_mut().zip(y.data()) {
                    if *o <= 0.0 {
                        *g = 0.0;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let (yd, gd) = (y.data(), gy.data());
                let mut gx = self.zeros_like(*x);
                let gxd = gx.data_mut();
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let dot: f64 = (0..len).map(|i| yd[idx(i)] * gd[idx(i)]).sum();
                        for i in 0..len {
                            gxd[idx(i)] = yd[idx(i)] * (gd[idx(i)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let n = *y.shape().last().unwrap();
                let nf = n as f64;
                let mut gx = self.zeros_like(*x);
                let gxd = gx.data_mut();
                for (r, is) in inv_std.iter().enumerate() {
                    let g = &gy.data()[r * n..(r + 1) * n];
                    let xh = &xhat[r * n..(r + 1) * n];
                    let sg: f64 = g.iter().sum();
                    let sgx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
                    for i in 0..n {
                        gxd[r * n + i] = is / nf * (nf * g[i] - sg - xh[i] * sgx);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, gy, grads),
            Op::Reduce { x, axis, mean } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = axis_split(shape, *axis);
                let f = if *mean { 1.0 / len as f64 } else { 1.0 };
                let mut gx = self.zeros_like(*x);
                let gxd = gx.data_mut();
                for o in 0..outer {
                    for i in 0..len {
                        for j in 0..inner {
                            gxd[(o * len + i) * inner + j] = gy.data()[o * inner + j] * f;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let g = gy.data()[0];
                let gx = Tensor::full(self.shape(*x), g);
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let shape = y.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.shape(*p)[*axis] * inner;
                    if self.nodes[p.0].needs_grad {
                        let mut gp = self.zeros_like(*p);
                        for o in 0..outer {
                            gp.data_mut()[o * chunk..(o + 1) * chunk]
                                .copy_from_slice(&gy.data()[o * row + offset..][..chunk]);
                        }
                        self.accumulate(grads, *p, gp);
                    }
                    offset += chunk;
                }
            }
            Op::Reshape(x) => {
                let gx = gy.clone().reshape(self.shape(*x)).expect("same size");
                self.accumulate(grads, *x, gx);
            }
            Op::Dropout { x, mask } => {
                let mut gx = gy.clone();
                for (g, m) in gx.data_mut().iter_mut().zip(mask) {
                    *g *= m;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::RankingLoss { scores, coeffs } => {
                let g0 = gy.data()[0];
                let s = self.value(*scores).data();
                let mut gs = self.zeros_like(*scores);
                let gsd = gs.data_mut();
                for &(m, n, sign) in coeffs {
                    // dψ/de = −σ(−e)
                    let e = (s[m] - s[n]) * sign;
                    let d = -sigmoid(-e) * sign * g0;
                    gsd[m] += d;
                    gsd[n] -= d;
                }
                self.accumulate(grads, *scores, gs);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let g0 = gy.data()[0];
                let t = self.shape(*logits)[1];
                let b = labels.len() as f64;
                let mut gl = Tensor::new(self.shape(*logits).to_vec(), probs.clone())
                    .expect("same shape");
                let gd = gl.data_mut();
                for (r, &l) in labels.iter().enumerate() {
                    gd[r * t + l] -= 1.0;
                }
                gd.iter_mut().for_each(|g| *g *= g0 / b);
                self.accumulate(grads, *logits, gl);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let sq = self.shape(q);
        let (b, nq, d) = (sq[0], sq[1], sq[2]);
        let nk = self.shape(k)[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let gyd = gy.data();
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut ds = vec![0.0; nk];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                let pbase = (bi * heads + h) * nq * nk;
                for i in 0..nq {
                    let prow = &probs[pbase + i * nk..pbase + (i + 1) * nk];
                    let gorow = &gyd[(bi * nq + i) * d + off..][..dh];
                    // dP_ij = gO_i · V_j ; dV_j += P_ij gO_i
                    let mut dot = 0.0;
                    for j in 0..nk {
                        let vbase = (bi * nk + j) * d + off;
                        let vrow = &vd[vbase..][..dh];
                        let dp: f64 = gorow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                        ds[j] = dp;
                        dot += dp * prow[j];
                        let p = prow[j];
                        for (gvv, g) in gv[vbase..][..dh].iter_mut().zip(gorow) {
                            *gvv += p * g;
                        }
                    }
                    let qbase = (bi * nq + i) * d + off;
                    for j in 0..nk {
                        let dsj = prow[j] * (ds[j] - dot) * scale;
                        if dsj == 0.0 {
                            continue;
                        }
                        let kbase = (bi * nk + j) * d + off;
                        for t in 0..dh {
                            gq[qbase + t] += dsj * kd[kbase + t];
                            gk[kbase + t] += dsj * qd[qbase + t];
                        }
                    }
                }
            }
        }
        let mk = |v: Var, data: Vec<f64>| Tensor::new(self.shape(v).to_vec(), data).expect("shape");
        self.accumulate(grads, q, mk(q, gq));
        self.accumulate(grads, k, mk(k, gk));
        self.accumulate(grads, v, mk(v, gv));
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

/// `ψ(e) = ln(1 + exp(−e))`, stable for large `|e|`.
pub fn logistic_loss(e: f64) -> f64 {
    let x = -e;
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn check(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out).unwrap();
        for (idx, input) in inputs.iter().enumerate() {
            let f = |t: &Tensor| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| g.constant(if j == idx { t.clone() } else { x.clone() }))
                    .collect();
                let out = build(&mut g, &vars);
                g.value(out).data()[0]
            };
            let num = numeric_grad(input, &f);
            let ana = grads.var(vars[idx]).unwrap();
            for (a, n) in ana.data().iter().zip(&num) {
                assert!(
                    (a - n).abs() / n.abs().max(1.0) < 1e-6,
                    "input {idx}: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[5]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&[4, 9], &mut rng));
        let y = g.layer_norm(x);
        for row in g.value(y).data().chunks(9) {
            let mean = row.iter().sum::<f64>() / 9.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn layer_norm_constant_row_stays_finite() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::full(&[2, 4], 3.0));
        let y = g.layer_norm(x);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(g.value(y).all_finite());
        assert!(grads.var(x).unwrap().all_finite());
    }

    #[test]
    fn sum_gives_all_ones() {
        let mut g = Graph::new();
        let p = g.variable(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.var(p).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unreachable_parameter_gets_zero() {
        let mut store = ParamStore::default();
        let used = store.add("used", Tensor::full(&[2], 1.0));
        let unused = store.add("unused", Tensor::full(&[3], 1.0));
        let mut g = Graph::new();
        let u = g.param(&store, used);
        let _ = g.param(&store, unused);
        let s = g.sum(u);
        let grads = g.backward(s).unwrap().for_store(&store);
        assert_eq!(grads[0].data(), &[1.0, 1.0]);
        assert_eq!(grads[1].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let p = g.variable(Tensor::zeros(&[2]));
        assert!(g.backward(p).is_err());
    }

    #[test]
    fn shape_errors_name_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[4]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn gradcheck_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_tensor(&[2, 3, 4], &mut rng);
        let w = rand_tensor(&[4, 5], &mut rng);
        let bias = rand_tensor(&[5], &mut rng);
        check(&[a.clone(), w.clone(), bias.clone()], &|g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            let y = g.add(y, v[2]).unwrap();
            let y = g.mul(y, v[2]).unwrap();
            let y = g.softmax(y, 1).unwrap();
            let y = g.mul(y, y).unwrap();
            g.sum(y)
        });
        check(&[a.clone()], &|g, v| {
            let y = g.layer_norm(v[0]);
            let y = g.scale(y, 0.7);
            let y = g.mul(y, y).unwrap();
            let y = g.mean(y, 1).unwrap();
            let y = g.sum_axis(y, 0).unwrap();
            let c = g.constant(Tensor::from_fn(&[4], |i| i as f64 - 1.5));
            let y = g.mul(y, c).unwrap();
            g.sum(y)
        });
        check(&[a.clone(), a.clone()], &|g, v| {
            let y = g.concat(&[v[0], v[1]], 1).unwrap();
            let y = g.reshape(y, &[12, 4]).unwrap();
            let c = g.constant(Tensor::from_fn(&[12, 4], |i| (i as f64).sin()));
            let y = g.mul(y, c).unwrap();
            let y = g.relu(y);
            g.sum(y)
        });
    }

    #[test]
    fn gradcheck_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_tensor(&[2, 3, 4], &mut rng);
        let k = rand_tensor(&[2, 5, 4], &mut rng);
        let v = rand_tensor(&[2, 5, 4], &mut rng);
        let w = rand_tensor(&[2, 3, 4], &mut rng);
        check(&[q, k, v], &|g, vars| {
            let y = g.attention(vars[0], vars[1], vars[2], 2).unwrap();
            let c = g.constant(w.clone());
            let y = g.mul(y, c).unwrap();
            g.sum(y)
        });
    }

    #[test]
    fn gradcheck_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = rand_tensor(&[6], &mut rng);
        let truth = [0.5, 0.9, 0.9, 0.1, 0.3, 0.7];
        check(&[s], &|g, v| g.ranking_loss(v[0], &truth).unwrap());
        let logits = rand_tensor(&[4, 3], &mut rng);
        check(&[logits], &|g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap());
    }

    #[test]
    fn logistic_loss_is_stable() {
        assert!((logistic_loss(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((logistic_loss(1.0) - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
        assert!((logistic_loss(-1000.0) - 1000.0).abs() < 1e-9);
        assert!(logistic_loss(1000.0) >= 0.0 && logistic_loss(1000.0) < 1e-300);
    }

    #[test]
    fn rebuilt_tape_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[2, 3, 4], &mut rng);
        let run = || {
            let mut g = Graph::new();
            let v = g.variable(x.clone());
            let a = g.attention(v, v, v, 2).unwrap();
            let n = g.layer_norm(a);
            let s = g.sum(n);
            let s2 = g.mul(s, s).unwrap();
            g.backward(s2).unwrap().var(v).unwrap().clone()
        };
        let (a, b) = (run(), run());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
