//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order: [`Tape::backward`] walks it once from the end and every
//! node is visited after all of its consumers. Gradients flowing into a node
//! from several consumers are summed.

use std::borrow::Cow;

use super::gemm::{gemm, Strides};
use super::Tensor;
use crate::error::{Error, Result};

const LN_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var },
    MatMul { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    AddBias { x: Var, b: Var },
    Mul(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f32> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    TransposeLast(Var),
    Reshape(Var),
    Repeat(Var),
    Sum(Var),
    L1 { x: Var, target: Vec<f32> },
}

struct Node<'p> {
    value: Cow<'p, [f32]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. Parameter leaves borrow their storage, so a tape
/// never outlives the parameters it reads.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Vec<f32>>>,
    grad_enabled: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, len: usize) -> &mut Vec<f32> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'p> Tape<'p> {
    /// Tape that records everything needed for [`Tape::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Forward-only tape; no node requires a gradient and no caches are kept.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, [f32]>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() as u32 - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.idx()].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.idx()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.idx()].shape
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("consistent node")
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(mismatch("constant", &shape, &[data.len()]));
        }
        Ok(self.push(Cow::Owned(data), shape, Op::Leaf, false))
    }

    /// Differentiable leaf that borrows `t`'s storage.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(&t.data), t.shape.clone(), Op::Leaf, true)
    }

    /// Differentiable leaf that owns its data (used by gradient checks).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t.data), t.shape, Op::Leaf, true)
    }

    /// `x·wᵀ` over the last axis: `x: [.., I]`, `w: [O, I]` → `[.., O]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(mismatch("linear", xs, ws));
        }
        let (i, o) = (ws[1], ws[0]);
        let rows = numel(xs) / i.max(1);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = o;
        let mut out = vec![0.0; rows * o];
        gemm(
            rows,
            i,
            o,
            self.value(x),
            Strides::row_major(i),
            self.value(w),
            Strides::transposed(i),
            0.0,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Cow::Owned(out), shape, Op::Linear { x, w }, rg))
    }

    /// Batched matrix product `[.., M, K] × [.., K, N]`; `b` may also be a
    /// plain `[K, N]` matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() < 2 || bs.len() < 2 {
            return Err(mismatch("matmul", &as_, &bs));
        }
        let (m, k) = (as_[as_.len() - 2], as_[as_.len() - 1]);
        let (k2, n) = (bs[bs.len() - 2], bs[bs.len() - 1]);
        let batch_a = &as_[..as_.len() - 2];
        let batch_b = &bs[..bs.len() - 2];
        if k != k2 || !(batch_b.is_empty() || batch_a == batch_b) {
            return Err(mismatch("matmul", &as_, &bs));
        }
        let batches = numel(batch_a);
        let shared = batch_b.is_empty();
        let mut out = vec![0.0; batches * m * n];
        for bi in 0..batches {
            let boff = if shared { 0 } else { bi * k * n };
            gemm(
                m,
                k,
                n,
                &self.value(a)[bi * m * k..],
                Strides::row_major(k),
                &self.value(b)[boff..],
                Strides::row_major(n),
                0.0,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), shape, Op::MatMul { a, b }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), self.shape(a).to_vec(), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), self.shape(a).to_vec(), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), self.shape(a).to_vec(), Op::Mul(a, b), rg))
    }

    /// `x + b` with `b: [O]` broadcast over all leading axes of `x: [.., O]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs.len() != 1 || xs.last() != Some(&bs[0]) {
            return Err(mismatch("add_bias", xs, bs));
        }
        let o = bs[0];
        let bias = self.value(b);
        let out = self
            .value(x)
            .chunks_exact(o)
            .flat_map(|row| row.iter().zip(bias).map(|(a, c)| a + c))
            .collect();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Cow::Owned(out), xs.to_vec(), Op::AddBias { x, b }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let rg = self.rg(x);
        self.push(Cow::Owned(out), self.shape(x).to_vec(), Op::Scale(x, s), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(x);
        self.push(Cow::Owned(out), self.shape(x).to_vec(), Op::Gelu(x), rg)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layer_norm", &xs, self.shape(gamma)));
        }
        let rows = numel(&xs) / d;
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        let (g, b) = (self.value(gamma), self.value(beta));
        for (r, row) in self.value(x).chunks_exact(d).enumerate() {
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let (xhat, rstd) = if rg && self.grad_enabled {
            (xhat, rstd)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.push(
            Cow::Owned(out),
            xs,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap_or(&1);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(d.max(1)) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(Cow::Owned(out), xs, Op::Softmax(x), rg)
    }

    /// Scaled dot-product attention with `heads` heads on `[B, T, D]` inputs.
    /// Each head uses a contiguous `D / heads` slice of the feature axis.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let s = self.shape(q).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "attention needs [B,T,D] with D divisible by {heads} heads, got {s:?}"
            )));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; b * heads * t * t];
        let mut out = vec![0.0; b * t * d];
        for bi in 0..b {
            let base = bi * t * d;
            for h in 0..heads {
                let off = h * dh;
                let p = &mut probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                for i in 0..t {
                    let qi = &qv[base + i * d + off..base + i * d + off + dh];
                    for j in 0..t {
                        let kj = &kv[base + j * d + off..base + j * d + off + dh];
                        p[i * t + j] = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f32>() * scale;
                    }
                    softmax_in_place(&mut p[i * t..(i + 1) * t]);
                    let o = &mut out[base + i * d + off..base + i * d + off + dh];
                    for j in 0..t {
                        let w = p[i * t + j];
                        let vj = &vv[base + j * d + off..base + j * d + off + dh];
                        for (oo, vvv) in o.iter_mut().zip(vj) {
                            *oo += w * vvv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let probs = if rg { probs } else { Vec::new() };
        Ok(self.push(Cow::Owned(out), s, Op::Attention { q, k, v, heads, probs }, rg))
    }

    /// Attention probabilities of the most recent call that recorded them.
    pub fn attention_probs(&self, v: Var) -> Option<&[f32]> {
        match &self.nodes[v.idx()].op {
            Op::Attention { probs, .. } if !probs.is_empty() => Some(probs),
            _ => None,
        }
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::invalid("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(mismatch("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::Concat { inputs: inputs.to_vec(), axis },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(mismatch("slice", &xs, &[axis, start, len]));
        }
        let outer = numel(&xs[..axis]);
        let inner = numel(&xs[axis + 1..]);
        let full = xs[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = o * full + start * inner;
            out.extend_from_slice(&self.value(x)[s..s + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), shape, Op::Slice { x, axis, start }, rg))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(mismatch("transpose", &xs, &[]));
        }
        let (r, c) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let out = transpose_batched(self.value(x), r, c);
        let mut shape = xs;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), shape, Op::TransposeLast(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(x)) {
            return Err(mismatch("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), shape, Op::Reshape(x), rg))
    }

    /// Stack `times` copies of `x` along a new leading axis.
    pub fn repeat(&mut self, x: Var, times: usize) -> Var {
        let v = self.value(x);
        let mut out = Vec::with_capacity(v.len() * times);
        for _ in 0..times {
            out.extend_from_slice(v);
        }
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(x));
        let rg = self.rg(x);
        self.push(Cow::Owned(out), shape, Op::Repeat(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|&v| v as f64).sum::<f64>() as f32;
        let rg = self.rg(x);
        self.push(Cow::Owned(vec![s]), vec![1], Op::Sum(x), rg)
    }

    /// `Σ |x − target|` as a scalar.
    pub fn l1(&mut self, x: Var, target: Vec<f32>) -> Result<Var> {
        if target.len() != self.value(x).len() {
            return Err(mismatch("l1", self.shape(x), &[target.len()]));
        }
        let s = self
            .value(x)
            .iter()
            .zip(&target)
            .map(|(a, t)| (a - t).abs() as f64)
            .sum::<f64>() as f32;
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(vec![s]), vec![1], Op::L1 { x, target }, rg))
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.idx()).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.idx()).and_then(Option::take)
    }

    /// Back-propagate from scalar `root` (seeded with 1).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::invalid("backward on an inference tape"));
        }
        if self.value(root).len() != 1 {
            return Err(mismatch("backward", self.shape(root), &[1]));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.idx()] = Some(vec![1.0]);
        for i in (0..=root.idx()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f32]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let rg = |v: Var| nodes[v.idx()].requires_grad;
        let val = |v: Var| -> &[f32] { &nodes[v.idx()].value };
        let len = |v: Var| nodes[v.idx()].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w } => {
                let ws = &nodes[w.idx()].shape;
                let (o, inp) = (ws[0], ws[1]);
                let rows = len(*x) / inp.max(1);
                if rg(*x) {
                    let gx = accumulate(&mut grads[x.idx()], rows * inp);
                    gemm(rows, o, inp, g, Strides::row_major(o), val(*w), Strides::row_major(inp), 1.0, gx);
                }
                if rg(*w) {
                    let gw = accumulate(&mut grads[w.idx()], o * inp);
                    gemm(o, rows, inp, g, Strides::transposed(o), val(*x), Strides::row_major(inp), 1.0, gw);
                }
            }
            Op::MatMul { a, b } => {
                let as_ = &nodes[a.idx()].shape;
                let bs = &nodes[b.idx()].shape;
                let (m, k) = (as_[as_.len() - 2], as_[as_.len() - 1]);
                let n = bs[bs.len() - 1];
                let batches = numel(&as_[..as_.len() - 2]);
                let shared = bs.len() == 2;
                if rg(*a) {
                    let la = len(*a);
                    let ga = accumulate(&mut grads[a.idx()], la);
                    for bi in 0..batches {
                        let boff = if shared { 0 } else { bi * k * n };
                        gemm(m, n, k, &g[bi * m * n..], Strides::row_major(n), &val(*b)[boff..], Strides::transposed(n), 1.0, &mut ga[bi * m * k..(bi + 1) * m * k]);
                    }
                }
                if rg(*b) {
                    let lb = len(*b);
                    let gb = accumulate(&mut grads[b.idx()], lb);
                    for bi in 0..batches {
                        let boff = if shared { 0 } else { bi * k * n };
                        gemm(k, m, n, &val(*a)[bi * m * k..], Strides::transposed(k), &g[bi * m * n..], Strides::row_major(n), 1.0, &mut gb[boff..boff + k * n]);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(*a) {
                    let ga = accumulate(&mut grads[a.idx()], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if rg(*b) {
                    let gb = accumulate(&mut grads[b.idx()], g.len());
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                }
            }
            Op::AddBias { x, b } => {
                if rg(*x) {
                    let gx = accumulate(&mut grads[x.idx()], g.len());
                    gx.iter_mut().zip(g).for_each(|(a, c)| *a += c);
                }
                if rg(*b) {
                    let o = len(*b);
                    let gb = accumulate(&mut grads[b.idx()], o);
                    for row in g.chunks_exact(o) {
                        gb.iter_mut().zip(row).for_each(|(a, c)| *a += c);
                    }
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let vb = val(*b);
                    let ga = accumulate(&mut grads[a.idx()], g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * vb[j];
                    }
                }
                if rg(*b) {
                    let va = val(*a);
                    let gb = accumulate(&mut grads[b.idx()], g.len());
                    for j in 0..g.len() {
                        gb[j] += g[j] * va[j];
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = accumulate(&mut grads[x.idx()], g.len());
                gx.iter_mut().zip(g).for_each(|(a, c)| *a += s * c);
            }
            Op::Gelu(x) => {
                let vx = val(*x);
                let gx = accumulate(&mut grads[x.idx()], g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * gelu_grad(vx[j]);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = len(*gamma);
                let gam = val(*gamma);
                if rg(*gamma) {
                    let gg = accumulate(&mut grads[gamma.idx()], d);
                    for (row_g, row_h) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if rg(*beta) {
                    let gb = accumulate(&mut grads[beta.idx()], d);
                    for row_g in g.chunks_exact(d) {
                        gb.iter_mut().zip(row_g).for_each(|(a, c)| *a += c);
                    }
                }
                if rg(*x) {
                    let gx = accumulate(&mut grads[x.idx()], g.len());
                    let mut dh = vec![0.0; d];
                    for (r, (row_g, row_h)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = row_g[j] * gam[j];
                        }
                        let mean_dh = dh.iter().sum::<f32>() / d as f32;
                        let mean_dhh = dh.iter().zip(row_h).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dh[j] - mean_dh - row_h[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let d = *node.shape.last().unwrap_or(&1);
                let y = &node.value;
                let gx = accumulate(&mut grads[x.idx()], g.len());
                for (r, (row_g, row_y)) in g.chunks_exact(d).zip(y.chunks_exact(d)).enumerate() {
                    let dot: f32 = row_g.iter().zip(row_y).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] += row_y[j] * (row_g[j] - dot);
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let s = &node.shape;
                let (b, t, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let mut gq = vec![0.0; b * t * d];
                let mut gk = vec![0.0; b * t * d];
                let mut gv = vec![0.0; b * t * d];
                let mut dp = vec![0.0; t * t];
                for bi in 0..b {
                    let base = bi * t * d;
                    for h in 0..*heads {
                        let off = h * dh;
                        let p = &probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                        for i in 0..t {
                            let gi = &g[base + i * d + off..base + i * d + off + dh];
                            for j in 0..t {
                                let vj = &vv[base + j * d + off..base + j * d + off + dh];
                                dp[i * t + j] = gi.iter().zip(vj).map(|(a, c)| a * c).sum();
                                let w = p[i * t + j];
                                for (x, y) in gv[base + j * d + off..base + j * d + off + dh].iter_mut().zip(gi) {
                                    *x += w * y;
                                }
                            }
                        }
                        for i in 0..t {
                            let row_p = &p[i * t..(i + 1) * t];
                            let dot: f32 = dp[i * t..(i + 1) * t].iter().zip(row_p).map(|(a, c)| a * c).sum();
                            for j in 0..t {
                                let ds = row_p[j] * (dp[i * t + j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..dh {
                                    gq[base + i * d + off + c] += ds * kv[base + j * d + off + c];
                                    gk[base + j * d + off + c] += ds * qv[base + i * d + off + c];
                                }
                            }
                        }
                    }
                }
                for (var, gsrc) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if rg(var) {
                        let dst = accumulate(&mut grads[var.idx()], gsrc.len());
                        dst.iter_mut().zip(&gsrc).for_each(|(a, c)| *a += c);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = &node.shape;
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let total = shape[*axis] * inner;
                let mut off = 0;
                for &v in inputs {
                    let chunk = nodes[v.idx()].shape[*axis] * inner;
                    if rg(v) {
                        let gv = accumulate(&mut grads[v.idx()], outer * chunk);
                        for o in 0..outer {
                            let src = &g[o * total + off..o * total + off + chunk];
                            gv[o * chunk..(o + 1) * chunk].iter_mut().zip(src).for_each(|(a, c)| *a += c);
                        }
                    }
                    off += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = &nodes[x.idx()].shape;
                let outer = numel(&xs[..*axis]);
                let inner = numel(&xs[axis + 1..]);
                let full = xs[*axis] * inner;
                let chunk = node.shape[*axis] * inner;
                let gx = accumulate(&mut grads[x.idx()], outer * full);
                for o in 0..outer {
                    let dst = &mut gx[o * full + start * inner..o * full + start * inner + chunk];
                    dst.iter_mut().zip(&g[o * chunk..(o + 1) * chunk]).for_each(|(a, c)| *a += c);
                }
            }
            Op::TransposeLast(x) => {
                let s = &node.shape;
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let back = transpose_batched(g, r, c);
                let gx = accumulate(&mut grads[x.idx()], g.len());
                gx.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
            }
            Op::Reshape(x) => {
                let gx = accumulate(&mut grads[x.idx()], g.len());
                gx.iter_mut().zip(g).for_each(|(a, c)| *a += c);
            }
            Op::Repeat(x) => {
                let n = len(*x);
                let gx = accumulate(&mut grads[x.idx()], n);
                for chunk in g.chunks_exact(n) {
                    gx.iter_mut().zip(chunk).for_each(|(a, c)| *a += c);
                }
            }
            Op::Sum(x) => {
                let n = len(*x);
                let gx = accumulate(&mut grads[x.idx()], n);
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::L1 { x, target } => {
                let vx = val(*x);
                let gx = accumulate(&mut grads[x.idx()], vx.len());
                for j in 0..vx.len() {
                    let d = vx[j] - target[j];
                    if d > 0.0 {
                        gx[j] += g[0];
                    } else if d < 0.0 {
                        gx[j] -= g[0];
                    }
                }
            }
        }
    }
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn transpose_batched(x: &[f32], r: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    if r * c == 0 {
        return out;
    }
    for (src, dst) in x.chunks_exact(r * c).zip(out.chunks_exact_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i3 = tape
            .constant(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.])
            .unwrap();
        let a_data: Vec<f32> = (0..6).map(|x| x as f32 - 2.5).collect();
        let a = tape.constant(vec![3, 2], a_data.clone()).unwrap();
        let p = tape.matmul(i3, a).unwrap();
        assert_eq!(tape.value(p), &a_data[..]);
        assert_eq!(tape.shape(p), &[3, 2]);
    }

    #[test]
    fn shape_errors_report_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        let c = tape.constant(vec![3], vec![0.0; 3]).unwrap();
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn slice_then_concat_roundtrip() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..24).map(|x| x as f32).collect();
        let x = tape.constant(vec![2, 3, 4], data.clone()).unwrap();
        for axis in 0..3 {
            let n = [2, 3, 4][axis];
            let parts: Vec<Var> = (0..n).map(|i| tape.slice(x, axis, i, 1).unwrap()).collect();
            let y = tape.concat(&parts, axis).unwrap();
            assert_eq!(tape.value(y), &data[..]);
        }
        let a = tape.slice(x, 1, 0, 2).unwrap();
        let b = tape.slice(x, 1, 2, 1).unwrap();
        let y = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(y), &data[..]);
    }

    #[test]
    fn softmax_constant_row_and_gelu_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 4], vec![3.0; 4]).unwrap();
        let s = tape.softmax(x);
        assert_eq!(tape.value(s), &[0.25; 4]);
        let z = tape.constant(vec![1], vec![0.0]).unwrap();
        let g = tape.gelu(z);
        assert_eq!(tape.value(g), &[0.0]);
    }

    #[test]
    fn layer_norm_normalises() {
        let mut tape = Tape::new();
        let x = tape
            .constant(vec![2, 5], vec![1., 2., 3., 4., 5., -3., 0., 2., 9., 1.])
            .unwrap();
        let g = tape.constant(vec![5], vec![1.0; 5]).unwrap();
        let b = tape.constant(vec![5], vec![0.0; 5]).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        for row in tape.value(y).chunks(5) {
            let mean: f32 = row.iter().sum::<f32>() / 5.0;
            let var: f32 = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 5.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn shared_subexpression_gradients_sum() {
        // f(x) = sum((x*x) + x*x*x) with x reused; df/dx = 2x + 3x²
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let x2 = tape.mul(x, x).unwrap();
        let x3 = tape.mul(x2, x).unwrap();
        let s = tape.add(x2, x3).unwrap();
        let f = tape.sum(s);
        tape.backward(f).unwrap();
        let g = tape.grad(x).unwrap();
        for (gi, xi) in g.iter().zip([1.0f32, -2.0, 0.5]) {
            assert!((gi - (2.0 * xi + 3.0 * xi * xi)).abs() < 1e-6);
        }
    }

    #[test]
    fn sum_of_product_grad_is_other_factor() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(vec![2, 2], vec![0.5, -1.0, 2.0, 7.0]).unwrap();
        let p = tape.mul(a, b).unwrap();
        let f = tape.sum(p);
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.5, -1.0, 2.0, 7.0]);
        assert!(tape.grad(b).is_none());
    }

    #[test]
    fn single_token_attention_is_value() {
        let mut tape = Tape::new();
        let q = tape.constant(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = tape.constant(vec![1, 1, 4], vec![-1.0, 0.5, 2.0, 0.0]).unwrap();
        let v = tape.constant(vec![1, 1, 4], vec![9.0, 8.0, 7.0, 6.0]).unwrap();
        let o = tape.attention(q, k, v, 2).unwrap();
        assert_eq!(tape.value(o), &[9.0, 8.0, 7.0, 6.0]);
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let mut tape = Tape::inference();
        let x = tape.leaf(t(&[1], &[1.0]));
        let s = tape.sum(x);
        assert!(tape.backward(s).is_err());
    }
}
