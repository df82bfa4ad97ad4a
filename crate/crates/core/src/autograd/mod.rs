//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node in topological order; calling
//! [`Graph::backward`] walks the tape in reverse. Parameters enter the tape
//! through [`Graph::param`], which reads them from a borrowed [`ParamStore`].

mod kernels;

use alloc::vec;

use alloc::vec::Vec;

use crate::math::{self, gemm};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

static EMPTY_STORE: ParamStore = ParamStore::EMPTY;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Silu,
    Sigmoid,
    Tanh,
    /// tanh approximation
    Gelu,
    Square,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `b` broadcast over the leading axes of `a` (b's shape is a suffix of a's).
    AddSuffix(Var, Var),
    MulSuffix(Var, Var),
    Scale(Var, f32),
    Unary(Var, Unary),
    /// `x * (1 + scale) + shift` with `scale`, `shift` of shape (N, C) over x (N, C, ...).
    ScaleShift { x: Var, scale: Var, shift: Var },
    Sum(Var),
    Mean(Var),
    MeanAbsDiff(Var, Var),
    MeanAxis { x: Var, axis: usize },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Upsample2x(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<f32> },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<f32> },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f32> },
    L2NormalizeRows { x: Var, norms: Vec<f32> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. See the module docs.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
    frozen: Vec<bool>,
}

const NORM_EPS: f32 = 1e-5;

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'p> Graph<'p> {
    /// Graph that differentiates with respect to the parameters in `store`.
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            grad_enabled: true,
            frozen: vec![false; store.len()],
        }
    }

    /// Graph that never tracks gradients.
    pub fn inference(store: &'p ParamStore) -> Self {
        let mut g = Self::new(store);
        g.grad_enabled = false;
        g
    }

    /// Graph without parameters (constants only).
    pub fn detached() -> Graph<'static> {
        Graph::new(&EMPTY_STORE)
    }

    /// Stops gradients flowing into the given parameter.
    pub fn freeze(&mut self, id: ParamId) {
        self.frozen[id.0] = true;
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
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

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient (used for gradient checks and probing inputs).
    pub fn variable(&mut self, t: Tensor) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let requires_grad = self.grad_enabled && !self.frozen[id.0];
        self.nodes.push(Node {
            value: self.store.get(id).clone(),
            op: Op::Param,
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    // ---------------------------------------------------------------- elementwise

    fn zip_same(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise op on mismatched shapes");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    fn suffix_check(&self, a: Var, b: Var) -> usize {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb,
            "suffix broadcast of {sb:?} onto {sa:?}"
        );
        sb.iter().product()
    }

    /// `a + b` with `b` repeated over the leading axes of `a`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Var {
        let inner = self.suffix_check(a, b);
        let tb = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, &y) in chunk.iter_mut().zip(tb) {
                *o += y;
            }
        }
        self.push(out, Op::AddSuffix(a, b), &[a, b])
    }

    /// `a * b` with `b` repeated over the leading axes of `a`.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Var {
        let inner = self.suffix_check(a, b);
        let tb = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, &y) in chunk.iter_mut().zip(tb) {
                *o *= y;
            }
        }
        self.push(out, Op::MulSuffix(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x *= c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let mut t = self.value(a).clone();
        fn apply(d: &mut [f32], f: impl Fn(f32) -> f32) {
            d.iter_mut().for_each(|x| *x = f(*x));
        }
        let d = t.data_mut();
        match kind {
            Unary::Relu => apply(d, |x| x.max(0.0)),
            Unary::Silu => apply(d, |x| x * math::sigmoid(x)),
            Unary::Sigmoid => apply(d, math::sigmoid),
            Unary::Tanh => apply(d, math::tanh),
            Unary::Gelu => apply(d, kernels::gelu),
            Unary::Square => apply(d, |x| x * x),
        }
        self.push(t, Op::Unary(a, kind), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// FiLM modulation: `x * (1 + scale) + shift`, per (sample, channel).
    pub fn scale_shift(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let sx = self.shape(x).to_vec();
        assert!(sx.len() >= 2);
        let (n, c) = (sx[0], sx[1]);
        assert_eq!(self.shape(scale), [n, c], "scale_shift: scale shape");
        assert_eq!(self.shape(shift), [n, c], "scale_shift: shift shape");
        let spatial: usize = sx[2..].iter().product();
        let mut out = self.value(x).clone();
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        for (nc, chunk) in out.data_mut().chunks_mut(spatial).enumerate() {
            let (m, s) = (1.0 + sc[nc], sh[nc]);
            chunk.iter_mut().for_each(|v| *v = *v * m + s);
        }
        self.push(out, Op::ScaleShift { x, scale, shift }, &[x, scale, shift])
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s = math::lane_sum(self.value(a).data());
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = math::lane_sum(t.data()) / t.numel() as f32;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean absolute difference, `mean |a - b|`.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "l1_loss shapes");
        // f64 accumulation keeps the loss independent of summation length drift.
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y).abs() as f64).sum();
        let v = (s / ta.numel() as f64) as f32;
        self.push(Tensor::scalar(v), Op::MeanAbsDiff(a, b), &[a, b])
    }

    /// Mean over one axis (the axis is removed).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = outer_inner(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let inv = 1.0 / len as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        self.push(Tensor::new(new_shape, out), Op::MeanAxis { x, axis }, &[x])
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape.to_vec());
        self.push(t, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let t = kernels::permute(self.value(a), perm);
        self.push(t, Op::Permute(a, perm.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let (outer, _, inner) = outer_inner(&first, axis);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank");
            for (d, (&x, &y)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || x == y, "concat: mismatched dim {d}");
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(Tensor::new(shape, out), Op::Concat(parts.to_vec(), axis), parts)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, full, inner) = outer_inner(&shape, axis);
        assert!(start + len <= full, "slice out of range");
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        self.push(Tensor::new(new_shape, out), Op::Slice { x, axis, start }, &[x])
    }

    /// Selects rows (leading-axis entries) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let shape = self.shape(x).to_vec();
        let row: usize = shape[1..].iter().product();
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            assert!(i < shape[0], "gather_rows index {i} out of range");
            out.extend_from_slice(&d[i * row..(i + 1) * row]);
        }
        let mut new_shape = shape;
        new_shape[0] = idx.len();
        self.push(Tensor::new(new_shape, out), Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    // ---------------------------------------------------------------- linear algebra

    /// `x · wᵀ + b` over the last axis of `x`; `w` is (out, in).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let sx = self.shape(x).to_vec();
        let (n_out, k) = (self.shape(w)[0], self.shape(w)[1]);
        assert_eq!(*sx.last().unwrap(), k, "linear: input dim {} vs weight {:?}", sx.last().unwrap(), self.shape(w));
        let m = sx.iter().product::<usize>() / k;
        let mut out = vec![0.0f32; m * n_out];
        if let Some(b) = b {
            let bd = self.value(b).data();
            assert_eq!(bd.len(), n_out);
            for row in out.chunks_mut(n_out) {
                row.copy_from_slice(bd);
            }
        }
        gemm(
            m,
            k,
            n_out,
            1.0,
            self.value(x).data(),
            (k, 1),
            self.value(w).data(),
            (1, k),
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
            (n_out, 1),
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = n_out;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::new(shape, out), Op::Linear { x, w, b }, &parents)
    }

    /// Batched `a · b` (or `a · bᵀ`): a (B, M, K), b (B, K, N) or (B, N, K).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm shapes {sa:?} {sb:?}");
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        assert_eq!(if trans_b { sb[2] } else { sb[1] }, k, "bmm inner dims");
        let mut out = vec![0.0f32; bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let bstr = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                1.0,
                &da[i * m * k..(i + 1) * m * k],
                (k, 1),
                &db[i * k * n..(i + 1) * k * n],
                bstr,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
                (n, 1),
            );
        }
        self.push(Tensor::new(vec![bs, m, n], out), Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    // ---------------------------------------------------------------- convolution

    /// 2-D convolution, NCHW input, weight (Cout, Cin, kh, kw), symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, &parents)
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let t = kernels::upsample2x(self.value(x));
        self.push(t, Op::Upsample2x(x), &[x])
    }

    // ---------------------------------------------------------------- normalization

    /// Group normalization of (N, C, ...) with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (out, stats) = kernels::group_norm_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            groups,
            NORM_EPS,
        );
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, stats }, &[x, gamma, beta])
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (out, stats) = kernels::layer_norm_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            NORM_EPS,
        );
        self.push(out, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(d) {
            kernels::softmax_in_place(row);
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Mean cross-entropy of (rows, classes) logits against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let t = self.value(logits);
        assert_eq!(t.rank(), 2);
        let (rows, classes) = (t.shape()[0], t.shape()[1]);
        assert_eq!(rows, targets.len(), "cross_entropy: one target per row");
        let mut probs = t.data().to_vec();
        let mut loss = 0.0f64;
        for (row, &y) in probs.chunks_mut(classes).zip(targets) {
            assert!(y < classes, "target {y} out of {classes} classes");
            kernels::softmax_in_place(row);
            loss -= math::ln(row[y].max(1e-30)) as f64;
        }
        let v = (loss / rows as f64) as f32;
        self.push(
            Tensor::scalar(v),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        )
    }

    /// Each last-axis row divided by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(t.numel() / d);
        for row in out.data_mut().chunks_mut(d) {
            let n = math::sqrt(row.iter().map(|v| v * v).sum::<f32>()).max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push(out, Op::L2NormalizeRows { x, norms }, &[x])
    }

    // ---------------------------------------------------------------- backward

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(vb) {
                        *s += g * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(va) {
                        *s += g * x;
                    }
                });
            }
            Op::AddSuffix(a, b) => {
                let inner = self.value(*b).numel();
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for chunk in g.chunks(inner) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::MulSuffix(a, b) => {
                let vb = self.value(*b).data();
                let va = self.value(*a).data();
                let inner = vb.len();
                acc(*a, &mut |s| {
                    for (sc, gc) in s.chunks_mut(inner).zip(g.chunks(inner)) {
                        for ((s, g), y) in sc.iter_mut().zip(gc).zip(vb) {
                            *s += g * y;
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for (gc, xc) in g.chunks(inner).zip(va.chunks(inner)) {
                        for ((s, g), x) in s.iter_mut().zip(gc).zip(xc) {
                            *s += g * x;
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g));
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                acc(*a, &mut |s| kernels::unary_backward(*kind, x, y, g, s));
            }
            Op::ScaleShift { x, scale, shift } => {
                let sx = self.shape(*x);
                let spatial: usize = sx[2..].iter().product();
                let sc = self.value(*scale).data();
                let xv = self.value(*x).data();
                acc(*x, &mut |s| {
                    for (nc, (sch, gch)) in s.chunks_mut(spatial).zip(g.chunks(spatial)).enumerate() {
                        let m = 1.0 + sc[nc];
                        sch.iter_mut().zip(gch).for_each(|(s, g)| *s += g * m);
                    }
                });
                acc(*scale, &mut |s| {
                    for (nc, (gch, xch)) in g.chunks(spatial).zip(xv.chunks(spatial)).enumerate() {
                        s[nc] += math::lane_dot(gch, xch);
                    }
                });
                acc(*shift, &mut |s| {
                    for (nc, gch) in g.chunks(spatial).enumerate() {
                        s[nc] += math::lane_sum(gch);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f32;
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::MeanAbsDiff(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let k = g[0] / va.len() as f32;
                let sign = |x: f32, y: f32| {
                    if x > y {
                        k
                    } else if x < y {
                        -k
                    } else {
                        0.0
                    }
                };
                acc(*a, &mut |s| {
                    for ((s, &x), &y) in s.iter_mut().zip(va).zip(vb) {
                        *s += sign(x, y);
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, &x), &y) in s.iter_mut().zip(va).zip(vb) {
                        *s -= sign(x, y);
                    }
                });
            }
            Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = outer_inner(self.shape(*x), *axis);
                let inv = 1.0 / len as f32;
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        let gr = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for (s, g) in s[base..base + inner].iter_mut().zip(gr) {
                                *s += g * inv;
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec());
                let back = kernels::permute(&gt, &inv);
                acc(*a, &mut |s| add_into(s, back.data()));
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = outer_inner(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    acc(p, &mut |s| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut s[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = outer_inner(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        add_into(&mut s[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let row: usize = self.shape(*x)[1..].iter().product();
                acc(*x, &mut |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * row..(i + 1) * row], &g[r * row..(r + 1) * row]);
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (n_out, k) = (self.shape(*w)[0], self.shape(*w)[1]);
                let m = g.len() / n_out;
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                acc(*x, &mut |s| gemm(m, n_out, k, 1.0, g, (n_out, 1), wv, (k, 1), 1.0, s, (k, 1)));
                acc(*w, &mut |s| gemm(n_out, m, k, 1.0, g, (1, n_out), xv, (k, 1), 1.0, s, (k, 1)));
                if let Some(b) = b {
                    acc(*b, &mut |s| {
                        for row in g.chunks(n_out) {
                            add_into(s, row);
                        }
                    });
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    // dA = G · Bᵀ (or G · B when B was used transposed)
                    let bstr = if *trans_b { (k, 1) } else { (1, n) };
                    for i in 0..bs {
                        gemm(
                            m, n, k, 1.0,
                            &g[i * m * n..(i + 1) * m * n], (n, 1),
                            &vb[i * k * n..(i + 1) * k * n], bstr,
                            1.0, &mut s[i * m * k..(i + 1) * m * k], (k, 1),
                        );
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &va[i * m * k..(i + 1) * m * k];
                        let si = &mut s[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB (N, K) = Gᵀ · A
                            gemm(n, m, k, 1.0, gi, (1, n), ai, (k, 1), 1.0, si, (k, 1));
                        } else {
                            // dB (K, N) = Aᵀ · G
                            gemm(k, m, n, 1.0, ai, (1, k), gi, (n, 1), 1.0, si, (n, 1));
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let need_x = self.wants(*x);
                let need_w = self.wants(*w);
                let (gx, gw) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    node.value.shape(),
                    *stride,
                    *pad,
                    need_x,
                    need_w,
                );
                if let Some(gx) = gx {
                    acc(*x, &mut |s| add_into(s, &gx));
                }
                if let Some(gw) = gw {
                    acc(*w, &mut |s| add_into(s, &gw));
                }
                if let Some(b) = b {
                    let so = node.value.shape();
                    let (c, hw) = (so[1], so[2] * so[3]);
                    acc(*b, &mut |s| {
                        for (i, chunk) in g.chunks(hw).enumerate() {
                            s[i % c] += math::lane_sum(chunk);
                        }
                    });
                }
            }
            Op::Upsample2x(x) => {
                let back = kernels::upsample2x_backward(g, self.shape(*x));
                acc(*x, &mut |s| add_into(s, &back));
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let (gx, ggamma, gbeta) = kernels::group_norm_backward(
                    self.value(*x),
                    self.value(*gamma).data(),
                    *groups,
                    stats,
                    g,
                );
                acc(*x, &mut |s| add_into(s, &gx));
                acc(*gamma, &mut |s| add_into(s, &ggamma));
                acc(*beta, &mut |s| add_into(s, &gbeta));
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let (gx, ggamma, gbeta) =
                    kernels::layer_norm_backward(self.value(*x), self.value(*gamma).data(), stats, g);
                acc(*x, &mut |s| add_into(s, &gx));
                acc(*gamma, &mut |s| add_into(s, &ggamma));
                acc(*beta, &mut |s| add_into(s, &gbeta));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                acc(*x, &mut |s| {
                    for ((sr, yr), gr) in s.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                        let dot: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((s, y), g) in sr.iter_mut().zip(yr).zip(gr) {
                            *s += y * (g - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let classes = self.shape(*logits)[1];
                let k = g[0] / targets.len() as f32;
                acc(*logits, &mut |s| {
                    for (r, (sr, pr)) in s.chunks_mut(classes).zip(probs.chunks(classes)).enumerate() {
                        for (c, (s, p)) in sr.iter_mut().zip(pr).enumerate() {
                            let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                            *s += k * (p - onehot);
                        }
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                acc(*x, &mut |s| {
                    for (((sr, yr), gr), n) in
                        s.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)).zip(norms)
                    {
                        let dot: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((s, y), g) in sr.iter_mut().zip(yr).zip(gr) {
                            *s += (g - y * dot) / n;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    debug_assert_eq!(dst.len(), src.len());
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient per parameter of the graph's store (`None` if unused or frozen).
    pub fn param_grads(mut self, graph: &Graph<'_>) -> Vec<Option<Tensor>> {
        graph
            .param_vars
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let v = (*v)?;
                let g = self.grads[v.0].take()?;
                Some(Tensor::new(graph.store.get(ParamId(i)).shape().to_vec(), g))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
