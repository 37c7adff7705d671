//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape once in reverse. Shape errors inside the tape are programming
//! errors and panic with the offending shapes.

use std::rc::Rc;

use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sentinel in gather index lists meaning "write zero".
pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: 1, pad: 0 }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sqrt(Var),
    Square(Var),
    BceLogits(Var, Rc<Tensor>),
    Sum(Var),
    SumAxis(Var),
    Matmul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    Gather(Var, Rc<Vec<u32>>),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(
        a.len(),
        b.len(),
        "broadcast needs equal rank: {a:?} vs {b:?}"
    );
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(
                x == y || x == 1 || y == 1,
                "shapes {a:?} and {b:?} do not broadcast"
            );
            x.max(y)
        })
        .collect()
}

/// Strides of `shape` inside the broadcast output, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` over a broadcast pair.
fn for_each_broadcast(
    a: &[usize],
    b: &[usize],
    out: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if a == out && b == out {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums `grad` (shaped like the broadcast output) back onto `shape`.
fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = vec![0.0; shape.iter().product()];
    let gd = grad.data();
    for_each_broadcast(shape, shape, grad.shape(), |o, i, _| out[i] += gd[o]);
    Tensor::from_parts(shape.to_vec(), out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_out_dim(size: usize, k: usize, spec: Conv2dSpec) -> usize {
    assert!(size + 2 * spec.pad >= k, "kernel {k} larger than padded input {size}");
    (size + 2 * spec.pad - k) / spec.stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: Conv2dSpec,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let n = ho * wo;
    let mut col = vec![0.0; cin * kh * kw * n];
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: Conv2dSpec,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let n = ho * wo;
    let mut x = vec![0.0; cin * h * w];
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(ta.shape(), tb.shape());
        let n = out_shape.iter().product();
        let mut out = vec![0.0; n];
        let (da, db) = (ta.data(), tb.data());
        for_each_broadcast(ta.shape(), tb.shape(), &out_shape, |o, i, j| {
            out[o] = f(da[i], db[j])
        });
        Tensor::from_parts(out_shape, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.binary(a, b, |x, y| x + y);
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.binary(a, b, |x, y| x - y);
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.binary(a, b, |x, y| x * y);
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::Mul(a, b), g)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.binary(a, b, |x, y| x / y);
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::Div(a, b), g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * c);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), g)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x + c);
        let g = self.any_grad(&[a]);
        self.push(value, Op::AddScalar(a), g)
    }

    /// `c - a`, elementwise.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, c)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let g = self.any_grad(&[a]);
        self.push(value, op, g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Elementwise binary cross-entropy of `logits` against a fixed target.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Var {
        let x = &self.nodes[logits.0].value;
        assert_eq!(x.shape(), target.shape(), "bce target shape");
        let value = x
            .zip_map(target, |x, t| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .expect("shape checked");
        let g = self.any_grad(&[logits]);
        self.push(value, Op::BceLogits(logits, Rc::new(target.clone())), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.nodes[a.0].value.sum());
        let g = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let t = &self.nodes[a.0].value;
        let shape = t.shape().to_vec();
        assert!(axis < shape.len());
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (x, y) in dst.iter_mut().zip(src) {
                    *x += y;
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let g = self.any_grad(&[a]);
        self.push(Tensor::from_parts(oshape, out), Op::SumAxis(a), g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(ta.rank() == 2 && tb.rank() == 2, "matmul needs 2-D operands");
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", ta.shape(), tb.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let g = self.any_grad(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::Matmul(a, b), g)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        assert_eq!(t.rank(), 2, "transpose needs 2-D operand");
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let g = self.any_grad(&[a]);
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), g)
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        assert_eq!(t.rank(), 2, "softmax_rows needs 2-D operand");
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let g = self.any_grad(&[a]);
        self.push(Tensor::from_parts(vec![r, c], out), Op::SoftmaxRows(a), g)
    }

    /// 2-D convolution (cross-correlation) of a C×H×W input with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Var {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        assert_eq!(tx.rank(), 3, "conv2d input must be C×H×W, got {:?}", tx.shape());
        assert_eq!(tw.rank(), 4, "conv2d weight must be O×I×kh×kw");
        let (cin, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (cout, cin2, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        assert_eq!(cin, cin2, "conv2d channels: input {:?} weight {:?}", tx.shape(), tw.shape());
        let ho = conv_out_dim(h, kh, spec);
        let wo = conv_out_dim(wd, kw, spec);
        let n = ho * wo;
        let kdim = cin * kh * kw;
        let mut out = vec![0.0; cout * n];
        if kh == 1 && kw == 1 && spec.stride == 1 && spec.pad == 0 {
            gemm(cout, kdim, n, tw.data(), false, tx.data(), false, &mut out, false);
        } else {
            let col = im2col(tx.data(), cin, h, wd, kh, kw, spec, ho, wo);
            gemm(cout, kdim, n, tw.data(), false, &col, false, &mut out, false);
        }
        if let Some(b) = b {
            let tb = &self.nodes[b.0].value;
            assert_eq!(tb.shape(), &[cout], "conv2d bias shape");
            for (o, bias) in tb.data().iter().enumerate() {
                for v in &mut out[o * n..(o + 1) * n] {
                    *v += bias;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = self.any_grad(&deps);
        self.push(
            Tensor::from_parts(vec![cout, ho, wo], out),
            Op::Conv2d { x, w, b, spec },
            g,
        )
    }

    /// `out[i] = a[indices[i]]`, or zero where the index is [`GATHER_ZERO`].
    pub fn gather(&mut self, a: Var, indices: Rc<Vec<u32>>, shape: &[usize]) -> Var {
        let t = &self.nodes[a.0].value;
        assert_eq!(indices.len(), shape.iter().product::<usize>(), "gather shape");
        let d = t.data();
        let out = indices
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { d[i as usize] })
            .collect();
        let g = self.any_grad(&[a]);
        self.push(Tensor::from_parts(shape.to_vec(), out), Op::Gather(a, indices), g)
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let tail = self.nodes[parts[0].0].value.shape()[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(&t.shape()[1..], &tail[..], "concat trailing dims");
            lead += t.shape()[0];
            out.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let g = self.any_grad(parts);
        self.push(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec()), g)
    }

    /// `len` entries of the leading axis starting at `start`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = &self.nodes[a.0].value;
        assert!(start + len <= t.shape()[0], "slice out of range");
        let inner: usize = t.shape()[1..].iter().product();
        let out = t.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let g = self.any_grad(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Slice(a, start), g)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = &self.nodes[a.0].value;
        let value = t.reshape(shape).expect("reshape element count");
        let g = self.any_grad(&[a]);
        self.push(value, Op::Reshape(a), g)
    }

    /// Gradients of the single-element `loss` with respect to every node that needs them.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if ng(*a) {
                    self.accumulate(grads, *a, reduce_to(g, val(*a).shape()));
                }
                if ng(*b) {
                    self.accumulate(grads, *b, reduce_to(g, val(*b).shape()));
                }
            }
            Op::Sub(a, b) => {
                if ng(*a) {
                    self.accumulate(grads, *a, reduce_to(g, val(*a).shape()));
                }
                if ng(*b) {
                    let r = reduce_to(g, val(*b).shape()).map(|x| -x);
                    self.accumulate(grads, *b, r);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (ta, tb) = (val(*a), val(*b));
                let out = g.shape().to_vec();
                let gd = g.data();
                if ng(*a) {
                    let mut full = vec![0.0; gd.len()];
                    let bd = tb.data();
                    for_each_broadcast(ta.shape(), tb.shape(), &out, |o, _, j| {
                        full[o] = if is_div { gd[o] / bd[j] } else { gd[o] * bd[j] }
                    });
                    let r = reduce_to(&Tensor::from_parts(out.clone(), full), ta.shape());
                    self.accumulate(grads, *a, r);
                }
                if ng(*b) {
                    let mut full = vec![0.0; gd.len()];
                    let (ad, bd) = (ta.data(), tb.data());
                    for_each_broadcast(ta.shape(), tb.shape(), &out, |o, i, j| {
                        full[o] = if is_div {
                            -gd[o] * ad[i] / (bd[j] * bd[j])
                        } else {
                            gd[o] * ad[i]
                        }
                    });
                    let r = reduce_to(&Tensor::from_parts(out.clone(), full), tb.shape());
                    self.accumulate(grads, *b, r);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let r = g.reshape(val(*a).shape()).expect("same count");
                self.accumulate(grads, *a, r);
            }
            Op::Relu(a) => {
                let r = g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }).unwrap();
                self.accumulate(grads, *a, r);
            }
            Op::Sigmoid(a) => {
                let r = g.zip_map(&node.value, |g, y| g * y * (1.0 - y)).unwrap();
                self.accumulate(grads, *a, r);
            }
            Op::Exp(a) => {
                let r = g.zip_map(&node.value, |g, y| g * y).unwrap();
                self.accumulate(grads, *a, r);
            }
            Op::Log(a) => {
                let r = g.zip_map(val(*a), |g, x| g / x).unwrap();
                self.accumulate(grads, *a, r);
            }
            Op::Abs(a) => {
                let r = g.zip_map(val(*a), |g, x| g * sign(x)).unwrap();
                self.accumulate(grads, *a, r);
            }
            Op::Sqrt(a) => {
                let r = g.zip_map(&node.value, |g, y| g / (2.0 * y)).unwrap();
                self.accumulate(grads, *a, r);
            }
            Op::Square(a) => {
                let r = g.zip_map(val(*a), |g, x| 2.0 * g * x).unwrap();
                self.accumulate(grads, *a, r);
            }
            Op::BceLogits(a, target) => {
                let x = val(*a);
                let mut r = x.zip_map(target, |x, t| sigmoid(x) - t).unwrap();
                for (v, gv) in r.data_mut().iter_mut().zip(g.data()) {
                    *v *= gv;
                }
                self.accumulate(grads, *a, r);
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), s));
            }
            Op::SumAxis(a) => {
                let r = reduce_to_expand(g, val(*a).shape());
                self.accumulate(grads, *a, r);
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if ng(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, false);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if ng(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, false);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let gd = g.data();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = gd[i * c + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(vec![c, r], out));
            }
            Op::SoftmaxRows(a) => {
                let c = node.value.shape()[1];
                let mut out = vec![0.0; g.numel()];
                for ((orow, yrow), grow) in out
                    .chunks_mut(c)
                    .zip(node.value.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for ((o, y), g) in orow.iter_mut().zip(yrow).zip(grow) {
                        *o = y * (g - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(node.value.shape().to_vec(), out));
            }
            Op::Conv2d { x, w, b, spec } => {
                let (tx, tw) = (val(*x), val(*w));
                let (cin, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (cout, _, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
                let (ho, wo) = (g.shape()[1], g.shape()[2]);
                let n = ho * wo;
                let kdim = cin * kh * kw;
                let pointwise = kh == 1 && kw == 1 && spec.stride == 1 && spec.pad == 0;
                if ng(*w) {
                    let mut gw = vec![0.0; cout * kdim];
                    if pointwise {
                        gemm(cout, n, kdim, g.data(), false, tx.data(), true, &mut gw, false);
                    } else {
                        let col = im2col(tx.data(), cin, h, wd, kh, kw, *spec, ho, wo);
                        gemm(cout, n, kdim, g.data(), false, &col, true, &mut gw, false);
                    }
                    self.accumulate(grads, *w, Tensor::from_parts(tw.shape().to_vec(), gw));
                }
                if ng(*x) {
                    let mut gcol = vec![0.0; kdim * n];
                    gemm(kdim, cout, n, tw.data(), true, g.data(), false, &mut gcol, false);
                    let gx = if pointwise {
                        gcol
                    } else {
                        col2im(&gcol, cin, h, wd, kh, kw, *spec, ho, wo)
                    };
                    self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), gx));
                }
                if let Some(b) = b {
                    if ng(*b) {
                        let gb = g.data().chunks(n).map(|c| c.iter().sum()).collect();
                        self.accumulate(grads, *b, Tensor::from_parts(vec![cout], gb));
                    }
                }
            }
            Op::Gather(a, indices) => {
                let ta = val(*a);
                let mut out = vec![0.0; ta.numel()];
                for (&idx, gv) in indices.iter().zip(g.data()) {
                    if idx != GATHER_ZERO {
                        out[idx as usize] += gv;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(ta.shape().to_vec(), out));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let tp = val(*p);
                    let n = tp.numel();
                    if ng(*p) {
                        let piece = g.data()[offset..offset + n].to_vec();
                        self.accumulate(grads, *p, Tensor::from_parts(tp.shape().to_vec(), piece));
                    }
                    offset += n;
                }
            }
            Op::Slice(a, start) => {
                let ta = val(*a);
                let inner: usize = ta.shape()[1..].iter().product();
                let mut out = vec![0.0; ta.numel()];
                out[start * inner..start * inner + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *a, Tensor::from_parts(ta.shape().to_vec(), out));
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Broadcasts a keep-dim reduction gradient back to the full shape.
fn reduce_to_expand(g: &Tensor, shape: &[usize]) -> Tensor {
    let mut out = vec![0.0; shape.iter().product()];
    let gd = g.data();
    for_each_broadcast(g.shape(), g.shape(), shape, |o, i, _| out[o] = gd[i]);
    Tensor::from_parts(shape.to_vec(), out)
}
