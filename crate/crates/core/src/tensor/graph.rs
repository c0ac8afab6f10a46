//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends one node holding its output value and enough saved
//! state to apply its local gradient rule. Nodes are only ever appended after
//! their inputs, so reverse index order is a valid topological order.

use rayon::prelude::*;

use super::kernels::{self, gemm, index_map, Mat};
use super::value::{strides, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Act(Activation),
    Exp,
    Log,
    Sqrt,
    Square,
    ClampMin(f64),
    Scale(f64),
    Shift(f64),
    Custom { f: fn(f64) -> f64, df: fn(f64) -> f64 },
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Batch-norm running statistics for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

pub enum BnMode<'a> {
    /// Normalize with batch statistics and fold them into `running`.
    Train { running: &'a mut RunningStats, momentum: f64 },
    /// Normalize with frozen running statistics.
    Infer { running: &'a RunningStats },
}

enum Op {
    Leaf,
    Unary { a: Var, kind: Unary },
    Binary { a: Var, b: Var, kind: Binary },
    Matmul { a: Var, b: Var },
    Bmm { a: Var, b: Var },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    Reduce { a: Var, axes: Vec<usize>, kind: ReduceKind, argmax: Vec<usize> },
    Softmax { a: Var, axes: Vec<usize>, log: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: (usize, usize), pad: (usize, usize) },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, invstd: Vec<f64>, batch_stats: bool },
    AdaptiveAvgPool { x: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Recording of primitive operations with their values.
///
/// A graph supports a single [`Graph::backward`] call; build a fresh graph for
/// each forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
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

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: t, requires_grad, op: Op::Leaf });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
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

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Tensor::from_parts(shape, data), requires_grad, op });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Unary { a, .. }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::Reduce { a, .. }
            | Op::Softmax { a, .. }
            | Op::Narrow { a, .. } => vec![*a],
            Op::AdaptiveAvgPool { x } => vec![*x],
            Op::Binary { a, b, .. } | Op::Matmul { a, b } | Op::Bmm { a, b } => vec![*a, *b],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }

    // ---- elementwise ----------------------------------------------------

    fn unary(&mut self, name: &'static str, a: Var, kind: Unary) -> Result<Var> {
        let x = self.value(a);
        let data: Vec<f64> = x.data().iter().map(|&v| apply_unary(kind, v)).collect();
        let shape = x.shape().to_vec();
        self.push(name, shape, data, Op::Unary { a, kind })
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        self.unary("activation", a, Unary::Act(kind))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, Unary::Log)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, Unary::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, Unary::Square)
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary("clamp_min", a, Unary::ClampMin(floor))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, Unary::Scale(c))
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("shift", a, Unary::Shift(c))
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn pointwise(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Result<Var> {
        self.unary("pointwise", a, Unary::Custom { f, df })
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check_broadcast(name, sa, sb)?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let f = |p: f64, q: f64| match kind {
            Binary::Add => p + q,
            Binary::Sub => p - q,
            Binary::Mul => p * q,
            Binary::Div => p / q,
        };
        let data: Vec<f64> = if sa == sb {
            xa.iter().zip(xb).map(|(&p, &q)| f(p, q)).collect()
        } else if let Some(inner) = trailing_broadcast(sa, sb) {
            xa.chunks(inner).zip(xb).flat_map(|(c, &q)| c.iter().map(move |&p| f(p, q))).collect()
        } else {
            let map = broadcast_map(sa, sb);
            xa.iter().zip(&map).map(|(&p, &j)| f(p, xb[j])).collect()
        };
        let shape = sa.to_vec();
        self.push(name, shape, data, Op::Binary { a, b, kind })
    }

    /// `a + b`, where `b` has the rank of `a` and each extent equal or 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Binary::Div)
    }

    // ---- linear algebra ---------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            Mat::row_major(self.value(a).data(), k),
            Mat::row_major(self.value(b).data(), n),
            &mut out,
            0.0,
        );
        self.push("matmul", vec![m, n], out, Op::Matmul { a, b })
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return shape_err("bmm", format!("{sa:?} x {sb:?}"));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; bs * m * n];
        for (i, o) in out.chunks_mut(m * n).enumerate() {
            gemm(
                m,
                k,
                n,
                Mat::row_major(&xa[i * m * k..(i + 1) * m * k], k),
                Mat::row_major(&xb[i * k * n..(i + 1) * k * n], n),
                o,
                0.0,
            );
        }
        self.push("bmm", vec![bs, m, n], out, Op::Bmm { a, b })
    }

    // ---- layout ---------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if shape.iter().product::<usize>() != x.numel() || shape.iter().any(|&d| d == 0) {
            return shape_err("reshape", format!("{:?} -> {shape:?}", x.shape()));
        }
        let data = x.data().to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape { a })
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true)) {
            return shape_err("permute", format!("axes {axes:?} for shape {shape:?}"));
        }
        let map = permute_map(&shape, axes);
        let x = self.value(a).data();
        let data: Vec<f64> = map.iter().map(|&i| x[i]).collect();
        let out_shape = axes.iter().map(|&ax| shape[ax]).collect();
        self.push("permute", out_shape, data, Op::Permute { a, axes: axes.to_vec() })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return kernels::invalid_op("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Axis { op: "concat", axis, rank: base.len() });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (p, q))| i != axis && p != q) {
                return shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push("concat", shape, data, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis { op: "narrow", axis, rank: shape.len() });
        }
        if len == 0 || start + len > shape[axis] {
            return shape_err("narrow", format!("[{start}, {}) of extent {}", start + len, shape[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push("narrow", out_shape, data, Op::Narrow { a, axis, start })
    }

    // ---- reductions -----------------------------------------------------------

    /// Reduces over `axes`, keeping them as extent-1 axes.
    ///
    /// Max routes its gradient to the lowest flat index among tied maxima.
    pub fn reduce(&mut self, a: Var, axes: &[usize], kind: ReduceKind) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let axes = normalize_axes("reduce", axes, shape.len())?;
        let (out_shape, map) = reduce_map(&shape, &axes);
        let out_n: usize = out_shape.iter().product();
        let x = self.value(a).data();
        let mut out = vec![0.0; out_n];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for (&v, &o) in x.iter().zip(&map) {
                    out[o] += v;
                }
                if kind == ReduceKind::Mean {
                    let count = (x.len() / out_n) as f64;
                    out.iter_mut().for_each(|v| *v /= count);
                }
            }
            ReduceKind::Max => {
                out.fill(f64::NEG_INFINITY);
                argmax = vec![usize::MAX; out_n];
                for (i, (&v, &o)) in x.iter().zip(&map).enumerate() {
                    if v > out[o] {
                        out[o] = v;
                        argmax[o] = i;
                    }
                }
            }
        }
        self.push("reduce", out_shape, out, Op::Reduce { a, axes, kind, argmax })
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, ReduceKind::Sum)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, ReduceKind::Mean)
    }

    pub fn max(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, ReduceKind::Max)
    }

    /// Sum of every element, as shape `[1]`.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        let s = self.sum(a, &axes)?;
        self.reshape(s, &[1])
    }

    /// Softmax normalized jointly over `axes` (max-subtracted).
    pub fn softmax_over(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.softmax_impl("softmax", a, axes, false)
    }

    pub fn log_softmax_over(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.softmax_impl("log_softmax", a, axes, true)
    }

    fn softmax_impl(&mut self, name: &'static str, a: Var, axes: &[usize], log: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let axes = normalize_axes(name, axes, shape.len())?;
        let (out_shape, map) = reduce_map(&shape, &axes);
        let groups: usize = out_shape.iter().product();
        let x = self.value(a).data();
        let mut mx = vec![f64::NEG_INFINITY; groups];
        for (&v, &o) in x.iter().zip(&map) {
            mx[o] = mx[o].max(v);
        }
        let mut sum = vec![0.0; groups];
        let mut e: Vec<f64> = x.iter().zip(&map).map(|(&v, &o)| (v - mx[o]).exp()).collect();
        for (&v, &o) in e.iter().zip(&map) {
            sum[o] += v;
        }
        if log {
            for ((y, &v), &o) in e.iter_mut().zip(x).zip(&map) {
                *y = v - mx[o] - sum[o].ln();
            }
        } else {
            for (y, &o) in e.iter_mut().zip(&map) {
                *y /= sum[o];
            }
        }
        self.push(name, shape, e, Op::Softmax { a, axes, log })
    }

    // ---- convolution and normalization ----------------------------------------

    /// 2D cross-correlation over `[N, Cin, F, T]` with weights `[Cout, Cin, kF, kT]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
        let geo = kernels::ConvGeometry::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geo.cout] {
                return shape_err("conv2d", format!("bias {:?} for {} output channels", self.shape(b), geo.cout));
            }
        }
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; geo.n * geo.cout * geo.out_plane()];
        out.par_chunks_mut(geo.cout * geo.out_plane())
            .enumerate()
            .for_each(|(n, o)| {
                let cols = geo.im2col(&xs[n * geo.in_sample()..(n + 1) * geo.in_sample()]);
                gemm(
                    geo.cout,
                    geo.k(),
                    geo.out_plane(),
                    Mat::row_major(ws, geo.k()),
                    Mat::row_major(&cols, geo.out_plane()),
                    o,
                    0.0,
                );
                if let Some(bias) = bias {
                    for (c, row) in o.chunks_mut(geo.out_plane()).enumerate() {
                        row.iter_mut().for_each(|v| *v += bias[c]);
                    }
                }
            });
        self.push("conv2d", geo.out_shape(), out, Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn batch_norm2d(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, mode: BnMode<'_>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return shape_err("batch_norm2d", format!("expected [N,C,F,T], got {shape:?}"));
        }
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(
                "batch_norm2d",
                format!("gamma {:?} / beta {:?} for {c} channels", self.shape(gamma), self.shape(beta)),
            );
        }
        if eps <= 0.0 {
            return kernels::invalid_op("batch_norm2d", "eps must be positive");
        }
        let xs = self.value(x).data();
        let count = (n * plane) as f64;
        let planes = |ch: usize| (0..n).map(move |s| &xs[(s * c + ch) * plane..(s * c + ch + 1) * plane]);
        let mut mean = vec![0.0; c];
        let mut invstd = vec![0.0; c];
        let batch_stats = matches!(mode, BnMode::Train { .. });
        match mode {
            BnMode::Train { running, momentum } => {
                for ch in 0..c {
                    let m = planes(ch).map(|p| p.iter().sum::<f64>()).sum::<f64>() / count;
                    let v = planes(ch).map(|p| p.iter().map(|&u| (u - m) * (u - m)).sum::<f64>()).sum::<f64>() / count;
                    mean[ch] = m;
                    invstd[ch] = 1.0 / (v + eps).sqrt();
                    let unbiased = if count > 1.0 { v * count / (count - 1.0) } else { v };
                    running.mean[ch] = (1.0 - momentum) * running.mean[ch] + momentum * m;
                    running.var[ch] = (1.0 - momentum) * running.var[ch] + momentum * unbiased;
                }
            }
            BnMode::Infer { running } => {
                if running.mean.len() != c {
                    return shape_err("batch_norm2d", "running stats channel count");
                }
                for ch in 0..c {
                    mean[ch] = running.mean[ch];
                    invstd[ch] = 1.0 / (running.var[ch] + eps).sqrt();
                }
            }
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for (i, ((xp, hp), op)) in xs.chunks(plane).zip(xhat.chunks_mut(plane)).zip(out.chunks_mut(plane)).enumerate() {
            let ch = i % c;
            let (m, is, gg, bb) = (mean[ch], invstd[ch], g[ch], bt[ch]);
            for ((&v, h), o) in xp.iter().zip(hp.iter_mut()).zip(op.iter_mut()) {
                *h = (v - m) * is;
                *o = gg * *h + bb;
            }
        }
        self.push(
            "batch_norm2d",
            shape,
            out,
            Op::BatchNorm { x, gamma, beta, xhat, invstd, batch_stats },
        )
    }

    /// Average pooling onto a fixed `[out_f, out_t]` grid with adaptive bins.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_f: usize, out_t: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || out_f == 0 || out_t == 0 {
            return shape_err("adaptive_avg_pool2d", format!("{shape:?} -> [{out_f}, {out_t}]"));
        }
        let pool = kernels::AdaptivePool::new(shape[2], shape[3], out_f, out_t);
        let out = pool.forward(self.value(x).data(), shape[0] * shape[1]);
        self.push("adaptive_avg_pool2d", vec![shape[0], shape[1], out_f, out_t], out, Op::AdaptiveAvgPool { x })
    }

    // ---- backward ---------------------------------------------------------------

    /// Propagates gradients from a `[1]`-shaped loss to every reachable node
    /// that requires them. Leaf gradients are retained for [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.shape(loss) != [1] {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            let contributions = self.local_grads(i, &gout);
            for (v, g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Unary { a, kind } => {
                let x = self.value(*a).data();
                let g = gout
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&d, (&xv, &yv))| d * unary_derivative(*kind, xv, yv))
                    .collect();
                vec![(*a, g)]
            }
            Op::Binary { a, b, kind } => self.binary_grads(*a, *b, *kind, gout),
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut out = Vec::new();
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, Mat::row_major(gout, n), Mat::transposed(self.value(*b).data(), n), &mut ga, 0.0);
                    out.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, Mat::transposed(self.value(*a).data(), k), Mat::row_major(gout, n), &mut gb, 0.0);
                    out.push((*b, gb));
                }
                out
            }
            Op::Bmm { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let mut out = Vec::new();
                if self.wants(*a) {
                    let mut ga = vec![0.0; bs * m * k];
                    for (s, g) in ga.chunks_mut(m * k).enumerate() {
                        gemm(
                            m,
                            n,
                            k,
                            Mat::row_major(&gout[s * m * n..(s + 1) * m * n], n),
                            Mat::transposed(&xb[s * k * n..(s + 1) * k * n], n),
                            g,
                            0.0,
                        );
                    }
                    out.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; bs * k * n];
                    for (s, g) in gb.chunks_mut(k * n).enumerate() {
                        gemm(
                            k,
                            m,
                            n,
                            Mat::transposed(&xa[s * m * k..(s + 1) * m * k], k),
                            Mat::row_major(&gout[s * m * n..(s + 1) * m * n], n),
                            g,
                            0.0,
                        );
                    }
                    out.push((*b, gb));
                }
                out
            }
            Op::Reshape { a } => vec![(*a, gout.to_vec())],
            Op::Permute { a, axes } => {
                let map = permute_map(self.shape(*a), axes);
                let mut g = vec![0.0; gout.len()];
                for (&src, &d) in map.iter().zip(gout) {
                    g[src] += d;
                }
                vec![(*a, g)]
            }
            Op::Reduce { a, axes, kind, argmax } => {
                let shape = self.shape(*a);
                let n = self.value(*a).numel();
                let g = match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let (_, map) = reduce_map(shape, axes);
                        let scale = if *kind == ReduceKind::Mean { (gout.len() as f64) / (n as f64) } else { 1.0 };
                        map.iter().map(|&o| gout[o] * scale).collect()
                    }
                    ReduceKind::Max => {
                        let mut g = vec![0.0; n];
                        for (&idx, &d) in argmax.iter().zip(gout) {
                            g[idx] += d;
                        }
                        g
                    }
                };
                vec![(*a, g)]
            }
            Op::Softmax { a, axes, log } => {
                let (out_shape, map) = reduce_map(self.shape(*a), axes);
                let groups: usize = out_shape.iter().product();
                let mut acc = vec![0.0; groups];
                let g = if *log {
                    for (&d, &o) in gout.iter().zip(&map) {
                        acc[o] += d;
                    }
                    gout.iter().zip(y).zip(&map).map(|((&d, &yv), &o)| d - yv.exp() * acc[o]).collect()
                } else {
                    for ((&d, &yv), &o) in gout.iter().zip(y).zip(&map) {
                        acc[o] += d * yv;
                    }
                    gout.iter().zip(y).zip(&map).map(|((&d, &yv), &o)| yv * (d - acc[o])).collect()
                };
                vec![(*a, g)]
            }
            Op::Conv2d { x, w, b, stride, pad } => self.conv_grads(*x, *w, *b, *stride, *pad, gout),
            Op::BatchNorm { x, gamma, beta, xhat, invstd, batch_stats } => {
                let shape = self.shape(*x);
                let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (i, (dp, hp)) in gout.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                    let ch = i % c;
                    let (mut sg, mut sb) = (0.0, 0.0);
                    for (&d, &h) in dp.iter().zip(hp) {
                        sg += d * h;
                        sb += d;
                    }
                    dgamma[ch] += sg;
                    dbeta[ch] += sb;
                }
                let count = (n * plane) as f64;
                let mut dx = vec![0.0; gout.len()];
                for (i, ((dp, hp), xp)) in gout.chunks(plane).zip(xhat.chunks(plane)).zip(dx.chunks_mut(plane)).enumerate() {
                    let ch = i % c;
                    let k = gam[ch] * invstd[ch];
                    if *batch_stats {
                        let (mb, mg) = (dbeta[ch] / count, dgamma[ch] / count);
                        for ((&d, &h), o) in dp.iter().zip(hp).zip(xp.iter_mut()) {
                            *o = k * (d - mb - h * mg);
                        }
                    } else {
                        for (&d, o) in dp.iter().zip(xp.iter_mut()) {
                            *o = k * d;
                        }
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::AdaptiveAvgPool { x } => {
                let s = self.shape(*x);
                let out_s = node.value.shape();
                let pool = kernels::AdaptivePool::new(s[2], s[3], out_s[2], out_s[3]);
                vec![(*x, pool.backward(gout, s[0] * s[1]))]
            }
            Op::Concat { inputs, axis } => {
                let base = node.value.shape();
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let total = base[*axis] * inner;
                let mut offset = 0;
                let mut out = Vec::with_capacity(inputs.len());
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    let mut g = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        g.extend_from_slice(&gout[o * total + offset..o * total + offset + len]);
                    }
                    offset += len;
                    out.push((v, g));
                }
                out
            }
            Op::Narrow { a, axis, start } => {
                let shape = self.shape(*a);
                let len = node.value.shape()[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut g = vec![0.0; self.value(*a).numel()];
                for o in 0..outer {
                    let dst = (o * shape[*axis] + start) * inner;
                    g[dst..dst + len * inner].copy_from_slice(&gout[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*a, g)]
            }
        }
    }

    fn binary_grads(&self, a: Var, b: Var, kind: Binary, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let same = self.shape(a) == self.shape(b);
        let map: Vec<usize> = if same {
            (0..xa.len()).collect()
        } else if let Some(inner) = trailing_broadcast(self.shape(a), self.shape(b)) {
            (0..xa.len()).map(|i| i / inner).collect()
        } else {
            broadcast_map(self.shape(a), self.shape(b))
        };
        let mut out = Vec::new();
        if self.wants(a) {
            let ga = match kind {
                Binary::Add | Binary::Sub => gout.to_vec(),
                Binary::Mul => gout.iter().zip(&map).map(|(&d, &j)| d * xb[j]).collect(),
                Binary::Div => gout.iter().zip(&map).map(|(&d, &j)| d / xb[j]).collect(),
            };
            out.push((a, ga));
        }
        if self.wants(b) {
            let mut gb = vec![0.0; xb.len()];
            for (i, (&d, &j)) in gout.iter().zip(&map).enumerate() {
                gb[j] += match kind {
                    Binary::Add => d,
                    Binary::Sub => -d,
                    Binary::Mul => d * xa[i],
                    Binary::Div => -d * xa[i] / (xb[j] * xb[j]),
                };
            }
            out.push((b, gb));
        }
        out
    }

    fn conv_grads(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
        gout: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let geo = kernels::ConvGeometry::new(self.shape(x), self.shape(w), stride, pad)
            .expect("geometry validated in forward");
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let (want_x, want_w) = (self.wants(x), self.wants(w));
        let plane = geo.out_plane();
        let mut dx = vec![0.0; if want_x { xs.len() } else { 0 }];
        let per_sample = |n: usize, dxn: Option<&mut [f64]>| -> Option<Vec<f64>> {
            let go = &gout[n * geo.cout * plane..(n + 1) * geo.cout * plane];
            if let Some(dxn) = dxn {
                let mut dcols = vec![0.0; geo.k() * plane];
                gemm(geo.k(), geo.cout, plane, Mat::transposed(ws, geo.k()), Mat::row_major(go, plane), &mut dcols, 0.0);
                geo.col2im(&dcols, dxn);
            }
            want_w.then(|| {
                let cols = geo.im2col(&xs[n * geo.in_sample()..(n + 1) * geo.in_sample()]);
                let mut dw = vec![0.0; geo.cout * geo.k()];
                gemm(geo.cout, plane, geo.k(), Mat::row_major(go, plane), Mat::transposed(&cols, plane), &mut dw, 0.0);
                dw
            })
        };
        let dws: Vec<Option<Vec<f64>>> = if want_x {
            dx.par_chunks_mut(geo.in_sample())
                .enumerate()
                .map(|(n, dxn)| per_sample(n, Some(dxn)))
                .collect()
        } else {
            (0..geo.n).into_par_iter().map(|n| per_sample(n, None)).collect()
        };
        let mut out = Vec::new();
        if want_x {
            out.push((x, dx));
        }
        if want_w {
            // Summed in sample order so the result is independent of thread count.
            let mut dw = vec![0.0; ws.len()];
            for d in dws.into_iter().flatten() {
                dw.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
            }
            out.push((w, dw));
        }
        if let Some(b) = b.filter(|&b| self.wants(b)) {
            let mut db = vec![0.0; geo.cout];
            for (i, row) in gout.chunks(plane).enumerate() {
                db[i % geo.cout] += row.iter().sum::<f64>();
            }
            out.push((b, db));
        }
        out
    }
}

fn apply_unary(kind: Unary, v: f64) -> f64 {
    match kind {
        Unary::Act(Activation::Relu) => v.max(0.0),
        Unary::Act(Activation::Tanh) => v.tanh(),
        Unary::Act(Activation::Sigmoid) => sigmoid(v),
        Unary::Exp => v.exp(),
        Unary::Log => v.ln(),
        Unary::Sqrt => v.sqrt(),
        Unary::Square => v * v,
        Unary::ClampMin(c) => v.max(c),
        Unary::Scale(c) => v * c,
        Unary::Shift(c) => v + c,
        Unary::Custom { f, .. } => f(v),
    }
}

fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Act(Activation::Relu) => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Act(Activation::Tanh) => 1.0 - y * y,
        Unary::Act(Activation::Sigmoid) => y * (1.0 - y),
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Sqrt => 0.5 / y,
        Unary::Square => 2.0 * x,
        Unary::ClampMin(c) => {
            if x > c {
                1.0
            } else {
                0.0
            }
        }
        Unary::Scale(c) => c,
        Unary::Shift(_) => 1.0,
        Unary::Custom { df, .. } => df(x),
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn check_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(&p, &q)| q != p && q != 1) {
        return shape_err(op, format!("{b:?} does not broadcast onto {a:?}"));
    }
    Ok(())
}

fn normalize_axes(op: &'static str, axes: &[usize], rank: usize) -> Result<Vec<usize>> {
    if axes.is_empty() {
        return Err(Error::EmptyAxes { op });
    }
    if let Some(&axis) = axes.iter().find(|&&ax| ax >= rank) {
        return Err(Error::Axis { op, axis, rank });
    }
    let mut v = axes.to_vec();
    v.sort_unstable();
    v.dedup();
    Ok(v)
}

/// Block length when `b` matches `a` on leading axes and is 1 on the rest.
fn trailing_broadcast(a: &[usize], b: &[usize]) -> Option<usize> {
    let k = b.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
    (a[..k] == b[..k]).then(|| a[k..].iter().product())
}

/// For each element of `a_shape`, the flat index of the broadcast element of `b_shape`.
fn broadcast_map(a_shape: &[usize], b_shape: &[usize]) -> Vec<usize> {
    let bs = strides(b_shape);
    let eff: Vec<usize> = b_shape.iter().zip(&bs).map(|(&d, &s)| if d == 1 { 0 } else { s }).collect();
    index_map(a_shape, &eff)
}

fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect();
    let map = broadcast_map(shape, &out_shape);
    (out_shape, map)
}

/// For each output element of a permutation, the flat index it reads from.
fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let eff: Vec<usize> = axes.iter().map(|&ax| s[ax]).collect();
    index_map(&out_shape, &eff)
}
