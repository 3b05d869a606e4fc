//! A Wengert-list tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to run its adjoint. `Graph::backward` walks the list once in reverse.
//! A graph is meant to be owned by one thread; independent graphs can be
//! evaluated concurrently against a shared [`ParamStore`](super::ParamStore).

use std::cell::RefCell;
use std::sync::Arc;

use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize, BroadcastMaps),
    Sub(usize, usize, BroadcastMaps),
    Mul(usize, usize, BroadcastMaps),
    Scale(usize, f64),
    MatMul(usize, usize, MatMulDims),
    MatMulT(usize, usize, MatMulDims),
    Reshape(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(usize),
    Sigmoid(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        src: usize,
        axis: usize,
        start: usize,
    },
    AvgPool2 {
        src: usize,
        h: usize,
        w: usize,
    },
    Upsample2 {
        src: usize,
        h: usize,
        w: usize,
    },
}

/// Output-index to operand-index maps; `None` means the operand already has
/// the output shape.
#[derive(Debug)]
struct BroadcastMaps {
    a: Option<Vec<usize>>,
    b: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug)]
struct MatMulDims {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&self, t: impl Into<Arc<Tensor>>) -> Var<'_> {
        self.leaf(t.into(), true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, t: impl Into<Arc<Tensor>>) -> Var<'_> {
        self.leaf(t.into(), false)
    }

    fn leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, parents: &[usize]) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar output. Only leaves keep their gradients.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(output.graph, self), "variable belongs to another graph");
        let nodes = self.nodes.borrow();
        if nodes[output.id].value.len() != 1 {
            return Err(shape_err(
                "backward",
                format!("output must be scalar, got shape {:?}", nodes[output.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        grads[output.id] = Some(vec![1.0]);
        let mut leaves = Vec::new();

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            let wants = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => {
                    leaves.push((id, g));
                    continue;
                }
                Op::Add(a, b, maps) | Op::Sub(a, b, maps) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if wants(*a) {
                        let ga = slot(&mut grads, *a, val(*a).len());
                        scatter(ga, &g, maps.a.as_deref(), |gi, _| gi);
                    }
                    if wants(*b) {
                        let gb = slot(&mut grads, *b, val(*b).len());
                        scatter(gb, &g, maps.b.as_deref(), |gi, _| sign * gi);
                    }
                }
                Op::Mul(a, b, maps) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    if wants(*a) {
                        let ga = slot(&mut grads, *a, av.len());
                        let bm = maps.b.as_deref();
                        scatter(ga, &g, maps.a.as_deref(), |gi, i| gi * bv[at(bm, i)]);
                    }
                    if wants(*b) {
                        let gb = slot(&mut grads, *b, bv.len());
                        let am = maps.a.as_deref();
                        scatter(gb, &g, maps.b.as_deref(), |gi, i| gi * av[at(am, i)]);
                    }
                }
                Op::Scale(a, s) => {
                    if wants(*a) {
                        let ga = slot(&mut grads, *a, g.len());
                        for (x, &gi) in ga.iter_mut().zip(&g) {
                            *x += s * gi;
                        }
                    }
                }
                Op::MatMul(a, b, d) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    let (m, k, n) = (d.m, d.k, d.n);
                    if wants(*a) {
                        let ga = slot(&mut grads, *a, av.len());
                        for t in 0..d.batch {
                            let gt = &g[t * m * n..(t + 1) * m * n];
                            let bt = batch_slice(bv, d.b_batched, t, k * n);
                            let gat = batch_slice_mut(ga, d.a_batched, t, m * k);
                            gemm_nt(gt, bt, gat, m, n, k);
                        }
                    }
                    if wants(*b) {
                        let gb = slot(&mut grads, *b, bv.len());
                        for t in 0..d.batch {
                            let gt = &g[t * m * n..(t + 1) * m * n];
                            let at_ = batch_slice(av, d.a_batched, t, m * k);
                            let gbt = batch_slice_mut(gb, d.b_batched, t, k * n);
                            gemm_tn(at_, gt, gbt, m, k, n);
                        }
                    }
                }
                Op::MatMulT(a, b, d) => {
                    // c = a · bᵀ with a [m,k], b [n,k]
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    let (m, k, n) = (d.m, d.k, d.n);
                    if wants(*a) {
                        let ga = slot(&mut grads, *a, av.len());
                        for t in 0..d.batch {
                            let gt = &g[t * m * n..(t + 1) * m * n];
                            let bt = batch_slice(bv, d.b_batched, t, n * k);
                            let gat = batch_slice_mut(ga, d.a_batched, t, m * k);
                            gemm_nn(gt, bt, gat, m, n, k);
                        }
                    }
                    if wants(*b) {
                        let gb = slot(&mut grads, *b, bv.len());
                        for t in 0..d.batch {
                            let gt = &g[t * m * n..(t + 1) * m * n];
                            let at_ = batch_slice(av, d.a_batched, t, m * k);
                            let gbt = batch_slice_mut(gb, d.b_batched, t, n * k);
                            gemm_tn(gt, at_, gbt, m, n, k);
                        }
                    }
                }
                Op::Reshape(a) => {
                    if wants(*a) {
                        let ga = slot(&mut grads, *a, g.len());
                        for (x, &gi) in ga.iter_mut().zip(&g) {
                            *x += gi;
                        }
                    }
                }
                Op::Softmax(a) => {
                    if wants(*a) {
                        let y = node.value.data();
                        let cols = node.value.last_dim();
                        let ga = slot(&mut grads, *a, y.len());
                        for ((yr, gr), gar) in y
                            .chunks_exact(cols)
                            .zip(g.chunks_exact(cols))
                            .zip(ga.chunks_exact_mut(cols))
                        {
                            let inner = dot(yr, gr);
                            for j in 0..cols {
                                gar[j] += yr[j] * (gr[j] - inner);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gamma = val(*gain).data();
                    let d = gamma.len();
                    if wants(*gain) {
                        let gg = slot(&mut grads, *gain, d);
                        for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                gg[j] += gr[j] * xr[j];
                            }
                        }
                    }
                    if wants(*bias) {
                        let gb = slot(&mut grads, *bias, d);
                        for gr in g.chunks_exact(d) {
                            for j in 0..d {
                                gb[j] += gr[j];
                            }
                        }
                    }
                    if wants(*x) {
                        let gx = slot(&mut grads, *x, g.len());
                        let mut dxhat = vec![0.0; d];
                        for (row, ((gr, xr), gxr)) in g
                            .chunks_exact(d)
                            .zip(xhat.chunks_exact(d))
                            .zip(gx.chunks_exact_mut(d))
                            .enumerate()
                        {
                            for j in 0..d {
                                dxhat[j] = gr[j] * gamma[j];
                            }
                            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                            let mean_dx = dot(&dxhat, xr) / d as f64;
                            let r = rstd[row];
                            for j in 0..d {
                                gxr[j] += r * (dxhat[j] - mean_d - xr[j] * mean_dx);
                            }
                        }
                    }
                }
                Op::Gelu(a) => {
                    if wants(*a) {
                        let xv = val(*a).data();
                        let ga = slot(&mut grads, *a, xv.len());
                        for ((gx, &x), &gi) in ga.iter_mut().zip(xv).zip(&g) {
                            *gx += gi * gelu_grad(x);
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    if wants(*a) {
                        let y = node.value.data();
                        let ga = slot(&mut grads, *a, y.len());
                        for ((gx, &yi), &gi) in ga.iter_mut().zip(y).zip(&g) {
                            *gx += gi * yi * (1.0 - yi);
                        }
                    }
                }
                Op::Sum(a) | Op::Mean(a) => {
                    if wants(*a) {
                        let n = val(*a).len();
                        let scale = if matches!(node.op, Op::Mean(_)) {
                            g[0] / n as f64
                        } else {
                            g[0]
                        };
                        let ga = slot(&mut grads, *a, n);
                        for x in ga.iter_mut() {
                            *x += scale;
                        }
                    }
                }
                Op::SumLast(a) => {
                    if wants(*a) {
                        let cols = val(*a).last_dim();
                        let ga = slot(&mut grads, *a, g.len() * cols);
                        for (gar, &gi) in ga.chunks_exact_mut(cols).zip(&g) {
                            for x in gar {
                                *x += gi;
                            }
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    let shape = node.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let total = shape[*axis] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let width = val(p).shape()[*axis] * inner;
                        if wants(p) {
                            let gp = slot(&mut grads, p, outer * width);
                            for o in 0..outer {
                                let src = &g[o * total + offset..o * total + offset + width];
                                for (x, &s) in gp[o * width..(o + 1) * width].iter_mut().zip(src) {
                                    *x += s;
                                }
                            }
                        }
                        offset += width;
                    }
                }
                Op::Slice { src, axis, start } => {
                    if wants(*src) {
                        let in_shape = val(*src).shape().to_vec();
                        let out_shape = node.value.shape();
                        let outer: usize = in_shape[..*axis].iter().product();
                        let inner: usize = in_shape[axis + 1..].iter().product();
                        let in_w = in_shape[*axis] * inner;
                        let out_w = out_shape[*axis] * inner;
                        let gs = slot(&mut grads, *src, outer * in_w);
                        for o in 0..outer {
                            let dst = &mut gs[o * in_w + start * inner..o * in_w + start * inner + out_w];
                            for (x, &s) in dst.iter_mut().zip(&g[o * out_w..(o + 1) * out_w]) {
                                *x += s;
                            }
                        }
                    }
                }
                Op::AvgPool2 { src, h, w } => {
                    if wants(*src) {
                        let d = node.value.last_dim();
                        let (oh, ow) = (h / 2, w / 2);
                        let gs = slot(&mut grads, *src, h * w * d);
                        for y in 0..oh {
                            for x in 0..ow {
                                let gr = &g[(y * ow + x) * d..(y * ow + x + 1) * d];
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let s = ((2 * y + dy) * w + 2 * x + dx) * d;
                                    for j in 0..d {
                                        gs[s + j] += 0.25 * gr[j];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Upsample2 { src, h, w } => {
                    if wants(*src) {
                        let d = node.value.last_dim();
                        let ow = 2 * w;
                        let gs = slot(&mut grads, *src, h * w * d);
                        for y in 0..2 * h {
                            for x in 0..ow {
                                let s = ((y / 2) * w + x / 2) * d;
                                let gr = &g[(y * ow + x) * d..(y * ow + x + 1) * d];
                                for j in 0..d {
                                    gs[s + j] += gr[j];
                                }
                            }
                        }
                    }
                }
            }
        }

        let grads = leaves
            .into_iter()
            .map(|(id, g)| {
                let shape = nodes[id].value.shape().to_vec();
                (id, Tensor::from_parts(shape, g))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn at(map: Option<&[usize]>, i: usize) -> usize {
    map.map_or(i, |m| m[i])
}

fn scatter(dst: &mut [f64], g: &[f64], map: Option<&[usize]>, f: impl Fn(f64, usize) -> f64) {
    match map {
        None => {
            for (i, (x, &gi)) in dst.iter_mut().zip(g).enumerate() {
                *x += f(gi, i);
            }
        }
        Some(m) => {
            for (i, &gi) in g.iter().enumerate() {
                dst[m[i]] += f(gi, i);
            }
        }
    }
}

fn batch_slice(data: &[f64], batched: bool, t: usize, size: usize) -> &[f64] {
    if batched {
        &data[t * size..(t + 1) * size]
    } else {
        &data[..size]
    }
}

fn batch_slice_mut(data: &mut [f64], batched: bool, t: usize, size: usize) -> &mut [f64] {
    if batched {
        &mut data[t * size..(t + 1) * size]
    } else {
        &mut data[..size]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numpy-style broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn broadcast_map(src: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    if src == out {
        return None;
    }
    let n: usize = out.iter().product();
    let rank = out.len();
    let offset = rank - src.len();
    // Stride of each output axis inside the source, zero where broadcast.
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[i + offset] = s;
        }
        s *= src[i];
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            cur += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            cur -= strides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    Some(map)
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn last_dim(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.last_dim()
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(std::ptr::eq(self.graph, other.graph), "variables from different graphs");
    }

    fn binary(
        &self,
        other: &Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: fn(usize, usize, BroadcastMaps) -> Op,
    ) -> Result<Var<'g>> {
        self.same_graph(other);
        let (a, b) = (self.value(), other.value());
        let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            shape_err(name, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()))
        })?;
        let ma = broadcast_map(a.shape(), &out_shape);
        let mb = broadcast_map(b.shape(), &out_shape);
        let n: usize = out_shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let data = (0..n)
            .map(|i| f(ad[at(ma.as_deref(), i)], bd[at(mb.as_deref(), i)]))
            .collect();
        let op = make(self.id, other.id, BroadcastMaps { a: ma, b: mb });
        self.graph
            .push(name, Tensor::from_parts(out_shape, data), op, &[self.id, other.id])
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn scale(&self, s: f64) -> Result<Var<'g>> {
        let v = self.value().map(|x| x * s);
        self.graph.push("scale", v, Op::Scale(self.id, s), &[self.id])
    }

    fn matmul_dims(
        name: &'static str,
        a: &[usize],
        b: &[usize],
        transpose_b: bool,
    ) -> Result<(MatMulDims, Vec<usize>)> {
        if a.len() < 2 || b.len() < 2 {
            return Err(shape_err(name, format!("need rank >= 2, got {a:?} and {b:?}")));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (kb, n) = if transpose_b {
            (b[b.len() - 1], b[b.len() - 2])
        } else {
            (b[b.len() - 2], b[b.len() - 1])
        };
        if k != kb {
            return Err(shape_err(name, format!("inner dimensions differ: {a:?} x {b:?}")));
        }
        let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let (pa, pb): (usize, usize) = (ba.iter().product(), bb.iter().product());
        let batch_dims = if ba == bb || bb.is_empty() || pb == 1 {
            ba.to_vec()
        } else if ba.is_empty() || pa == 1 {
            bb.to_vec()
        } else {
            return Err(shape_err(name, format!("batch dimensions differ: {a:?} x {b:?}")));
        };
        let batch = batch_dims.iter().product::<usize>().max(1);
        let mut out = batch_dims;
        out.extend([m, n]);
        Ok((
            MatMulDims {
                batch,
                a_batched: pa == batch && batch > 1,
                b_batched: pb == batch && batch > 1,
                m,
                k,
                n,
            },
            out,
        ))
    }

    /// Batched `[.., m, k] × [.., k, n]`; a rank-2 operand broadcasts over
    /// the other's leading dimensions.
    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other);
        let (a, b) = (self.value(), other.value());
        let (d, out_shape) = Self::matmul_dims("matmul", a.shape(), b.shape(), false)?;
        let mut out = vec![0.0; d.batch * d.m * d.n];
        for t in 0..d.batch {
            gemm_nn(
                batch_slice(a.data(), d.a_batched, t, d.m * d.k),
                batch_slice(b.data(), d.b_batched, t, d.k * d.n),
                &mut out[t * d.m * d.n..(t + 1) * d.m * d.n],
                d.m,
                d.k,
                d.n,
            );
        }
        self.graph.push(
            "matmul",
            Tensor::from_parts(out_shape, out),
            Op::MatMul(self.id, other.id, d),
            &[self.id, other.id],
        )
    }

    /// `self · otherᵀ` over the last two axes.
    pub fn matmul_t(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other);
        let (a, b) = (self.value(), other.value());
        let (d, out_shape) = Self::matmul_dims("matmul_t", a.shape(), b.shape(), true)?;
        let mut out = vec![0.0; d.batch * d.m * d.n];
        for t in 0..d.batch {
            gemm_nt(
                batch_slice(a.data(), d.a_batched, t, d.m * d.k),
                batch_slice(b.data(), d.b_batched, t, d.n * d.k),
                &mut out[t * d.m * d.n..(t + 1) * d.m * d.n],
                d.m,
                d.k,
                d.n,
            );
        }
        self.graph.push(
            "matmul_t",
            Tensor::from_parts(out_shape, out),
            Op::MatMulT(self.id, other.id, d),
            &[self.id, other.id],
        )
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'g>> {
        let v = (*self.value()).clone().reshape(shape)?;
        self.graph.push("reshape", v, Op::Reshape(self.id), &[self.id])
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&self) -> Result<Var<'g>> {
        let x = self.value();
        let cols = x.last_dim();
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(cols) {
            softmax_in_place(row);
        }
        self.graph.push(
            "softmax",
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::Softmax(self.id),
            &[self.id],
        )
    }

    /// LayerNorm over the last axis with affine `gain`/`bias` of that width.
    pub fn layer_norm(&self, gain: &Var<'g>, bias: &Var<'g>, eps: f64) -> Result<Var<'g>> {
        self.same_graph(gain);
        self.same_graph(bias);
        let x = self.value();
        let (gv, bv) = (gain.value(), bias.value());
        let d = x.last_dim();
        if gv.len() != d || bv.len() != d {
            return Err(shape_err(
                "layer_norm",
                format!("feature width {d}, gain {:?}, bias {:?}", gv.shape(), bv.shape()),
            ));
        }
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let xr = &x.data()[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (xr[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        self.graph.push(
            "layer_norm",
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            &[self.id, gain.id, bias.id],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Var<'g>> {
        let v = self.value().map(gelu);
        self.graph.push("gelu", v, Op::Gelu(self.id), &[self.id])
    }

    /// Logistic function, evaluated without overflow for either sign.
    pub fn sigmoid(&self) -> Result<Var<'g>> {
        let v = self.value().map(sigmoid);
        self.graph.push("sigmoid", v, Op::Sigmoid(self.id), &[self.id])
    }

    pub fn sum(&self) -> Result<Var<'g>> {
        let v = Tensor::scalar(self.value().sum());
        self.graph.push("sum", v, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'g>> {
        let x = self.value();
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        self.graph.push("mean", v, Op::Mean(self.id), &[self.id])
    }

    /// Sum over the last axis, keeping it with width 1.
    pub fn sum_last(&self) -> Result<Var<'g>> {
        let x = self.value();
        let cols = x.last_dim();
        let data = x.data().chunks_exact(cols).map(|r| r.iter().sum()).collect();
        let mut shape = x.shape().to_vec();
        if let Some(last) = shape.last_mut() {
            *last = 1;
        } else {
            shape.push(1);
        }
        self.graph
            .push("sum_last", Tensor::from_parts(shape, data), Op::SumLast(self.id), &[self.id])
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let in_w = shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * in_w + start * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.graph.push(
            "slice",
            Tensor::from_parts(out_shape, data),
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
            &[self.id],
        )
    }

    /// 2×2 average pooling of a `[h*w, d]` token grid.
    pub fn avg_pool2(&self, h: usize, w: usize) -> Result<Var<'g>> {
        let x = self.value();
        let d = x.last_dim();
        if x.shape() != [h * w, d] || h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("avg_pool2", format!("{:?} as {h}x{w} grid", x.shape())));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; oh * ow * d];
        for y in 0..oh {
            for xx in 0..ow {
                let o = &mut out[(y * ow + xx) * d..(y * ow + xx + 1) * d];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = ((2 * y + dy) * w + 2 * xx + dx) * d;
                    for j in 0..d {
                        o[j] += 0.25 * x.data()[s + j];
                    }
                }
            }
        }
        self.graph.push(
            "avg_pool2",
            Tensor::from_parts(vec![oh * ow, d], out),
            Op::AvgPool2 { src: self.id, h, w },
            &[self.id],
        )
    }

    /// Nearest-neighbour 2× upsampling of a `[h*w, d]` token grid.
    pub fn upsample2(&self, h: usize, w: usize) -> Result<Var<'g>> {
        let x = self.value();
        let d = x.last_dim();
        if x.shape() != [h * w, d] {
            return Err(shape_err("upsample2", format!("{:?} as {h}x{w} grid", x.shape())));
        }
        let ow = 2 * w;
        let mut out = Vec::with_capacity(4 * h * w * d);
        for y in 0..2 * h {
            for xx in 0..ow {
                let s = ((y / 2) * w + xx / 2) * d;
                out.extend_from_slice(&x.data()[s..s + d]);
            }
        }
        self.graph.push(
            "upsample2",
            Tensor::from_parts(vec![4 * h * w, d], out),
            Op::Upsample2 { src: self.id, h, w },
            &[self.id],
        )
    }
}

/// Concatenate along `axis`; all other dimensions must agree.
pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err("concat", "no inputs"))?;
    let graph = first.graph;
    let values: Vec<Arc<Tensor>> = parts
        .iter()
        .map(|p| {
            first.same_graph(p);
            p.value()
        })
        .collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(shape_err("concat", format!("axis {axis} out of range for {base:?}")));
    }
    for v in &values {
        let s = v.shape();
        if s.len() != base.len()
            || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y)
        {
            return Err(shape_err("concat", format!("{base:?} vs {s:?} on axis {axis}")));
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let total_axis: usize = values.iter().map(|v| v.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for v in &values {
            let w = v.shape()[axis] * inner;
            data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = base;
    shape[axis] = total_axis;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    graph.push(
        "concat",
        Tensor::from_parts(shape, data),
        Op::Concat {
            parts: ids.clone(),
            axis,
        },
        &ids,
    )
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Leaf gradients from one backward sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<(usize, Tensor)>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads
            .iter()
            .find(|(id, _)| *id == var.id)
            .map(|(_, t)| t)
    }

    /// Gradient of `var`, or zeros shaped like it when it did not influence
    /// the output.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}
