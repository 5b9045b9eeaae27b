//! Append-only computation tape.
//!
//! Every op appends one node holding its output value and the ids of its
//! inputs; ids therefore always precede their users and the tape is in
//! topological order by construction. A node is differentiable when any
//! of its inputs is. `backward` walks the tape in reverse once.
//!
//! The tape also does the activation bookkeeping used by the profiler:
//! floats created by ops are tallied per [`Scope`], and the number of
//! floats held by node values plus in-flight gradients is tracked so
//! its peak can be reported.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Attribution bucket for activation counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Scope {
    #[default]
    Other = 0,
    /// Per-sample generator work (mapping network, modulation affines).
    GenMapping = 1,
    /// Per-coordinate generator work.
    GenSynthesis = 2,
    Discriminator = 3,
    /// Patch regularization, including the frozen previous-stage generator.
    Regularizer = 4,
    Loss = 5,
}

const SCOPES: usize = 6;

/// Sparse interpolation weights: output row `r` is `Σ w · src[i]` over
/// `(i, w)` in `taps.row(r)`. A row without taps yields zeros.
#[derive(Clone, Debug, Default)]
pub struct Taps {
    offsets: Vec<usize>,
    entries: Vec<(u32, f32)>,
}

impl Taps {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            entries: Vec::new(),
        }
    }

    pub fn push_row(&mut self, taps: &[(usize, f32)]) {
        self.entries.extend(taps.iter().map(|&(i, w)| (i as u32, w)));
        self.offsets.push(self.entries.len());
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, r: usize) -> &[(u32, f32)] {
        &self.entries[self.offsets[r]..self.offsets[r + 1]]
    }

    fn max_index(&self) -> Option<u32> {
        self.entries.iter().map(|e| e.0).max()
    }
}

#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    /// `rhs` has `rows_b` rows; lhs row `r` pairs with rhs row `r / group`.
    Grouped {
        group: usize,
        cols: usize,
    },
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f32),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    LeakyRelu(Var, f32),
    Sin(Var),
    Cos(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sqrt(Var),
    SqDiffMean(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        filters: usize,
    },
    ConcatCols(Vec<Var>),
    Gather(Var, Rc<Taps>),
    RowsToNchw {
        x: Var,
        batch: usize,
        channels: usize,
        hw: usize,
    },
    AvgPool2(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    scope: Scope,
    counts: [u64; SCOPES],
    live: u64,
    peak: u64,
}

/// Gradients of a scalar loss with respect to every differentiable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.map.remove(&v.0)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn bcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        return Ok(Bcast::Same);
    }
    let (ra, ca) = a.rows_cols();
    let (rb, cb) = b.rows_cols();
    if a.shape().len() == b.shape().len() && a.shape()[1..] == b.shape()[1..] && ca == cb && ra % rb == 0 {
        return Ok(Bcast::Grouped {
            group: ra / rb,
            cols: ca,
        });
    }
    Err(Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })
}

fn zip_bcast(a: &[f32], b: &[f32], bc: Bcast, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    match bc {
        Bcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::Grouped { group, cols } => {
            let mut out = Vec::with_capacity(a.len());
            for (r, row) in a.chunks_exact(cols).enumerate() {
                let brow = &b[(r / group) * cols..(r / group + 1) * cols];
                out.extend(row.iter().zip(brow).map(|(&x, &y)| f(x, y)));
            }
            out
        }
    }
}

/// Reduces a gradient shaped like the lhs back to the rhs shape.
fn reduce_bcast(g: &[f32], rhs_len: usize, bc: Bcast) -> Vec<f32> {
    match bc {
        Bcast::Same => g.to_vec(),
        Bcast::Grouped { group, cols } => {
            let mut out = vec![0.0; rhs_len];
            for (r, row) in g.chunks_exact(cols).enumerate() {
                let dst = &mut out[(r / group) * cols..(r / group + 1) * cols];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
            out
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Tape {
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Sets the attribution scope for subsequent ops; returns the previous one.
    pub fn set_scope(&mut self, s: Scope) -> Scope {
        std::mem::replace(&mut self.scope, s)
    }

    /// Floats produced by ops while `s` was the active scope.
    pub fn activations(&self, s: Scope) -> u64 {
        self.counts[s as usize]
    }

    pub fn total_activations(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Maximum floats simultaneously held by node values and gradient buffers.
    pub fn peak_live_floats(&self) -> u64 {
        self.peak
    }

    fn bump(&mut self, n: usize) {
        self.live += n as u64;
        self.peak = self.peak.max(self.live);
    }

    fn drop_floats(&mut self, n: usize) {
        self.live -= n as u64;
    }

    /// A leaf node. `requires_grad` leaves receive gradients in `backward`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.bump(value.len());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let grad = inputs.iter().any(|v| self.nodes[v.0].grad);
        self.counts[self.scope as usize] += value.len() as u64;
        self.bump(value.len());
        self.nodes.push(Node { value, op, grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_vec(t.shape(), data)?;
        self.push(name, out, op, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut c = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut c,
            false,
        );
        self.push("matmul", Tensor::from_vec(&[m, n], c)?, Op::MatMul(a, b), &[a, b])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<(Tensor, Bcast)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = bcast(name, ta, tb)?;
        let data = zip_bcast(ta.data(), tb.data(), bc, f);
        Ok((Tensor::from_vec(ta.shape(), data)?, bc))
    }

    /// Elementwise `a + b`; `b` may have fewer rows than `a` when its row
    /// count divides `a`'s (each `b` row covers a contiguous group of `a` rows).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b, bc), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b, bc), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b, bc), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        self.unary("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f32 = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f32>() / t.len() as f32;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sums everything but the leading dim: `[r, ...] -> [r, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.rows_cols();
        let data = t.data().chunks_exact(c).map(|row| row.iter().sum()).collect();
        self.push("row_sum", Tensor::from_vec(&[r, 1], data)?, Op::RowSum(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Result<Var> {
        self.unary(
            "leaky_relu",
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary("sin", a, f32::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary("cos", a, f32::cos, Op::Cos(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    /// Square root of nonnegative input; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return invalid("sqrt of a negative value");
        }
        self.unary("sqrt", a, f32::sqrt, Op::Sqrt(a))
    }

    /// `mean((a - b)^2)` as a one-element tensor.
    pub fn sq_diff_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "sq_diff_mean",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f32>()
            / ta.len() as f32;
        self.push("sq_diff_mean", Tensor::scalar(s), Op::SqDiffMean(a, b), &[a, b])
    }

    /// 2-D cross-correlation without bias. `x: [B,C,H,W]`, `w: [F,C,k,k]`,
    /// zero padding `pad` on every side. Output side is
    /// `(H + 2·pad - k) / stride + 1`, rounded down.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let mismatch = || Error::Shape {
            op: "conv2d",
            lhs: tx.shape().to_vec(),
            rhs: tw.shape().to_vec(),
        };
        if tx.shape().len() != 4 || tw.shape().len() != 4 || stride == 0 {
            return Err(mismatch());
        }
        let (b, c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (f, c2, k, k2) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        if c != c2 || k != k2 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(mismatch());
        }
        let geom = ConvGeom {
            batch: b,
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (wd + 2 * pad - k) / stride + 1,
        };
        let cols = kernels::im2col(tx.data(), &geom);
        let rows = geom.out_rows();
        let mut out_rows = vec![0.0; rows * f];
        kernels::gemm(
            rows,
            geom.patch_len(),
            f,
            &cols,
            false,
            tw.data(),
            true,
            &mut out_rows,
            false,
        );
        let hw = geom.out_h * geom.out_w;
        let out = kernels::rows_to_nchw(&out_rows, b, f, hw);
        let t = Tensor::from_vec(&[b, f, geom.out_h, geom.out_w], out)?;
        self.push("conv2d", t, Op::Conv2d { x, w, geom, filters: f }, &[x, w])
    }

    /// Horizontal concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return invalid("concat_cols of nothing");
        };
        let rows = matrix_dims("concat_cols", self.value(first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims("concat_cols", self.value(p))?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        let t = Tensor::from_vec(&[rows, total], data)?;
        self.push("concat_cols", t, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Weighted row gather from a 2-D `src` (see [`Taps`]).
    pub fn gather(&mut self, src: Var, taps: Rc<Taps>) -> Result<Var> {
        let (r, c) = matrix_dims("gather", self.value(src))?;
        if taps.max_index().is_some_and(|m| m as usize >= r) {
            return invalid(format!("gather index out of range for {r} rows"));
        }
        let sd = self.value(src).data();
        let mut data = vec![0.0; taps.rows() * c];
        for (o, dst) in data.chunks_exact_mut(c).enumerate() {
            for &(i, w) in taps.row(o) {
                let row = &sd[i as usize * c..(i as usize + 1) * c];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d += w * v;
                }
            }
        }
        let t = Tensor::from_vec(&[taps.rows(), c], data)?;
        self.push("gather", t, Op::Gather(src, taps), &[src])
    }

    /// `[batch·side·side, C]` pixel rows to `[batch, C, side, side]`.
    pub fn rows_to_nchw(&mut self, x: Var, batch: usize, side: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = matrix_dims("rows_to_nchw", t)?;
        if r != batch * side * side {
            return Err(Error::Shape {
                op: "rows_to_nchw",
                lhs: t.shape().to_vec(),
                rhs: vec![batch, c, side, side],
            });
        }
        let hw = side * side;
        let data = kernels::rows_to_nchw(t.data(), batch, c, hw);
        let out = Tensor::from_vec(&[batch, c, side, side], data)?;
        self.push(
            "rows_to_nchw",
            out,
            Op::RowsToNchw {
                x,
                batch,
                channels: c,
                hw,
            },
            &[x],
        )
    }

    /// 2×2 box average over the trailing two dims of an NCHW tensor.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::Shape {
                op: "avg_pool2",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let d = t.data();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &d[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    let i = 2 * y * w + 2 * x;
                    out[(p * oh + y) * ow + x] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let shape = [s[0], s[1], oh, ow];
        self.push("avg_pool2", Tensor::from_vec(&shape, out)?, Op::AvgPool2(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Reverse pass from a one-element `loss`. Every differentiable leaf
    /// gets an entry, zero-filled when `loss` does not depend on it.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        let mut out = Gradients::default();
        if self.nodes[loss.0].grad {
            grads[loss.0] = Some(vec![1.0]);
            self.bump(1);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let glen = g.len();
            if let Op::Leaf = self.nodes[i].op {
                let t = Tensor::from_vec(self.nodes[i].value.shape(), g)?;
                out.map.insert(i, t);
                continue;
            }
            let contribs = self.local_grads(i, &g);
            self.drop_floats(glen);
            drop(g);
            for (v, cg) in contribs {
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, b)| *a += b),
                    slot @ None => {
                        self.live += cg.len() as u64;
                        self.peak = self.peak.max(self.live);
                        *slot = Some(cg);
                    }
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate().take(n) {
            if node.grad && matches!(node.op, Op::Leaf) && !out.map.contains_key(&i) {
                out.map.insert(i, Tensor::zeros(node.value.shape())?);
            }
        }
        // differentiable leaves created after the loss are unreachable too
        for (i, node) in self.nodes.iter().enumerate().skip(n) {
            if node.grad && matches!(node.op, Op::Leaf) {
                out.map.insert(i, Tensor::zeros(node.value.shape())?);
            }
        }
        let held: usize = out.map.values().map(Tensor::len).sum();
        self.live = self.live.saturating_sub(held as u64);
        Ok(out)
    }

    /// Gradient contributions of node `i` to those of its inputs that need one.
    fn local_grads(&self, i: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();
        let mut res = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                let nn = self.nodes[b.0].value.shape()[1];
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, nn, k, g, false, val(*b), true, &mut ga, false);
                    res.push((*a, ga));
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * nn];
                    kernels::gemm(k, m, nn, val(*a), true, g, false, &mut gb, false);
                    res.push((*b, gb));
                }
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    res.push((*a, g.to_vec()));
                }
                if needs(*b) {
                    let mut gb = reduce_bcast(g, val(*b).len(), *bc);
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    res.push((*b, gb));
                }
            }
            Op::Mul(a, b, bc) => {
                if needs(*a) {
                    res.push((*a, zip_bcast(g, val(*b), *bc, |x, y| x * y)));
                }
                if needs(*b) {
                    let prod: Vec<f32> = g.iter().zip(val(*a)).map(|(x, y)| x * y).collect();
                    res.push((*b, reduce_bcast(&prod, val(*b).len(), *bc)));
                }
            }
            Op::Scale(a, s) => res.push((*a, g.iter().map(|x| x * s).collect())),
            Op::Sum(a) => res.push((*a, vec![g[0]; val(*a).len()])),
            Op::Mean(a) => {
                let n = val(*a).len();
                res.push((*a, vec![g[0] / n as f32; n]));
            }
            Op::RowSum(a) => {
                let t = &self.nodes[a.0].value;
                let (_, c) = t.rows_cols();
                let ga = g.iter().flat_map(|&v| std::iter::repeat_n(v, c)).collect();
                res.push((*a, ga));
            }
            Op::LeakyRelu(a, slope) => {
                let ga = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { slope * gv })
                    .collect();
                res.push((*a, ga));
            }
            Op::Sin(a) => res.push((*a, g.iter().zip(val(*a)).map(|(gv, x)| gv * x.cos()).collect())),
            Op::Cos(a) => res.push((*a, g.iter().zip(val(*a)).map(|(gv, x)| -gv * x.sin()).collect())),
            Op::Sigmoid(a) => res.push((*a, g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect())),
            Op::Softplus(a) => res.push((*a, g.iter().zip(val(*a)).map(|(gv, &x)| gv * sigmoid(x)).collect())),
            Op::Sqrt(a) => {
                let ga = g
                    .iter()
                    .zip(out)
                    .map(|(gv, &y)| if y > 0.0 { gv / (2.0 * y) } else { 0.0 })
                    .collect();
                res.push((*a, ga));
            }
            Op::SqDiffMean(a, b) => {
                let n = val(*a).len() as f32;
                let d: Vec<f32> = val(*a)
                    .iter()
                    .zip(val(*b))
                    .map(|(x, y)| 2.0 * g[0] * (x - y) / n)
                    .collect();
                if needs(*b) {
                    res.push((*b, d.iter().map(|v| -v).collect()));
                }
                if needs(*a) {
                    res.push((*a, d));
                }
            }
            Op::Conv2d { x, w, geom, filters } => {
                let hw = geom.out_h * geom.out_w;
                let g_rows = kernels::nchw_to_rows(g, geom.batch, *filters, hw);
                let rows = geom.out_rows();
                let pl = geom.patch_len();
                if needs(*w) {
                    let cols = kernels::im2col(val(*x), geom);
                    let mut gw = vec![0.0; filters * pl];
                    kernels::gemm(*filters, rows, pl, &g_rows, true, &cols, false, &mut gw, false);
                    res.push((*w, gw));
                }
                if needs(*x) {
                    let mut gcols = vec![0.0; rows * pl];
                    kernels::gemm(rows, *filters, pl, &g_rows, false, val(*w), false, &mut gcols, false);
                    let mut gx = vec![0.0; val(*x).len()];
                    kernels::col2im(&gcols, geom, &mut gx);
                    res.push((*x, gx));
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let c = self.nodes[p.0].value.shape()[1];
                    if needs(p) {
                        let mut gp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + off..r * total + off + c]);
                        }
                        res.push((p, gp));
                    }
                    off += c;
                }
            }
            Op::Gather(src, taps) => {
                let c = node.value.shape()[1];
                let mut gs = vec![0.0; val(*src).len()];
                for (o, grow) in g.chunks_exact(c).enumerate() {
                    for &(i, w) in taps.row(o) {
                        let dst = &mut gs[i as usize * c..(i as usize + 1) * c];
                        for (d, &v) in dst.iter_mut().zip(grow) {
                            *d += w * v;
                        }
                    }
                }
                res.push((*src, gs));
            }
            Op::RowsToNchw { x, batch, channels, hw } => {
                res.push((*x, kernels::nchw_to_rows(g, *batch, *channels, *hw)));
            }
            Op::AvgPool2(x) => {
                let s = self.nodes[x.0].value.shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let v = 0.25 * g[(p * oh + y) * ow + xx];
                            let i = p * h * w + 2 * y * w + 2 * xx;
                            gx[i] = v;
                            gx[i + 1] = v;
                            gx[i + w] = v;
                            gx[i + w + 1] = v;
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::Reshape(x) => res.push((*x, g.to_vec())),
        }
        res.retain(|(v, _)| needs(*v));
        res
    }
}
