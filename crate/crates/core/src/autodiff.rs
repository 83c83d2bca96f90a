//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order. [`Tape::backward`] walks that list in reverse, so the topological
//! order needed by the chain rule is the recording order itself. A new tape is
//! built for every forward pass.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Affine(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    MatMul(Var, Var),
    Transpose(Var),
    Linear(Var, Var, Var),
    ChannelMul(Var, Var),
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    GridConv2d {
        x: Var,
        k: Var,
        b: Var,
        grid: usize,
        pad: (usize, usize),
    },
    MaxPool(Var, Vec<usize>),
    GlobalAvgPool(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros of the value's shape
    /// when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::Numerical(format!(
                "operation {} produced a non-finite value",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a differentiable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(value, op, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(a).map(f);
        let rg = self.requires(a);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scalar_mul(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    /// `scale·a + shift`.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Result<Var> {
        self.unary(a, |x| x * scale + shift, Op::Affine(a, scale))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| v <= T::zero()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.requires(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = T::from_usize(self.value(a).len()).unwrap();
        let s = self.sum(a)?;
        self.scalar_mul(s, T::one() / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.requires(a);
        self.push(value, Op::Reshape(a), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat(&values, axis)?;
        let rg = parts.iter().any(|&v| self.requires(v));
        self.push(value, Op::Concat(parts.to_vec(), axis), rg)
    }

    pub fn slice(&mut self, a: Var, axis: usize, range: Range<usize>) -> Result<Var> {
        let start = range.start;
        let value = self.value(a).slice(axis, range)?;
        let rg = self.requires(a);
        self.push(value, Op::Slice(a, axis, start), rg)
    }

    /// Extends `axis` by repeating its first slice `before` times and its
    /// last slice `after` times.
    pub fn pad_replicate(&mut self, a: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        if before == 0 && after == 0 {
            return Ok(a);
        }
        let dim = *self
            .value(a)
            .shape()
            .get(axis)
            .ok_or_else(|| Error::shape(format!("no axis {axis} to pad")))?;
        let first = self.slice(a, axis, 0..1)?;
        let last = self.slice(a, axis, dim - 1..dim)?;
        let mut parts = vec![first; before];
        parts.push(a);
        parts.extend(std::iter::repeat_n(last, after));
        self.concat(&parts, axis)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.requires(a);
        self.push(value, Op::Transpose(a), rg)
    }

    /// `x · wᵀ + b` with x: n×in, w: out×in, b: out.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = kernels::linear(self.value(x), self.value(w), self.value(b))?;
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(value, Op::Linear(x, w, b), rg)
    }

    /// Multiplies each channel of `feat` (C×H×W) elementwise by `map` (H×W).
    pub fn broadcast_mul_channelwise(&mut self, map: Var, feat: Var) -> Result<Var> {
        let value = kernels::broadcast_mul_channelwise(self.value(map), self.value(feat))?;
        let rg = self.requires(map) || self.requires(feat);
        self.push(value, Op::ChannelMul(map, feat), rg)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        b: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let value = kernels::conv2d(self.value(x), self.value(k), self.value(b), stride, pad)?;
        let rg = self.requires(x) || self.requires(k) || self.requires(b);
        self.push(value, Op::Conv2d { x, k, b, stride, pad }, rg)
    }

    /// Independent per-cell convolution over a `grid`×`grid` partition of the map.
    pub fn grid_conv2d(&mut self, x: Var, k: Var, b: Var, grid: usize, pad: (usize, usize)) -> Result<Var> {
        let value = kernels::grid_conv2d(self.value(x), self.value(k), self.value(b), grid, pad)?;
        let rg = self.requires(x) || self.requires(k) || self.requires(b);
        self.push(value, Op::GridConv2d { x, k, b, grid, pad }, rg)
    }

    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let (value, arg) = kernels::maxpool2d(self.value(x))?;
        let rg = self.requires(x);
        self.push(value, Op::MaxPool(x, arg), rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let value = kernels::global_avg_pool(self.value(x))?;
        let rg = self.requires(x);
        self.push(value, Op::GlobalAvgPool(x), rg)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        grads.resize_with(self.nodes.len(), || None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.requires(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.accumulate(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| self.value(v);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    self.send(grads, *a, g.zip_map(val(*b), |x, y| x * y).unwrap());
                }
                if self.requires(*b) {
                    self.send(grads, *b, g.zip_map(val(*a), |x, y| x * y).unwrap());
                }
            }
            Op::Scale(a, s) | Op::Affine(a, s) => {
                let s = *s;
                self.send(grads, *a, g.map(|x| x * s));
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(out, |gi, y| gi * y * (T::one() - y)).unwrap();
                self.send(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(out, |gi, y| gi * (T::one() - y * y)).unwrap();
                self.send(grads, *a, d);
            }
            Op::Log(a) => {
                self.send(grads, *a, g.zip_map(val(*a), |gi, x| gi / x).unwrap());
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let d = g
                    .zip_map(val(*a), |gi, x| if x < lo || x > hi { T::zero() } else { gi })
                    .unwrap();
                self.send(grads, *a, d);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.send(grads, *a, Tensor::full(val(*a).shape(), gv));
            }
            Op::Reshape(a) => {
                self.send(grads, *a, g.reshape(val(*a).shape()).unwrap());
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).shape()[*axis];
                    if self.requires(p) {
                        self.send(grads, p, g.slice(*axis, start..start + w).unwrap());
                    }
                    start += w;
                }
            }
            Op::Slice(a, axis, start) => {
                if !self.requires(*a) {
                    return;
                }
                let src = val(*a).shape();
                let outer: usize = src[..*axis].iter().product();
                let inner: usize = src[*axis + 1..].iter().product();
                let (dim, width) = (src[*axis], g.shape()[*axis]);
                let mut full = Tensor::zeros(src);
                let fd = full.data_mut();
                for o in 0..outer {
                    let dst = o * dim * inner + start * inner;
                    fd[dst..dst + width * inner]
                        .copy_from_slice(&g.data()[o * width * inner..(o + 1) * width * inner]);
                }
                self.send(grads, *a, full);
            }
            Op::MatMul(a, b) => {
                if self.requires(*a) {
                    let bt = val(*b).transpose().unwrap();
                    self.send(grads, *a, kernels::matmul(g, &bt).unwrap());
                }
                if self.requires(*b) {
                    let at = val(*a).transpose().unwrap();
                    self.send(grads, *b, kernels::matmul(&at, g).unwrap());
                }
            }
            Op::Transpose(a) => {
                self.send(grads, *a, g.transpose().unwrap());
            }
            Op::Linear(x, w, b) => {
                if self.requires(*x) {
                    self.send(grads, *x, kernels::matmul(g, val(*w)).unwrap());
                }
                if self.requires(*w) {
                    let gt = g.transpose().unwrap();
                    self.send(grads, *w, kernels::matmul(&gt, val(*x)).unwrap());
                }
                if self.requires(*b) {
                    let (n, fout) = g.as_matrix().unwrap();
                    let mut gb = Tensor::zeros(&[fout]);
                    for i in 0..n {
                        for o in 0..fout {
                            gb.data_mut()[o] += g.data()[i * fout + o];
                        }
                    }
                    self.send(grads, *b, gb);
                }
            }
            Op::ChannelMul(map, feat) => {
                let (m, f) = (val(*map), val(*feat));
                let hw = m.len();
                if self.requires(*map) {
                    let mut gm = Tensor::zeros(m.shape());
                    for (gp, fp) in g.data().chunks_exact(hw).zip(f.data().chunks_exact(hw)) {
                        for ((acc, &gi), &fi) in gm.data_mut().iter_mut().zip(gp).zip(fp) {
                            *acc += gi * fi;
                        }
                    }
                    self.send(grads, *map, gm);
                }
                if self.requires(*feat) {
                    let mut gf = Vec::with_capacity(g.len());
                    for gp in g.data().chunks_exact(hw) {
                        gf.extend(gp.iter().zip(m.data()).map(|(&gi, &mi)| gi * mi));
                    }
                    self.send(grads, *feat, Tensor::from_raw(f.shape().to_vec(), gf));
                }
            }
            Op::Conv2d { x, k, b, stride, pad } => {
                let (gx, gk, gb) =
                    kernels::conv2d_backward(val(*x), val(*k), *stride, *pad, g, self.requires(*x));
                if let Some(gx) = gx {
                    self.send(grads, *x, gx);
                }
                self.send(grads, *k, gk);
                self.send(grads, *b, gb);
            }
            Op::GridConv2d { x, k, b, grid, pad } => {
                let (gx, gk, gb) = kernels::grid_conv2d_backward(
                    val(*x),
                    val(*k),
                    val(*b),
                    *grid,
                    *pad,
                    g,
                    self.requires(*x),
                );
                if let Some(gx) = gx {
                    self.send(grads, *x, gx);
                }
                self.send(grads, *k, gk);
                self.send(grads, *b, gb);
            }
            Op::MaxPool(x, arg) => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (&src, &gi) in arg.iter().zip(g.data()) {
                    gx.data_mut()[src] += gi;
                }
                self.send(grads, *x, gx);
            }
            Op::GlobalAvgPool(x) => {
                let xv = val(*x);
                let (_, h, w) = xv.as_chw().unwrap();
                let inv = T::one() / T::from_usize(h * w).unwrap();
                let mut gx = Vec::with_capacity(xv.len());
                for &gi in g.data() {
                    gx.extend(std::iter::repeat_n(gi * inv, h * w));
                }
                self.send(grads, *x, Tensor::from_raw(xv.shape().to_vec(), gx));
            }
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scalar_mul",
        Op::Affine(..) => "affine",
        Op::Sigmoid(_) => "sigmoid",
        Op::Tanh(_) => "tanh",
        Op::Log(_) => "log",
        Op::Clamp(..) => "clamp",
        Op::Sum(_) => "sum",
        Op::Reshape(_) => "reshape",
        Op::Concat(..) => "concat",
        Op::Slice(..) => "slice",
        Op::MatMul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Linear(..) => "linear",
        Op::ChannelMul(..) => "broadcast_mul_channelwise",
        Op::Conv2d { .. } => "conv2d",
        Op::GridConv2d { .. } => "grid_conv2d",
        Op::MaxPool(..) => "maxpool2d",
        Op::GlobalAvgPool(_) => "global_avg_pool",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_param_has_unit_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x), Tensor::ones(&[2, 3]));
        assert_eq!(g.wrt(s).data(), &[1.0]);
    }

    #[test]
    fn zero_times_x_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn(&[4], |i| i as f64 + 1.0));
        let y = tape.scalar_mul(x, 0.0).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn log_domain() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(tape.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[1]));
        let s = tape.sigmoid(z).unwrap();
        let t = tape.tanh(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
        assert_eq!(tape.value(t).data(), &[0.0]);
        let feat = tape.constant(Tensor::from_fn(&[3, 2, 2], |i| i as f64));
        let ones = tape.constant(Tensor::ones(&[2, 2]));
        let y = tape.broadcast_mul_channelwise(ones, feat).unwrap();
        assert_eq!(tape.value(y), tape.value(feat));
    }

    #[test]
    fn unreached_param_gets_zero_gradient_of_its_shape() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[3]));
        let unused = tape.param(Tensor::ones(&[2, 2]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::ones(&[2]));
        let x = tape.param(Tensor::full(&[2], 2.0));
        let y = tape.mul(c, x).unwrap();
        let s = tape.sum(y).unwrap();
        let mut g = tape.backward(s).unwrap();
        assert_eq!(g.take(c), Tensor::zeros(&[2]));
        assert_eq!(g.take(x), Tensor::ones(&[2]));
    }

    #[test]
    fn pad_replicate_repeats_edges() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 3, 1], |i| i as f64));
        let p = tape.pad_replicate(x, 1, 2, 1).unwrap();
        assert_eq!(tape.value(p).data(), &[0.0, 0.0, 0.0, 1.0, 2.0, 2.0]);
    }
}
