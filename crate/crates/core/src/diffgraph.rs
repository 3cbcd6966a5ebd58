//! Dense tensors and a reverse-mode differentiation tape.
//!
//! Every network and loss operation in the crate is composed from the
//! primitives recorded here. A [`Tape`] is an append-only arena: each call
//! such as [`Tape::conv1d_dilated`] evaluates eagerly, stores the result, and
//! returns a [`Var`] handle. [`Tape::backward`] then walks the arena once in
//! reverse and accumulates gradients for every node that depends on a leaf.
//!
//! ```
//! use icgdm::diffgraph::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.value(y).data(), &[9.0]);
//! assert_eq!(tape.grad(x).unwrap(), &[6.0]);
//! ```

#![allow(clippy::needless_range_loop)]

use std::borrow::Cow;

use crate::error::{shape_err, Error, Result};

/// Row-major array of `f64` with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(shape_err("tensor", format!("dimensions must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} holds {n} values but {} were given", data.len()),
            ));
        }
        Ok(Self { shape, data, grad: None })
    }

    /// One-dimensional tensor owning `data`.
    ///
    /// Panics if `data` is empty.
    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "tensor must hold at least one value");
        Self { shape: vec![data.len()], data, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n]).expect("zero-sized shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Installs a gradient buffer; it must match the tensor's element count.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(shape_err(
                "set_grad",
                format!("gradient has {} values, tensor has {}", grad.len(), self.data.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Mul,
}

/// How the second operand of a binary op lines up with the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs is `[C]` or `[C, 1]` against lhs `[C, L]`
    RhsPerChannel,
    /// lhs is per-channel against rhs `[C, L]`
    LhsPerChannel,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Conv1d { x: Var, w: Var, b: Var, dilation: usize },
    Dense { x: Var, w: Var, b: Var },
    Unary(Unary, Var),
    Binary(Binary, Var, Var, Broadcast),
    Scale(Var, f64),
    Reshape(Var),
    Mse(Var, Var),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records evaluated operations so gradients can be replayed backward.
///
/// Leaves may borrow tensors for the tape's lifetime (`leaf_ref`), which
/// lets many concurrent forward passes share one immutable parameter set.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input owned by the tape.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Differentiable input borrowed from the caller.
    pub fn leaf_ref(&mut self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Non-differentiable input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Constant, false)
    }

    pub fn constant_ref(&mut self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Copy of a recorded value with its gradient slot filled in.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.value(v).clone();
        t.grad = self.grad(v).map(<[f64]>::to_vec);
        t
    }

    /// Same-padded dilated cross-correlation.
    ///
    /// `x` is `[c_in, len]`, `w` is `[c_out, c_in, k]` with odd `k`, `b` is
    /// `[c_out]`. Each side is zero-padded by `(k - 1) / 2 * dilation`.
    pub fn conv1d_dilated(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 2 || ws.len() != 3 || bs.len() != 1 {
            return Err(shape_err(
                "conv1d_dilated",
                format!("expected x [c_in, len], w [c_out, c_in, k], b [c_out]; got {xs:?}, {ws:?}, {bs:?}"),
            ));
        }
        let (c_in, len) = (xs[0], xs[1]);
        let (c_out, w_in, k) = (ws[0], ws[1], ws[2]);
        if w_in != c_in {
            return Err(shape_err(
                "conv1d_dilated",
                format!("input has {c_in} channels but kernel expects {w_in}"),
            ));
        }
        if bs[0] != c_out {
            return Err(shape_err("conv1d_dilated", format!("bias {bs:?} for {c_out} output channels")));
        }
        if k % 2 == 0 {
            return Err(shape_err("conv1d_dilated", format!("kernel width {k} must be odd")));
        }
        if dilation == 0 {
            return Err(Error::Config("dilation must be positive".into()));
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let half = (k / 2) as isize;
        let mut out = vec![0.0; c_out * len];
        for o in 0..c_out {
            let row = &mut out[o * len..(o + 1) * len];
            row.iter_mut().for_each(|v| *v = bd[o]);
            for c in 0..c_in {
                let xrow = &xd[c * len..(c + 1) * len];
                for tap in 0..k {
                    let wv = wd[(o * c_in + c) * k + tap];
                    if wv == 0.0 {
                        continue;
                    }
                    let shift = (tap as isize - half) * dilation as isize;
                    let (lo, hi) = valid_range(shift, len);
                    for i in lo..hi {
                        row[i] += wv * xrow[(i as isize + shift) as usize];
                    }
                }
            }
        }
        let value = Tensor { shape: vec![c_out, len], data: out, grad: None };
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Cow::Owned(value), Op::Conv1d { x, w, b, dilation }, needs))
    }

    /// `w · x + b` for `x: [n]`, `w: [m, n]`, `b: [m]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 1 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[0] || bs[0] != ws[0] {
            return Err(shape_err(
                "dense",
                format!("expected x [n], w [m, n], b [m]; got {xs:?}, {ws:?}, {bs:?}"),
            ));
        }
        let (m, n) = (ws[0], ws[1]);
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let out: Vec<f64> = (0..m)
            .map(|r| bd[r] + wd[r * n..(r + 1) * n].iter().zip(xd).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let value = Tensor { shape: vec![m], data: out, grad: None };
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Cow::Owned(value), Op::Dense { x, w, b }, needs))
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let src = self.value(x);
        let f: fn(f64) -> f64 = match kind {
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
        };
        let value = Tensor { shape: src.shape.clone(), data: src.data.iter().map(|&v| f(v)).collect(), grad: None };
        let needs = self.needs(x);
        self.push(Cow::Owned(value), Op::Unary(kind, x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    /// Elementwise add or multiply. Operands must share a shape, or one of
    /// them must be a per-channel vector (`[C]` or `[C, 1]`) against `[C, L]`.
    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let name = match kind {
            Binary::Add => "add",
            Binary::Mul => "mul",
        };
        let mode = broadcast_mode(name, av.shape(), bv.shape())?;
        let (big, small, swapped) = match mode {
            Broadcast::Same | Broadcast::RhsPerChannel => (av, bv, false),
            Broadcast::LhsPerChannel => (bv, av, true),
        };
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Mul => x * y,
        };
        let data: Vec<f64> = if mode == Broadcast::Same {
            big.data.iter().zip(&small.data).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let len = big.shape[1];
            big.data
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = small.data[i / len];
                    if swapped {
                        f(y, x)
                    } else {
                        f(x, y)
                    }
                })
                .collect()
        };
        let value = Tensor { shape: big.shape.clone(), data, grad: None };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(value), Op::Binary(kind, a, b, mode), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let src = self.value(x);
        let value = Tensor { shape: src.shape.clone(), data: src.data.iter().map(|v| v * factor).collect(), grad: None };
        let needs = self.needs(x);
        self.push(Cow::Owned(value), Op::Scale(x, factor), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(Cow::Owned(value), Op::Reshape(x), needs))
    }

    /// Mean squared error, returned as a one-element tensor.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(shape_err("mse", format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        let n = p.numel() as f64;
        let loss = p.data.iter().zip(&t.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Cow::Owned(Tensor::scalar(loss)), Op::Mse(pred, target), needs))
    }

    /// Propagates d(loss)/d(node) to every node recorded before `loss`.
    ///
    /// Leaves that do not influence `loss` receive an all-zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match node.op {
            Op::Leaf | Op::Constant => {}
            Op::Conv1d { x, w, b, dilation } => {
                let (xv, wv) = (self.value(x), self.value(w));
                let (c_in, len) = (xv.shape[0], xv.shape[1]);
                let (c_out, k) = (wv.shape[0], wv.shape[2]);
                let half = (k / 2) as isize;
                if self.needs(b) {
                    let gb = acc(grads, b, c_out);
                    for o in 0..c_out {
                        gb[o] += g[o * len..(o + 1) * len].iter().sum::<f64>();
                    }
                }
                if self.needs(w) {
                    let gw = acc(grads, w, c_out * c_in * k);
                    for o in 0..c_out {
                        let grow = &g[o * len..(o + 1) * len];
                        for c in 0..c_in {
                            let xrow = &xv.data[c * len..(c + 1) * len];
                            for tap in 0..k {
                                let shift = (tap as isize - half) * dilation as isize;
                                let (lo, hi) = valid_range(shift, len);
                                let s: f64 = (lo..hi).map(|i| grow[i] * xrow[(i as isize + shift) as usize]).sum();
                                gw[(o * c_in + c) * k + tap] += s;
                            }
                        }
                    }
                }
                if self.needs(x) {
                    let gx = acc(grads, x, c_in * len);
                    for o in 0..c_out {
                        let grow = &g[o * len..(o + 1) * len];
                        for c in 0..c_in {
                            let gxrow = &mut gx[c * len..(c + 1) * len];
                            for tap in 0..k {
                                let wval = wv.data[(o * c_in + c) * k + tap];
                                if wval == 0.0 {
                                    continue;
                                }
                                let shift = (tap as isize - half) * dilation as isize;
                                let (lo, hi) = valid_range(shift, len);
                                for i in lo..hi {
                                    gxrow[(i as isize + shift) as usize] += wval * grow[i];
                                }
                            }
                        }
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(x), self.value(w));
                let (m, n) = (wv.shape[0], wv.shape[1]);
                if self.needs(b) {
                    let gb = acc(grads, b, m);
                    gb.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                }
                if self.needs(w) {
                    let gw = acc(grads, w, m * n);
                    for r in 0..m {
                        for (gwv, xval) in gw[r * n..(r + 1) * n].iter_mut().zip(&xv.data) {
                            *gwv += g[r] * xval;
                        }
                    }
                }
                if self.needs(x) {
                    let gx = acc(grads, x, n);
                    for r in 0..m {
                        for (gxv, wval) in gx.iter_mut().zip(&wv.data[r * n..(r + 1) * n]) {
                            *gxv += g[r] * wval;
                        }
                    }
                }
            }
            Op::Unary(kind, x) => {
                if self.needs(x) {
                    let y = &node.value.data;
                    let gx = acc(grads, x, y.len());
                    for i in 0..y.len() {
                        let d = match kind {
                            Unary::Tanh => 1.0 - y[i] * y[i],
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        };
                        gx[i] += g[i] * d;
                    }
                }
            }
            Op::Binary(kind, a, b, mode) => {
                let (big_var, small_var) = match mode {
                    Broadcast::LhsPerChannel => (b, a),
                    _ => (a, b),
                };
                let (bigv, smallv) = (self.value(big_var), self.value(small_var));
                let n = bigv.numel();
                let len = if mode == Broadcast::Same { 1 } else { bigv.shape[1] };
                // d(out)/d(big) and d(out)/d(small) at flat index i of `out`
                let small_at = |i: usize| smallv.data[if mode == Broadcast::Same { i } else { i / len }];
                if self.needs(big_var) {
                    let gbig: Vec<f64> = (0..n)
                        .map(|i| match kind {
                            Binary::Add => g[i],
                            Binary::Mul => g[i] * small_at(i),
                        })
                        .collect();
                    let dst = acc(grads, big_var, n);
                    dst.iter_mut().zip(&gbig).for_each(|(d, v)| *d += v);
                }
                if self.needs(small_var) {
                    let m = smallv.numel();
                    let mut gsmall = vec![0.0; m];
                    for i in 0..n {
                        let j = if mode == Broadcast::Same { i } else { i / len };
                        gsmall[j] += match kind {
                            Binary::Add => g[i],
                            Binary::Mul => g[i] * bigv.data[i],
                        };
                    }
                    let dst = acc(grads, small_var, m);
                    dst.iter_mut().zip(&gsmall).for_each(|(d, v)| *d += v);
                }
            }
            Op::Scale(x, factor) => {
                if self.needs(x) {
                    let gx = acc(grads, x, g.len());
                    gx.iter_mut().zip(g).for_each(|(d, v)| *d += factor * v);
                }
            }
            Op::Reshape(x) => {
                if self.needs(x) {
                    let gx = acc(grads, x, g.len());
                    gx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (self.value(p), self.value(t));
                let n = pv.numel();
                let coef = 2.0 * g[0] / n as f64;
                if self.needs(p) {
                    let gp = acc(grads, p, n);
                    for i in 0..n {
                        gp[i] += coef * (pv.data[i] - tv.data[i]);
                    }
                }
                if self.needs(t) {
                    let gt = acc(grads, t, n);
                    for i in 0..n {
                        gt[i] -= coef * (pv.data[i] - tv.data[i]);
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

/// Output positions `i` for which `i + shift` is inside `0..len`.
fn valid_range(shift: isize, len: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

fn broadcast_mode(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    let per_channel = |big: &[usize], small: &[usize]| {
        big.len() == 2 && ((small.len() == 1 && small[0] == big[0]) || small == [big[0], 1])
    };
    if per_channel(a, b) {
        Ok(Broadcast::RhsPerChannel)
    } else if per_channel(b, a) {
        Ok(Broadcast::LhsPerChannel)
    } else {
        Err(shape_err(op, format!("cannot combine {a:?} with {b:?}")))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst disagreement
    pub worst: Option<(usize, usize)>,
    /// (analytic, numeric) derivative at `worst`
    pub worst_values: (f64, f64),
    pub coordinates: usize,
}

/// Compares tape gradients against central differences for every
/// coordinate of every parameter.
///
/// `f` receives a fresh tape with `params` registered as leaves (in order)
/// and must return a scalar loss. The error at each coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf_ref(p)).collect();
        let loss = f(&mut tape, &vars)?;
        check_finite_scalar(tape.value(loss))?;
        tape.backward(loss)?;
        vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default()).collect()
    };
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf_ref(p)).collect();
        let loss = f(&mut tape, &vars)?;
        check_finite_scalar(tape.value(loss))
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, worst_values: (0.0, 0.0), coordinates: 0 };
    for p in 0..work.len() {
        for i in 0..work[p].numel() {
            let orig = work[p].data[i];
            work[p].data[i] = orig + step;
            let plus = eval(&work)?;
            work[p].data[i] = orig - step;
            let minus = eval(&work)?;
            work[p].data[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[p][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((p, i));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}

fn check_finite_scalar(t: &Tensor) -> Result<f64> {
    if t.numel() != 1 {
        return Err(Error::Invalid(format!("objective must be scalar, got shape {:?}", t.shape())));
    }
    let v = t.data[0];
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t2(c: usize, l: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![c, l], data.to_vec()).unwrap()
    }

    fn conv(x: &[f64], w: &[f64], d: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(t2(1, x.len(), x));
        let wv = tape.constant(Tensor::new(vec![1, 1, w.len()], w.to_vec()).unwrap());
        let bv = tape.constant(Tensor::scalar(0.0));
        let y = tape.conv1d_dilated(xv, wv, bv, d).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn conv_examples() {
        assert_eq!(conv(&[1., 2., 3.], &[0., 1., 0.], 1), vec![1., 2., 3.]);
        assert_eq!(conv(&[1., 2., 3.], &[1., 0., 1.], 1), vec![2., 4., 2.]);
        assert_eq!(conv(&[1., 2., 3.], &[1., 0., 1.], 2), vec![3., 0., 1.]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 5]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let err = tape.conv1d_dilated(x, w, b, 1).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "conv1d_dilated", .. }), "{err}");
    }

    #[test]
    fn conv_preserves_length_for_every_dilation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in [1, 2, 4, 8, 16, 32, 64, 128] {
            let mut tape = Tape::new();
            let x = tape.constant(t2(2, 24, &(0..48).map(|_| rng.random::<f64>()).collect::<Vec<_>>()));
            let w = tape.constant(Tensor::new(vec![3, 2, 3], (0..18).map(|_| rng.random()).collect()).unwrap());
            let b = tape.constant(Tensor::zeros(&[3]));
            let y = tape.conv1d_dilated(x, w, b, d).unwrap();
            assert_eq!(tape.value(y).shape(), &[3, 24]);
        }
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rand_vec = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (xa, xb, w) = (rand_vec(48), rand_vec(48), rand_vec(4 * 2 * 5));
        let (alpha, beta) = (0.7, -1.3);
        let combo: Vec<f64> = xa.iter().zip(&xb).map(|(a, b)| alpha * a + beta * b).collect();
        let run = |x: &[f64]| {
            let mut tape = Tape::new();
            let xv = tape.constant(t2(2, 24, x));
            let wv = tape.constant(Tensor::new(vec![4, 2, 5], w.clone()).unwrap());
            let bv = tape.constant(Tensor::zeros(&[4]));
            let y = tape.conv1d_dilated(xv, wv, bv, 2).unwrap();
            tape.value(y).data().to_vec()
        };
        let (ya, yb, yc) = (run(&xa), run(&xb), run(&combo));
        for i in 0..ya.len() {
            assert!((yc[i] - (alpha * ya[i] + beta * yb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        let th = tape.tanh(z);
        let gated = tape.mul(th, s).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
        assert_eq!(tape.value(gated).data(), &[0.0]);
        let a = tape.constant(Tensor::from_vec(vec![1., 2.]));
        let b = tape.constant(Tensor::from_vec(vec![3., 4.]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4., 6.]);
        let bad = tape.constant(Tensor::from_vec(vec![1., 2., 3.]));
        assert!(matches!(tape.add(a, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn per_channel_broadcast_either_side() {
        let mut tape = Tape::new();
        let m = tape.constant(t2(2, 3, &[1., 2., 3., 4., 5., 6.]));
        let v = tape.constant(Tensor::from_vec(vec![10., 20.]));
        let r = tape.add(m, v).unwrap();
        let l = tape.mul(v, m).unwrap();
        assert_eq!(tape.value(r).data(), &[11., 12., 13., 24., 25., 26.]);
        assert_eq!(tape.value(l).data(), &[10., 20., 30., 80., 100., 120.]);
        assert_eq!(tape.value(l).shape(), &[2, 3]);
    }

    #[test]
    fn sigmoid_and_tanh_ranges() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-10.0, -1.0, 0.3, 12.0]));
        let s = tape.sigmoid(x);
        let t = tape.tanh(x);
        assert!(tape.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(tape.value(t).data().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn dense_examples() {
        let run = |x: Vec<f64>, w: Tensor, b: Vec<f64>| {
            let mut tape = Tape::new();
            let (x, w, b) = (tape.constant(Tensor::from_vec(x)), tape.constant(w), tape.constant(Tensor::from_vec(b)));
            let y = tape.dense(x, w, b).unwrap();
            tape.value(y).data().to_vec()
        };
        let eye = Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap();
        assert_eq!(run(vec![3., 7.], eye, vec![0., 0.]), vec![3., 7.]);
        assert_eq!(run(vec![2., 3.], Tensor::new(vec![1, 2], vec![1., 1.]).unwrap(), vec![1.]), vec![6.]);
        assert_eq!(run(vec![-9., 4.], Tensor::new(vec![1, 2], vec![0., 0.]).unwrap(), vec![0.]), vec![0.]);

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1., 2., 3.]));
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.dense(x, w, b), Err(Error::Shape { op: "dense", .. })));
    }

    #[test]
    fn mse_examples() {
        let run = |p: Vec<f64>, t: Vec<f64>| {
            let mut tape = Tape::new();
            let (p, t) = (tape.constant(Tensor::from_vec(p)), tape.constant(Tensor::from_vec(t)));
            let l = tape.mse(p, t).unwrap();
            tape.value(l).data()[0]
        };
        assert_eq!(run(vec![0.3, -2.0], vec![0.3, -2.0]), 0.0);
        assert_eq!(run(vec![1., 1.], vec![0., 0.]), 1.0);
        assert_eq!(run(vec![2., 0.], vec![0., 0.]), 2.0);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let zero = tape.constant(Tensor::scalar(0.0));
        let idle = tape.leaf(Tensor::from_vec(vec![5.0, 6.0]));
        let l = tape.mse(a, zero).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[4.0]);
        assert_eq!(tape.grad(idle).unwrap(), &[0.0, 0.0]);
        assert!(tape.grad(zero).is_none());
        assert_eq!(tape.tensor_with_grad(a).grad(), Some(&[4.0][..]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(a), Err(Error::Invalid(_))));
    }

    #[test]
    fn finite_diff_examples() {
        let cube = |tape: &mut Tape<'_>, v: &[Var]| {
            let sq = tape.mul(v[0], v[0])?;
            tape.mul(sq, v[0])
        };
        let r = finite_diff_check(cube, &[Tensor::scalar(1.0)], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");

        let constant = |tape: &mut Tape<'_>, _v: &[Var]| Ok(tape.constant(Tensor::scalar(4.2)));
        let r = finite_diff_check(constant, &[Tensor::from_vec(vec![1.0, -3.0])], 1e-5).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn finite_diff_reports_non_finite() {
        let blowup = |tape: &mut Tape<'_>, v: &[Var]| Ok(tape.scale(v[0], f64::INFINITY));
        let err = finite_diff_check(blowup, &[Tensor::scalar(1.0)], 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    /// Every primitive, differentiated at random points, against central differences.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut rt = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let target = rt(&[3, 7]);
        let sum_sq = move |tape: &mut Tape<'_>, y: Var| {
            let t = tape.constant(target.clone());
            tape.mse(y, t)
        };
        type Build = Box<dyn for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>>;
        let cases: Vec<(Vec<Tensor>, Build)> = vec![
            (vec![rt(&[2, 7]), rt(&[3, 2, 3]), rt(&[3])], {
                let s = sum_sq.clone();
                Box::new(move |tape, v| {
                    let y = tape.conv1d_dilated(v[0], v[1], v[2], 2)?;
                    s(tape, y)
                })
            }),
            (vec![rt(&[3, 7])], {
                let s = sum_sq.clone();
                Box::new(move |tape, v| {
                    let y = tape.tanh(v[0]);
                    s(tape, y)
                })
            }),
            (vec![rt(&[3, 7])], {
                let s = sum_sq.clone();
                Box::new(move |tape, v| {
                    let y = tape.sigmoid(v[0]);
                    s(tape, y)
                })
            }),
            (vec![rt(&[3, 7]), rt(&[3])], {
                let s = sum_sq.clone();
                Box::new(move |tape, v| {
                    let y = tape.add(v[1], v[0])?;
                    s(tape, y)
                })
            }),
            (vec![rt(&[3, 7]), rt(&[3, 1])], {
                let s = sum_sq.clone();
                Box::new(move |tape, v| {
                    let y = tape.mul(v[0], v[1])?;
                    s(tape, y)
                })
            }),
            (vec![rt(&[3, 7]), rt(&[3, 7])], {
                let s = sum_sq.clone();
                Box::new(move |tape, v| {
                    let y = tape.mul(v[0], v[1])?;
                    let y = tape.scale(y, -1.7);
                    s(tape, y)
                })
            }),
            (vec![rt(&[21]), rt(&[21, 21]), rt(&[21])], {
                let s = sum_sq.clone();
                Box::new(move |tape, v| {
                    let y = tape.dense(v[0], v[1], v[2])?;
                    let y = tape.reshape(y, &[3, 7])?;
                    s(tape, y)
                })
            }),
        ];
        for (i, (params, f)) in cases.into_iter().enumerate() {
            let r = finite_diff_check(|t: &mut Tape<'_>, v: &[Var]| f(t, v), &params, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-6, "case {i}: {r:?}");
        }
    }

    #[test]
    fn tape_is_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![2, 10], (0..20).map(|_| rng.random()).collect()).unwrap());
            let w = tape.leaf(Tensor::new(vec![2, 2, 3], (0..12).map(|_| rng.random()).collect()).unwrap());
            let b = tape.leaf(Tensor::zeros(&[2]));
            let y = tape.conv1d_dilated(x, w, b, 1).unwrap();
            let y = tape.tanh(y);
            let z = tape.constant(Tensor::zeros(&[2, 10]));
            let l = tape.mse(y, z).unwrap();
            tape.backward(l).unwrap();
            (tape.value(l).data().to_vec(), tape.grad(w).unwrap().to_vec(), tape.grad(x).unwrap().to_vec())
        };
        let (a, b) = (build(), build());
        assert_eq!(a.0[0].to_bits(), b.0[0].to_bits());
        assert!(a.1.iter().zip(&b.1).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(a.2.iter().zip(&b.2).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
