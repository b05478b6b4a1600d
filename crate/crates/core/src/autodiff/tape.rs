//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node whose inputs already exist on the tape, so
//! the node vector is a topological order and one reverse sweep suffices.
//! Leaves are either constants (no gradient) or named parameters pulled from a
//! [`ParamStore`]. Heavy fused kernels (the stack dynamic programs) plug in
//! through [`CustomOp`].

use std::collections::HashMap;

use crate::autodiff::params::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{axis_split, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused operation with a hand-written backward pass.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &str;

    /// Accumulate input adjoints given the adjoint of this node's output.
    fn backward(&self, inputs: &[Var], output: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>);
}

enum Op<T: Scalar> {
    Constant,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Relu(Var),
    Min(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp {
        x: Var,
        axis: usize,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    SumAll(Var),
    PickLast {
        x: Var,
        idx: Vec<usize>,
        weights: Option<Vec<T>>,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Affine { .. } => "affine",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Relu(_) => "relu",
            Op::Min(..) => "min",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LogSumExp { .. } => "logsumexp",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::SumAll(_) => "sum",
            Op::PickLast { .. } => "pick",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Write access to input adjoints during a custom backward pass.
pub struct GradSink<'a, T: Scalar> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<'a, T: Scalar> GradSink<'a, T> {
    /// Mutable adjoint buffer for `v`, or `None` when `v` does not need a gradient.
    pub fn grad_mut(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let n = node.value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return;
    }
    let n = node.value.numel();
    f(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]));
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_group<T: Scalar>(x: &[T], out: &mut [T]) {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        let u = T::one() / T::lit(x.len() as f64);
        out.iter_mut().for_each(|o| *o = u);
        return;
    }
    let mut s = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that never receives a gradient (also how values are detached).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A differentiable leaf for parameter `name`; repeated calls return the same node.
    pub fn param(&mut self, name: &str, store: &ParamStore<T>) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.push(value, Op::Param(name.to_string()), true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Value of `v` copied onto a gradient-free leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::usage(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(&[a, b]);
        self.push(value, op, ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let ng = self.ng(&[a]);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "min")?;
        Ok(self.zip(a, b, |x, y| if y < x { y } else { x }, Op::Min(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    /// `x · wᵀ + b` for `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::usage(format!(
                "affine: input {:?} incompatible with weight {:?}",
                xs, ws
            )));
        }
        let (bsz, inp, out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::usage(format!(
                    "affine: bias {:?} does not match {} outputs",
                    self.shape(b),
                    out
                )));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut data = vec![T::zero(); bsz * out];
        for r in 0..bsz {
            let xr = &xv[r * inp..(r + 1) * inp];
            for o in 0..out {
                let wr = &wv[o * inp..(o + 1) * inp];
                let mut acc = T::zero();
                for k in 0..inp {
                    acc += xr[k] * wr[k];
                }
                data[r * out + o] = acc;
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..bsz {
                for o in 0..out {
                    data[r * out + o] += bv[o];
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        let value = Tensor::new(vec![bsz, out], data)?;
        Ok(self.push(value, Op::Affine { x, w, b }, ng))
    }

    /// Softmax over the trailing axis. An all-(−∞) group yields the uniform
    /// distribution with zero gradient.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let g = v.last_dim();
        let mut data = vec![T::zero(); v.numel()];
        for (src, dst) in v.data().chunks(g).zip(data.chunks_mut(g)) {
            softmax_group(src, dst);
        }
        let value = Tensor::new(v.shape().to_vec(), data).expect("shape");
        let ng = self.ng(&[a]);
        self.push(value, Op::Softmax(a), ng)
    }

    /// Log-softmax over the trailing axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let g = v.last_dim();
        let mut data = Vec::with_capacity(v.numel());
        for src in v.data().chunks(g) {
            let l = crate::scalar::logsumexp_slice(src);
            if l == T::neg_infinity() {
                let u = -T::lit(g as f64).ln();
                data.extend(std::iter::repeat_n(u, g));
            } else {
                data.extend(src.iter().map(|&x| x - l));
            }
        }
        let value = Tensor::new(v.shape().to_vec(), data).expect("shape");
        let ng = self.ng(&[a]);
        self.push(value, Op::LogSoftmax(a), ng)
    }

    /// Log-semiring sum along `axis`.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.value(a).logsumexp(axis)?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::LogSumExp { x: a, axis }, ng))
    }

    /// Concatenate along the trailing axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::usage("concat of zero tensors"));
        }
        let lead: Vec<usize> = {
            let s = self.shape(parts[0]);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::usage(format!(
                    "concat: incompatible shapes {:?} and {:?}",
                    self.shape(parts[0]),
                    s
                )));
            }
            total += s[lead.len()];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                let w = v.last_dim();
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = self.ng(parts);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), ng))
    }

    /// Columns `start..start+len` of the trailing axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let w = v.last_dim();
        if start + len > w || v.rank() == 0 {
            return Err(Error::usage(format!(
                "slice {}..{} out of range for trailing size {}",
                start,
                start + len,
                w
            )));
        }
        let rows = v.numel() / w;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * w + start..r * w + start + len]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(&[a]);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Slice { x: a, start }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    /// `out[b] = x[b, idx[b]]` for `x: [B, V]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.pick_weighted(x, idx, None)
    }

    /// Like [`Tape::pick`] with an optional per-row multiplier (used for loss masks).
    pub fn pick_weighted(&mut self, x: Var, idx: &[usize], weights: Option<Vec<T>>) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 || v.shape()[0] != idx.len() {
            return Err(Error::usage(format!(
                "pick: shape {:?} with {} indices",
                v.shape(),
                idx.len()
            )));
        }
        let w = v.shape()[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= w) {
            return Err(Error::usage(format!("pick: index {bad} out of range {w}")));
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| {
                let m = weights.as_ref().map_or(T::one(), |ws| ws[r]);
                if m == T::zero() {
                    T::zero()
                } else {
                    v.data()[r * w + i] * m
                }
            })
            .collect();
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::new(vec![idx.len()], data)?,
            Op::PickLast {
                x,
                idx: idx.to_vec(),
                weights,
            },
            ng,
        ))
    }

    /// `out[b, :] = x[b, :] · s[b]` with `x: [B, m]` and `s` holding B elements.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let xv = self.value(x);
        let sv = self.value(s);
        if xv.rank() != 2 || sv.numel() != xv.shape()[0] {
            return Err(Error::usage(format!(
                "scale_rows: {:?} by {:?}",
                xv.shape(),
                sv.shape()
            )));
        }
        let m = xv.shape()[1];
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv.data()[i / m])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.ng(&[x, s]);
        Ok(self.push(value, Op::ScaleRows { x, s }, ng))
    }

    /// Record a node computed by a fused kernel.
    pub fn custom(&mut self, inputs: Vec<Var>, value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let ng = self.ng(&inputs);
        self.push(value, Op::Custom { inputs, op }, ng)
    }

    fn diagnose(&self, loss: Var) -> String {
        let bad = |pred: &dyn Fn(T) -> bool| {
            self.nodes[..=loss.0]
                .iter()
                .enumerate()
                .find(|(_, n)| n.value.data().iter().any(|&x| pred(x)))
                .map(|(i, n)| match &n.op {
                    Op::Param(name) => format!("node {i} (param `{name}`)"),
                    op => format!("node {} ({})", i, op.name()),
                })
        };
        bad(&|x: T| x.is_nan())
            .or_else(|| bad(&|x: T| x == T::infinity()))
            .unwrap_or_else(|| format!("node {} ({})", loss.0, self.nodes[loss.0].op.name()))
    }

    /// Adjoints of a scalar `loss` for every node that needs one.
    fn sweep(&self, loss: Var) -> Result<Vec<Option<Vec<T>>>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(Error::numerical(format!(
                "non-finite loss {}; first offending value at {}",
                lv.item(),
                self.diagnose(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Gradient of `loss` with respect to every parameter in `store`. Parameters
    /// that were never used (or not reached) get zero tensors.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>> {
        let mut grads = self.sweep(loss)?;
        let mut out = store.zeros_like();
        for (name, &v) in &self.params {
            if let Some(g) = grads[v.0].take() {
                if let Ok(t) = out.get_mut(name) {
                    t.data_mut().copy_from_slice(&g);
                }
            }
        }
        Ok(out)
    }

    /// Gradient of `loss` with respect to arbitrary nodes (zeros where unreachable).
    pub fn grad_of(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor<T>>> {
        let mut grads = self.sweep(loss)?;
        Ok(wrt
            .iter()
            .map(|&v| {
                let shape = self.shape(v).to_vec();
                match grads[v.0].take() {
                    Some(g) => Tensor::new(shape, g).expect("shape"),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = &nodes[idx].value;
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[idx].op {
            Op::Constant | Op::Param(_) => {}
            Op::Add(a, b) => {
                accumulate(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d));
                accumulate(nodes, grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, &d)| *x += d));
            }
            Op::Sub(a, b) => {
                accumulate(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d));
                accumulate(nodes, grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, &d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                accumulate(nodes, grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                });
                accumulate(nodes, grads, *b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                });
            }
            Op::Min(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                accumulate(nodes, grads, *a, |ga| {
                    for i in 0..g.len() {
                        if va[i] <= vb[i] {
                            ga[i] += g[i];
                        }
                    }
                });
                accumulate(nodes, grads, *b, |gb| {
                    for i in 0..g.len() {
                        if vb[i] < va[i] {
                            gb[i] += g[i];
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                accumulate(nodes, grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d * *c)
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                accumulate(nodes, grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = out.data();
                accumulate(nodes, grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (T::one() - y[i] * y[i]);
                    }
                });
            }
            Op::Exp(a) => {
                let y = out.data();
                accumulate(nodes, grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i];
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a);
                accumulate(nodes, grads, *a, |ga| {
                    for i in 0..g.len() {
                        if x[i] > T::zero() {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Affine { x, w, b } => {
                let xs = nodes[x.0].value.shape();
                let (bsz, inp) = (xs[0], xs[1]);
                let out_n = nodes[w.0].value.shape()[0];
                let (xv, wv) = (val(*x), val(*w));
                accumulate(nodes, grads, *x, |gx| {
                    for r in 0..bsz {
                        for o in 0..out_n {
                            let d = g[r * out_n + o];
                            if d == T::zero() {
                                continue;
                            }
                            let wr = &wv[o * inp..(o + 1) * inp];
                            let gr = &mut gx[r * inp..(r + 1) * inp];
                            for k in 0..inp {
                                gr[k] += d * wr[k];
                            }
                        }
                    }
                });
                accumulate(nodes, grads, *w, |gw| {
                    for r in 0..bsz {
                        let xr = &xv[r * inp..(r + 1) * inp];
                        for o in 0..out_n {
                            let d = g[r * out_n + o];
                            if d == T::zero() {
                                continue;
                            }
                            let gr = &mut gw[o * inp..(o + 1) * inp];
                            for k in 0..inp {
                                gr[k] += d * xr[k];
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    accumulate(nodes, grads, *b, |gb| {
                        for r in 0..bsz {
                            for o in 0..out_n {
                                gb[o] += g[r * out_n + o];
                            }
                        }
                    });
                }
            }
            Op::Softmax(a) => {
                let y = out.data();
                let x = val(*a);
                let w = out.last_dim();
                accumulate(nodes, grads, *a, |ga| {
                    for s in (0..g.len()).step_by(w) {
                        if x[s..s + w].iter().all(|&v| v == T::neg_infinity()) {
                            continue;
                        }
                        let dot: T = (s..s + w).map(|i| g[i] * y[i]).sum();
                        for i in s..s + w {
                            ga[i] += y[i] * (g[i] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = out.data();
                let x = val(*a);
                let w = out.last_dim();
                accumulate(nodes, grads, *a, |ga| {
                    for s in (0..g.len()).step_by(w) {
                        if x[s..s + w].iter().all(|&v| v == T::neg_infinity()) {
                            continue;
                        }
                        let tot: T = g[s..s + w].iter().copied().sum();
                        for i in s..s + w {
                            ga[i] += g[i] - y[i].exp() * tot;
                        }
                    }
                });
            }
            Op::LogSumExp { x, axis } => {
                let xv = &nodes[x.0].value;
                let (outer, len, inner) = axis_split(xv.shape(), *axis);
                let (xd, y) = (xv.data(), out.data());
                accumulate(nodes, grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let oi = o * inner + i;
                            if y[oi] == T::neg_infinity() || g[oi] == T::zero() {
                                continue;
                            }
                            for k in 0..len {
                                let xi = (o * len + k) * inner + i;
                                gx[xi] += g[oi] * (xd[xi] - y[oi]).exp();
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let total = out.last_dim();
                let rows = out.numel() / total.max(1);
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].value.last_dim();
                    accumulate(nodes, grads, p, |gp| {
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + off + c];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Slice { x, start } => {
                let w = nodes[x.0].value.last_dim();
                let len = out.last_dim();
                let rows = out.numel() / len.max(1);
                accumulate(nodes, grads, *x, |gx| {
                    for r in 0..rows {
                        for c in 0..len {
                            gx[r * w + start + c] += g[r * len + c];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                accumulate(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d));
            }
            Op::SumAll(a) => {
                accumulate(nodes, grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::PickLast { x, idx, weights } => {
                let w = nodes[x.0].value.last_dim();
                accumulate(nodes, grads, *x, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        let m = weights.as_ref().map_or(T::one(), |ws| ws[r]);
                        gx[r * w + i] += g[r] * m;
                    }
                });
            }
            Op::ScaleRows { x, s } => {
                let m = out.last_dim();
                let (xv, sv) = (val(*x), val(*s));
                accumulate(nodes, grads, *x, |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * sv[i / m];
                    }
                });
                accumulate(nodes, grads, *s, |gs| {
                    for i in 0..g.len() {
                        gs[i / m] += g[i] * xv[i];
                    }
                });
            }
            Op::Custom { inputs, op } => {
                let mut sink = GradSink { nodes, grads };
                op.backward(inputs, out, g, &mut sink);
            }
        }
    }
}

#[cfg(test)]
#[path = "tape_tests.rs"]
mod tests;
