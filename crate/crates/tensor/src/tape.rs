//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations are recorded on a [`Tape`] in the order they are executed, so
//! every node's inputs precede it. [`Tape::backward`] walks the tape in
//! reverse once, accumulating vector-Jacobian products into the gradient
//! buffer of every node that requires a gradient.
//!
//! A tape is single-use: after one backward pass it rejects further
//! backward calls and new operations.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{strides, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Concat(Vec<Var>, usize),
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    PairwiseAdd(Var, Var),
    Gather(Var, Vec<usize>),
    Mask(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for a single forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    bindings: Vec<(Var, ParamId)>,
    consumed: bool,
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

    pub fn is_consumed(&self) -> bool {
        self.consumed
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

    /// Gradient of the loss with respect to `v`, available after
    /// [`Tape::backward`]. `None` for values that do not require a gradient.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(!self.consumed, "recording on a consumed tape");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(TensorError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a differentiable input.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a parameter from `store`; its gradient can later be moved back
    /// into the store with [`Tape::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.variable(store.value(id).clone());
        self.bindings.push((v, id));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg))
    }

    /// Elementwise sum. `b` may have a shape equal to a suffix of `a`'s shape,
    /// in which case it is broadcast over the leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.check_live()?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sb, sa) {
            return Err(mismatch(name, sa, sb));
        }
        let va = self.value(a);
        let vb = self.value(b).data();
        let blen = vb.len();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| f(x, vb[idx % blen]))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check_live()?;
        let value = self.value(a).map(|x| x * factor);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Scale(a, factor), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Log(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check_live()?;
        let value = self.value(a).map(f);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, op, rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Sum(a), rg))
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_live()?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for r in 0..inner {
                    out[o * inner + r] += src[base + r];
                }
            }
        }
        let rg = self.any_grad(&[a]);
        let value = Tensor::new(reduced_shape(&shape, axis), out)?;
        Ok(self.push(value, Op::SumAxis(a, axis), rg))
    }

    /// Softmax normalizing along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_live()?;
        let value = softmax_along(self.value(a), axis, false)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Softmax(a, axis), rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_live()?;
        let value = softmax_along(self.value(a), axis, true)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::LogSoftmax(a, axis), rg))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.check_live()?;
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidShape {
                shape: vec![],
                reason: "concat of zero tensors".into(),
            })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis)?;
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Takes `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_live()?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        if start >= end || end > len {
            return Err(TensorError::InvalidShape {
                shape,
                reason: format!("slice {start}..{end} on axis {axis}"),
            });
        }
        let width = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let from = (o * len + start) * inner;
            out.extend_from_slice(&src[from..from + width * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Slice {
                src: a,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_live()?;
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.check_live()?;
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len()) {
            return Err(mismatch("permute", &shape, perm));
        }
        for &p in perm {
            if std::mem::replace(&mut seen[p], true) {
                return Err(mismatch("permute", &shape, perm));
            }
        }
        let value = permute_raw(self.value(a), perm);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Permute(a, perm.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(mismatch("transpose", self.shape(a), &[0, 0]));
        }
        self.permute(a, &[1, 0])
    }

    /// For `a: [p, w]` and `b: [q, w]`, returns `[p, q, w]` with
    /// `out[x][y] = a[x] + b[y]`.
    pub fn pairwise_add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(mismatch("pairwise_add", sa, sb));
        }
        let (p, q, w) = (sa[0], sb[0], sa[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(p * q * w);
        for x in 0..p {
            let ra = &va[x * w..(x + 1) * w];
            for y in 0..q {
                let rb = &vb[y * w..(y + 1) * w];
                out.extend(ra.iter().zip(rb).map(|(u, v)| u + v));
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![p, q, w], out)?, Op::PairwiseAdd(a, b), rg))
    }

    /// Selects entries by flat (row-major) index into a vector.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.check_live()?;
        if indices.is_empty() {
            return Err(TensorError::InvalidShape {
                shape: vec![0],
                reason: "gather of zero indices".into(),
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            out.push(*src.get(i).ok_or(TensorError::IndexOutOfBounds {
                index: i,
                len: src.len(),
            })?);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(vec![indices.len()], out)?,
            Op::Gather(a, indices.to_vec()),
            rg,
        ))
    }

    /// Multiplies by a fixed mask of the same shape.
    pub fn apply_mask(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        self.check_live()?;
        if mask.shape() != self.shape(a) {
            return Err(mismatch("apply_mask", self.shape(a), mask.shape()));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(x, m)| x * m)
            .collect();
        let value = Tensor::new(mask.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Mask(a, mask), rg))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales
    /// the survivors by `1 / (1 - rate)`. A zero rate is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        let mask = dropout_mask(self.shape(a), rate, rng)?;
        match mask {
            Some(mask) => self.apply_mask(a, mask),
            None => Ok(a),
        }
    }

    /// Runs the backward pass from a scalar `loss`.
    ///
    /// Afterwards [`Tape::grad`] returns a gradient for every node that
    /// requires one; nodes the loss does not depend on get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_live()?;
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the gradients of bound parameters into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(v, id) in &self.bindings {
            if let Some(g) = self.grad(v) {
                store.grad_mut(id).add_assign(g);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.requires_grad(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g.data()[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &vb.data()[p * n..(p + 1) * n];
                            da[i * k + p] = dot(grow, brow);
                        }
                    }
                    self.accumulate(grads, *a, tensor(va.shape(), da));
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g.data()[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = va.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, tensor(vb.shape(), db));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.requires_grad(*b) {
                    let shape = self.shape(*b).to_vec();
                    let blen = self.value(*b).len();
                    let mut db = vec![0.0; blen];
                    for (i, gv) in g.data().iter().enumerate() {
                        db[i % blen] += sign * gv;
                    }
                    self.accumulate(grads, *b, tensor(&shape, db));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let blen = vb.len();
                if self.requires_grad(*a) {
                    let da = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * vb.data()[i % blen])
                        .collect();
                    self.accumulate(grads, *a, tensor(va.shape(), da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; blen];
                    for (i, gv) in g.data().iter().enumerate() {
                        db[i % blen] += gv * va.data()[i];
                    }
                    self.accumulate(grads, *b, tensor(vb.shape(), db));
                }
            }
            Op::Scale(a, factor) => {
                self.accumulate(grads, *a, g.map(|x| x * factor));
            }
            Op::Tanh(a) => {
                let d = zip_map(g, out, |gv, y| gv * (1.0 - y * y));
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = zip_map(g, out, |gv, y| gv * y * (1.0 - y));
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = zip_map(g, out, |gv, y| gv * y);
                self.accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let d = zip_map(g, self.value(*a), |gv, x| gv / x);
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, Tensor::filled(self.shape(*a), gv));
            }
            Op::SumAxis(a, axis) => {
                let shape = self.shape(*a).to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis).expect("validated");
                let mut d = vec![0.0; shape.iter().product()];
                for o in 0..outer {
                    for k in 0..len {
                        let base = (o * len + k) * inner;
                        d[base..base + inner]
                            .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *a, tensor(&shape, d));
            }
            Op::Softmax(a, axis) => {
                // dx = y ⊙ (g − Σ_axis g ⊙ y)
                let d = along_axis(out, g, *axis, |y, gl, dl| {
                    let s: f64 = y.iter().zip(gl).map(|(yv, gv)| yv * gv).sum();
                    for ((dv, yv), gv) in dl.iter_mut().zip(y).zip(gl) {
                        *dv = yv * (gv - s);
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::LogSoftmax(a, axis) => {
                // dx = g − softmax ⊙ Σ_axis g
                let d = along_axis(out, g, *axis, |y, gl, dl| {
                    let s: f64 = gl.iter().sum();
                    for ((dv, yv), gv) in dl.iter_mut().zip(y).zip(gl) {
                        *dv = gv - yv.exp() * s;
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = axis_split(out.shape(), *axis).expect("validated");
                let mut parts_grad: Vec<Vec<f64>> = parts
                    .iter()
                    .map(|p| Vec::with_capacity(self.value(*p).len()))
                    .collect();
                let mut cursor = 0;
                for _ in 0..outer {
                    for (p, buf) in parts.iter().zip(parts_grad.iter_mut()) {
                        let len = self.shape(*p)[*axis] * inner;
                        buf.extend_from_slice(&g.data()[cursor..cursor + len]);
                        cursor += len;
                    }
                }
                for (p, buf) in parts.iter().zip(parts_grad) {
                    self.accumulate(grads, *p, tensor(self.shape(*p), buf));
                }
            }
            Op::Slice { src, axis, start } => {
                let shape = self.shape(*src).to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis).expect("validated");
                let width = out.shape()[*axis];
                let mut d = vec![0.0; shape.iter().product()];
                for o in 0..outer {
                    let to = (o * len + start) * inner;
                    let from = o * width * inner;
                    d[to..to + width * inner]
                        .copy_from_slice(&g.data()[from..from + width * inner]);
                }
                self.accumulate(grads, *src, tensor(&shape, d));
            }
            Op::Reshape(a) => {
                let d = g.clone().reshape(self.shape(*a)).expect("same length");
                self.accumulate(grads, *a, d);
            }
            Op::Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                self.accumulate(grads, *a, permute_raw(g, &inverse));
            }
            Op::PairwiseAdd(a, b) => {
                let (p, q, w) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                let mut da = vec![0.0; p * w];
                let mut db = vec![0.0; q * w];
                for x in 0..p {
                    for y in 0..q {
                        let gl = &g.data()[(x * q + y) * w..(x * q + y + 1) * w];
                        for (r, gv) in gl.iter().enumerate() {
                            da[x * w + r] += gv;
                            db[y * w + r] += gv;
                        }
                    }
                }
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, tensor(self.shape(*a), da));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, tensor(self.shape(*b), db));
                }
            }
            Op::Gather(a, indices) => {
                let mut d = Tensor::zeros(self.shape(*a));
                for (&i, gv) in indices.iter().zip(g.data()) {
                    d.data_mut()[i] += gv;
                }
                self.accumulate(grads, *a, d);
            }
            Op::Mask(a, mask) => {
                self.accumulate(grads, *a, zip_map(g, mask, |gv, m| gv * m));
            }
        }
    }
}

/// Builds an inverted-dropout mask; `None` when `rate` is zero.
pub fn dropout_mask<R: Rng + ?Sized>(
    shape: &[usize],
    rate: f64,
    rng: &mut R,
) -> Result<Option<Tensor>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::InvalidDropout(rate));
    }
    if rate == 0.0 {
        return Ok(None);
    }
    let keep = 1.0 / (1.0 - rate);
    Ok(Some(Tensor::from_fn(shape, |_| {
        if rng.gen::<f64>() < rate {
            0.0
        } else {
            keep
        }
    })))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("gradient shape")
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    tensor(a.shape(), data)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

/// Applies `f(y_lane, g_lane, out_lane)` to every lane along `axis`.
fn along_axis(
    y: &Tensor,
    g: &Tensor,
    axis: usize,
    mut f: impl FnMut(&[f64], &[f64], &mut [f64]),
) -> Tensor {
    let (outer, len, inner) = axis_split(y.shape(), axis).expect("validated");
    let mut d = vec![0.0; y.len()];
    let (mut yl, mut gl, mut dl) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
    for o in 0..outer {
        for r in 0..inner {
            for k in 0..len {
                let idx = (o * len + k) * inner + r;
                yl[k] = y.data()[idx];
                gl[k] = g.data()[idx];
            }
            f(&yl, &gl, &mut dl);
            for k in 0..len {
                d[(o * len + k) * inner + r] = dl[k];
            }
        }
    }
    tensor(y.shape(), d)
}

fn softmax_along(x: &Tensor, axis: usize, log: bool) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut out = vec![0.0; x.len()];
    let src = x.data();
    for o in 0..outer {
        for r in 0..inner {
            let at = |k: usize| (o * len + k) * inner + r;
            let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|k| (src[at(k)] - max).exp()).sum();
            let lz = z.ln();
            for k in 0..len {
                let shifted = src[at(k)] - max;
                out[at(k)] = if log {
                    shifted - lz
                } else {
                    shifted.exp() / z
                };
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn permute_raw(x: &Tensor, perm: &[usize]) -> Tensor {
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let moved: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut index = vec![0usize; out_shape.len()];
    for _ in 0..x.len() {
        let offset: usize = index.iter().zip(&moved).map(|(i, s)| i * s).sum();
        out.push(x.data()[offset]);
        for axis in (0..index.len()).rev() {
            index[axis] += 1;
            if index[axis] < out_shape[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    tensor(&out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn tanh_at_origin() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(0.0));
        let y = tape.tanh(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.0);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 1.0);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::eye(3));
        let v = tape.constant(Tensor::new(vec![3, 1], vec![1.5, -2.0, 7.0]).unwrap());
        let out = tape.matmul(eye, v).unwrap();
        assert_eq!(tape.value(out).data(), &[1.5, -2.0, 7.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
        let c = tape.constant(Tensor::zeros(&[4]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn second_backward_rejected() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(2.0));
        let y = tape.scale(x, 3.0).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::TapeConsumed)));
        assert!(tape.tanh(x).is_err());
    }

    #[test]
    fn unreachable_variables_get_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::ones(&[3]));
        let unused = tape.variable(Tensor::ones(&[2]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &Tensor::zeros(&[2]));
        let c = Var(0);
        assert!(tape.grad(c).is_some());
    }

    #[test]
    fn broadcast_add_accumulates_bias_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 3]));
        let b = tape.variable(Tensor::zeros(&[3]));
        let y = tape.add(x, b).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 3]);
        assert_eq!(tape.value(y).get(&[3, 1, 2]), tape.value(x).get(&[1, 2, 3]));
        let z = tape.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(z), tape.value(x));
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3], |i| (i as f64).sin() * 3.0));
        let a = tape.softmax(x, 1).unwrap();
        let b = tape.log_softmax(x, 1).unwrap();
        for (p, lp) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert_abs_diff_eq!(p.ln(), *lp, epsilon = 1e-12);
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_rejects_one() {
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[5]));
        assert_eq!(tape.dropout(x, 0.0, &mut rng).unwrap(), x);
        assert!(tape.dropout(x, 1.0, &mut rng).is_err());
    }
}
