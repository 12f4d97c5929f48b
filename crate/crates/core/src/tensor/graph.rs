//! Dynamic tape: ops execute eagerly and, when any input needs a gradient,
//! record enough state to run their vector-Jacobian product later.
//!
//! Broadcasting for the elementwise binary ops is right-aligned and
//! one-directional: the smaller operand's trailing extents must each equal the
//! larger operand's extent or be 1, and the result takes the larger shape.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::kernels::{gemm_acc, gemm_nt_acc, gemm_tn_acc, softmax_slice, transpose};
use super::{axis_blocks, broadcasts_to, numel, BroadcastMap, ParamId, ParamStore, Real, Tensor};
use crate::error::{bail, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_b: bool },
    Binary { kind: Binary, a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    Unary { kind: Unary, a: Var },
    Softmax { a: Var, axis: usize },
    LogSoftmax { a: Var, axis: usize },
    SumAxis { a: Var, axis: usize, mean: bool },
    MaxAxis { a: Var, axis: usize, argmax: Vec<usize> },
    SumAll { a: Var, mean: bool },
    Transpose { a: Var },
    Reshape { a: Var },
    Slice { a: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Embed { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, rstd: Vec<f64> },
    LstmCell { pre: Var, state: Var, keep: Option<Vec<bool>> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    params: Vec<(ParamId, Tensor<T>)>,
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Gradient of a non-parameter input leaf created with `requires_grad`.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&var)
    }
}

/// One forward pass worth of recorded operations.
pub struct Graph<'s, T: Real> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
    consumed: bool,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, T: Real> Graph<'s, T> {
    /// Graph without parameter access; inputs come from [`Graph::input`].
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    pub fn with_params(store: &'s ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Inference graph: nothing is recorded for backward.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        let (op, requires_grad) = if requires_grad && self.grad_enabled {
            (op, true)
        } else {
            (Op::Leaf, false)
        };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- leaves ----

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value: Arc::new(value),
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::Tensor("graph has no parameter store".into()))?;
        if id.0 >= store.len() {
            bail!(Tensor, "unknown parameter id {}", id.0);
        }
        let value = store.shared_value(id);
        let rg = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: if rg { Op::Param(id) } else { Op::Leaf },
            requires_grad: rg,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    // ---- linear algebra ----

    /// Matrix product. Supported forms: `(…, m, k) · (k, n)` (leading axes of
    /// the left operand are flattened) and batched `(B, m, k) · (B, k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            bail!(Tensor, "matmul: operands must have rank >= 2, got {sa:?} and {sb:?}");
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (batch, kb, n, shared_b, out_shape) = if sb.len() == 2 {
            let batch = numel(&sa[..sa.len() - 2]);
            let mut out = sa.clone();
            *out.last_mut().unwrap() = sb[1];
            (batch, sb[0], sb[1], true, out)
        } else if sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] {
            (sa[0], sb[1], sb[2], false, vec![sa[0], m, sb[2]])
        } else {
            bail!(Tensor, "matmul: incompatible shapes {sa:?} and {sb:?}");
        };
        if k != kb {
            bail!(Tensor, "matmul: inner dimensions differ in {sa:?} · {sb:?}");
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        if shared_b {
            gemm_acc(av, bv, &mut out, batch * m, k, n);
        } else {
            for bi in 0..batch {
                gemm_acc(
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MatMul { a, b, batch, m, k, n, shared_b },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            bail!(Tensor, "transpose: rank must be >= 2, got {s:?}");
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel(&s[..s.len() - 2]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(src.len());
        for bi in 0..batch {
            out.extend(transpose(&src[bi * r * c..(bi + 1) * r * c], r, c));
        }
        let mut shape = s;
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose { a }, rg))
    }

    // ---- elementwise ----

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = if broadcasts_to(&sb, &sa) {
            sa.clone()
        } else if broadcasts_to(&sa, &sb) {
            sb.clone()
        } else {
            bail!(Tensor, "{kind:?}: shapes {sa:?} and {sb:?} do not broadcast");
        };
        let n = numel(&out_shape);
        let ma = BroadcastMap::new(&sa, &out_shape);
        let mb = BroadcastMap::new(&sb, &out_shape);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f: fn(T, T) -> T = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let out: Vec<T> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else if av.len() == n {
            av.iter().zip(mb.expand(bv, n)).map(|(&x, y)| f(x, y)).collect()
        } else if bv.len() == n {
            ma.expand(av, n).into_iter().zip(bv).map(|(x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(av[ma.index(i)], bv[mb.index(i)])).collect()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ct = T::lit(c);
        let out = self.value(a).map(|v| v * ct);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Scale { a, c }, rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ct = T::lit(c);
        let out = self.value(a).map(|v| v + ct);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::AddScalar { a }, rg))
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = match kind {
            Unary::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
            Unary::Tanh => x.map(|v| v.tanh()),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Exp => x.map(|v| v.exp()),
            Unary::Log => x.map(|v| v.ln()),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Unary { kind, a }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by 1/(1−p). Identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            bail!(Tensor, "dropout: probability {p} outside [0, 1)");
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let shape = self.shape(a).to_vec();
        let mask: Vec<T> = (0..numel(&shape))
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let m = self.constant(Tensor::new(shape, mask)?);
        self.mul(a, m)
    }

    // ---- normalisation ----

    fn check_axis(&self, op: &str, a: Var, axis: usize) -> Result<()> {
        let s = self.shape(a);
        if axis >= s.len() {
            bail!(Tensor, "{op}: axis {axis} out of range for shape {s:?}");
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let x = self.value(a);
        let (o, n, i) = axis_blocks(x.shape(), axis);
        let mut out = vec![T::zero(); x.len()];
        softmax_slice(x.data(), &mut out, o, n, i, None);
        let shape = x.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { a, axis }, rg))
    }

    /// Softmax where entries with `keep[i] == false` receive exactly zero
    /// weight. `keep` has the same shape as `a`.
    pub fn masked_softmax(&mut self, a: Var, axis: usize, keep: &[bool]) -> Result<Var> {
        self.check_axis("masked_softmax", a, axis)?;
        let x = self.value(a);
        if keep.len() != x.len() {
            bail!(
                Tensor,
                "masked_softmax: mask length {} does not match shape {:?}",
                keep.len(),
                x.shape()
            );
        }
        let (o, n, i) = axis_blocks(x.shape(), axis);
        let mut out = vec![T::zero(); x.len()];
        softmax_slice(x.data(), &mut out, o, n, i, Some(keep));
        let shape = x.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { a, axis }, rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", a, axis)?;
        let x = self.value(a);
        let (outer, n, inner) = axis_blocks(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| xd[at(j)]).fold(T::neg_infinity(), T::max);
                let lse = (0..n).map(|j| (xd[at(j)] - max).exp()).sum::<T>().ln() + max;
                for j in 0..n {
                    out[at(j)] = xd[at(j)] - lse;
                }
            }
        }
        let shape = x.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax { a, axis }, rg))
    }

    /// Layer normalisation over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::Tensor("layer_norm: scalar input".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            bail!(
                Tensor,
                "layer_norm: gain/bias shapes {:?}/{:?} do not match width {d}",
                self.shape(gamma),
                self.shape(beta)
            );
        }
        let rows = numel(&s) / d;
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); xd.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>()
                / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let xhat = T::lit((row[j].as_f64() - mean) * rs);
                out[r * d + j] = g[j] * xhat + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::LayerNorm { x, gamma, beta, rstd },
            rg,
        ))
    }

    // ---- reductions ----

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check_axis(if mean { "mean_axis" } else { "sum_axis" }, a, axis)?;
        let x = self.value(a);
        let (outer, n, inner) = axis_blocks(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &xd[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst = *dst + v;
                }
            }
        }
        if mean {
            let inv = T::lit(1.0 / n as f64);
            out.iter_mut().for_each(|v| *v = *v * inv);
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis { a, axis, mean }, rg))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("max_axis", a, axis)?;
        let x = self.value(a);
        let (outer, n, inner) = axis_blocks(x.shape(), axis);
        if n == 0 {
            bail!(Tensor, "max_axis: empty axis {axis}");
        }
        let xd = x.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut bv = xd[o * n * inner + i];
                for j in 1..n {
                    let v = xd[o * n * inner + j * inner + i];
                    if v > bv {
                        bv = v;
                        best = j;
                    }
                }
                out[o * inner + i] = bv;
                argmax[o * inner + i] = best;
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxAxis { a, axis, argmax }, rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::SumAll { a, mean: false }, rg))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            bail!(Tensor, "mean_all: empty tensor");
        }
        let s = x.data().iter().copied().sum::<T>() / T::lit(x.len() as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::SumAll { a, mean: true }, rg))
    }

    // ---- shape manipulation ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = (*self.nodes[a.0].value).clone().reshaped(shape).map_err(|_| {
            Error::Tensor(format!(
                "reshape: cannot view {:?} as {:?}",
                self.shape(a),
                shape
            ))
        })?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape { a }, rg))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis("slice", a, axis)?;
        let x = self.value(a);
        let (outer, n, inner) = axis_blocks(x.shape(), axis);
        if start >= end || end > n {
            bail!(
                Tensor,
                "slice: range {start}..{end} invalid for axis {axis} of shape {:?}",
                x.shape()
            );
        }
        let w = end - start;
        let xd = x.data();
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = w;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { a, axis, start }, rg))
    }

    /// Concatenates along an existing axis; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Tensor("concat: no inputs".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(ax, (x, y))| ax != axis && x != y)
            {
                bail!(Tensor, "concat: shape {s:?} incompatible with {base:?} on axis {axis}");
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_blocks(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let x = self.value(v);
                let n = x.shape()[axis];
                out.extend_from_slice(&x.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat { inputs: inputs.to_vec(), axis },
            rg,
        ))
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Tensor("stack: no inputs".into()))?;
        let base = self.shape(first).to_vec();
        if axis > base.len() {
            bail!(Tensor, "stack: axis {axis} out of range for shape {base:?}");
        }
        let mut unit = base.clone();
        unit.insert(axis, 1);
        let mut viewed = Vec::with_capacity(inputs.len());
        for &v in inputs {
            if self.shape(v) != base.as_slice() {
                bail!(Tensor, "stack: shape {:?} differs from {base:?}", self.shape(v));
            }
            viewed.push(self.reshape(v, &unit)?);
        }
        self.concat(&viewed, axis)
    }

    /// Rows of `table` (V, D) gathered by `ids`; output shape is
    /// `prefix ++ [D]` where `prefix` multiplies out to `ids.len()`.
    pub fn embed(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            bail!(Tensor, "embed: table must be rank 2, got {ts:?}");
        }
        if numel(prefix) != ids.len() {
            bail!(Tensor, "embed: {} ids do not fill shape {prefix:?}", ids.len());
        }
        let (v, d) = (ts[0], ts[1]);
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                bail!(Tensor, "embed: id {id} out of range for table of {v} rows");
            }
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Embed { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Fused LSTM cell.
    ///
    /// `pre` (N, 4h) holds gate pre-activations in i, f, g, o order and
    /// `state` (N, 2h) holds `[h ⊕ c]` from the previous step. Returns the new
    /// `[h ⊕ c]`. Rows whose `keep` entry is false carry the previous state
    /// through unchanged.
    pub fn lstm_cell(&mut self, pre: Var, state: Var, keep: Option<&[bool]>) -> Result<Var> {
        let sp = self.shape(pre).to_vec();
        let ss = self.shape(state).to_vec();
        if sp.len() != 2 || ss.len() != 2 || sp[0] != ss[0] || sp[1] != 2 * ss[1] || !ss[1].is_multiple_of(2)
        {
            bail!(Tensor, "lstm_cell: pre {sp:?} and state {ss:?} are incompatible");
        }
        let (rows, h) = (ss[0], ss[1] / 2);
        if let Some(k) = keep {
            if k.len() != rows {
                bail!(Tensor, "lstm_cell: mask has {} rows, expected {rows}", k.len());
            }
        }
        let p = self.value(pre).data();
        let s = self.value(state).data();
        let mut out = vec![T::zero(); rows * 2 * h];
        for r in 0..rows {
            let pr = &p[r * 4 * h..(r + 1) * 4 * h];
            let sr = &s[r * 2 * h..(r + 1) * 2 * h];
            let or = &mut out[r * 2 * h..(r + 1) * 2 * h];
            if keep.is_some_and(|k| !k[r]) {
                or.copy_from_slice(sr);
                continue;
            }
            for j in 0..h {
                let i = sigmoid(pr[j]);
                let f = sigmoid(pr[h + j]);
                let g = pr[2 * h + j].tanh();
                let o = sigmoid(pr[3 * h + j]);
                let c = f * sr[h + j] + i * g;
                or[h + j] = c;
                or[j] = o * c.tanh();
            }
        }
        let rg = self.rg(&[pre, state]);
        Ok(self.push(
            Tensor::new(vec![rows, 2 * h], out)?,
            Op::LstmCell { pre, state, keep: keep.map(|k| k.to_vec()) },
            rg,
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `loss`. The tape can be swept only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            bail!(Tensor, "backward: tape already consumed by an earlier backward pass");
        }
        if self.value(loss).len() != 1 {
            bail!(
                Tensor,
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            );
        }
        if !self.nodes[loss.0].requires_grad {
            bail!(Tensor, "backward: loss does not depend on any differentiable input");
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        let mut out = Gradients {
            params: Vec::new(),
            leaves: HashMap::new(),
        };
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {
                    out.leaves.insert(Var(idx), g);
                }
                Op::Param(id) => out.params.push((*id, g)),
                _ => self.vjp(idx, &g, &mut grads)?,
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v));
        match &mut grads[v.0] {
            Some(e) => {
                for (x, &y) in e.data_mut().iter_mut().zip(g.data()) {
                    *x = *x + y;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums a full-shape gradient down to a broadcast operand's shape.
    fn unbroadcast(&self, g: &[T], out_shape: &[usize], v: Var) -> Tensor<T> {
        let shape = self.shape(v).to_vec();
        if numel(&shape) == g.len() {
            return Tensor::new(shape, g.to_vec()).expect("same size");
        }
        let acc = BroadcastMap::new(&shape, out_shape).reduce(g, numel(&shape));
        Tensor::new(shape, acc).expect("shape from operand")
    }

    fn vjp(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => unreachable!("leaves handled by caller"),
            Op::MatMul { a, b, batch, m, k, n, shared_b } => {
                let (a, b, batch, m, k, n) = (*a, *b, *batch, *m, *k, *n);
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.requires_grad(a) {
                    let mut ga = vec![T::zero(); av.len()];
                    if *shared_b {
                        gemm_nt_acc(gd, bv, &mut ga, batch * m, n, k);
                    } else {
                        for bi in 0..batch {
                            gemm_nt_acc(
                                &gd[bi * m * n..(bi + 1) * m * n],
                                &bv[bi * k * n..(bi + 1) * k * n],
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    self.acc(grads, a, Tensor::new(self.shape(a).to_vec(), ga)?);
                }
                if self.requires_grad(b) {
                    let mut gb = vec![T::zero(); bv.len()];
                    if *shared_b {
                        gemm_tn_acc(av, gd, &mut gb, k, batch * m, n);
                    } else {
                        for bi in 0..batch {
                            gemm_tn_acc(
                                &av[bi * m * k..(bi + 1) * m * k],
                                &gd[bi * m * n..(bi + 1) * m * n],
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                k,
                                m,
                                n,
                            );
                        }
                    }
                    self.acc(grads, b, Tensor::new(self.shape(b).to_vec(), gb)?);
                }
            }
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let out_shape = node.value.shape();
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let n = gd.len();
                let ae = BroadcastMap::new(self.shape(a), out_shape).expand(av, n);
                let be = BroadcastMap::new(self.shape(b), out_shape).expand(bv, n);
                if self.requires_grad(a) {
                    let full: Vec<T> = match kind {
                        Binary::Add | Binary::Sub => gd.to_vec(),
                        Binary::Mul => gd.iter().zip(&be).map(|(&g, &y)| g * y).collect(),
                        Binary::Div => gd.iter().zip(&be).map(|(&g, &y)| g / y).collect(),
                    };
                    self.acc(grads, a, self.unbroadcast(&full, out_shape, a));
                }
                if self.requires_grad(b) {
                    let full: Vec<T> = match kind {
                        Binary::Add => gd.to_vec(),
                        Binary::Sub => gd.iter().map(|&v| -v).collect(),
                        Binary::Mul => gd.iter().zip(&ae).map(|(&g, &x)| g * x).collect(),
                        Binary::Div => gd
                            .iter()
                            .zip(ae.iter().zip(&be))
                            .map(|(&g, (&x, &y))| -g * x / (y * y))
                            .collect(),
                    };
                    self.acc(grads, b, self.unbroadcast(&full, out_shape, b));
                }
            }
            Op::Scale { a, c } => {
                let ct = T::lit(*c);
                self.acc(grads, *a, g.map(|v| v * ct));
            }
            Op::AddScalar { a } => self.acc(grads, *a, g.clone()),
            Op::Unary { kind, a } => {
                let x = self.value(*a).data();
                let data: Vec<T> = match kind {
                    Unary::Relu => gd
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect(),
                    Unary::Tanh => gd.iter().zip(y).map(|(&gv, &yv)| gv * (T::one() - yv * yv)).collect(),
                    Unary::Sigmoid => gd
                        .iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                        .collect(),
                    Unary::Exp => gd.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect(),
                    Unary::Log => gd.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect(),
                };
                self.acc(grads, *a, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Softmax { a, axis } => {
                let (outer, n, inner) = axis_blocks(g.shape(), *axis);
                let mut gx = vec![T::zero(); gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: T = (0..n).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                self.acc(grads, *a, Tensor::new(g.shape().to_vec(), gx)?);
            }
            Op::LogSoftmax { a, axis } => {
                let (outer, n, inner) = axis_blocks(g.shape(), *axis);
                let mut gx = vec![T::zero(); gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let total: T = (0..n).map(|j| gd[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = gd[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
                self.acc(grads, *a, Tensor::new(g.shape().to_vec(), gx)?);
            }
            Op::SumAxis { a, axis, mean } => {
                let shape = self.shape(*a).to_vec();
                let (outer, n, inner) = axis_blocks(&shape, *axis);
                let scale = if *mean { T::lit(1.0 / n as f64) } else { T::one() };
                let mut gx = Vec::with_capacity(numel(&shape));
                for o in 0..outer {
                    let row = &gd[o * inner..(o + 1) * inner];
                    for _ in 0..n {
                        gx.extend(row.iter().map(|&v| v * scale));
                    }
                }
                self.acc(grads, *a, Tensor::new(shape, gx)?);
            }
            Op::MaxAxis { a, axis, argmax } => {
                let shape = self.shape(*a).to_vec();
                let (outer, n, inner) = axis_blocks(&shape, *axis);
                let mut gx = vec![T::zero(); numel(&shape)];
                for o in 0..outer {
                    for i in 0..inner {
                        let j = argmax[o * inner + i];
                        gx[o * n * inner + j * inner + i] = gd[o * inner + i];
                    }
                }
                self.acc(grads, *a, Tensor::new(shape, gx)?);
            }
            Op::SumAll { a, mean } => {
                let shape = self.shape(*a).to_vec();
                let n = numel(&shape);
                let v = if *mean { gd[0] / T::lit(n as f64) } else { gd[0] };
                self.acc(grads, *a, Tensor::full(&shape, v));
            }
            Op::Transpose { a } => {
                let s = g.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = numel(&s[..s.len() - 2]);
                let mut gx = Vec::with_capacity(gd.len());
                for bi in 0..batch {
                    gx.extend(transpose(&gd[bi * r * c..(bi + 1) * r * c], r, c));
                }
                self.acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), gx)?);
            }
            Op::Reshape { a } => {
                self.acc(grads, *a, g.clone().reshaped(self.shape(*a))?);
            }
            Op::Slice { a, axis, start } => {
                let shape = self.shape(*a).to_vec();
                let (outer, n, inner) = axis_blocks(&shape, *axis);
                let w = g.shape()[*axis];
                if self.requires_grad(*a) {
                    // Accumulate in place: one timestep slice of a long
                    // sequence should not cost a full-size buffer.
                    let slot = grads[a.0].get_or_insert_with(|| Tensor::zeros(&shape));
                    let gx = slot.data_mut();
                    for o in 0..outer {
                        let dst = &mut gx[(o * n + start) * inner..(o * n + start + w) * inner];
                        for (x, &y) in dst.iter_mut().zip(&gd[o * w * inner..(o + 1) * w * inner]) {
                            *x = *x + y;
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_blocks(g.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let shape = self.shape(v).to_vec();
                    let n = shape[*axis];
                    if self.requires_grad(v) {
                        let mut gx = Vec::with_capacity(numel(&shape));
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gx.extend_from_slice(&gd[base..base + n * inner]);
                        }
                        self.acc(grads, v, Tensor::new(shape, gx)?);
                    }
                    offset += n;
                }
            }
            Op::Embed { table, ids } => {
                let shape = self.shape(*table).to_vec();
                let d = shape[1];
                let mut gt = vec![T::zero(); numel(&shape)];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] = gt[id * d + j] + gd[r * d + j];
                    }
                }
                self.acc(grads, *table, Tensor::new(shape, gt)?);
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let d = *g.shape().last().unwrap();
                let rows = gd.len() / d;
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let mut gx = vec![T::zero(); gd.len()];
                let mut gg = vec![0.0f64; d];
                let mut gb = vec![0.0f64; d];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
                    let rs = rstd[r];
                    let xhat: Vec<f64> = row.iter().map(|v| (v.as_f64() - mean) * rs).collect();
                    let dy: Vec<f64> = gd[r * d..(r + 1) * d].iter().map(|v| v.as_f64()).collect();
                    let dxhat: Vec<f64> = (0..d).map(|j| dy[j] * gam[j].as_f64()).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gg[j] += dy[j] * xhat[j];
                        gb[j] += dy[j];
                        let v = rs / d as f64
                            * (d as f64 * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        gx[r * d + j] = T::lit(v);
                    }
                }
                self.acc(grads, *x, Tensor::new(g.shape().to_vec(), gx)?);
                self.acc(grads, *gamma, Tensor::new(vec![d], gg.into_iter().map(T::lit).collect())?);
                self.acc(grads, *beta, Tensor::new(vec![d], gb.into_iter().map(T::lit).collect())?);
            }
            Op::LstmCell { pre, state, keep } => {
                let p = self.value(*pre).data();
                let s = self.value(*state).data();
                let rows = s.len() / self.shape(*state)[1];
                let h = self.shape(*state)[1] / 2;
                let mut gp = vec![T::zero(); p.len()];
                let mut gs = vec![T::zero(); s.len()];
                for r in 0..rows {
                    let dh = &gd[r * 2 * h..r * 2 * h + h];
                    let dc = &gd[r * 2 * h + h..(r + 1) * 2 * h];
                    if keep.as_ref().is_some_and(|k| !k[r]) {
                        gs[r * 2 * h..(r + 1) * 2 * h].copy_from_slice(&gd[r * 2 * h..(r + 1) * 2 * h]);
                        continue;
                    }
                    let pr = &p[r * 4 * h..(r + 1) * 4 * h];
                    let c_prev = &s[r * 2 * h + h..(r + 1) * 2 * h];
                    let c_new = &y[r * 2 * h + h..(r + 1) * 2 * h];
                    for j in 0..h {
                        let i = sigmoid(pr[j]);
                        let f = sigmoid(pr[h + j]);
                        let gg = pr[2 * h + j].tanh();
                        let o = sigmoid(pr[3 * h + j]);
                        let tc = c_new[j].tanh();
                        let d_o = dh[j] * tc;
                        let dct = dc[j] + dh[j] * o * (T::one() - tc * tc);
                        let di = dct * gg;
                        let dg = dct * i;
                        let df = dct * c_prev[j];
                        gs[r * 2 * h + h + j] = dct * f;
                        gp[r * 4 * h + j] = di * i * (T::one() - i);
                        gp[r * 4 * h + h + j] = df * f * (T::one() - f);
                        gp[r * 4 * h + 2 * h + j] = dg * (T::one() - gg * gg);
                        gp[r * 4 * h + 3 * h + j] = d_o * o * (T::one() - o);
                    }
                }
                self.acc(grads, *pre, Tensor::new(self.shape(*pre).to_vec(), gp)?);
                self.acc(grads, *state, Tensor::new(self.shape(*state).to_vec(), gs)?);
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_small() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
        assert_eq!(g.shape(c), &[1, 1]);
    }

    #[test]
    fn relu_and_softmax_definitions() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(&[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::vector(&[0.0, 0.0]));
        let s = g.softmax(z, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[2]));
        let err = g.add(a, c).unwrap_err().to_string();
        assert!(err.contains("Add") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn backward_square_and_mean() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::vector(&[1.0, 2.0, 3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);

        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::vector(&[5.0, -1.0, 0.5, 2.0]), true);
        let loss = g.mean_all(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::vector(&[1.0, 2.0]), true);
        let y = g.scale(x, 2.0).unwrap();
        assert!(g.backward(y).is_err());
        let loss = g.sum_all(y).unwrap();
        assert!(g.backward(loss).is_ok());
        let err = g.backward(loss).unwrap_err().to_string();
        assert!(err.contains("consumed"), "{err}");
    }

    #[test]
    fn inference_graph_records_nothing() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::vector(&[1.0]), true);
        assert!(!g.requires_grad(x));
        let y = g.exp(x).unwrap();
        let l = g.sum_all(y).unwrap();
        assert!(g.backward(l).is_err());
    }

    #[test]
    fn masked_softmax_zero_weight_on_masked_entries() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 2], &[1.0, 5.0, 2.0, 7.0]), true);
        let s = g.masked_softmax(x, 0, &[true, true, true, false]).unwrap();
        let v = g.value(s).data().to_vec();
        assert_eq!(v[3], 0.0);
        assert_eq!(v[1], 1.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lstm_cell_keep_mask_carries_state() {
        let mut g = Graph::<f64>::new();
        let pre = g.constant(Tensor::full(&[2, 4], 0.3));
        let st = g.constant(t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]));
        let out = g.lstm_cell(pre, st, Some(&[true, false])).unwrap();
        let v = g.value(out).data();
        assert_eq!(&v[2..], &[0.3, 0.4]);
        let i = 1.0 / (1.0 + (-0.3f64).exp());
        let c = i * 0.2 + i * 0.3f64.tanh();
        assert!((v[1] - c).abs() < 1e-15);
        assert!((v[0] - i * c.tanh()).abs() < 1e-15);
    }
}
