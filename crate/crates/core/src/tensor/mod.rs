//! Dense tensors and a small reverse-mode autodiff engine.
//!
//! Values live in plain row-major [`Tensor`]s. A [`Graph`] records every op
//! applied during one forward pass (the tape is rebuilt per pass) and
//! [`Graph::backward`] walks it in reverse. Trainable state lives in a
//! [`ParamStore`] outside the tape; gradients flow back into it and
//! [`Optimizer::step`] consumes them.
//!
//! Models are generic over [`Real`] so the same code trains in `f32` and is
//! gradient-checked in `f64`.

mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{bail, Result};

pub use gradcheck::{
    analytic_gradients, compare_gradients, gradient_check, numeric_gradients, relative_error,
    GradCheckReport, REL_ERROR_FLOOR,
    ParamCheck,
};
pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_global_norm, Algorithm, Optimizer, OptimizerConfig, StepReport};
pub use params::{Param, ParamId, ParamKind, ParamStore};

/// Scalar type the engine computes in.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// Lossless-enough conversion from an `f64` literal.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            bail!(
                Tensor,
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            );
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a tensor from `f64` values, converting to `T`.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn vector(values: &[f64]) -> Self {
        Self::from_f64(&[values.len()], values).expect("vector shape matches")
    }

    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            bail!(Tensor, "ragged matrix rows");
        }
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_f64(&[rows.len(), cols], &flat)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            bail!(Tensor, "item() on tensor of shape {:?}", self.shape);
        }
        Ok(self.data[0])
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            bail!(
                Tensor,
                "reshape: cannot view {:?} as {:?}",
                self.shape,
                shape
            );
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of range on axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// False when any element is NaN or infinite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Euclidean norm over all elements, computed in `f64`.
    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }
}

/// Splits `shape` around `axis` into (outer, axis extent, inner) block sizes.
pub(crate) fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let n = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, n, inner)
}

/// True when `small` broadcasts into `big` under right-aligned rules where every
/// aligned extent of `small` equals the big extent or is 1.
pub(crate) fn broadcasts_to(small: &[usize], big: &[usize]) -> bool {
    if small.len() > big.len() {
        return false;
    }
    small
        .iter()
        .rev()
        .zip(big.iter().rev())
        .all(|(&s, &b)| s == b || s == 1)
}

/// Maps each flat index of `out_shape` to the flat index of a broadcast operand
/// of shape `in_shape`.
pub(crate) struct BroadcastMap {
    kind: MapKind,
}

enum MapKind {
    Identity,
    /// Operand is a trailing suffix: index modulo its length.
    Modulo(usize),
    /// Operand covers leading axes, broadcast over `inner` trailing elements.
    Divide(usize),
    General {
        out_shape: Vec<usize>,
        strides: Vec<usize>,
    },
}

impl BroadcastMap {
    pub(crate) fn new(in_shape: &[usize], out_shape: &[usize]) -> Self {
        let in_n = numel(in_shape);
        let out_n = numel(out_shape);
        if in_n == out_n {
            return Self {
                kind: MapKind::Identity,
            };
        }
        // Right-aligned shape padded with leading ones.
        let pad = out_shape.len() - in_shape.len();
        let padded: Vec<usize> = std::iter::repeat_n(1, pad).chain(in_shape.iter().copied()).collect();
        // Suffix case: leading padded dims are 1, trailing dims equal.
        let first_full = padded
            .iter()
            .zip(out_shape)
            .position(|(&p, &o)| p == o && p != 1);
        if let Some(ff) = first_full {
            if padded[..ff].iter().all(|&p| p == 1) && padded[ff..] == out_shape[ff..] {
                return Self {
                    kind: MapKind::Modulo(in_n),
                };
            }
        }
        // Prefix case: trailing padded dims are 1, leading dims equal.
        let last_full = padded
            .iter()
            .zip(out_shape)
            .rposition(|(&p, &o)| p == o && p != 1);
        if let Some(lf) = last_full {
            if padded[lf + 1..].iter().all(|&p| p == 1) && padded[..=lf] == out_shape[..=lf] {
                let inner = numel(&out_shape[lf + 1..]);
                return Self {
                    kind: MapKind::Divide(inner),
                };
            }
        }
        let mut strides = vec![0; padded.len()];
        let mut acc = 1;
        for ax in (0..padded.len()).rev() {
            if padded[ax] != 1 {
                strides[ax] = acc;
            }
            acc *= padded[ax];
        }
        Self {
            kind: MapKind::General {
                out_shape: out_shape.to_vec(),
                strides,
            },
        }
    }

    /// The operand materialized at the output's size.
    pub(crate) fn expand<T: Copy>(&self, src: &[T], out_n: usize) -> Vec<T> {
        match &self.kind {
            MapKind::Identity => src.to_vec(),
            MapKind::Modulo(_) => {
                let mut out = Vec::with_capacity(out_n);
                while out.len() < out_n {
                    out.extend_from_slice(&src[..src.len().min(out_n - out.len())]);
                }
                out
            }
            MapKind::Divide(inner) => {
                let mut out = Vec::with_capacity(out_n);
                for &x in src {
                    out.resize(out.len() + inner, x);
                }
                out
            }
            MapKind::General { .. } => (0..out_n).map(|i| src[self.index(i)]).collect(),
        }
    }

    /// Sums an output-sized array down to the operand's size, visiting
    /// output entries in index order.
    pub(crate) fn reduce<T: Real>(&self, g: &[T], in_n: usize) -> Vec<T> {
        let mut acc = vec![T::zero(); in_n];
        match &self.kind {
            MapKind::Identity => acc.copy_from_slice(g),
            MapKind::Modulo(n) => {
                for chunk in g.chunks(*n) {
                    for (a, &v) in acc.iter_mut().zip(chunk) {
                        *a = *a + v;
                    }
                }
            }
            MapKind::Divide(inner) => {
                for (a, chunk) in acc.iter_mut().zip(g.chunks(*inner)) {
                    for &v in chunk {
                        *a = *a + v;
                    }
                }
            }
            MapKind::General { .. } => {
                for (i, &v) in g.iter().enumerate() {
                    let j = self.index(i);
                    acc[j] = acc[j] + v;
                }
            }
        }
        acc
    }

    #[inline]
    pub(crate) fn index(&self, flat: usize) -> usize {
        match &self.kind {
            MapKind::Identity => flat,
            MapKind::Modulo(n) => flat % n,
            MapKind::Divide(inner) => flat / inner,
            MapKind::General { out_shape, strides } => {
                let mut rem = flat;
                let mut idx = 0;
                for ax in (0..out_shape.len()).rev() {
                    let d = out_shape[ax];
                    idx += (rem % d) * strides[ax];
                    rem /= d;
                }
                idx
            }
        }
    }
}
