use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::{Gradients, Real, Tensor};
use crate::error::{bail, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Embedding tables are tracked separately so parameter counts can exclude them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Embedding,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    value: Arc<Tensor<T>>,
    grad: Option<Tensor<T>>,
}

impl<T: Real> Param<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        true
    }
}

/// Named, ordered collection of trainable tensors.
///
/// Insertion order is preserved and defines checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            bail!(Tensor, "duplicate parameter name {name:?}");
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            kind,
            value: Arc::new(value),
            grad: None,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Weight matrix drawn from uniform(−1/√fan_in, 1/√fan_in).
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..shape.iter().product::<usize>())
            .map(|_| T::lit(rng.gen_range(-bound..bound)))
            .collect();
        self.add(name, ParamKind::Weight, Tensor::new(shape.to_vec(), data)?)
    }

    /// Embedding table; entries uniform in (−0.1, 0.1).
    pub fn add_embedding<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let data = (0..rows * dim)
            .map(|_| T::lit(rng.gen_range(-0.1..0.1)))
            .collect();
        self.add(name, ParamKind::Embedding, Tensor::new(vec![rows, dim], data)?)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, ParamKind::Bias, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, ParamKind::Bias, Tensor::ones(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub(crate) fn shared_value(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.params[id.0].value)
    }

    /// Mutable access; copies the buffer only if a live graph still holds it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            bail!(
                Tensor,
                "parameter {}: shape {:?} does not match {:?}",
                p.name,
                value.shape(),
                p.value.shape()
            );
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params[id.0].grad.as_ref()
    }

    pub(crate) fn take_grad(&mut self, id: ParamId) -> Option<Tensor<T>> {
        self.params[id.0].grad.take()
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != grad.shape() {
            bail!(
                Tensor,
                "gradient for {} has shape {:?}, expected {:?}",
                p.name,
                grad.shape(),
                p.value.shape()
            );
        }
        p.grad = Some(grad);
        Ok(())
    }

    /// Adds the parameter gradients from a backward pass into the stored
    /// gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(existing) => {
                    for (e, &v) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e = *e + v;
                    }
                }
                None => p.grad = Some(g.clone()),
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Number of scalar parameters, optionally excluding embedding tables.
    pub fn count(&self, include_embeddings: bool) -> usize {
        self.params
            .iter()
            .filter(|p| include_embeddings || p.kind != ParamKind::Embedding)
            .map(|p| p.value.len())
            .sum()
    }

    /// Count restricted to the given ids.
    pub fn count_of(&self, ids: &[ParamId], include_embeddings: bool) -> usize {
        ids.iter()
            .map(|&id| &self.params[id.0])
            .filter(|p| include_embeddings || p.kind != ParamKind::Embedding)
            .map(|p| p.value.len())
            .sum()
    }

    /// Same parameters converted to another scalar type (gradients dropped).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: Arc::new(p.value.cast()),
                    grad: None,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// True when every parameter value is finite.
    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Bitwise equality of all values (names and order included).
    pub fn same_values(&self, other: &ParamStore<T>) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits_eq(y))
            })
    }
}

trait BitsEq {
    fn to_bits_eq(&self, other: &Self) -> bool;
}

impl<T: Real> BitsEq for T {
    fn to_bits_eq(&self, other: &Self) -> bool {
        // Bit-level comparison through f64 is exact for f32 and f64 values.
        let (a, b) = (self.as_f64(), other.as_f64());
        a.to_bits() == b.to_bits()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_init_respects_bound() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let id = store.add_uniform("w", &[16, 8], 16, &mut rng).unwrap();
        assert!(store.value(id).data().iter().all(|v| v.abs() < 0.25));
    }

    #[test]
    fn count_excludes_embeddings_on_request() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        store.add_embedding("emb", 10, 4, &mut rng).unwrap();
        store.add_uniform("w", &[3, 2], 3, &mut rng).unwrap();
        store.add_zeros("b", &[2]).unwrap();
        assert_eq!(store.count(true), 48);
        assert_eq!(store.count(false), 8);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add_zeros("b", &[2]).unwrap();
        assert!(store.add_zeros("b", &[2]).is_err());
    }
}
