use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

use super::Real;
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named learnable tensor. Rank-1 tensors are held as a single row.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Array2<T>,
    pub grad: Array2<T>,
}

impl<T: Real> ParamTensor<T> {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => panic!("parameters are rank 1 or 2, got {shape:?}"),
    }
}

/// Registry of every learnable tensor of a model, in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<ParamTensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], value: Array2<T>) -> ParamId {
        let name = name.into();
        assert_eq!(value.dim(), matrix_dims(shape), "value shape for {name}");
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        let grad = Array2::zeros(value.dim());
        self.params.push(ParamTensor {
            name,
            shape: shape.to_vec(),
            value,
            grad,
        });
        id
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, shape, Array2::zeros(matrix_dims(shape)))
    }

    pub fn filled(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        self.add(name, shape, Array2::from_elem(matrix_dims(shape), T::of(v)))
    }

    /// Uniform in `±sqrt(1 / fan_in)`.
    pub fn uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (1.0 / fan_in as f64).sqrt();
        let dims = matrix_dims(shape);
        let value = Array2::from_shape_simple_fn(dims, || T::of(rng.random_range(-bound..=bound)));
        self.add(name, shape, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.params.iter_mut()
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(ParamTensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Adds `scale * grads` to the gradient accumulators.
    pub fn accumulate(&mut self, grads: &Gradients<T>, scale: T) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            if let Some(g) = g {
                p.grad.scaled_add(scale, g);
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g.f64() * g.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn value_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.value.iter())
            .map(|g| g.f64() * g.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Copies values from `other`, which must have the same registry.
    pub fn load_values_from<U: Real>(&mut self, other: &ParamStore<U>) -> Result<()> {
        for p in other.iter() {
            let id = self
                .id(&p.name)
                .ok_or_else(|| Error::UnknownTensor(p.name.clone()))?;
            let dst = &mut self.params[id.0];
            if dst.shape != p.shape {
                return Err(Error::ShapeMismatch {
                    name: p.name.clone(),
                    expected: dst.shape.clone(),
                    found: p.shape.clone(),
                });
            }
            dst.value.zip_mut_with(&p.value, |d, &s| *d = T::of(s.f64()));
        }
        Ok(())
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T>(pub(crate) Vec<Option<Array2<T>>>);

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Array2<T>> {
        self.0.get(id.0).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_counts_and_lookup() {
        let mut store = ParamStore::<f64>::new();
        let w = store.zeros("fc.weight", &[4, 64]);
        store.zeros("fc.bias", &[64]);
        assert_eq!(store.count(), 320);
        assert_eq!(store.id("fc.weight"), Some(w));
        assert_eq!(store.by_name("fc.bias").unwrap().value.dim(), (1, 64));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.zeros("a", &[2]);
        store.zeros("a", &[2]);
    }
}
