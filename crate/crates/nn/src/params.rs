use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::real::Real;
use crate::rng::normal_vec;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<E: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
    index: HashMap<String, ParamId>,
}

impl<E: Real> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, value: Tensor<E>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| E::c(rng.gen_range(-bound..bound))).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data = normal_vec::<E>(rng, n).into_iter().map(|x| x * E::c(std)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, E::c(value)))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<E>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<F: Real>(&self) -> ParamStore<F> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces the value of a named parameter, requiring an identical shape.
    pub fn set(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| NnError::Spec(format!("unknown parameter {name}")))?;
        let cur = &mut self.tensors[id.0];
        if cur.shape() != value.shape() {
            return Err(NnError::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                cur.shape(),
                value.shape()
            )));
        }
        *cur = value;
        Ok(())
    }
}

/// One gradient per parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Gradients<E: Real = f32> {
    grads: Vec<Tensor<E>>,
}

impl<E: Real> Gradients<E> {
    pub fn zeros_like(store: &ParamStore<E>) -> Self {
        Gradients { grads: store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<E>> {
        self.grads.iter()
    }

    pub fn scale(&mut self, s: E) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }

    /// Element-wise accumulation of another gradient set of the same layout.
    pub fn add_assign(&mut self, other: &Gradients<E>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x = *x + *y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}
