//! Named, trainable parameters.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Parameters in registration order, addressable by unique dotted path.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            grad: Tensor::zeros(value.shape()),
            name,
            value,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places a parameter on `tape` as a differentiable leaf.
    pub fn var(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        tape.param_leaf(id, self.params[id.0].value.clone())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Adds the gradient of every parameter leaf on `tape` into its `grad`.
    /// Parameters the loss does not reach keep their current gradient.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, grads: &Gradients<T>) {
        for (id, var) in tape.params() {
            if let Some(g) = grads.get(var) {
                self.params[id.0].grad.add_assign(g);
            }
        }
    }

    /// Runs backward from `loss` and accumulates into parameter gradients.
    pub fn backward(&mut self, tape: &Tape<T>, loss: Var) -> Result<()> {
        let grads = tape.backward(loss)?;
        self.accumulate_grads(tape, &grads);
        Ok(())
    }

    /// Same names and values in another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.register(p.name.clone(), p.value.cast())
                .expect("names are unique in the source store");
        }
        out
    }
}

/// He-style normal initialization with standard deviation `sqrt(2 / fan_in)`.
pub fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| T::of(normal.sample(rng)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.register("a.weight", Tensor::zeros([2])).unwrap();
        assert!(store.register("a.weight", Tensor::zeros([2])).is_err());
    }

    #[test]
    fn repeated_backward_accumulates_and_unreached_stay_zero() {
        let mut store = ParamStore::<f64>::new();
        let a = store.register("a", Tensor::new([2], vec![1.0, 2.0]).unwrap()).unwrap();
        let b = store.register("b", Tensor::new([2], vec![5.0, 5.0]).unwrap()).unwrap();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let va = store.var(&mut tape, a);
            let _vb = store.var(&mut tape, b);
            let sq = tape.mul(va, va).unwrap();
            let loss = tape.sum(sq);
            store.backward(&tape, loss).unwrap();
        }
        assert_eq!(store.get(a).grad.data(), &[4.0, 8.0]);
        assert_eq!(store.get(b).grad.data(), &[0.0, 0.0]);
        store.zero_grad();
        assert_eq!(store.get(a).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn he_init_is_seeded() {
        let draw = || he_normal::<f32>(&[4, 3], 3, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(draw(), draw());
    }
}
