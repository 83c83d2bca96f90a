//! Named parameter storage shared by every network component.

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Insertion-ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    /// Looks up a parameter that a model component requires.
    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    /// Looks up a required parameter and checks its shape.
    pub fn require_shape(&self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let id = self.require(name)?;
        if self.get(id).shape() != shape {
            return Err(Error::Config(format!(
                "parameter `{name}` has shape {:?}, expected {shape:?}",
                self.get(id).shape()
            )));
        }
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape`; those for which `trainable`
    /// returns false become constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| {
                if trainable(n) {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles already recorded on a tape, one per store entry in
    /// store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Collects the gradient of every parameter in store order.
    pub fn gradients<T: Scalar>(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Uniform weights with standard deviation 1/√fan_in, i.e. drawn from
/// U(−√(3/fan_in), √(3/fan_in)).
pub fn fan_in_uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (3.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1])).is_err());
        assert!(s.require_shape("a", &[2]).is_err());
        assert!(s.require("b").is_err());
    }

    #[test]
    fn fan_in_bounds() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let w: Tensor<f64> = fan_in_uniform(&mut rng, &[16, 9], 9);
        assert!(w.data().iter().all(|v| v.abs() < (1.0f64 / 3.0).sqrt()));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut s = ParamStore::<f64>::new();
        let a = s.insert("a", Tensor::ones(&[2])).unwrap();
        let b = s.insert("b", Tensor::ones(&[2])).unwrap();
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape, |n| n != "b");
        let y = tape.mul(bound[a], bound[b]).unwrap();
        let l = tape.sum(y).unwrap();
        let mut g = tape.backward(l).unwrap();
        let grads = bound.gradients(&mut g);
        assert_eq!(grads[0], Tensor::ones(&[2]));
        assert_eq!(grads[1], Tensor::zeros(&[2]));
    }
}
