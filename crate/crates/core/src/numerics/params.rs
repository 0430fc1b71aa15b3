use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named, trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Owner of every parameter of one model instance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor: tensor.with_grad(true),
        });
        Ok(id)
    }

    /// Adds a parameter drawn from `N(0, std^2)`. The draw depends only on
    /// `(seed, name)`, so two models sharing a parameter name and shape start
    /// from identical values regardless of what else they contain.
    pub fn add_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        seed: u64,
    ) -> Result<ParamId> {
        let mut r = rng::named_stream(seed, name);
        let normal = Normal::new(0.0, std).map_err(|e| Error::Parameter(e.to_string()))?;
        let n = shape.iter().product();
        let values = (0..n).map(|_| normal.sample(&mut r)).collect();
        self.add(name, Tensor::new(shape.to_vec(), values)?)
    }

    pub fn add_constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        self.add(name, Tensor::new(shape.to_vec(), vec![value; n])?)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.params[id.0].tensor.values_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Adds `scale * N(0,1)` noise to one parameter; used by wiring checks.
    pub fn perturb<R: Rng>(&mut self, id: ParamId, scale: f64, rng: &mut R) {
        let normal = Normal::new(0.0, scale).expect("finite scale");
        for v in self.values_mut(id) {
            *v += normal.sample(rng);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.add_constant("w", &[2], 0.0).unwrap();
        assert!(s.add_constant("w", &[3], 0.0).is_err());
    }

    #[test]
    fn named_init_is_independent_of_insertion_order() {
        let mut a = ParamStore::new();
        a.add_normal("x", &[3, 2], 0.02, 7).unwrap();
        let ya = a.add_normal("y", &[4], 0.02, 7).unwrap();
        let mut b = ParamStore::new();
        let yb = b.add_normal("y", &[4], 0.02, 7).unwrap();
        assert_eq!(a.tensor(ya), b.tensor(yb));
        assert!(a.tensor(ya).requires_grad());
    }
}
