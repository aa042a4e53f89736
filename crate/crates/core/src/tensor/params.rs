//! Named parameter storage shared by all networks.
//!
//! Models hold [`ParamId`]s into a [`ParamStore`]. Each forward pass binds
//! the store into fresh graph leaves ([`Bindings`]), so a store can feed any
//! number of independent graphs while optimizers update it in place between
//! passes.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{numel, Real, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        value: Vec<T>,
    ) -> Result<ParamId> {
        let name = name.into();
        if numel(&shape) != value.len() || shape.contains(&0) {
            return Err(Error::shape(
                "param",
                format!("{name}: {shape:?} vs {} values", value.len()),
            ));
        }
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.entries.push(ParamEntry { name, shape, value });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> Result<ParamId> {
        let n = numel(&shape);
        self.add(name, shape, vec![T::zero(); n])
    }

    /// Zero-mean Gaussian initialization with the given standard deviation.
    pub fn normal(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let n = numel(&shape);
        let value = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        self.add(name, shape, value)
    }

    /// Uniform initialization in `[-bound, bound)`.
    pub fn uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let n = numel(&shape);
        let value = (0..n)
            .map(|_| {
                T::lit(if bound > 0.0 {
                    rng.random_range(-bound..bound)
                } else {
                    0.0
                })
            })
            .collect();
        self.add(name, shape, value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Vec<T> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Binds every parameter as a graph leaf. With `track` false the leaves
    /// are constants and no graph is recorded.
    pub fn bind(&self, track: bool) -> Bindings<T> {
        let leaves = self
            .entries
            .iter()
            .map(|e| {
                let t = if track {
                    Tensor::param(e.shape.clone(), e.value.clone())
                } else {
                    Tensor::new(e.shape.clone(), e.value.clone())
                };
                t.expect("entry shape validated on insert")
            })
            .collect();
        Bindings { leaves }
    }

    /// Same parameters in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    value: e.value.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Overwrites values by name; every stored parameter must be present
    /// with the same shape.
    pub fn load_values(&mut self, source: &[ParamEntry<f32>]) -> Result<()> {
        for e in &mut self.entries {
            let src = source.iter().find(|s| s.name == e.name).ok_or_else(|| {
                Error::format("checkpoint", format!("missing parameter {}", e.name))
            })?;
            if src.shape != e.shape {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "{}: stored shape {:?}, model expects {:?}",
                        e.name, src.shape, e.shape
                    ),
                ));
            }
            e.value = src.value.iter().map(|v| T::lit(f64::from(*v))).collect();
        }
        Ok(())
    }
}

/// One forward pass worth of parameter leaves.
pub struct Bindings<T: Real> {
    leaves: Vec<Tensor<T>>,
}

impl<T: Real> Bindings<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.leaves[id.0]
    }

    /// Gradients after a backward pass, indexed like the store. Parameters
    /// that did not take part in the graph get `None`.
    pub fn take_gradients(&self) -> Vec<Option<Vec<T>>> {
        self.leaves.iter().map(Tensor::take_grad).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn bind_and_collect_gradients() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", vec![2], vec![1.0, 2.0]).unwrap();
        let b = store.add("b", vec![1], vec![3.0]).unwrap();
        let bound = store.bind(true);
        bound
            .get(a)
            .mul(bound.get(a))
            .unwrap()
            .sum()
            .backward()
            .unwrap();
        let g = bound.take_gradients();
        assert_eq!(g[a.index()], Some(vec![2.0, 4.0]));
        assert_eq!(g[b.index()], None);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.zeros("w", vec![1]).unwrap();
        assert!(store.zeros("w", vec![2]).is_err());
    }

    #[test]
    fn normal_init_is_seeded() {
        let mut s1 = ParamStore::<f64>::new();
        let mut s2 = ParamStore::<f64>::new();
        s1.normal("w", vec![16], 0.5, &mut seeded(3)).unwrap();
        s2.normal("w", vec![16], 0.5, &mut seeded(3)).unwrap();
        assert_eq!(s1, s2);
    }
}
