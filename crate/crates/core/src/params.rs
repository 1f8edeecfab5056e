//! Named parameter storage and deterministic initialization.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Parameters keyed by dotted path, iterated in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, ParamTensor<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Registration(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(
            name.clone(),
            ParamTensor {
                name,
                value,
                trainable,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Replace a value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "param_set",
                format!(
                    "`{name}` has shape {:?}, got {:?}",
                    p.value.shape(),
                    value.shape()
                ),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn data_mut(&mut self, name: &str) -> Result<&mut [T]> {
        self.entries
            .get_mut(name)
            .map(|p| p.value.data_mut())
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.entries.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Scalars under `prefix` (matched on whole path segments).
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|p| has_prefix(&p.name, prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        ParamTensor {
                            name: p.name.clone(),
                            value: p.value.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}

pub fn has_prefix(name: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || name == prefix
        || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

/// Collects parameter declarations from model blocks.
#[derive(Debug, Default)]
pub struct Registry {
    specs: IndexMap<String, ParamSpec>,
}

impl Registry {
    pub fn add(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Result<()> {
        let name = name.into();
        if self.specs.contains_key(&name) {
            return Err(Error::Registration(format!("duplicate parameter `{name}`")));
        }
        let spec = ParamSpec {
            name: name.clone(),
            shape: shape.into(),
            init,
            trainable: true,
        };
        self.specs.insert(name, spec);
        Ok(())
    }

    pub fn specs(&self) -> impl Iterator<Item = &ParamSpec> {
        self.specs.values()
    }

    pub fn get(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.get(name)
    }

    pub fn scalar_count(&self) -> usize {
        self.specs.values().map(ParamSpec::numel).sum()
    }

    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.specs
            .values()
            .filter(|s| has_prefix(&s.name, prefix))
            .map(ParamSpec::numel)
            .sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    /// Fan-in uniform weights, unit/zero norm affine, zero FiLM.
    #[default]
    Standard,
    /// Like `Standard`, but every zero- or one-initialized tensor is perturbed
    /// as well. Used for gradient checks, where exact zeros hide paths.
    Perturbed,
}

pub fn init_params<T: Real>(registry: &Registry, scheme: InitScheme, seed: u64) -> Result<ParamStore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::default();
    for spec in registry.specs() {
        let n = spec.numel();
        let data: Vec<T> = match (spec.init, scheme) {
            (Init::FanIn(fan_in), _) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
            }
            (Init::Ones, InitScheme::Standard) => vec![T::one(); n],
            (Init::Zeros, InitScheme::Standard) => vec![T::zero(); n],
            (Init::Ones, InitScheme::Perturbed) => {
                (0..n).map(|_| T::of(1.0 + rng.gen_range(-0.3..0.3))).collect()
            }
            (Init::Zeros, InitScheme::Perturbed) => {
                (0..n).map(|_| T::of(rng.gen_range(-0.3..0.3))).collect()
            }
        };
        store.insert(
            spec.name.clone(),
            Tensor::new(spec.shape.clone(), data)?,
            spec.trainable,
        )?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> Registry {
        let mut r = Registry::default();
        r.add("a.weight", vec![4, 3], Init::FanIn(3)).unwrap();
        r.add("a.bias", vec![4], Init::FanIn(3)).unwrap();
        r.add("film.gamma", vec![2, 6], Init::Zeros).unwrap();
        r.add("gn.gamma", vec![4], Init::Ones).unwrap();
        r
    }

    #[test]
    fn same_seed_same_store() {
        let r = registry();
        let a = init_params::<f32>(&r, InitScheme::Standard, 11).unwrap();
        let b = init_params::<f32>(&r, InitScheme::Standard, 11).unwrap();
        assert_eq!(a, b);
        let c = init_params::<f32>(&r, InitScheme::Standard, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_and_one_inits() {
        let s = init_params::<f64>(&registry(), InitScheme::Standard, 0).unwrap();
        assert!(s.value("film.gamma").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(s.value("gn.gamma").unwrap().data().iter().all(|&v| v == 1.0));
        let bound = 1.0 / 3f64.sqrt();
        assert!(s.value("a.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut r = registry();
        assert!(matches!(
            r.add("a.bias", vec![1], Init::Zeros),
            Err(Error::Registration(_))
        ));
        let mut s = ParamStore::<f32>::default();
        s.insert("x", Tensor::zeros(vec![1]), true).unwrap();
        assert!(s.insert("x", Tensor::zeros(vec![1]), true).is_err());
    }

    #[test]
    fn counts_follow_path_segments() {
        let r = registry();
        assert_eq!(r.scalar_count(), 12 + 4 + 12 + 4);
        assert_eq!(r.count_prefix("a"), 16);
        assert_eq!(r.count_prefix("film"), 12);
        assert_eq!(r.count_prefix("fil"), 0);
    }

    #[test]
    fn set_preserves_shape() {
        let mut s = init_params::<f32>(&registry(), InitScheme::Standard, 0).unwrap();
        assert!(s.set("a.bias", Tensor::zeros(vec![5])).is_err());
        s.set("a.bias", Tensor::ones(vec![4])).unwrap();
        assert_eq!(s.value("a.bias").unwrap().sum(), 4.0);
    }
}
