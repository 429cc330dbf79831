use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
///
/// Insertion order is stable and defines checkpoint layout, so two stores
/// built by the same constructor sequence are interchangeable.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    frozen: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.frozen.push(false);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    /// Freezes (or thaws) every parameter whose name starts with `prefix`;
    /// returns how many matched.
    pub fn freeze_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for (name, f) in self.names.iter().zip(self.frozen.iter_mut()) {
            if name.starts_with(prefix) {
                *f = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// CRC32 over the raw bytes of every parameter whose name starts with one
    /// of `prefixes` (all parameters when empty).
    pub fn fingerprint(&self, prefixes: &[&str]) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            if prefixes.is_empty() || prefixes.iter().any(|p| name.starts_with(p)) {
                hasher.update(name.as_bytes());
                for v in value.data() {
                    hasher.update(&v.to_le_bytes());
                }
            }
        }
        hasher.finalize()
    }

    /// Copies values from `other` for every name both stores share, checking shapes.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for (name, value) in other.names.iter().zip(&other.values) {
            if let Some(&i) = self.index.get(name) {
                if self.values[i].shape() != value.shape() {
                    return Err(Error::shape(format!(
                        "parameter {name}: expected {:?}, found {:?}",
                        self.values[i].shape(),
                        value.shape()
                    )));
                }
                self.values[i] = value.clone();
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Scoped parameter factory used by module constructors.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder { store, rng, prefix: String::new() }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder { store: self.store, rng: self.rng, prefix }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = self.full_name(name);
        self.store.insert(full, value).expect("parameter names are unique by construction")
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.uniform_bound(name, shape, bound)
    }

    pub fn uniform_bound(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.tensor(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::full(shape, 1.0))
    }
}
