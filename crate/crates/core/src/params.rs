//! Named parameter storage and deterministic initialization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, Result};
use crate::tensor::{numel, Dims, Tensor};

/// How a parameter is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    FanIn {
        fan_in: usize,
        gain: f32,
    },
    Uniform {
        low: f32,
        high: f32,
    },
    Constant(f32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Dims,
    pub init: Init,
    /// Frozen parameters (batchnorm running statistics) are never updated by
    /// the trainer.
    pub frozen: bool,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, dims: Dims, init: Init) -> Self {
        Self {
            name: name.into(),
            dims,
            init,
            frozen: false,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }
}

/// Anything that can report the shape of a named parameter.
pub trait ParamShapes {
    fn param_dims(&self, name: &str) -> Option<Dims>;
}

/// A model's full parameter list, usable for shape-only analysis without
/// allocating weights.
#[derive(Debug, Clone, Default)]
pub struct ParamSpecs {
    specs: BTreeMap<String, ParamSpec>,
}

impl ParamSpecs {
    pub fn new(list: Vec<ParamSpec>) -> Result<Self> {
        let mut specs = BTreeMap::new();
        for s in list {
            if let Some(prev) = specs.insert(s.name.clone(), s) {
                return Err(config_err(format!(
                    "parameter {:?} declared twice",
                    prev.name
                )));
            }
        }
        Ok(Self { specs })
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamSpec> {
        self.specs.values()
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.get(name)
    }

    pub fn count(&self, prefix: &str) -> usize {
        self.specs
            .values()
            .filter(|s| s.name.starts_with(prefix))
            .map(|s| numel(s.dims))
            .sum()
    }

    /// Materializes every parameter. Each tensor draws from its own stream
    /// keyed by `(seed, name)`, so adding or removing a module never changes
    /// the values of the others.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        for spec in self.specs.values() {
            store.insert(spec.name.clone(), init_tensor(spec, seed));
        }
        store
    }
}

impl ParamShapes for ParamSpecs {
    fn param_dims(&self, name: &str) -> Option<Dims> {
        self.specs.get(name).map(|s| s.dims)
    }
}

fn name_stream(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the name, mixed with the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn init_tensor(spec: &ParamSpec, seed: u64) -> Tensor {
    let mut rng = name_stream(seed, &spec.name);
    let len = numel(spec.dims);
    let data: Vec<f32> = match spec.init {
        Init::Constant(v) => vec![v; len],
        Init::Uniform { low, high } => (0..len).map(|_| rng.random_range(low..=high)).collect(),
        Init::FanIn { fan_in, gain } => {
            let std = gain / (fan_in.max(1) as f32).sqrt();
            let dist = Normal::new(0.0f32, std).expect("finite std");
            (0..len).map(|_| dist.sample(&mut rng)).collect()
        }
    };
    Tensor::from_parts(spec.dims, data)
}

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| config_err(format!("missing parameter {name:?}")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Total number of floats in tensors whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Copies every tensor from `other`, replacing entries with the same name.
    pub fn extend_from(&mut self, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// Zeroes every tensor whose name starts with `prefix`; returns how many.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (_, t) in self
            .tensors
            .iter_mut()
            .filter(|(k, _)| k.starts_with(prefix))
        {
            *t = Tensor::zeros(t.dims());
            n += 1;
        }
        n
    }

    pub fn remove_prefix(&mut self, prefix: &str) -> usize {
        let doomed: Vec<String> = self
            .tensors
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        for k in &doomed {
            self.tensors.remove(k);
        }
        doomed.len()
    }
}

impl ParamShapes for ParamStore {
    fn param_dims(&self, name: &str) -> Option<Dims> {
        self.tensors.get(name).map(Tensor::dims)
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Joins a scope prefix and a leaf name with a dot.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
