//! Named parameter storage and seeded initialization.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Flat list of trainable tensors keyed by canonical dotted path
/// (`backbone.stage0.block0.attn.qkv.weight`, ...).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics if `name` is already registered.
    pub fn insert(&mut self, name: String, value: Tensor) -> ParamId {
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            if name.starts_with(prefix) {
                value.fill(0.0);
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f32),
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    FanInUniform { fan_in: usize },
    /// Normal(0, std) truncated to two standard deviations.
    TruncNormal { std: f32 },
    Uniform { low: f32, high: f32 },
}

/// Registers parameters under a dotted prefix, drawing initial values from
/// one seeded stream so that construction order fully determines the model.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = self.path(name);
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            String::from(name)
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => alloc::vec![0.0; n],
            Init::Ones => alloc::vec![1.0; n],
            Init::Constant(c) => alloc::vec![c; n],
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / libm::sqrtf(fan_in.max(1) as f32);
                (0..n)
                    .map(|_| self.rng.random_range(-bound..bound))
                    .collect()
            }
            Init::TruncNormal { std } => (0..n)
                .map(|_| loop {
                    let z: f32 = StandardNormal.sample(self.rng);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
                .collect(),
            Init::Uniform { low, high } => (0..n)
                .map(|_| self.rng.random_range(low..high))
                .collect(),
        };
        let path = self.path(name);
        self.store.insert(path, Tensor::from_vec(shape, data))
    }

    /// Overwrites the initial value of an already registered parameter.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.store.get_mut(id)
    }

    /// Registers a parameter with explicit initial values.
    pub fn param_with(&mut self, name: &str, value: Tensor) -> ParamId {
        let path = self.path(name);
        self.store.insert(path, value)
    }
}
