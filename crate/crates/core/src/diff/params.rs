use std::collections::BTreeMap;
use std::ops::Index;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors. Iteration order is lexicographic by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    params: BTreeMap<String, Tensor<T>>,
    seed: u64,
}

/// Stable 64-bit FNV-1a, used to derive per-parameter seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self { params: BTreeMap::new(), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    /// Inserts a weight drawn from `U(-b, b)` with `b = sqrt(6 / fan_in)`,
    /// which keeps activation variance through a relu.
    ///
    /// The draw depends only on the store seed and the parameter name, so
    /// construction order never changes the values.
    pub fn init_fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        self.init_fan_in_gain(name, shape, fan_in, 2.0)
    }

    /// `b = sqrt(3 gain / fan_in)`; gain 1 suits layers with no relu after them.
    pub fn init_fan_in_gain(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> Result<()> {
        let bound = (3.0 * gain / fan_in as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
        let t = Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)));
        self.insert(name, t)
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count, optionally restricted to names with `prefix`.
    pub fn count(&self, prefix: Option<&str>) -> usize {
        self.params.iter().filter(|(k, _)| prefix.is_none_or(|p| k.starts_with(p))).map(|(_, v)| v.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(), seed: self.seed }
    }

    /// Places every parameter on `graph` as a gradient-requiring leaf.
    pub fn bind(&self, graph: &mut Graph<T>) -> Bound {
        self.bind_where(graph, |_| true)
    }

    /// Like [`ParamStore::bind`], but parameters rejected by `trainable` become constants.
    pub fn bind_where(&self, graph: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self.params.iter().map(|(k, v)| (k.clone(), graph.leaf(v.clone(), trainable(k)))).collect();
        Bound { vars }
    }
}

/// Parameter handles on one graph.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl Index<&str> for Bound {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars.get(name).unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }
}
