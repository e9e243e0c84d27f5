use std::collections::BTreeMap;

use rand::Rng;

use super::dense::Tensor;

/// Seeded generator used for every initializer and sampler in the crate.
///
/// ChaCha8 keeps streams reproducible across platforms and `rand` releases.
pub type Rng64 = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng64 {
    rand::SeedableRng::seed_from_u64(seed)
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    frozen: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    /// Registers a weight drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut Rng64) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
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

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Parameters under `prefix` are bound as constants by [`super::Graph::bind`].
    pub fn freeze_prefix(&mut self, prefix: &str) {
        if !self.frozen.iter().any(|p| p == prefix) {
            self.frozen.push(prefix.to_string());
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Sets every parameter under `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Copies every parameter from `other` whose name starts with `prefix`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) {
        for (name, t) in other.iter() {
            if name.starts_with(prefix) {
                self.insert(name, t.clone());
            }
        }
    }
}
