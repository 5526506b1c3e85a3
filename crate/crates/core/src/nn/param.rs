//! Persistent named parameters and parameter collections.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::util::hash_f64s;

use super::tape::GradMap;

/// A named trainable tensor that outlives any single tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Param {
    pub fn from_values(name: impl Into<String>, data: Vec<f64>, shape: Vec<usize>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        Self {
            name: name.into(),
            data,
            shape,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::from_values(name, vec![0.0; n], shape)
    }

    /// Seeded uniform init on `(-1/sqrt(fan_in), +1/sqrt(fan_in))`.
    pub fn uniform(
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Self::from_values(name, data, shape)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn value_hash(&self) -> u64 {
        hash_f64s(self.data.iter())
    }
}

/// Ordered collection of parameters, keyed by name.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, p: Param) {
        self.params.insert(p.name.clone(), p);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Fill in zero gradients for parameters a backward pass never reached.
    pub fn complete_grads(&self, grads: &mut GradMap) {
        for p in self.params.values() {
            grads
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; p.numel()]);
        }
    }

    /// Bit-exact hash over a subset of parameters, in name order.
    pub fn group_hash(&self, names: &[&str]) -> u64 {
        let mut vals: Vec<&f64> = Vec::new();
        for &n in names {
            if let Some(p) = self.params.get(n) {
                vals.extend(p.data.iter());
            }
        }
        hash_f64s(vals)
    }

    /// Bit-exact hash over every parameter whose name starts with `prefix`.
    pub fn prefix_hash(&self, prefix: &str) -> u64 {
        let vals = self
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .flat_map(|(_, p)| p.data.iter());
        hash_f64s(vals)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn uniform_init_is_seeded_and_bounded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = Param::uniform("a", vec![4, 4], 4, &mut r1);
        let b = Param::uniform("a", vec![4, 4], 4, &mut r2);
        assert_eq!(a.data, b.data);
        assert!(a.data.iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn prefix_hash_tracks_changes() {
        let mut set = ParamSet::new();
        set.insert(Param::from_values("enc.w", vec![1.0], vec![1]));
        set.insert(Param::from_values("dec.w", vec![2.0], vec![1]));
        let before = set.prefix_hash("enc.");
        set.get_mut("dec.w").unwrap().data[0] = 9.0;
        assert_eq!(set.prefix_hash("enc."), before);
        set.get_mut("enc.w").unwrap().data[0] = 9.0;
        assert_ne!(set.prefix_hash("enc."), before);
    }
}
