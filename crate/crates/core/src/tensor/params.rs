use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors.
///
/// Names are `group.layer.kind` (for example `g.conv1.w`); the group prefix
/// before the first dot decides which training step may update an entry.
/// Initialization draws from an internal RNG seeded at construction, so the
/// same sequence of `init_*` calls always yields the same values.
#[derive(Clone, Debug)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
    rng_seed: u64,
    rng: ChaCha8Rng,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    /// Overwrites an existing entry, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(slot) if slot.shape() == value.shape() => {
                *slot = value;
                Ok(())
            }
            Some(slot) => Err(Error::Dimension(format!(
                "parameter {name} has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            ))),
            None => Err(Error::Contract(format!("unknown parameter {name}"))),
        }
    }

    /// Uniform Glorot initialization.
    pub fn init_glorot(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-limit..limit))
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::full(shape, value))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Copies every entry whose group (text before the first dot) is `group`.
    pub fn group(&self, group: &str) -> ParamStore {
        let mut out = ParamStore::new(self.rng_seed);
        for (name, value) in &self.entries {
            if group_of(name) == group {
                out.entries.insert(name.clone(), value.clone());
            }
        }
        out
    }

    /// Adds all entries of `other`; names must not collide.
    pub fn merge(&mut self, other: &ParamStore) -> Result<()> {
        for (name, value) in &other.entries {
            self.insert(name.clone(), value.clone())?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and raw bytes of every entry in `group`
    /// (all entries when `group` is `None`).
    pub fn fingerprint(&self, group: Option<&str>) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in &self.entries {
            if group.is_some_and(|g| group_of(name) != g) {
                continue;
            }
            hasher.update(name.as_bytes());
            for &d in value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in value.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Group prefix of a parameter name: `"h_rppg"` for `"h_rppg.w"`.
pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let build = || {
            let mut p = ParamStore::new(7);
            p.init_glorot("a.w", &[3, 4], 3, 4).unwrap();
            p.init_glorot("b.w", &[2], 1, 2).unwrap();
            p
        };
        assert_eq!(build(), build());
        assert_eq!(build().fingerprint(None), build().fingerprint(None));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamStore::new(0);
        p.init_const("a.b", &[1], 0.0).unwrap();
        assert!(p.init_const("a.b", &[1], 0.0).is_err());
    }

    #[test]
    fn group_selection_uses_prefix() {
        let mut p = ParamStore::new(0);
        p.init_const("h.w", &[1], 1.0).unwrap();
        p.init_const("h_rppg.w", &[1], 2.0).unwrap();
        let h = p.group("h");
        assert_eq!(h.names().collect::<Vec<_>>(), vec!["h.w"]);
        assert_ne!(p.fingerprint(Some("h")), p.fingerprint(Some("h_rppg")));
    }
}
