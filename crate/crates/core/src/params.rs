//! Named parameter tensors.
//!
//! Names are hierarchical (`backbone.block3.ff1.weight`, `spk1.attn.hidden.weight`,
//! `spk2.out.bias`) and the three trainable partitions are disjoint by prefix:
//! `backbone.` for the recognizer, `spk1.` for the enhancing classifier and
//! `spk2.` for the adversarial classifier.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BACKBONE_PREFIX: &str = "backbone.";
pub const SPK1_PREFIX: &str = "spk1.";
pub const SPK2_PREFIX: &str = "spk2.";

/// Deterministic generator for a named component of the model. Distinct
/// streams keep e.g. backbone and classifier initialization independent of
/// each other while remaining reproducible from one seed.
pub fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
    pub rng_seed: u64,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> ParamStore {
        ParamStore {
            entries: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.entries.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> {
        self.entries.keys().filter(move |n| n.starts_with(prefix))
    }

    /// Drops every entry under `prefix` (e.g. retiring `spk1.` before an
    /// adversarial fine-tuning stage).
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|n, _| !n.starts_with(prefix));
    }

    /// Total number of scalar values under a prefix.
    pub fn value_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Linear layer initialized with uniform fan-in scaling U(−a, a),
    /// a = 1/sqrt(fan_in); bias starts at zero.
    pub fn init_linear(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.insert(
            &format!("{name}.weight"),
            Tensor::from_vec(&[fan_in, fan_out], data).expect("init_linear"),
        );
        self.insert(&format!("{name}.bias"), Tensor::zeros(&[fan_out]));
    }

    pub fn init_layer_norm(&mut self, name: &str, dim: usize) {
        self.insert(&format!("{name}.gain"), Tensor::filled(&[dim], 1.0));
        self.insert(&format!("{name}.bias"), Tensor::zeros(&[dim]));
    }

    /// Bitwise equality of all tensors, used by freeze contracts.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        if self.entries.len() != other.entries.len() {
            return false;
        }
        self.entries.iter().zip(other.entries.iter()).all(
            |((an, at), (bn, bt))| {
                an == bn
                    && at.shape() == bt.shape()
                    && at
                        .data()
                        .iter()
                        .zip(bt.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            },
        )
    }

    /// Order-independent content checksum over names, shapes, and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in &self.entries {
            for b in name.as_bytes() {
                h = fnv(h, *b as u64);
            }
            for &e in t.shape() {
                h = fnv(h, e as u64);
            }
            for v in t.data() {
                h = fnv(h, v.to_bits());
            }
        }
        h
    }
}

fn fnv(mut h: u64, v: u64) -> u64 {
    for i in 0..8 {
        h ^= (v >> (8 * i)) & 0xff;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partitions_are_disjoint_by_prefix() {
        let mut p = ParamStore::new(0);
        p.insert("backbone.block1.ff1.weight", Tensor::zeros(&[2, 2]));
        p.insert("spk1.out.weight", Tensor::zeros(&[2, 2]));
        p.insert("spk2.out.weight", Tensor::zeros(&[2, 2]));
        let backbone: Vec<_> = p.names_with_prefix(BACKBONE_PREFIX).collect();
        let spk1: Vec<_> = p.names_with_prefix(SPK1_PREFIX).collect();
        assert_eq!(backbone.len(), 1);
        assert_eq!(spk1.len(), 1);
        for n in p.names_with_prefix(SPK1_PREFIX) {
            assert!(!n.starts_with(BACKBONE_PREFIX) && !n.starts_with(SPK2_PREFIX));
        }
    }

    #[test]
    fn same_seed_same_bits() {
        let build = |seed| {
            let mut p = ParamStore::new(seed);
            let mut rng = component_rng(seed, 0);
            p.init_linear("backbone.input", 4, 8, &mut rng);
            p
        };
        assert!(build(7).bit_identical(&build(7)));
        assert!(!build(7).bit_identical(&build(8)));
    }

    #[test]
    fn checksum_tracks_content() {
        let mut p = ParamStore::new(0);
        p.insert("a", Tensor::scalar(1.0));
        let c1 = p.checksum();
        p.insert("a", Tensor::scalar(1.0 + 1e-16));
        assert_eq!(c1, p.checksum()); // 1.0 + 1e-16 rounds to 1.0
        p.insert("a", Tensor::scalar(2.0));
        assert_ne!(c1, p.checksum());
    }
}
