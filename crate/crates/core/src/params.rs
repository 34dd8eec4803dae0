//! Named trainable parameters with gradient accumulators.
//!
//! Initialization is a pure function of (seed, name, shape): each entry is
//! drawn from a counter-based generator keyed by the store seed and a hash of
//! the parameter name, so creation order never changes the values.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// How a parameter is filled on first use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in [-b, b] with b = sqrt(6 / fan_in) (He-style bound).
    HeUniform { fan_in: usize },
    Zeros,
    Constant(f64),
}

#[derive(Debug, Clone)]
struct Entry<T: Scalar> {
    value: Tensor4<T>,
    grad: Tensor4<T>,
}

/// Seeded, named weight collection with one gradient slot per value.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    seed: u64,
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            entries: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Returns the value for `name`, materializing it with `init` on first use.
    /// Re-requesting under a different shape is a dimension error.
    pub fn get_or_init(&mut self, name: &str, shape: Shape4, init: Init) -> Result<&Tensor4<T>> {
        if !self.entries.contains_key(name) {
            let value = init_tensor::<T>(self.seed, name, shape, init);
            self.entries.insert(
                name.to_string(),
                Entry {
                    grad: Tensor4::zeros(shape),
                    value,
                },
            );
        }
        let entry = self.entries.get(name).expect("just inserted");
        if entry.value.shape() != shape {
            return Err(CoreError::Dimension(format!(
                "parameter `{name}` requested with shape {shape} but stored as {}",
                entry.value.shape()
            )));
        }
        Ok(&entry.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor4<T>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor4<T>> {
        self.entries.get(name).map(|e| &e.grad)
    }

    /// Overwrites an existing entry's value (shape must match) or creates it.
    pub fn set_value(&mut self, name: &str, value: Tensor4<T>) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(entry) => {
                if entry.value.shape() != value.shape() {
                    return Err(CoreError::Dimension(format!(
                        "parameter `{name}` has shape {}, cannot assign {}",
                        entry.value.shape(),
                        value.shape()
                    )));
                }
                entry.value = value;
            }
            None => {
                let grad = Tensor4::zeros(value.shape());
                self.entries.insert(name.to_string(), Entry { value, grad });
            }
        }
        Ok(())
    }

    /// Writes one scalar of an existing entry, addressed by flat index.
    pub fn nudge(&mut self, name: &str, index: usize, value: T) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| CoreError::InvalidArgument(format!("unknown parameter `{name}`")))?;
        let data = entry.value.data_mut();
        if index >= data.len() {
            return Err(CoreError::InvalidArgument(format!(
                "index {index} out of range for parameter `{name}`"
            )));
        }
        data[index] = value;
        Ok(())
    }

    /// Adds `delta` into the gradient slot of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor4<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| CoreError::InvalidArgument(format!("unknown parameter `{name}`")))?;
        if entry.grad.shape() != delta.shape() {
            return Err(CoreError::Dimension(format!(
                "gradient for `{name}` has shape {}, got {}",
                entry.grad.shape(),
                delta.shape()
            )));
        }
        for (g, d) in entry.grad.data_mut().iter_mut().zip(delta.data()) {
            *g = g.add(*d);
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad = Tensor4::zeros(entry.value.shape());
        }
    }

    /// Names in deterministic (lexicographic) order.
    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all values.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Iterates (name, value) pairs in deterministic order.
    pub fn iter_values(&self) -> impl Iterator<Item = (&str, &Tensor4<T>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    /// In-place update over every (value, grad) pair, for optimizers.
    pub fn for_each_entry_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor4<T>, &Tensor4<T>)) {
        for (name, entry) in self.entries.iter_mut() {
            f(name, &mut entry.value, &entry.grad);
        }
    }
}

fn init_tensor<T: Scalar>(seed: u64, name: &str, shape: Shape4, init: Init) -> Tensor4<T> {
    match init {
        Init::Zeros => Tensor4::zeros(shape),
        Init::Constant(c) => Tensor4::filled(shape, T::from_f64(c)),
        Init::HeUniform { fan_in } => {
            assert!(fan_in > 0, "fan_in must be positive");
            let bound = (6.0 / fan_in as f64).sqrt();
            let base = seed ^ fnv1a64(name.as_bytes());
            let mut data = Vec::with_capacity(shape.len());
            for i in 0..shape.len() {
                let u = unit_f64(splitmix64(base.wrapping_add(GOLDEN.wrapping_mul(i as u64 + 1))));
                data.push(T::from_f64((2.0 * u - 1.0) * bound));
            }
            Tensor4::from_parts(shape, data)
        }
    }
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// FNV-1a over the parameter name; stable across platforms.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// splitmix64 finalizer: one mixed output per counter value.
pub(crate) fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maps a u64 to [0,1) with 53 bits of mantissa.
fn unit_f64(r: u64) -> f64 {
    (r >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
