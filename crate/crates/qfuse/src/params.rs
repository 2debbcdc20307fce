//! Named parameter store shared by the model, adapters and fusion head.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// One named parameter and its trainability flag.
#[derive(Debug, Clone)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered map of named parameters. Iteration order is the name order, so
/// hashing and checkpointing are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) {
        debug_assert!(
            !self.params.contains_key(name),
            "parameter '{name}' inserted twice"
        );
        self.params
            .insert(name.to_string(), Param { tensor, trainable });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Param {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.get(name).tensor
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
            .tensor
    }

    pub fn set_trainable(&mut self, name: &str, on: bool) {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
            .trainable = on;
    }

    /// Flip trainability for every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, on: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = on;
            }
        }
    }

    pub fn set_trainable_all(&mut self, on: bool) {
        for p in self.params.values_mut() {
            p.trainable = on;
        }
    }

    /// Bind a stored parameter into a graph, carrying its trainability.
    pub fn bind(&self, g: &mut Graph, name: &str) -> Var {
        let p = self.get(name);
        g.param(name, &p.tensor, p.trainable)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Total number of scalar parameters under a name prefix.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian f64 bytes of every
    /// parameter selected by the filter.
    pub fn hash_filtered<F>(&self, mut filter: F) -> String
    where
        F: FnMut(&str) -> bool,
    {
        let mut hasher = Sha256::new();
        for (name, p) in &self.params {
            if !filter(name) {
                continue;
            }
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &dim in p.tensor.shape() {
                hasher.update((dim as u64).to_le_bytes());
            }
            for &x in p.tensor.data() {
                hasher.update(x.to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }

    /// Hash of every parameter.
    pub fn hash_all(&self) -> String {
        self.hash_filtered(|_| true)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
