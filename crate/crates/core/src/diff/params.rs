use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::Tensor;

static NEXT_STORE_TAG: AtomicU64 = AtomicU64::new(1);

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Globally unique key of one parameter tensor: owning store tag plus index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub store: u64,
    pub index: usize,
}

#[derive(Debug)]
struct Entry {
    name: String,
    value: Arc<Tensor>,
    requires_grad: bool,
}

/// Ordered collection of named trainable tensors.
///
/// Every store carries a process-unique tag, so two stores never alias even
/// when their contents are equal. Cloning allocates a fresh tag.
#[derive(Debug)]
pub struct ParamStore {
    tag: u64,
    entries: Vec<Entry>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            tag: NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed),
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: Arc::new(Tensor::clone(&e.value)),
                    requires_grad: e.requires_grad,
                })
                .collect(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { tag: NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed), entries: Vec::new() }
    }

    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(Entry { name: name.into(), value: Arc::new(value), requires_grad: true });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey { store: self.tag, index: id.0 }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn requires_grad(&self, id: ParamId) -> bool {
        self.entries[id.0].requires_grad
    }

    pub fn set_requires_grad(&mut self, id: ParamId, flag: bool) {
        self.entries[id.0].requires_grad = flag;
    }

    pub fn set_requires_grad_all(&mut self, flag: bool) {
        for e in &mut self.entries {
            e.requires_grad = flag;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Rounds every value to the nearest `f32`, emulating 32-bit storage.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            for v in Arc::make_mut(&mut e.value).data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// True when both stores hold bit-identical tensors under the same names.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.bit_eq(&b.value))
    }
}

/// Anything that owns parameter stores: models, prompt layers, test harnesses.
pub trait Parameterized {
    fn stores(&self) -> Vec<&ParamStore>;
    fn stores_mut(&mut self) -> Vec<&mut ParamStore>;
}

impl<A: Parameterized, B: Parameterized> Parameterized for (A, B) {
    fn stores(&self) -> Vec<&ParamStore> {
        let mut v = self.0.stores();
        v.extend(self.1.stores());
        v
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        let mut v = self.0.stores_mut();
        v.extend(self.1.stores_mut());
        v
    }
}

impl Parameterized for ParamStore {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![self]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![self]
    }
}
