//! Named parameter storage.

use std::sync::Arc;

use crate::element::Element;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
}

/// Ordered collection of named tensors. Ids are insertion indices, so two
/// stores built by the same code agree on ids.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name, value: Arc::new(value) });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Arc<Tensor<T>> {
        &self.entries[id.0].value
    }

    /// Mutable access; clones the tensor if a tape still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(value.shape(), self.entries[id.0].value.shape(), "parameter {} reshaped", self.entries[id.0].name);
        self.entries[id.0].value = Arc::new(value);
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// 64-bit FNV-1a over names, shapes and raw value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for e in &self.entries {
            h.write(e.name.as_bytes());
            for &d in e.value.shape() {
                h.write(&(d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.write(&v.f64().to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

/// A store bound to a tape: trainable stores yield parameter leaves,
/// frozen ones yield constants (no gradient is ever computed for them).
pub struct Binding<'a, T: Element> {
    pub tape: &'a Tape<T>,
    pub store: &'a ParamStore<T>,
    pub trainable: bool,
}

impl<'a, T: Element> Binding<'a, T> {
    pub fn trainable(tape: &'a Tape<T>, store: &'a ParamStore<T>) -> Self {
        Self { tape, store, trainable: true }
    }

    pub fn frozen(tape: &'a Tape<T>, store: &'a ParamStore<T>) -> Self {
        Self { tape, store, trainable: false }
    }

    pub fn get(&self, id: ParamId) -> Var {
        let value = self.store.get(id);
        if self.trainable {
            self.tape.param(id, value)
        } else {
            self.tape.constant_shared(value)
        }
    }
}
