use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{NumError, Result};
use crate::float::Float;
use crate::tensor::Tensor;

static NEXT_TAG: AtomicU64 = AtomicU64::new(1);

fn fresh_tag() -> u64 {
    NEXT_TAG.fetch_add(1, Ordering::Relaxed)
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Frozen parameters must never be touched by an optimizer.
    pub frozen: bool,
    /// Whether decoupled weight decay applies (false for biases, norms, temperatures).
    pub decay: bool,
}

/// Named, ordered collection of trainable tensors.
///
/// Every store carries a process-unique tag so a [`crate::Tape`] can route
/// gradients back to the right store. Cloning a store allocates a new tag.
#[derive(Debug)]
pub struct ParamStore<T> {
    tag: u64,
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore {
            tag: fresh_tag(),
            params: self.params.clone(),
            by_name: self.by_name.clone(),
        }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tag: fresh_tag(),
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NumError::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            tensor: tensor.with_requires_grad(true),
            frozen: false,
            decay,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params.iter_mut().for_each(|p| p.frozen = frozen);
    }

    pub fn all_frozen(&self) -> bool {
        self.params.iter().all(|p| p.frozen)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// FNV-1a over names, shapes and the exact bit patterns of every value.
    pub fn fingerprint(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for &d in p.tensor.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Copy of the store in another element type (tags are fresh).
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            tag: fresh_tag(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    frozen: p.frozen,
                    decay: p.decay,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
