//! Named parameter storage with deterministic iteration order.

use super::Tensor;
use crate::error::{Error, Result};
use std::collections::HashMap;

/// Stable handle to one entry of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Map from string path to trainable tensor, iterated in insertion order so
/// that save/load and optimizer sweeps are reproducible.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Names must be unique.
    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        let id = ParamId(self.entries.len());
        self.index.insert(name.to_string(), id.0);
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(id)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    /// Replaces a parameter value; the shape must be unchanged.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{}` has shape {:?}, new value {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    /// In-place mutation of a single value buffer (used by optimizers).
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    /// Adds `delta` into the stored gradient. Gradients accumulate across
    /// backward passes until [`ParamStore::zero_grads`] is called.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.grad.shape() != delta.shape() {
            return Err(Error::Shape(format!(
                "gradient for `{}` has shape {:?}, delta {:?}",
                entry.name,
                entry.grad.shape(),
                delta.shape()
            )));
        }
        for (g, d) in entry.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for entry in &mut self.entries {
            entry.grad.data_mut().fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// (name, value) pairs in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// All ids in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }
}

/// Destination for parameter gradients produced by a backward pass.
pub trait GradSink {
    fn accumulate(&mut self, id: ParamId, delta: &Tensor) -> Result<()>;
}

impl GradSink for ParamStore {
    fn accumulate(&mut self, id: ParamId, delta: &Tensor) -> Result<()> {
        self.accumulate_grad(id, delta)
    }
}

/// Standalone gradient accumulator aligned with a store's parameter ids.
/// Workers fill one each; merging into the store in a fixed order keeps
/// training deterministic regardless of thread scheduling.
pub struct GradBuffer {
    grads: Vec<Option<Tensor>>,
}

impl GradBuffer {
    pub fn for_store(store: &ParamStore) -> Self {
        Self {
            grads: (0..store.len()).map(|_| None).collect(),
        }
    }

    pub fn merge_into(&self, store: &mut ParamStore) -> Result<()> {
        for (i, grad) in self.grads.iter().enumerate() {
            if let Some(g) = grad {
                store.accumulate_grad(ParamId(i), g)?;
            }
        }
        Ok(())
    }
}

impl GradSink for GradBuffer {
    fn accumulate(&mut self, id: ParamId, delta: &Tensor) -> Result<()> {
        match &mut self.grads[id.0] {
            Some(g) => {
                if g.shape() != delta.shape() {
                    return Err(Error::Shape(format!(
                        "gradient shape {:?} vs delta {:?}",
                        g.shape(),
                        delta.shape()
                    )));
                }
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
                Ok(())
            }
            slot => {
                *slot = Some(delta.clone());
                Ok(())
            }
        }
    }
}
