use std::collections::HashMap;

use super::{NnError, Real, Tensor};

/// Index of an entry in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Real> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Buffers (batch-norm running statistics) are stored here too but never
    /// receive gradients.
    pub trainable: bool,
}

/// Named parameter registry. Names are unique and insertion order is stable,
/// which fixes the checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, tensor, trainable });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId, NnError> {
        self.id(name).ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, e)| e.trainable).map(|(id, _)| id).collect()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), tensor: e.tensor.cast(), trainable: e.trainable })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Replace a tensor's contents, keeping its shape contract.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<(), NnError> {
        let slot = &mut self.entries[id.0];
        if slot.tensor.shape() != tensor.shape() {
            return Err(NnError::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                slot.name,
                slot.tensor.shape(),
                tensor.shape()
            )));
        }
        slot.tensor = tensor;
        Ok(())
    }
}
