use super::graph::{Graph, ParamId, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named, ordered collection of model parameters. A parameter's
/// [`ParamId`] is its insertion index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::DuplicateId(name));
        }
        self.entries.push(ParamEntry {
            name,
            value,
            trainable: true,
        });
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id].value
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate()
    }

    /// Registers every parameter as a leaf of `graph`, returning the leaf
    /// handles indexed by [`ParamId`].
    pub fn bind(&self, graph: &mut Graph<T>) -> Vec<Var> {
        self.entries
            .iter()
            .enumerate()
            .map(|(id, e)| graph.param(id, &e.value, e.trainable))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}
